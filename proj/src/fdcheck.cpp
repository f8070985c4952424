#include "sigprop/fdcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sigprop {

namespace {

Jacobian fd_impl(const MatrixMap& map, const Matrix& point, double fixed_step) {
  Matrix probe = point;
  const Matrix f0 = map(probe);
  if (!f0.all_finite()) throw std::runtime_error("finite_difference_jacobian: map not finite at point");
  Jacobian jac;
  jac.out_rows = f0.rows();
  jac.out_cols = f0.cols();
  jac.in_rows = point.rows();
  jac.in_cols = point.cols();
  jac.entries = Matrix(f0.size(), point.size(), 0.0);
  for (std::size_t q = 0; q < point.size(); ++q) {
    const double orig = probe.data()[q];
    const double h = fixed_step > 0.0 ? fixed_step : 1e-5 * std::max(1.0, std::fabs(orig));
    probe.data()[q] = orig + h;
    const Matrix fp = map(probe);
    probe.data()[q] = orig - h;
    const Matrix fm = map(probe);
    probe.data()[q] = orig;
    if (!fp.all_finite() || !fm.all_finite()) {
      throw std::runtime_error("finite_difference_jacobian: non-finite evaluation near point");
    }
    const double inv = 1.0 / (2.0 * h);
    for (std::size_t r = 0; r < f0.size(); ++r) {
      jac.entries(r, q) = (fp.data()[r] - fm.data()[r]) * inv;
    }
  }
  return jac;
}

}  // namespace

Jacobian finite_difference_jacobian(const MatrixMap& map, const Matrix& point) {
  return fd_impl(map, point, 0.0);
}

Jacobian finite_difference_jacobian(const MatrixMap& map, const Matrix& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_jacobian: step must be positive");
  return fd_impl(map, point, step);
}

double relative_frobenius_error(const Matrix& a, const Matrix& b, double floor) {
  return (a - b).frobenius() / std::max(b.frobenius(), floor);
}

}  // namespace sigprop
