#pragma once

#include <functional>

#include "sigprop/jacobian.hpp"
#include "sigprop/matrix.hpp"

namespace sigprop {

using MatrixMap = std::function<Matrix(const Matrix&)>;

// Central-difference Jacobian of `map` at `point`, entry by entry, with a
// relative step h = 1e-5 * max(1, |entry|). The overload with an explicit
// step uses it for every entry and requires step > 0.
Jacobian finite_difference_jacobian(const MatrixMap& map, const Matrix& point);
Jacobian finite_difference_jacobian(const MatrixMap& map, const Matrix& point, double step);

// ||a - b||_F / max(||b||_F, floor); the comparison used by all oracle tests.
double relative_frobenius_error(const Matrix& a, const Matrix& b, double floor = 1e-10);

}  // namespace sigprop
