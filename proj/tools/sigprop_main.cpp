#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "sigprop/experiments.hpp"

namespace {

int dispatch(const std::string& name, const sigprop::RunOptions& options) {
  if (name == "theory-check") return sigprop::cmd_theory_check(options);
  if (name == "fd-check") return sigprop::cmd_fd_check(options);
  if (name == "assumption-decay") return sigprop::cmd_assumption_decay(options);
  if (name == "correlation-sweep") return sigprop::cmd_correlation_sweep(options);
  if (name == "grad-depth") return sigprop::cmd_grad_depth(options);
  if (name == "constant-rho-heatmap") return sigprop::cmd_constant_rho_heatmap(options);
  if (name == "train-toy") return sigprop::cmd_train_toy(options);
  std::cerr << "unknown subcommand '" << name << "'\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale laboratory for Transformer signal propagation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed_value = 0;
  std::size_t workers = 1;

  const std::pair<const char*, const char*> commands[] = {
      {"theory-check", "verify closed-form predictors against Monte-Carlo estimates"},
      {"fd-check", "compare analytic Jacobians and gradients with finite differences"},
      {"assumption-decay", "measure attention's deviation from uniform as d_k grows"},
      {"correlation-sweep", "track token correlation across depth for several block variants"},
      {"grad-depth", "profile per-layer gradient norms and token cosines"},
      {"constant-rho-heatmap", "grid of query/value gradient-norm log ratios"},
      {"train-toy", "train the sequence-reversal toy task and emit telemetry"},
  };
  for (const auto& [name, description] : commands) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out-dir", out_dir, "directory for CSV/JSON artifacts");
    sub->add_option("--seed", seed_value, "override the config's master seed");
    sub->add_option("--workers", workers, "worker threads for Monte-Carlo estimators");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* active = app.get_subcommands().front();
  sigprop::RunOptions options;
  options.config_path = config_path;
  options.out_dir = out_dir;
  options.workers = workers;
  if (active->count("--seed") > 0) options.seed_override = seed_value;

  try {
    return dispatch(active->get_name(), options);
  } catch (const sigprop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
