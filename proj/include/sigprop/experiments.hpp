#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace sigprop {

// Config or usage problem; the CLI maps it to exit code 2. line is 0 when the
// failure is not tied to a specific line of the config file.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& message, std::size_t line_number = 0);
  std::size_t line = 0;
};

// Key=value reader for the [experiment] section of an INI-style file. Every
// lookup marks its key consumed and records the effective value, so finish()
// can reject typos and the manifest can list the fully resolved config.
class ConfigReader {
 public:
  static ConfigReader from_file(const std::string& path);
  static ConfigReader from_string(const std::string& text);

  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  std::size_t get_count(const std::string& key, std::size_t fallback);
  std::uint64_t get_seed(const std::string& key, std::uint64_t fallback);
  std::vector<std::size_t> get_count_list(const std::string& key,
                                          const std::vector<std::size_t>& fallback);
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback);
  std::vector<std::string> get_string_list(const std::string& key,
                                           const std::vector<std::string>& fallback);

  std::size_t line_of(const std::string& key) const;

  // Replace the recorded value of an already-consumed key (seed overrides).
  void override_resolved(const std::string& key, const std::string& value);

  // Throws ConfigError naming the first unconsumed key and its line.
  void finish() const;

  const std::map<std::string, std::string>& resolved() const { return resolved_; }

 private:
  std::string raw(const std::string& key, const std::string& fallback);

  std::map<std::string, std::string> values_;
  std::map<std::string, std::size_t> lines_;
  std::set<std::string> consumed_;
  std::map<std::string, std::string> resolved_;
};

struct RunManifest {
  std::string experiment;
  std::map<std::string, std::string> config;
  std::uint64_t master_seed = 0;
  std::string tool_version;
  std::vector<std::string> outputs;
  double duration_seconds = 0.0;
  std::map<std::string, double> metrics;

  std::string to_json() const;
};

struct RunOptions {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed_override;
  std::size_t workers = 1;
};

// Randomized comparison of every analytic Jacobian and backward pass against
// central finite differences on small instances (2 <= n <= n_max, widths up
// to d_max). Keys: softmax, values, queries, keys, input, block_<group>,
// block_input, model_params, model_input.
struct FdSweepResult {
  std::map<std::string, double> max_relative_error;
  double worst = 0.0;
};

FdSweepResult run_fd_sweep(std::size_t instances, std::size_t n_max, std::size_t d_max,
                           std::uint64_t seed);

// Each command returns the process exit code: 0 pass, 1 check failure or
// divergence. Config problems throw ConfigError (exit 2 at the CLI layer).
int cmd_theory_check(const RunOptions& options);
int cmd_fd_check(const RunOptions& options);
int cmd_assumption_decay(const RunOptions& options);
int cmd_correlation_sweep(const RunOptions& options);
int cmd_grad_depth(const RunOptions& options);
int cmd_constant_rho_heatmap(const RunOptions& options);
int cmd_train_toy(const RunOptions& options);

}  // namespace sigprop
