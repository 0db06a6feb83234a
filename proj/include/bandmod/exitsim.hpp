#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bandmod/rng.hpp"

namespace bandmod {

/// A relay in the scaled network. Bandwidth is the consensus weight in
/// Mbps; relays carrying the Exit flag (alone or with Guard) are
/// eligible for exit selection at full weight.
struct Relay {
  std::string id;
  double bandwidth = 0.0;
  bool guard_flag = false;
  bool exit_flag = false;
  bool adversarial = false;

  bool exit_capable() const { return exit_flag; }
};

/// Down-scaled relay population for Monte-Carlo exit selection.
struct ScaledNetwork {
  std::vector<Relay> relays;
  double scale = 0.01;

  void validate() const;  // at least one exit-capable relay
  size_t count_exit_capable() const;
  size_t count_dedicated_exits() const;  // Exit flag without Guard flag
};

/// Shape of the network to build. The default bandwidth model places
/// relays on log-spaced quantiles of [bw_lo, bw_hi]; a positive
/// calibrate_benign_exit_total rescales the exit-capable table so the
/// benign exit bandwidth remaining after one lowest-exit replacement
/// equals that total.
struct NetworkSpec {
  int n_exit_guard = 14;
  int n_exit = 9;
  int n_middle = 57;
  double scale = 0.01;
  double bw_lo = 20.0;   // Mbps
  double bw_hi = 900.0;  // Mbps
  double calibrate_benign_exit_total = 0.0;  // Mbps; 0 = no calibration
  bool random_bandwidths = false;  // draw log-uniform instead of quantiles
  uint64_t seed = 0;

  void validate() const;
};

/// The scaled-network preset: 80 relays (14 Exit-Guard, 9 Exit, 57
/// middle/guard) with the exit table calibrated so one 148 Mbps
/// adversarial exit captures 2.13% of exit bandwidth.
NetworkSpec preset_scaled_tor();

ScaledNetwork build_scaled_network(const NetworkSpec& spec);

struct InjectOptions {
  bool enforce_bandwidth_range = false;  // require [27, 148] Mbps
};

/// Replaces the n lowest-bandwidth benign dedicated-Exit relays with
/// adversarial relays of the given bandwidths. Total relay count is
/// unchanged.
ScaledNetwork inject_adversary(const ScaledNetwork& net, int n,
                               const std::vector<double>& bandwidths,
                               const InjectOptions& opts = {});

/// Bandwidth-weighted draw over the exit-capable set; returns relay id.
const std::string& sample_exit(const ScaledNetwork& net, Rng& rng);

struct ExitEstimate {
  double p_hat = 0.0;
  double stderr_ = 0.0;
  long long trials = 0;
};

/// Fraction of sampled circuits whose exit is adversarial, with binomial
/// standard error. Default trial count mirrors the circuits-per-window
/// volume of the scaled network.
constexpr long long kCircuitsPerWindow = 14900;

ExitEstimate estimate_p_exit(const ScaledNetwork& net, long long trials, uint64_t seed);

/// Closed-form exit-observation probability of the same network.
double analytic_exit_probability(const ScaledNetwork& net);

ScaledNetwork network_from_json(const nlohmann::json& j);
nlohmann::json network_to_json(const ScaledNetwork& net);

}  // namespace bandmod
