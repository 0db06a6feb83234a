#pragma once

#include <cstddef>
#include <set>
#include <vector>

namespace bandmod {

/// Inputs of the closed-form correlation-probability model: the chance a
/// flow is observed at a controlled exit, the detection probability, and
/// the per-class classification probabilities with their usage mixture.
struct CorrelationParams {
  double p_exit = 0.0;          // exit observation probability
  double p1 = 0.0;              // perturbation detection probability
  std::vector<double> p2;       // per-class classification probability, length K
  std::vector<double> mixture;  // class usage distribution pi, length K

  size_t num_classes() const { return p2.size(); }
  void validate() const;
};

/// Fraction of total exit bandwidth held by the adversarial relays.
double exit_probability(const std::vector<double>& all_weights,
                        const std::set<size_t>& bad_indices);

/// q_i = p_exit * p1 * p2[i]; class index i is 1-based (1..K).
double per_flow_success(const CorrelationParams& cp, int i);

/// P = 1 - (1-q)^r: at least one of r independent flows correlates.
double corr_single(double q, long long r);

/// Mixed strategy with fixed per-class flow counts r_vec (length K).
double corr_mixed_counts(const CorrelationParams& cp, const std::vector<long long>& r_vec);

/// Expected per-flow success under the mixture: p_exit * p1 * sum(pi_i p2_i).
double q_mixture(const CorrelationParams& cp);

/// P = 1 - (1 - q_mixture)^r.
double corr_mixed(const CorrelationParams& cp, long long r);

/// Cumulative success over windows with per-window probabilities.
double corr_temporal(const std::vector<double>& window_probs);

/// Equal-probability special case: 1 - (1-P)^T.
double corr_temporal_equal(double p_window, long long T);

}  // namespace bandmod
