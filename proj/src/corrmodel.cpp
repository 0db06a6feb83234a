#include "bandmod/corrmodel.hpp"

#include <cmath>

#include "bandmod/errors.hpp"

namespace bandmod {

namespace {

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string(name) + " must be in [0, 1]");
}

// (1-q)^r via exp(r*log1p(-q)); stable for tiny q and huge r.
double pow_one_minus(double q, long long r) {
  if (r <= 0) return 1.0;
  if (q >= 1.0) return 0.0;
  return std::exp(static_cast<double>(r) * std::log1p(-q));
}

}  // namespace

void CorrelationParams::validate() const {
  check_prob(p_exit, "CorrelationParams.p_exit");
  check_prob(p1, "CorrelationParams.p1");
  if (p2.empty()) throw ValidationError("CorrelationParams.p2 must have K >= 1 entries");
  if (mixture.size() != p2.size())
    throw ValidationError("CorrelationParams.mixture length must equal p2 length");
  double total = 0.0;
  for (double v : p2) check_prob(v, "CorrelationParams.p2[i]");
  for (double v : mixture) {
    check_prob(v, "CorrelationParams.mixture[i]");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-12)
    throw ValidationError("CorrelationParams.mixture must sum to 1");
}

double exit_probability(const std::vector<double>& all_weights,
                        const std::set<size_t>& bad_indices) {
  double total = 0.0, bad = 0.0;
  for (size_t i = 0; i < all_weights.size(); ++i) {
    if (all_weights[i] < 0.0) throw ValidationError("exit_probability: negative weight");
    total += all_weights[i];
    if (bad_indices.count(i)) bad += all_weights[i];
  }
  for (size_t i : bad_indices) {
    if (i >= all_weights.size()) throw ValidationError("exit_probability: bad index out of range");
  }
  if (!(total > 0.0)) throw ValidationError("exit_probability: total weight must be > 0");
  return bad / total;
}

double per_flow_success(const CorrelationParams& cp, int i) {
  cp.validate();
  if (i < 1 || static_cast<size_t>(i) > cp.num_classes())
    throw ValidationError("per_flow_success: class index out of range");
  return cp.p_exit * cp.p1 * cp.p2[i - 1];
}

double corr_single(double q, long long r) {
  check_prob(q, "corr_single.q");
  if (r < 0) throw ValidationError("corr_single: r must be >= 0");
  return 1.0 - pow_one_minus(q, r);
}

double corr_mixed_counts(const CorrelationParams& cp, const std::vector<long long>& r_vec) {
  cp.validate();
  if (r_vec.size() != cp.num_classes())
    throw ValidationError("corr_mixed_counts: r_vec length must equal K");
  double survive = 1.0;
  for (size_t i = 0; i < r_vec.size(); ++i) {
    if (r_vec[i] < 0) throw ValidationError("corr_mixed_counts: counts must be >= 0");
    survive *= pow_one_minus(per_flow_success(cp, static_cast<int>(i) + 1), r_vec[i]);
  }
  return 1.0 - survive;
}

double q_mixture(const CorrelationParams& cp) {
  cp.validate();
  double expected_p2 = 0.0;
  for (size_t i = 0; i < cp.num_classes(); ++i) expected_p2 += cp.mixture[i] * cp.p2[i];
  return cp.p_exit * cp.p1 * expected_p2;
}

double corr_mixed(const CorrelationParams& cp, long long r) {
  if (r < 0) throw ValidationError("corr_mixed: r must be >= 0");
  return 1.0 - pow_one_minus(q_mixture(cp), r);
}

double corr_temporal(const std::vector<double>& window_probs) {
  double survive = 1.0;
  for (double p : window_probs) {
    check_prob(p, "corr_temporal.P_t");
    survive *= 1.0 - p;
  }
  return 1.0 - survive;
}

double corr_temporal_equal(double p_window, long long T) {
  check_prob(p_window, "corr_temporal_equal.P");
  if (T < 0) throw ValidationError("corr_temporal_equal: T must be >= 0");
  return 1.0 - pow_one_minus(p_window, T);
}

}  // namespace bandmod
