#include "bandmod/exitsim.hpp"

#include <algorithm>
#include <cmath>

#include "bandmod/errors.hpp"

namespace bandmod {

void ScaledNetwork::validate() const {
  if (count_exit_capable() == 0)
    throw ValidationError("ScaledNetwork: at least one exit-capable relay required");
  for (const auto& r : relays) {
    if (r.bandwidth < 0.0) throw ValidationError("Relay.bandwidth must be >= 0");
  }
}

size_t ScaledNetwork::count_exit_capable() const {
  size_t n = 0;
  for (const auto& r : relays) n += r.exit_capable();
  return n;
}

size_t ScaledNetwork::count_dedicated_exits() const {
  size_t n = 0;
  for (const auto& r : relays) n += (r.exit_flag && !r.guard_flag);
  return n;
}

void NetworkSpec::validate() const {
  if (n_exit_guard < 0 || n_exit < 0 || n_middle < 0)
    throw ValidationError("NetworkSpec counts must be >= 0");
  if (n_exit_guard + n_exit == 0) throw ValidationError("NetworkSpec: zero exits");
  if (!(bw_lo > 0.0) || !(bw_hi >= bw_lo))
    throw ValidationError("NetworkSpec bandwidth range invalid");
}

NetworkSpec preset_scaled_tor() {
  NetworkSpec spec;
  spec.n_exit_guard = 14;
  spec.n_exit = 9;
  spec.n_middle = 57;
  spec.scale = 0.01;
  spec.bw_lo = 20.0;
  spec.bw_hi = 900.0;
  // Back-solved from the 2.13% single-relay anchor: with one 148 Mbps
  // adversarial exit in place, 148 / (148 + B) = 0.0213 gives the benign
  // exit bandwidth B that must remain.
  spec.calibrate_benign_exit_total = 148.0 * (1.0 - 0.0213) / 0.0213;
  return spec;
}

namespace {

// Log-spaced quantile ladder over [lo, hi]; a deterministic stand-in for
// a log-uniform bandwidth distribution.
std::vector<double> log_quantiles(double lo, double hi, int n) {
  std::vector<double> v(n);
  if (n == 1) {
    v[0] = lo;
    return v;
  }
  for (int i = 0; i < n; ++i)
    v[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
  return v;
}

std::string zero_padded(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%02d", prefix, i);
  return buf;
}

}  // namespace

ScaledNetwork build_scaled_network(const NetworkSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int n_exit_capable = spec.n_exit_guard + spec.n_exit;

  std::vector<double> exit_bw;
  if (spec.random_bandwidths) {
    exit_bw.resize(n_exit_capable);
    for (auto& b : exit_bw) b = rng.log_uniform(spec.bw_lo, spec.bw_hi);
    std::sort(exit_bw.begin(), exit_bw.end());
  } else {
    exit_bw = log_quantiles(spec.bw_lo, spec.bw_hi, n_exit_capable);
  }

  if (spec.calibrate_benign_exit_total > 0.0) {
    // Rescale so that after the single lowest dedicated exit is replaced,
    // the remaining benign exit bandwidth hits the calibration target.
    double total = 0.0;
    for (double b : exit_bw) total += b;
    // exit_bw is ascending and the dedicated exits take the top n_exit
    // slots, so the first dedicated slot is the one replacement removes.
    const double removed = spec.n_exit > 0 ? exit_bw[spec.n_exit_guard] : 0.0;
    const double c = spec.calibrate_benign_exit_total / (total - removed);
    for (auto& b : exit_bw) b *= c;
  }

  ScaledNetwork net;
  net.scale = spec.scale;
  net.relays.reserve(spec.n_exit_guard + spec.n_exit + spec.n_middle);
  // The lower quantiles go to Exit-Guard relays; the dedicated Exit
  // relays take the top of the ladder, which is what makes the paper's
  // progressive-replacement sweep remove substantial benign capacity.
  for (int i = 0; i < spec.n_exit_guard; ++i) {
    Relay r;
    r.id = zero_padded("exitguard", i);
    r.bandwidth = exit_bw[i];
    r.guard_flag = true;
    r.exit_flag = true;
    net.relays.push_back(std::move(r));
  }
  for (int i = 0; i < spec.n_exit; ++i) {
    Relay r;
    r.id = zero_padded("exit", i);
    r.bandwidth = exit_bw[spec.n_exit_guard + i];
    r.exit_flag = true;
    net.relays.push_back(std::move(r));
  }
  std::vector<double> mid_bw;
  if (spec.random_bandwidths) {
    mid_bw.resize(spec.n_middle);
    for (auto& b : mid_bw) b = rng.log_uniform(spec.bw_lo, spec.bw_hi);
  } else {
    mid_bw = log_quantiles(spec.bw_lo, spec.bw_hi, std::max(spec.n_middle, 1));
  }
  for (int i = 0; i < spec.n_middle; ++i) {
    Relay r;
    r.id = zero_padded("middle", i);
    r.bandwidth = mid_bw[i];
    r.guard_flag = true;
    net.relays.push_back(std::move(r));
  }
  net.validate();
  return net;
}

ScaledNetwork inject_adversary(const ScaledNetwork& net, int n,
                               const std::vector<double>& bandwidths,
                               const InjectOptions& opts) {
  net.validate();
  if (n < 0) throw ValidationError("inject_adversary: n must be >= 0");
  if (static_cast<size_t>(n) != bandwidths.size())
    throw ValidationError("inject_adversary: bandwidths length must equal n");
  if (opts.enforce_bandwidth_range) {
    for (double b : bandwidths) {
      if (b < 27.0 || b > 148.0)
        throw ValidationError("inject_adversary: bandwidth outside [27, 148] Mbps");
    }
  }

  ScaledNetwork out = net;
  std::vector<size_t> eligible;
  for (size_t i = 0; i < out.relays.size(); ++i) {
    const auto& r = out.relays[i];
    if (r.exit_flag && !r.guard_flag && !r.adversarial) eligible.push_back(i);
  }
  if (static_cast<size_t>(n) > eligible.size())
    throw ValidationError("inject_adversary: n exceeds exits");
  // Lowest-bandwidth benign exits are replaced first; ties break on id.
  std::sort(eligible.begin(), eligible.end(), [&](size_t a, size_t b) {
    const auto& ra = out.relays[a];
    const auto& rb = out.relays[b];
    if (ra.bandwidth != rb.bandwidth) return ra.bandwidth < rb.bandwidth;
    return ra.id < rb.id;
  });
  for (int k = 0; k < n; ++k) {
    Relay& r = out.relays[eligible[k]];
    r.id = zero_padded("adv", k);
    r.bandwidth = bandwidths[k];
    r.adversarial = true;
  }
  return out;
}

namespace {

struct ExitTable {
  std::vector<double> cumulative;
  std::vector<size_t> relay_index;
  double total = 0.0;
};

ExitTable build_exit_table(const ScaledNetwork& net) {
  ExitTable t;
  for (size_t i = 0; i < net.relays.size(); ++i) {
    const auto& r = net.relays[i];
    if (!r.exit_capable() || r.bandwidth <= 0.0) continue;
    t.total += r.bandwidth;
    t.cumulative.push_back(t.total);
    t.relay_index.push_back(i);
  }
  if (!(t.total > 0.0))
    throw ValidationError("exit selection: total exit bandwidth must be > 0");
  return t;
}

size_t draw(const ExitTable& t, Rng& rng) {
  const double u = rng.uniform() * t.total;
  const auto it = std::upper_bound(t.cumulative.begin(), t.cumulative.end(), u);
  const size_t k = std::min<size_t>(it - t.cumulative.begin(), t.cumulative.size() - 1);
  return t.relay_index[k];
}

}  // namespace

const std::string& sample_exit(const ScaledNetwork& net, Rng& rng) {
  const ExitTable t = build_exit_table(net);
  return net.relays[draw(t, rng)].id;
}

ExitEstimate estimate_p_exit(const ScaledNetwork& net, long long trials, uint64_t seed) {
  if (trials < 1) throw ValidationError("estimate_p_exit: trials must be >= 1");
  const ExitTable t = build_exit_table(net);
  Rng rng(seed);
  long long bad = 0;
  for (long long i = 0; i < trials; ++i) {
    bad += net.relays[draw(t, rng)].adversarial ? 1 : 0;
  }
  ExitEstimate e;
  e.trials = trials;
  e.p_hat = static_cast<double>(bad) / trials;
  e.stderr_ = std::sqrt(e.p_hat * (1.0 - e.p_hat) / trials);
  return e;
}

double analytic_exit_probability(const ScaledNetwork& net) {
  double total = 0.0, bad = 0.0;
  for (const auto& r : net.relays) {
    if (!r.exit_capable()) continue;
    total += r.bandwidth;
    if (r.adversarial) bad += r.bandwidth;
  }
  if (!(total > 0.0))
    throw ValidationError("exit selection: total exit bandwidth must be > 0");
  return bad / total;
}

ScaledNetwork network_from_json(const nlohmann::json& j) {
  ScaledNetwork net;
  net.scale = j.value("scale", 0.01);
  for (const auto& rj : j.at("relays")) {
    Relay r;
    r.id = rj.at("id").get<std::string>();
    r.bandwidth = rj.at("bandwidth").get<double>();
    r.guard_flag = rj.value("guard", false);
    r.exit_flag = rj.value("exit", false);
    r.adversarial = rj.value("adversarial", false);
    net.relays.push_back(std::move(r));
  }
  net.validate();
  return net;
}

nlohmann::json network_to_json(const ScaledNetwork& net) {
  nlohmann::json relays = nlohmann::json::array();
  for (const auto& r : net.relays) {
    relays.push_back({{"id", r.id},
                      {"bandwidth", r.bandwidth},
                      {"guard", r.guard_flag},
                      {"exit", r.exit_flag},
                      {"adversarial", r.adversarial}});
  }
  return nlohmann::json{{"scale", net.scale}, {"relays", relays}};
}

}  // namespace bandmod
