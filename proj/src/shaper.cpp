#include "bandmod/shaper.hpp"

#include <cmath>
#include <deque>

#include "bandmod/errors.hpp"
#include "bandmod/rng.hpp"

namespace bandmod {

void SourceModel::validate() const {
  if (!(mean_rate > 0.0)) throw ValidationError("SourceModel.mean_rate must be > 0");
  if (packet_size < 64 || packet_size > 1500)
    throw ValidationError("SourceModel.packet_size must be in [64, 1500]");
  if (kind == Kind::BurstyWeb) {
    if (!(burst_on_ms > 0.0) || !(burst_off_ms > 0.0))
      throw ValidationError("SourceModel.burst_params must be > 0");
  }
}

void TokenBucketConfig::validate() const {
  if (!(capacity > 0.0)) throw ValidationError("TokenBucketConfig.capacity must be > 0");
  if (!(update_interval > 0.0))
    throw ValidationError("TokenBucketConfig.update_interval must be > 0");
}

FlowTrace generate_source(const SourceModel& model, double duration) {
  model.validate();
  if (!(duration > 0.0)) throw ValidationError("generate_source: duration must be > 0");
  Rng rng(model.seed);
  FlowTrace flow;
  auto push = [&](double t) {
    PacketRecord p;
    p.ts_us = static_cast<int64_t>(std::llround(t * 1e6));
    p.size = static_cast<uint32_t>(model.packet_size);
    p.dir = +1;
    flow.packets.push_back(std::move(p));
  };

  switch (model.kind) {
    case SourceModel::Kind::ConstantRate: {
      const double gap = model.packet_size / model.mean_rate;
      for (double t = 0.0; t < duration; t += gap) push(t);
      break;
    }
    case SourceModel::Kind::PoissonArrivals: {
      const double mean_gap = model.packet_size / model.mean_rate;
      double t = 0.0;
      while (true) {
        t += rng.exponential(mean_gap);
        if (t >= duration) break;
        push(t);
      }
      // A Poisson stream may legitimately produce zero arrivals in a
      // short window; keep at least one packet so downstream stages have
      // something to work with.
      if (flow.packets.empty()) push(0.0);
      break;
    }
    case SourceModel::Kind::BurstyWeb: {
      const double on_rate =
          model.burst_on_rate > 0.0 ? model.burst_on_rate : 4.0 * model.mean_rate;
      const double gap = model.packet_size / on_rate;
      double t = 0.0;
      while (t < duration) {
        const double on_end = t + rng.exponential(model.burst_on_ms / 1e3);
        for (; t < on_end && t < duration; t += gap) push(t);
        t = on_end + rng.exponential(model.burst_off_ms / 1e3);
      }
      if (flow.packets.empty()) push(0.0);
      break;
    }
  }
  return flow;
}

FlowTrace shape(const FlowTrace& input, const ModulationSpec& spec,
                const TokenBucketConfig& bucket) {
  input.validate();
  spec.validate();
  bucket.validate();
  for (const auto& p : input.packets) {
    if (p.size > bucket.capacity) throw ValidationError("packet exceeds bucket capacity");
  }

  FlowTrace out;
  out.flow_id = input.flow_id;
  out.label = input.label;
  out.packets.reserve(input.packets.size());

  const double dt = bucket.update_interval;
  double tokens = bucket.initial_tokens < 0.0 ? bucket.capacity : bucket.initial_tokens;
  int64_t step = 1;  // next refill boundary is step*dt
  std::deque<size_t> queue;
  size_t next_arrival = 0;
  const size_t n = input.packets.size();

  auto refill = [&](double t_boundary) {
    tokens = std::fmin(bucket.capacity,
                       tokens + eval_bounded(spec, t_boundary - dt) * dt);
  };
  auto drain = [&](double t_now) {
    while (!queue.empty()) {
      const auto& p = input.packets[queue.front()];
      if (tokens < p.size) break;
      tokens -= p.size;
      PacketRecord released = p;
      released.ts_us = static_cast<int64_t>(std::llround(t_now * 1e6));
      out.packets.push_back(std::move(released));
      queue.pop_front();
    }
  };

  while (next_arrival < n || !queue.empty()) {
    const double t_arr =
        next_arrival < n ? input.packets[next_arrival].ts_us / 1e6 : std::nan("");
    const double t_step = step * dt;
    if (next_arrival < n && t_arr <= t_step) {
      const auto& p = input.packets[next_arrival];
      if (queue.empty() && tokens >= p.size) {
        tokens -= p.size;
        out.packets.push_back(p);  // departs at its arrival time
      } else {
        queue.push_back(next_arrival);
      }
      ++next_arrival;
    } else {
      refill(t_step);
      ++step;
      drain(t_step);
    }
  }
  return out;
}

SourceModel source_from_json(const nlohmann::json& j) {
  SourceModel m;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "constant")
    m.kind = SourceModel::Kind::ConstantRate;
  else if (kind == "poisson")
    m.kind = SourceModel::Kind::PoissonArrivals;
  else if (kind == "bursty")
    m.kind = SourceModel::Kind::BurstyWeb;
  else
    throw ValidationError("SourceModel.kind must be constant|poisson|bursty");
  m.mean_rate = j.at("mean_rate").get<double>();
  m.packet_size = j.value("packet_size", 1500);
  m.burst_on_ms = j.value("burst_on_ms", 500.0);
  m.burst_off_ms = j.value("burst_off_ms", 1000.0);
  m.burst_on_rate = j.value("burst_on_rate", 0.0);
  m.seed = j.value("seed", 0ULL);
  m.validate();
  return m;
}

nlohmann::json source_to_json(const SourceModel& m) {
  const char* kind = m.kind == SourceModel::Kind::ConstantRate  ? "constant"
                     : m.kind == SourceModel::Kind::PoissonArrivals ? "poisson"
                                                                    : "bursty";
  return nlohmann::json{{"kind", kind},
                        {"mean_rate", m.mean_rate},
                        {"packet_size", m.packet_size},
                        {"burst_on_ms", m.burst_on_ms},
                        {"burst_off_ms", m.burst_off_ms},
                        {"burst_on_rate", m.burst_on_rate},
                        {"seed", m.seed}};
}

TokenBucketConfig bucket_from_json(const nlohmann::json& j) {
  TokenBucketConfig b;
  b.capacity = j.at("capacity").get<double>();
  b.update_interval = j.value("update_interval", 0.1);
  b.initial_tokens = j.value("initial_tokens", -1.0);
  b.validate();
  return b;
}

nlohmann::json bucket_to_json(const TokenBucketConfig& b) {
  return nlohmann::json{{"capacity", b.capacity},
                        {"update_interval", b.update_interval},
                        {"initial_tokens", b.initial_tokens}};
}

}  // namespace bandmod
