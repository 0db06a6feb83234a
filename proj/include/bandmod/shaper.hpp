#pragma once

#include <cstdint>

#include <json.hpp>

#include "bandmod/trace.hpp"
#include "bandmod/waveform.hpp"

namespace bandmod {

/// Synthetic offered-traffic generators. The seed fully determines the
/// output; packets carry sizes and timestamps only (capture synthesis
/// fills content bytes later in the pipeline).
struct SourceModel {
  enum class Kind { ConstantRate, PoissonArrivals, BurstyWeb };
  Kind kind = Kind::ConstantRate;
  double mean_rate = 0.0;   // bytes/s
  int packet_size = 1500;   // bytes
  double burst_on_ms = 500;  // BurstyWeb: mean on-period
  double burst_off_ms = 1000;  // BurstyWeb: mean off-period
  double burst_on_rate = 0.0;  // BurstyWeb: rate while on (0 => 4x mean)
  uint64_t seed = 0;

  void validate() const;
};

/// Token-bucket shaper state: bytes of burst allowance and the refill
/// grid. The refill rate itself is the bounded modulation waveform.
struct TokenBucketConfig {
  double capacity = 0.0;        // bytes
  double update_interval = 0.1; // seconds between refills
  double initial_tokens = -1.0; // <0 => start full

  void validate() const;
};

/// Offered traffic for `duration` seconds, direction +1, deterministic
/// per seed. Timestamps strictly nondecreasing in [0, duration).
FlowTrace generate_source(const SourceModel& model, double duration);

/// Applies the time-varying token-bucket rate limit. Packets are
/// released FIFO, contents and sizes unchanged, never before arrival;
/// tokens refill in steps of update_interval at eval_bounded(spec, t)
/// sampled at the step start. Queueing is unbounded (delay, not drop).
FlowTrace shape(const FlowTrace& input, const ModulationSpec& spec,
                const TokenBucketConfig& bucket);

SourceModel source_from_json(const nlohmann::json& j);
nlohmann::json source_to_json(const SourceModel& m);
TokenBucketConfig bucket_from_json(const nlohmann::json& j);
nlohmann::json bucket_to_json(const TokenBucketConfig& b);

}  // namespace bandmod
