#pragma once

#include <cstdint>
#include <optional>

#include <json.hpp>

#include "bandmod/shaper.hpp"
#include "bandmod/trace.hpp"

namespace bandmod {

/// Distortions a multi-hop anonymity path applies between the shaper and
/// the observation point: propagation delay with heavy-tailed jitter,
/// independent loss, optional relay smoothing, and simplified padding
/// defenses. The functional forms are an artifact model of qualitative
/// path behavior, not a protocol reimplementation.
struct ChannelModel {
  enum class Defense { None, PadIdleGaps, BurstReshape };

  double base_delay = 0.05;   // median per-packet delay, seconds
  double jitter_sigma = 0.0;  // log-stddev of the lognormal delay
  double loss_prob = 0.0;     // independent per-packet drop probability
  // Optional constant-rate relay smoothing bucket.
  std::optional<TokenBucketConfig> smoothing_bucket;
  double smoothing_rate = 0.0;  // bytes/s when smoothing enabled

  Defense defense = Defense::None;
  double pad_gap_threshold = 0.05;  // PadIdleGaps: gaps longer than this, s
  double pad_interval = 0.1;        // PadIdleGaps: dummy cadence, s
  int pad_size = 600;               // PadIdleGaps: dummy packet size
  double burst_cadence = 0.05;      // BurstReshape: release grid, s

  uint64_t seed = 0;

  void validate() const;
};

/// Transmits a flow through the channel model. Surviving packets keep
/// FIFO order (departure_i = max(departure_{i-1}, arrival_i + delay_i));
/// each packet drops independently with loss_prob; defenses run on the
/// delivered stream. Deterministic per (input, model).
FlowTrace transmit(const FlowTrace& input, const ChannelModel& ch);

ChannelModel channel_from_json(const nlohmann::json& j);
nlohmann::json channel_to_json(const ChannelModel& ch);

}  // namespace bandmod
