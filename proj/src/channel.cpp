#include "bandmod/channel.hpp"

#include <algorithm>
#include <cmath>

#include "bandmod/errors.hpp"
#include "bandmod/rng.hpp"
#include "bandmod/waveform.hpp"

namespace bandmod {

void ChannelModel::validate() const {
  if (base_delay < 0.0) throw ValidationError("ChannelModel.base_delay must be >= 0");
  if (jitter_sigma < 0.0) throw ValidationError("ChannelModel.jitter_sigma must be >= 0");
  if (loss_prob < 0.0 || loss_prob >= 1.0)
    throw ValidationError("ChannelModel.loss_prob must be in [0, 1)");
  if (jitter_sigma > 0.0 && base_delay <= 0.0)
    throw ValidationError("ChannelModel.jitter_sigma needs base_delay > 0");
  if (defense == Defense::PadIdleGaps) {
    if (!(pad_gap_threshold > 0.0) || !(pad_interval > 0.0) || pad_size <= 0)
      throw ValidationError("ChannelModel.defense_params invalid for PadIdleGaps");
  }
  if (defense == Defense::BurstReshape && !(burst_cadence > 0.0))
    throw ValidationError("ChannelModel.burst_cadence must be > 0");
  if (smoothing_bucket) {
    smoothing_bucket->validate();
    if (!(smoothing_rate > 0.0))
      throw ValidationError("ChannelModel.smoothing_rate must be > 0 when smoothing");
  }
}

namespace {

void pad_idle_gaps(FlowTrace& flow, const ChannelModel& ch) {
  std::vector<PacketRecord> padded;
  padded.reserve(flow.packets.size());
  for (size_t i = 0; i < flow.packets.size(); ++i) {
    if (i > 0) {
      const double gap = (flow.packets[i].ts_us - flow.packets[i - 1].ts_us) / 1e6;
      if (gap > ch.pad_gap_threshold) {
        const int n_dummies = static_cast<int>(std::floor(gap / ch.pad_interval));
        for (int k = 1; k <= n_dummies; ++k) {
          PacketRecord d;
          d.ts_us = flow.packets[i - 1].ts_us +
                    static_cast<int64_t>(std::llround(k * ch.pad_interval * 1e6));
          d.size = static_cast<uint32_t>(ch.pad_size);
          d.dir = flow.packets[i - 1].dir;
          d.is_dummy = true;
          padded.push_back(std::move(d));
        }
      }
    }
    padded.push_back(flow.packets[i]);
  }
  // Ties between a dummy and the next real packet are possible when the
  // gap is an exact multiple of the cadence; keep the order stable.
  std::stable_sort(padded.begin(), padded.end(),
                   [](const PacketRecord& a, const PacketRecord& b) { return a.ts_us < b.ts_us; });
  flow.packets = std::move(padded);
}

void burst_reshape(FlowTrace& flow, const ChannelModel& ch) {
  // Quantize departures to the burst grid: everything that arrived in
  // (k-1, k]*cadence leaves together at k*cadence.
  for (auto& p : flow.packets) {
    const double t = p.ts_us / 1e6;
    const int64_t k = static_cast<int64_t>(std::ceil(t / ch.burst_cadence - 1e-12));
    const int64_t slot = std::max<int64_t>(k, 0);
    p.ts_us = static_cast<int64_t>(std::llround(slot * ch.burst_cadence * 1e6));
  }
}

}  // namespace

FlowTrace transmit(const FlowTrace& input, const ChannelModel& ch) {
  input.validate();
  ch.validate();
  Rng rng(ch.seed);

  FlowTrace out;
  out.flow_id = input.flow_id;
  out.label = input.label;
  out.packets.reserve(input.packets.size());

  double prev_departure = -1.0;
  for (const auto& p : input.packets) {
    // Draw per-packet randomness unconditionally so the stream position
    // of each packet's draws does not depend on earlier outcomes.
    const double jitter_factor =
        ch.jitter_sigma > 0.0 ? std::exp(ch.jitter_sigma * rng.normal()) : 1.0;
    const bool dropped = ch.loss_prob > 0.0 && rng.bernoulli(ch.loss_prob);
    if (dropped) continue;
    const double delay = ch.base_delay * jitter_factor;
    double departure = p.ts_us / 1e6 + delay;
    if (departure < prev_departure) departure = prev_departure;  // FIFO clamp
    prev_departure = departure;
    PacketRecord q = p;
    q.ts_us = static_cast<int64_t>(std::llround(departure * 1e6));
    out.packets.push_back(std::move(q));
  }

  if (ch.smoothing_bucket) {
    ModulationSpec flat;
    flat.kind = Waveform::Natural;
    flat.r_min = ch.smoothing_rate;
    flat.r_max = ch.smoothing_rate;
    out = shape(out, flat, *ch.smoothing_bucket);
  }

  switch (ch.defense) {
    case ChannelModel::Defense::None:
      break;
    case ChannelModel::Defense::PadIdleGaps:
      pad_idle_gaps(out, ch);
      break;
    case ChannelModel::Defense::BurstReshape:
      burst_reshape(out, ch);
      break;
  }
  return out;
}

ChannelModel channel_from_json(const nlohmann::json& j) {
  ChannelModel ch;
  ch.base_delay = j.value("base_delay", 0.05);
  ch.jitter_sigma = j.value("jitter_sigma", 0.0);
  ch.loss_prob = j.value("loss_prob", 0.0);
  ch.seed = j.value("seed", 0ULL);
  const std::string defense = j.value("defense", "none");
  if (defense == "none")
    ch.defense = ChannelModel::Defense::None;
  else if (defense == "pad_idle_gaps")
    ch.defense = ChannelModel::Defense::PadIdleGaps;
  else if (defense == "burst_reshape")
    ch.defense = ChannelModel::Defense::BurstReshape;
  else
    throw ValidationError("ChannelModel.defense must be none|pad_idle_gaps|burst_reshape");
  ch.pad_gap_threshold = j.value("pad_gap_threshold", 0.05);
  ch.pad_interval = j.value("pad_interval", 0.1);
  ch.pad_size = j.value("pad_size", 600);
  ch.burst_cadence = j.value("burst_cadence", 0.05);
  if (j.contains("smoothing")) {
    ch.smoothing_bucket = bucket_from_json(j.at("smoothing").at("bucket"));
    ch.smoothing_rate = j.at("smoothing").at("rate").get<double>();
  }
  ch.validate();
  return ch;
}

nlohmann::json channel_to_json(const ChannelModel& ch) {
  const char* defense = ch.defense == ChannelModel::Defense::None ? "none"
                        : ch.defense == ChannelModel::Defense::PadIdleGaps
                            ? "pad_idle_gaps"
                            : "burst_reshape";
  nlohmann::json j{{"base_delay", ch.base_delay},
                   {"jitter_sigma", ch.jitter_sigma},
                   {"loss_prob", ch.loss_prob},
                   {"defense", defense},
                   {"pad_gap_threshold", ch.pad_gap_threshold},
                   {"pad_interval", ch.pad_interval},
                   {"pad_size", ch.pad_size},
                   {"burst_cadence", ch.burst_cadence},
                   {"seed", ch.seed}};
  if (ch.smoothing_bucket) {
    j["smoothing"] = {{"bucket", bucket_to_json(*ch.smoothing_bucket)},
                      {"rate", ch.smoothing_rate}};
  }
  return j;
}

}  // namespace bandmod
