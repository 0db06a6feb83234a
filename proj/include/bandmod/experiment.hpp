#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bandmod/channel.hpp"
#include "bandmod/shaper.hpp"
#include "bandmod/trace.hpp"
#include "bandmod/training.hpp"
#include "bandmod/waveform.hpp"

namespace bandmod {

/// Everything needed to generate a labeled synthetic corpus: one flow =
/// source -> (shaper, classes 1..3 only) -> channel -> capture synthesis.
/// Per-flow seeds derive from the master seed and the flow index, so
/// generation order and parallelism cannot change the output.
struct DatasetConfig {
  uint64_t seed = 1;
  int flows_per_class = 500;
  double duration_s = 36.0;       // offered-traffic horizon
  double capture_window_s = 0.0;  // observer truncation; 0 = keep everything
  double r_base = 3000.0;  // shaped baseline, bytes/s

  SourceModel source;       // per-flow seed overwritten
  TokenBucketConfig bucket;
  ChannelModel channel;     // per-flow seed overwritten
  std::map<int, ModulationSpec> overrides;  // per-class spec override

  int M = 64;    // packets retained per flow
  int H = 52;    // header bytes per packet
  int P = 12;    // payload bytes per packet
  int L_s = 512; // stride length in bits
  CaptureSynthOptions capture;

  void validate() const;
  static DatasetConfig desk_default(uint64_t seed);
};

/// The modulation spec used for a class label (1..3).
ModulationSpec class_modulation(const DatasetConfig& cfg, int label);

FlowTrace generate_flow(const DatasetConfig& cfg, int label, int index);

/// All flows, class-major then index order (flow_id order).
std::vector<FlowTrace> generate_dataset(const DatasetConfig& cfg);

StridedSample tokenize_flow(const FlowTrace& flow, const DatasetConfig& cfg);
StridedDataset tokenize_dataset(const std::vector<FlowTrace>& flows,
                                const DatasetConfig& cfg);

/// Writes traces/<id>.jsonl, serialized/<id>.bits, manifest.json and
/// provenance.json under out_dir.
void write_dataset(const std::vector<FlowTrace>& flows, const DatasetConfig& cfg,
                   const std::string& out_dir);

StridedDataset load_serialized_dataset(const std::string& dir);

DatasetConfig dataset_config_from_json(const nlohmann::json& j);
nlohmann::json dataset_config_to_json(const DatasetConfig& cfg);

/// FNV-1a over the canonical config serialization; stamped into
/// provenance files so artifacts can be traced back to their inputs.
std::string config_hash(const nlohmann::json& j);

nlohmann::json provenance_json(const nlohmann::json& config, uint64_t seed);

}  // namespace bandmod
