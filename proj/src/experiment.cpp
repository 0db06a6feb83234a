#include "bandmod/experiment.hpp"

#include <filesystem>
#include <fstream>

#include "bandmod/errors.hpp"

namespace bandmod {

namespace fs = std::filesystem;

void DatasetConfig::validate() const {
  if (flows_per_class < 1) throw ValidationError("DatasetConfig.flows_per_class must be >= 1");
  if (!(duration_s > 0.0)) throw ValidationError("DatasetConfig.duration_s must be > 0");
  if (!(r_base > 0.0)) throw ValidationError("DatasetConfig.r_base must be > 0");
  if (M <= 0 || H < 0 || P < 0 || H + P <= 0 || L_s <= 0)
    throw ValidationError("DatasetConfig trace parameters invalid");
  source.validate();
  bucket.validate();
  channel.validate();
}

DatasetConfig DatasetConfig::desk_default(uint64_t seed) {
  DatasetConfig cfg;
  cfg.seed = seed;
  cfg.flows_per_class = 500;
  cfg.duration_s = 36.0;
  cfg.capture_window_s = 38.0;
  cfg.r_base = 3000.0;

  cfg.source.kind = SourceModel::Kind::PoissonArrivals;
  cfg.source.mean_rate = 10.0 * cfg.r_base;  // keep the shaper backlogged
  cfg.source.packet_size = 1500;

  cfg.bucket.capacity = 3000.0;
  cfg.bucket.update_interval = 0.05;

  cfg.channel.base_delay = 0.05;
  cfg.channel.jitter_sigma = 0.3;
  cfg.channel.loss_prob = 0.01;

  cfg.M = 64;
  cfg.H = 52;
  cfg.P = 12;
  cfg.L_s = 512;
  return cfg;
}

ModulationSpec class_modulation(const DatasetConfig& cfg, int label) {
  if (label < 1 || label > 3) throw ValidationError("class_modulation: label must be 1..3");
  auto it = cfg.overrides.find(label);
  if (it != cfg.overrides.end()) return it->second;
  return default_modulation(static_cast<Waveform>(label), cfg.r_base);
}

FlowTrace generate_flow(const DatasetConfig& cfg, int label, int index) {
  if (label < 0 || label > 3) throw ValidationError("generate_flow: label must be 0..3");
  const uint64_t global_index =
      static_cast<uint64_t>(label) * cfg.flows_per_class + static_cast<uint64_t>(index);
  Rng flow_rng = Rng(cfg.seed).fork(global_index);
  const uint64_t src_seed = flow_rng.next_u64();
  const uint64_t chan_seed = flow_rng.next_u64();
  const uint64_t capture_seed = flow_rng.next_u64();

  SourceModel source = cfg.source;
  source.seed = src_seed;
  FlowTrace flow = generate_source(source, cfg.duration_s);
  char id[32];
  std::snprintf(id, sizeof(id), "m%d_%04d", label, index);
  flow.flow_id = id;
  flow.label = label;

  if (label > 0) flow = shape(flow, class_modulation(cfg, label), cfg.bucket);

  ChannelModel channel = cfg.channel;
  channel.seed = chan_seed;
  flow = transmit(flow, channel);

  if (cfg.capture_window_s > 0.0) {
    const int64_t cutoff = static_cast<int64_t>(cfg.capture_window_s * 1e6);
    while (!flow.packets.empty() && flow.packets.back().ts_us > cutoff)
      flow.packets.pop_back();
  }

  synthesize_capture(flow, capture_seed, cfg.capture);
  return flow;
}

std::vector<FlowTrace> generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<FlowTrace> flows;
  flows.reserve(static_cast<size_t>(cfg.flows_per_class) * 4);
  for (int label = 0; label < 4; ++label) {
    for (int i = 0; i < cfg.flows_per_class; ++i) flows.push_back(generate_flow(cfg, label, i));
  }
  return flows;
}

StridedSample tokenize_flow(const FlowTrace& flow, const DatasetConfig& cfg) {
  StridedSample s;
  s.flow_id = flow.flow_id;
  s.label = flow.label;
  s.strides = segment_strides(serialize_flow(flow, cfg.M, cfg.H, cfg.P), cfg.L_s);
  return s;
}

StridedDataset tokenize_dataset(const std::vector<FlowTrace>& flows, const DatasetConfig& cfg) {
  StridedDataset ds;
  ds.stride_bits = cfg.L_s;
  ds.samples.reserve(flows.size());
  for (const auto& f : flows) ds.samples.push_back(tokenize_flow(f, cfg));
  return ds;
}

std::string config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json provenance_json(const nlohmann::json& config, uint64_t seed) {
  return nlohmann::json{{"tool", "bandmod"},
                        {"version", "0.1.0"},
                        {"seed", seed},
                        {"config_hash", config_hash(config)}};
}

void write_dataset(const std::vector<FlowTrace>& flows, const DatasetConfig& cfg,
                   const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "traces", ec);
  fs::create_directories(fs::path(out_dir) / "serialized", ec);
  if (ec) throw RuntimeFault("cannot create output directory: " + out_dir);

  nlohmann::json manifest_flows = nlohmann::json::array();
  for (const auto& flow : flows) {
    write_flow_jsonl(flow, (fs::path(out_dir) / "traces" / (flow.flow_id + ".jsonl")).string());
    const SerializedFlow s = serialize_flow(flow, cfg.M, cfg.H, cfg.P);
    const fs::path bits_path = fs::path(out_dir) / "serialized" / (flow.flow_id + ".bits");
    std::ofstream f(bits_path, std::ios::binary);
    if (!f) throw RuntimeFault("cannot write: " + bits_path.string());
    f.write(reinterpret_cast<const char*>(s.packed.data()),
            static_cast<std::streamsize>(s.packed.size()));
    if (!f.good()) throw RuntimeFault("write failed: " + bits_path.string());
    manifest_flows.push_back(
        {{"flow_id", flow.flow_id}, {"label", flow.label}, {"bytes", s.packed.size()}});
  }

  nlohmann::json manifest{
      {"params", {{"M", cfg.M}, {"H", cfg.H}, {"P", cfg.P}, {"L_s", cfg.L_s}}},
      {"flows", manifest_flows}};
  std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::binary);
  mf << manifest.dump(2) << '\n';

  const nlohmann::json config = dataset_config_to_json(cfg);
  std::ofstream pf(fs::path(out_dir) / "provenance.json", std::ios::binary);
  pf << provenance_json(config, cfg.seed).dump(2) << '\n';
}

StridedDataset load_serialized_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mf) throw RuntimeFault("cannot open manifest: " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  const auto& params = manifest.at("params");
  const int M = params.at("M").get<int>();
  const int H = params.at("H").get<int>();
  const int P = params.at("P").get<int>();
  const int L_s = params.at("L_s").get<int>();

  StridedDataset ds;
  ds.stride_bits = L_s;
  for (const auto& fj : manifest.at("flows")) {
    StridedSample sample;
    sample.flow_id = fj.at("flow_id").get<std::string>();
    sample.label = fj.at("label").get<int>();
    const size_t bytes = fj.at("bytes").get<size_t>();

    SerializedFlow s;
    s.M = M;
    s.H = H;
    s.P = P;
    s.packed.resize(bytes);
    const fs::path bits_path = fs::path(dir) / "serialized" / (sample.flow_id + ".bits");
    std::ifstream f(bits_path, std::ios::binary);
    if (!f) throw RuntimeFault("cannot open: " + bits_path.string());
    f.read(reinterpret_cast<char*>(s.packed.data()), static_cast<std::streamsize>(bytes));
    if (f.gcount() != static_cast<std::streamsize>(bytes))
      throw RuntimeFault("truncated serialized flow: " + bits_path.string());
    sample.strides = segment_strides(s, L_s);
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig cfg = DatasetConfig::desk_default(j.value("seed", 1ULL));
  cfg.flows_per_class = j.value("flows_per_class", cfg.flows_per_class);
  cfg.duration_s = j.value("duration_s", cfg.duration_s);
  cfg.capture_window_s = j.value("capture_window_s", cfg.capture_window_s);
  cfg.r_base = j.value("r_base", cfg.r_base);
  if (j.contains("source")) cfg.source = source_from_json(j.at("source"));
  if (j.contains("bucket")) cfg.bucket = bucket_from_json(j.at("bucket"));
  if (j.contains("channel")) cfg.channel = channel_from_json(j.at("channel"));
  if (j.contains("modulations")) {
    for (auto it = j.at("modulations").begin(); it != j.at("modulations").end(); ++it) {
      cfg.overrides[std::stoi(it.key())] = modulation_from_json(it.value());
    }
  }
  cfg.M = j.value("M", cfg.M);
  cfg.H = j.value("H", cfg.H);
  cfg.P = j.value("P", cfg.P);
  cfg.L_s = j.value("L_s", cfg.L_s);
  cfg.capture.payload_bytes = j.value("capture_payload_bytes", cfg.capture.payload_bytes);
  cfg.capture.tsval_tick_us = j.value("tsval_tick_us", cfg.capture.tsval_tick_us);
  cfg.validate();
  return cfg;
}

nlohmann::json dataset_config_to_json(const DatasetConfig& cfg) {
  nlohmann::json j{{"seed", cfg.seed},
                   {"flows_per_class", cfg.flows_per_class},
                   {"duration_s", cfg.duration_s},
                   {"capture_window_s", cfg.capture_window_s},
                   {"r_base", cfg.r_base},
                   {"source", source_to_json(cfg.source)},
                   {"bucket", bucket_to_json(cfg.bucket)},
                   {"channel", channel_to_json(cfg.channel)},
                   {"M", cfg.M},
                   {"H", cfg.H},
                   {"P", cfg.P},
                   {"L_s", cfg.L_s},
                   {"capture_payload_bytes", cfg.capture.payload_bytes},
                   {"tsval_tick_us", cfg.capture.tsval_tick_us}};
  if (!cfg.overrides.empty()) {
    nlohmann::json mods;
    for (const auto& [label, spec] : cfg.overrides)
      mods[std::to_string(label)] = modulation_to_json(spec);
    j["modulations"] = mods;
  }
  return j;
}

}  // namespace bandmod
