// bandmod: bandwidth-modulation watermarking toolkit.
//
// Subcommands cover the full pipeline: synthetic dataset generation
// (gen-dataset), the two training stages (pretrain, finetune), scoring
// (eval), the closed-form correlation model (prob-table), the scaled
// exit-selection simulator (sim-exit), timing statistics (featurize) and
// one-off shaping of a stored trace (shape-trace).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bandmod/corrmodel.hpp"
#include "bandmod/errors.hpp"
#include "bandmod/experiment.hpp"
#include "bandmod/exitsim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bandmod;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFault("cannot open: " + path);
  return json::parse(f);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFault("cannot open for writing: " + path);
  f << content;
  if (!f.good()) throw RuntimeFault("write failed: " + path);
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

struct CommonTrainFlags {
  std::string data_dir;
  std::string out_prefix = "model";
  uint64_t seed = 0;
  uint64_t split_seed = 0;
  double train_frac = 0.8;
  std::string preset = "desk";
  int threads = 0;
  int batch = 0;       // 0 = preset default
  double lr = 0.0;     // 0 = preset default
};

TrainConfig make_train_config(const CommonTrainFlags& flags, TrainConfig::Stage stage) {
  TrainConfig cfg;
  if (flags.preset == "paper-vi-c") {
    cfg = stage == TrainConfig::Stage::Pretrain ? preset_full_scale_pretrain()
                                                : preset_full_scale_finetune();
  } else if (flags.preset == "desk") {
    cfg.stage = stage;
  } else {
    throw ValidationError("unknown preset: " + flags.preset + " (expected desk|paper-vi-c)");
  }
  cfg.stage = stage;
  cfg.seed = flags.seed;
  cfg.n_threads = flags.threads;
  if (flags.batch > 0) cfg.batch_size = flags.batch;
  if (flags.lr > 0.0) cfg.base_lr = flags.lr;
  return cfg;
}

// Splits a labeled dataset at the flow level and returns (train, test).
std::pair<StridedDataset, StridedDataset> split_dataset(const StridedDataset& all,
                                                        double train_frac, uint64_t seed) {
  std::vector<int> labels;
  labels.reserve(all.size());
  for (const auto& s : all.samples) labels.push_back(s.label);
  auto [train_idx, test_idx] = split_flows(labels, train_frac, seed);
  StridedDataset train, test;
  train.stride_bits = test.stride_bits = all.stride_bits;
  for (size_t i : train_idx) train.samples.push_back(all.samples[i]);
  for (size_t i : test_idx) test.samples.push_back(all.samples[i]);
  return {std::move(train), std::move(test)};
}

EncoderConfig encoder_config_for(const StridedDataset& data, int n_classes, uint64_t seed) {
  EncoderConfig cfg;
  cfg.stride_bits = data.stride_bits;
  int max_tokens = 1;
  for (const auto& s : data.samples) max_tokens = std::max(max_tokens, s.strides.n_strides);
  cfg.n_tokens_max = max_tokens;
  cfg.n_classes = n_classes;
  cfg.seed = seed;
  return cfg;
}

int cmd_gen_dataset(const std::string& config_path, uint64_t seed, const std::string& out_dir,
                    int flows_per_class) {
  DatasetConfig cfg = config_path.empty()
                          ? DatasetConfig::desk_default(seed)
                          : dataset_config_from_json(load_json_file(config_path));
  cfg.seed = seed;  // the flag overrides the config file
  if (flows_per_class > 0) cfg.flows_per_class = flows_per_class;
  cfg.validate();
  const auto flows = generate_dataset(cfg);
  write_dataset(flows, cfg, out_dir);
  std::cout << "wrote " << flows.size() << " flows to " << out_dir << "\n";
  return 0;
}

int cmd_pretrain(const CommonTrainFlags& flags, int steps, double mask_ratio) {
  StridedDataset all = load_serialized_dataset(flags.data_dir);
  auto [train, test] = split_dataset(all, flags.train_frac, flags.split_seed);

  TrainConfig cfg = make_train_config(flags, TrainConfig::Stage::Pretrain);
  if (steps > 0) cfg.steps = steps;
  if (mask_ratio > 0.0) cfg.mask_ratio = mask_ratio;

  EncoderConfig enc_cfg = encoder_config_for(all, 4, flags.seed);
  PretrainResult result = run_pretrain(cfg, enc_cfg, train, &test);
  save_checkpoint(result.params, flags.out_prefix);
  write_loss_log_csv(result.loss_log, flags.out_prefix + "_loss.csv");
  std::cout << "pretrain done: holdout mse " << result.holdout_initial_mse << " -> "
            << result.holdout_final_mse << "\n";
  return 0;
}

int cmd_finetune(const CommonTrainFlags& flags, const std::string& ckpt, bool from_scratch,
                 int n_classes, int epochs) {
  StridedDataset all = load_serialized_dataset(flags.data_dir);
  auto [train, test] = split_dataset(all, flags.train_frac, flags.split_seed);

  TrainConfig cfg = make_train_config(flags, TrainConfig::Stage::Finetune);
  if (epochs > 0) cfg.epochs = epochs;

  EncoderParams backbone = [&] {
    if (from_scratch || ckpt.empty()) {
      EncoderConfig enc_cfg = encoder_config_for(all, n_classes, flags.seed);
      return EncoderParams::init(enc_cfg);
    }
    return load_checkpoint(ckpt);
  }();

  FinetuneResult result = run_finetune(backbone, cfg, train, n_classes, &test);
  save_checkpoint(result.params, flags.out_prefix);
  write_loss_log_csv(result.loss_log, flags.out_prefix + "_loss.csv");
  const double acc = accuracy_on(result.params, test, cfg.n_threads);
  std::cout << "finetune done: test accuracy " << acc << "\n";
  return 0;
}

int cmd_eval(const CommonTrainFlags& flags, const std::string& ckpt,
             const std::string& out_dir) {
  StridedDataset all = load_serialized_dataset(flags.data_dir);
  auto [train, test] = split_dataset(all, flags.train_frac, flags.split_seed);
  (void)train;
  EncoderParams model = load_checkpoint(ckpt);
  MetricsReport report = evaluate(model, test, flags.threads);

  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "metrics.json").string(),
                  metrics_to_json(report).dump(2) + "\n");
  write_text_file((fs::path(out_dir) / "metrics.csv").string(), metrics_to_csv(report));
  std::cout << metrics_to_csv(report);
  return 0;
}

int cmd_prob_table(double p_exit, double p1, const std::string& p2_csv,
                   const std::string& pi_csv, long long r_max, long long t_max,
                   const std::string& out_path) {
  CorrelationParams cp;
  cp.p_exit = p_exit;
  cp.p1 = p1;
  cp.p2 = parse_double_list(p2_csv);
  if (pi_csv.empty()) {
    cp.mixture.assign(cp.p2.size(), 1.0 / static_cast<double>(cp.p2.size()));
  } else {
    cp.mixture = parse_double_list(pi_csv);
  }
  cp.validate();
  const size_t K = cp.num_classes();

  std::string csv = "p_exit,r,T";
  for (size_t i = 1; i <= K; ++i) csv += ",q_" + std::to_string(i);
  for (size_t i = 1; i <= K; ++i) csv += ",p_corr_" + std::to_string(i);
  csv += ",q_mix,p_corr_mix,p_total_mix\n";

  char buf[64];
  for (long long r = 1; r <= r_max; ++r) {
    for (long long T = 1; T <= t_max; ++T) {
      std::snprintf(buf, sizeof(buf), "%.10g,%lld,%lld", p_exit, r, T);
      csv += buf;
      for (size_t i = 1; i <= K; ++i) {
        std::snprintf(buf, sizeof(buf), ",%.10g", per_flow_success(cp, static_cast<int>(i)));
        csv += buf;
      }
      for (size_t i = 1; i <= K; ++i) {
        std::snprintf(buf, sizeof(buf), ",%.10g",
                      corr_single(per_flow_success(cp, static_cast<int>(i)), r));
        csv += buf;
      }
      const double pm = corr_mixed(cp, r);
      std::snprintf(buf, sizeof(buf), ",%.10g,%.10g,%.10g\n", q_mixture(cp), pm,
                    corr_temporal_equal(pm, T));
      csv += buf;
    }
  }
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    write_text_file(out_path, csv);
  }
  return 0;
}

int cmd_sim_exit(const std::string& network_path, const std::string& preset, uint64_t seed,
                 long long trials, int n_max, double adv_bw, const std::string& out_path) {
  ScaledNetwork base;
  bool enforce_range = false;
  if (!network_path.empty()) {
    base = network_from_json(load_json_file(network_path));
  } else if (preset == "paper-vi-a") {
    base = build_scaled_network(preset_scaled_tor());
    enforce_range = true;
  } else {
    throw ValidationError("sim-exit: pass --network or --preset paper-vi-a");
  }

  std::string csv = "n,adv_bw_each,p_hat,stderr,p_analytic\n";
  char buf[128];
  const int max_n = std::min<int>(n_max, static_cast<int>(base.count_dedicated_exits()));
  for (int n = 0; n <= max_n; ++n) {
    InjectOptions opts;
    opts.enforce_bandwidth_range = enforce_range;
    const ScaledNetwork net =
        inject_adversary(base, n, std::vector<double>(n, adv_bw), opts);
    const ExitEstimate est = estimate_p_exit(net, trials, Rng(seed).fork(n).next_u64());
    const double analytic = analytic_exit_probability(net);
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g\n", n, adv_bw, est.p_hat,
                  est.stderr_, analytic);
    csv += buf;
  }
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    write_text_file(out_path, csv);
  }
  return 0;
}

int cmd_featurize(const std::vector<std::string>& trace_paths, double bin_s, int window,
                  const std::string& out_dir) {
  fs::create_directories(out_dir);
  for (const auto& path : trace_paths) {
    const FlowTrace flow = read_flow_jsonl_file(path);
    const std::string stem = fs::path(path).stem().string();
    char buf[64];

    std::string tp_csv = "bin_start_s,throughput_bytes_per_s\n";
    const auto bins = throughput_bins(flow, bin_s);
    for (size_t i = 0; i < bins.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.10g,%.10g\n", i * bin_s, bins[i]);
      tp_csv += buf;
    }
    write_text_file((fs::path(out_dir) / (stem + "_throughput.csv")).string(), tp_csv);

    std::string iat_csv = "index,rolling_iat_s\n";
    const auto iats = rolling_iat(flow, window);
    for (size_t i = 0; i < iats.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i, iats[i]);
      iat_csv += buf;
    }
    write_text_file((fs::path(out_dir) / (stem + "_iat.csv")).string(), iat_csv);
  }
  std::cout << "featurized " << trace_paths.size() << " flows into " << out_dir << "\n";
  return 0;
}

int cmd_shape_trace(const std::string& in_path, const std::string& spec_path,
                    double capacity, double update_interval, const std::string& out_path) {
  const FlowTrace input = read_flow_jsonl_file(in_path);
  const ModulationSpec spec = modulation_from_json(load_json_file(spec_path));
  TokenBucketConfig bucket;
  bucket.capacity = capacity;
  bucket.update_interval = update_interval;
  const FlowTrace shaped = shape(input, spec, bucket);
  write_flow_jsonl(shaped, out_path);
  std::cout << "shaped " << input.packets.size() << " packets -> " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bandwidth-modulation watermark simulation and detection toolkit"};
  app.require_subcommand(1);

  // gen-dataset
  auto* gen = app.add_subcommand("gen-dataset", "generate a labeled synthetic dataset");
  std::string gen_config, gen_out = "dataset";
  uint64_t gen_seed = 0;
  int gen_flows = 0;
  gen->add_option("--config", gen_config, "dataset config JSON");
  gen->add_option("--seed", gen_seed, "master seed")->required();
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--flows-per-class", gen_flows, "override flows per class");

  // shared train flags
  auto add_train_flags = [](CLI::App* cmd, CommonTrainFlags& flags) {
    cmd->add_option("--data", flags.data_dir, "dataset directory")->required();
    cmd->add_option("--out", flags.out_prefix, "output checkpoint prefix");
    cmd->add_option("--seed", flags.seed, "training seed");
    cmd->add_option("--split-seed", flags.split_seed, "flow-level split seed");
    cmd->add_option("--train-frac", flags.train_frac, "training fraction");
    cmd->add_option("--preset", flags.preset, "desk|paper-vi-c");
    cmd->add_option("--threads", flags.threads, "worker threads (0 = auto)");
    cmd->add_option("--batch", flags.batch, "batch size override");
    cmd->add_option("--lr", flags.lr, "base learning rate override");
  };

  auto* pre = app.add_subcommand("pretrain", "stage-I masked pre-training");
  CommonTrainFlags pre_flags;
  add_train_flags(pre, pre_flags);
  int pre_steps = 0;
  double pre_mask = 0.0;
  pre->add_option("--steps", pre_steps, "optimization steps");
  pre->add_option("--mask-ratio", pre_mask, "mask ratio");

  auto* fin = app.add_subcommand("finetune", "stage-II supervised fine-tuning");
  CommonTrainFlags fin_flags;
  add_train_flags(fin, fin_flags);
  std::string fin_ckpt;
  bool fin_scratch = false;
  int fin_classes = 4, fin_epochs = 0;
  fin->add_option("--ckpt", fin_ckpt, "pre-trained checkpoint prefix");
  fin->add_flag("--from-scratch", fin_scratch, "skip the pre-trained checkpoint");
  fin->add_option("--classes", fin_classes, "2 or 4")->check(CLI::IsMember({2, 4}));
  fin->add_option("--epochs", fin_epochs, "fine-tuning epochs");

  auto* ev = app.add_subcommand("eval", "evaluate a model on the held-out split");
  CommonTrainFlags ev_flags;
  add_train_flags(ev, ev_flags);
  std::string ev_ckpt, ev_out = "eval";
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint prefix")->required();
  ev->add_option("--report-dir", ev_out, "metrics output directory");

  auto* pt = app.add_subcommand("prob-table", "correlation-probability sweeps");
  double pt_p_exit = 0.0213, pt_p1 = 0.9965;
  std::string pt_p2 = "0.963,0.990,0.957", pt_pi, pt_out;
  long long pt_r = 10, pt_t = 1;
  pt->add_option("--p-exit", pt_p_exit, "exit observation probability");
  pt->add_option("--p1", pt_p1, "detection probability");
  pt->add_option("--p2", pt_p2, "per-class classification probabilities (csv)");
  pt->add_option("--pi", pt_pi, "class mixture (csv, default uniform)");
  pt->add_option("--r-max", pt_r, "max monitored flows");
  pt->add_option("--t-max", pt_t, "max observation windows");
  pt->add_option("--out", pt_out, "output CSV path (default stdout)");

  auto* se = app.add_subcommand("sim-exit", "scaled-network exit-selection sweep");
  std::string se_network, se_preset = "paper-vi-a", se_out;
  uint64_t se_seed = 0;
  long long se_trials = kCircuitsPerWindow;
  int se_nmax = 9;
  double se_bw = 148.0;
  se->add_option("--network", se_network, "network JSON path");
  se->add_option("--preset", se_preset, "paper-vi-a");
  se->add_option("--seed", se_seed, "sampling seed")->required();
  se->add_option("--trials", se_trials, "circuits per estimate");
  se->add_option("--n-max", se_nmax, "max adversarial exits");
  se->add_option("--adv-bw", se_bw, "adversarial relay bandwidth, Mbps");
  se->add_option("--out", se_out, "output CSV path (default stdout)");

  auto* fe = app.add_subcommand("featurize", "per-flow throughput and IAT statistics");
  std::vector<std::string> fe_traces;
  double fe_bin = 1.0;
  int fe_window = 25;
  std::string fe_out = "features";
  fe->add_option("--trace", fe_traces, "trace JSONL file(s)")->required();
  fe->add_option("--bin", fe_bin, "throughput bin width, seconds");
  fe->add_option("--window", fe_window, "rolling IAT window, gaps");
  fe->add_option("--out", fe_out, "output directory");

  auto* st = app.add_subcommand("shape-trace", "apply a modulation to a stored trace");
  std::string st_in, st_spec, st_out = "shaped.jsonl";
  double st_capacity = 3000.0, st_interval = 0.1;
  st->add_option("--in", st_in, "input trace JSONL")->required();
  st->add_option("--spec", st_spec, "modulation spec JSON")->required();
  st->add_option("--capacity", st_capacity, "bucket capacity, bytes");
  st->add_option("--update-interval", st_interval, "refill interval, seconds");
  st->add_option("--out", st_out, "output trace JSONL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}, {"type", "validation"}}.dump() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_dataset(gen_config, gen_seed, gen_out, gen_flows);
    if (pre->parsed()) return cmd_pretrain(pre_flags, pre_steps, pre_mask);
    if (fin->parsed())
      return cmd_finetune(fin_flags, fin_ckpt, fin_scratch, fin_classes, fin_epochs);
    if (ev->parsed()) return cmd_eval(ev_flags, ev_ckpt, ev_out);
    if (pt->parsed())
      return cmd_prob_table(pt_p_exit, pt_p1, pt_p2, pt_pi, pt_r, pt_t, pt_out);
    if (se->parsed())
      return cmd_sim_exit(se_network, se_preset, se_seed, se_trials, se_nmax, se_bw, se_out);
    if (fe->parsed()) return cmd_featurize(fe_traces, fe_bin, fe_window, fe_out);
    if (st->parsed()) return cmd_shape_trace(st_in, st_spec, st_capacity, st_interval, st_out);
  } catch (const ValidationError& e) {
    std::cerr << json{{"error", e.what()}, {"type", "validation"}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"type", "runtime"}}.dump() << "\n";
    return 3;
  }
  return 0;
}
