// Scratch driver for pipeline calibration. Not part of the shipped tool.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "bandmod/experiment.hpp"

using namespace bandmod;
using Clock = std::chrono::steady_clock;

static double secs(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

int main(int argc, char** argv) {
  int flows = argc > 1 ? std::atoi(argv[1]) : 100;
  int pre_steps = argc > 2 ? std::atoi(argv[2]) : 500;
  int ft_epochs = argc > 3 ? std::atoi(argv[3]) : 10;
  double pre_lr = argc > 4 ? std::atof(argv[4]) : 0.05;
  double ft_lr = argc > 5 ? std::atof(argv[5]) : 0.05;
  uint64_t seed = argc > 6 ? std::strtoull(argv[6], nullptr, 10) : 1;
  int threads = argc > 7 ? std::atoi(argv[7]) : 2;
  int d_model = argc > 8 ? std::atoi(argv[8]) : 64;
  int n_state = argc > 9 ? std::atoi(argv[9]) : 16;
  int label_per_class = argc > 10 ? std::atoi(argv[10]) : 12;

  DatasetConfig cfg = DatasetConfig::desk_default(seed);
  cfg.flows_per_class = flows;

  auto t0 = Clock::now();
  const auto traces = generate_dataset(cfg);
  auto t1 = Clock::now();
  StridedDataset all = tokenize_dataset(traces, cfg);
  auto t2 = Clock::now();
  std::printf("gen %.1fs tokenize %.1fs, %zu flows, tokens/flow=%d\n", secs(t0, t1),
              secs(t1, t2), all.size(), all.samples[0].strides.n_strides);

  // quick probe: mean IAT of first flows per class from traces
  for (int k = 0; k < 4; ++k) {
    const FlowTrace& f = traces[static_cast<size_t>(k) * flows];
    double mean_gap = 0;
    int n = std::min<int>(63, static_cast<int>(f.packets.size()) - 1);
    for (int i = 0; i < n; ++i) mean_gap += (f.packets[i + 1].ts_us - f.packets[i].ts_us) / 1e6;
    std::printf("class %d: %zu pkts, mean IAT(first 64) %.3f s\n", k, f.packets.size(),
                mean_gap / n);
  }

  std::vector<int> labels;
  for (const auto& s : all.samples) labels.push_back(s.label);
  auto [tr_idx, te_idx] = split_flows(labels, 0.8, seed);
  StridedDataset train, test;
  train.stride_bits = test.stride_bits = all.stride_bits;
  for (size_t i : tr_idx) train.samples.push_back(all.samples[i]);
  for (size_t i : te_idx) test.samples.push_back(all.samples[i]);

  EncoderConfig enc;
  enc.d_model = d_model;
  enc.n_state = n_state;
  enc.stride_bits = cfg.L_s;
  enc.n_tokens_max = all.samples[0].strides.n_strides;
  enc.n_classes = 4;
  enc.seed = seed;

  TrainConfig pcfg;
  pcfg.stage = TrainConfig::Stage::Pretrain;
  pcfg.steps = pre_steps;
  pcfg.batch_size = 32;
  pcfg.base_lr = pre_lr;
  pcfg.mask_ratio = argc > 11 ? std::atof(argv[11]) : 0.9;
  pcfg.seed = seed;
  pcfg.n_threads = threads;

  auto t3 = Clock::now();
  PretrainResult pre = run_pretrain(pcfg, enc, train, &test);
  auto t4 = Clock::now();
  std::printf("pretrain %.1fs: loss %.4f -> %.4f, holdout %.4f -> %.4f\n", secs(t3, t4),
              pre.loss_log.front().loss, pre.loss_log.back().loss, pre.holdout_initial_mse,
              pre.holdout_final_mse);

  TrainConfig fcfg;
  fcfg.stage = TrainConfig::Stage::Finetune;
  fcfg.epochs = ft_epochs;
  fcfg.batch_size = 32;
  fcfg.base_lr = ft_lr;
  fcfg.seed = seed + 1;
  fcfg.n_threads = threads;

  auto t5 = Clock::now();
  FinetuneResult bin = run_finetune(pre.params, fcfg, train, 2, nullptr);
  auto t6 = Clock::now();
  const double bin_acc = accuracy_on(bin.params, test, threads);
  std::printf("binary finetune %.1fs (%d steps): test acc %.4f\n", secs(t5, t6), bin.steps_run,
              bin_acc);

  auto t7 = Clock::now();
  FinetuneResult multi = run_finetune(pre.params, fcfg, train, 4, nullptr);
  auto t8 = Clock::now();
  MetricsReport m = evaluate(multi.params, test, threads);
  std::printf("4-class finetune %.1fs: acc %.4f macroF1 %.4f\n", secs(t7, t8), m.accuracy,
              m.macro_f1);
  std::printf("confusion:\n");
  for (const auto& row : m.confusion) {
    for (long long v : row) std::printf("%6lld", v);
    std::printf("\n");
  }

  // steps-to-threshold comparison on a small labeled subset: the
  // data-efficiency setting (big unlabeled corpus, few labels).
  StridedDataset small;
  small.stride_bits = train.stride_bits;
  {
    // Balanced for the binary task: as many natural flows as watermarked.
    std::vector<int> cap = {3 * label_per_class, label_per_class, label_per_class,
                            label_per_class};
    std::vector<int> taken(4, 0);
    for (const auto& smp : train.samples) {
      if (taken[smp.label] < cap[smp.label]) {
        small.samples.push_back(smp);
        taken[smp.label] += 1;
      }
    }
  }
  TrainConfig scfg = fcfg;
  scfg.base_lr = argc > 12 ? std::atof(argv[12]) : ft_lr;
  scfg.warmup_steps = argc > 13 ? std::atoi(argv[13]) : 0;
  scfg.epochs = 600;  // cap; early stop at the threshold
  scfg.eval_every = 1;
  scfg.stop_hold = 1;
  scfg.stop_at_accuracy = 0.95;
  std::printf("subset size %zu\n", small.size());
  for (int s = 0; s < 5; ++s) {
    scfg.seed = seed + 100 + s;
    FinetuneResult from_ckpt = run_finetune(pre.params, scfg, small, 2, &test);
    EncoderConfig enc2 = enc;
    enc2.n_classes = 2;
    enc2.seed = seed + 200 + s;
    FinetuneResult from_scratch =
        run_finetune(EncoderParams::init(enc2), scfg, small, 2, &test);
    std::printf("steps to 95%%: pretrained %d vs scratch %d\n", from_ckpt.steps_to_target,
                from_scratch.steps_to_target);

  }
  return 0;
}
