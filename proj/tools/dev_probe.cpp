// Feature-quality probe: frozen-backbone nearest-class-mean accuracy.
#include <cstdio>
#include <cstdlib>
#include <cmath>
#include "bandmod/experiment.hpp"

using namespace bandmod;

static std::vector<double> pooled_features(const EncoderParams& p, const StrideSequence& s) {
  // Mirror the classify path: mean pool then parameter-free layer norm.
  ForwardResult r = forward(s, p, ForwardMode::Reconstruct);
  (void)r;
  return {};
}

int main(int argc, char** argv) {
  int flows = argc > 1 ? std::atoi(argv[1]) : 120;
  int pre_steps = argc > 2 ? std::atoi(argv[2]) : 1200;
  double mask = argc > 3 ? std::atof(argv[3]) : 0.5;
  double pre_lr = argc > 4 ? std::atof(argv[4]) : 0.01;
  uint64_t seed = argc > 5 ? std::strtoull(argv[5], nullptr, 10) : 1;

  DatasetConfig cfg = DatasetConfig::desk_default(seed);
  cfg.flows_per_class = flows;
  const auto traces = generate_dataset(cfg);
  StridedDataset all = tokenize_dataset(traces, cfg);

  std::vector<int> labels;
  for (const auto& s : all.samples) labels.push_back(s.label);
  auto [tr_idx, te_idx] = split_flows(labels, 0.8, seed);
  StridedDataset train, test;
  train.stride_bits = test.stride_bits = all.stride_bits;
  for (size_t i : tr_idx) train.samples.push_back(all.samples[i]);
  for (size_t i : te_idx) test.samples.push_back(all.samples[i]);

  EncoderConfig enc;
  enc.stride_bits = cfg.L_s;
  enc.n_tokens_max = all.samples[0].strides.n_strides;
  enc.n_classes = 4;
  enc.seed = seed;

  TrainConfig pcfg;
  pcfg.stage = TrainConfig::Stage::Pretrain;
  pcfg.steps = pre_steps;
  pcfg.batch_size = 32;
  pcfg.base_lr = pre_lr;
  pcfg.mask_ratio = mask;
  pcfg.seed = seed;
  pcfg.n_threads = 2;

  PretrainResult pre = run_pretrain(pcfg, enc, train, nullptr);
  EncoderParams random_bb = EncoderParams::init(enc);

  // Frozen-backbone head-only training measures linear feature quality.
  for (int binary = 1; binary >= 0; --binary) {
    for (int which = 0; which < 2; ++which) {
      const EncoderParams& bb = which == 0 ? pre.params : random_bb;
      TrainConfig fcfg;
      fcfg.stage = TrainConfig::Stage::Finetune;
      fcfg.epochs = 30;
      fcfg.batch_size = 32;
      fcfg.base_lr = 0.02;
      fcfg.seed = seed + 9;
      fcfg.n_threads = 2;
      fcfg.freeze_backbone = true;
      FinetuneResult r = run_finetune(bb, fcfg, train, binary ? 2 : 4, nullptr);
      std::printf("%s probe (%s): test acc %.4f\n", binary ? "binary" : "4-class",
                  which == 0 ? "pretrained" : "random", accuracy_on(r.params, test, 2));
    }
  }
  std::printf("pretrain final loss %.4f\n", pre.loss_log.back().loss);
  return 0;
}
