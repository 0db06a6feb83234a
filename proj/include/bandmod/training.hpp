#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bandmod/encoder.hpp"
#include "bandmod/trace.hpp"

namespace bandmod {

/// One tokenized flow ready for the encoder.
struct StridedSample {
  std::string flow_id;
  int label = 0;
  StrideSequence strides;
};

struct StridedDataset {
  std::vector<StridedSample> samples;
  int stride_bits = 0;

  size_t size() const { return samples.size(); }
};

/// Label-stratified flow-level split: every flow lands on exactly one
/// side, per-class proportions are preserved to within one flow, and the
/// outcome is a pure function of (labels, train_frac, seed).
std::pair<std::vector<size_t>, std::vector<size_t>> split_flows(
    const std::vector<int>& labels, double train_frac, uint64_t seed);

/// Per-class precision/recall/F1 with macro and support-weighted
/// averages, derived from a true-by-predicted count matrix.
struct MetricsReport {
  std::vector<std::vector<long long>> confusion;
  std::vector<double> precision, recall, f1;
  std::vector<long long> support;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  double weighted_precision = 0, weighted_recall = 0, weighted_f1 = 0;
  double accuracy = 0;
  long long total = 0;
};

MetricsReport metrics_from_confusion(const std::vector<std::vector<long long>>& confusion);
nlohmann::json metrics_to_json(const MetricsReport& m);
std::string metrics_to_csv(const MetricsReport& m);

struct TrainConfig {
  enum class Stage { Pretrain, Finetune };
  Stage stage = Stage::Pretrain;
  int steps = 5000;     // pretrain optimization steps
  int epochs = 30;      // finetune passes over the training set
  int batch_size = 32;
  double base_lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
  int warmup_steps = 0;    // linear learning-rate ramp before the decay
  bool cosine_decay = true;
  double mask_ratio = 0.9;
  uint64_t seed = 0;
  int n_threads = 1;    // batch-parallel workers; reduction order is fixed
  bool freeze_backbone = false;  // finetune: train the head only
  int eval_every = 0;            // finetune: test-accuracy cadence, 0 = off
  double stop_at_accuracy = -1.0;  // finetune: early stop once reached
  int stop_hold = 1;  // consecutive evals that must clear the stop accuracy

  void validate() const;
};

/// Full-scale schedule reported for the two training stages; desk-scale
/// runs use the defaults above.
TrainConfig preset_full_scale_pretrain();
TrainConfig preset_full_scale_finetune();

struct LossLogEntry {
  int step = 0;
  double loss = 0.0;
};

struct PretrainResult {
  EncoderParams params;
  std::vector<LossLogEntry> loss_log;
  double holdout_initial_mse = 0.0;  // only when a holdout set is given
  double holdout_final_mse = 0.0;
};

/// Stage I: self-supervised masked pre-training. Labels are ignored.
/// Aborts with the failing step index if the loss diverges.
PretrainResult run_pretrain(const TrainConfig& cfg, const EncoderConfig& enc_cfg,
                            const StridedDataset& train,
                            const StridedDataset* holdout = nullptr);

struct FinetuneResult {
  EncoderParams params;
  std::vector<LossLogEntry> loss_log;
  std::vector<std::pair<int, double>> eval_history;  // (step, accuracy)
  int steps_to_target = -1;  // first step reaching stop_at_accuracy
  int steps_run = 0;
};

/// Collapses 4-class labels to binary (0 = natural, 1 = watermarked).
int collapse_label(int label, int n_classes);

/// Stage II: supervised fine-tuning from a (typically pre-trained)
/// backbone. A fresh classification head sized n_classes is attached;
/// n_classes = 2 collapses labels {1,2,3} to the watermarked class.
FinetuneResult run_finetune(const EncoderParams& backbone, const TrainConfig& cfg,
                            const StridedDataset& train, int n_classes,
                            const StridedDataset* eval_set = nullptr);

int predict(const EncoderParams& params, const StrideSequence& strides);

/// Accuracy of the model on a dataset (labels collapsed to match the
/// model's class count).
double accuracy_on(const EncoderParams& params, const StridedDataset& data, int n_threads = 1);

MetricsReport evaluate(const EncoderParams& params, const StridedDataset& test,
                       int n_threads = 1);

void write_loss_log_csv(const std::vector<LossLogEntry>& log, const std::string& path);

}  // namespace bandmod
