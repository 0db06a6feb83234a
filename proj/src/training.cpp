#include "bandmod/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <thread>

#include "bandmod/errors.hpp"

namespace bandmod {

std::pair<std::vector<size_t>, std::vector<size_t>> split_flows(
    const std::vector<int>& labels, double train_frac, uint64_t seed) {
  if (labels.size() < 2) throw ValidationError("split_flows: need at least 2 flows");
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw ValidationError("split_flows: train_frac must be in (0, 1)");

  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  Rng rng(seed);
  std::vector<size_t> train_ids, test_ids;
  for (auto& [label, ids] : by_class) {
    if (ids.size() < 2)
      throw ValidationError("split_flows: class " + std::to_string(label) +
                            " has fewer than 2 flows; cannot stratify");
    for (size_t i = ids.size(); i > 1; --i)
      std::swap(ids[i - 1], ids[rng.below(i)]);
    size_t n_train = static_cast<size_t>(std::llround(train_frac * ids.size()));
    n_train = std::min(std::max<size_t>(n_train, 1), ids.size() - 1);
    train_ids.insert(train_ids.end(), ids.begin(), ids.begin() + n_train);
    test_ids.insert(test_ids.end(), ids.begin() + n_train, ids.end());
  }
  std::sort(train_ids.begin(), train_ids.end());
  std::sort(test_ids.begin(), test_ids.end());
  return {train_ids, test_ids};
}

MetricsReport metrics_from_confusion(const std::vector<std::vector<long long>>& confusion) {
  const size_t K = confusion.size();
  if (K == 0) throw ValidationError("metrics: empty confusion matrix");
  for (const auto& row : confusion) {
    if (row.size() != K) throw ValidationError("metrics: confusion matrix must be square");
    for (long long v : row) {
      if (v < 0) throw ValidationError("metrics: negative count");
    }
  }

  MetricsReport m;
  m.confusion = confusion;
  m.precision.resize(K);
  m.recall.resize(K);
  m.f1.resize(K);
  m.support.resize(K);
  std::vector<long long> col_sum(K, 0);
  long long correct = 0;
  for (size_t i = 0; i < K; ++i) {
    long long row_sum = 0;
    for (size_t j = 0; j < K; ++j) {
      row_sum += confusion[i][j];
      col_sum[j] += confusion[i][j];
      m.total += confusion[i][j];
    }
    m.support[i] = row_sum;
    correct += confusion[i][i];
  }
  if (m.total == 0) throw ValidationError("metrics: confusion matrix has no counts");

  for (size_t i = 0; i < K; ++i) {
    const double tp = static_cast<double>(confusion[i][i]);
    m.precision[i] = col_sum[i] > 0 ? tp / col_sum[i] : 0.0;
    m.recall[i] = m.support[i] > 0 ? tp / m.support[i] : 0.0;
    const double pr = m.precision[i] + m.recall[i];
    m.f1[i] = pr > 0.0 ? 2.0 * m.precision[i] * m.recall[i] / pr : 0.0;
    m.macro_precision += m.precision[i] / K;
    m.macro_recall += m.recall[i] / K;
    m.macro_f1 += m.f1[i] / K;
    m.weighted_precision += m.support[i] * m.precision[i];
    m.weighted_recall += m.support[i] * m.recall[i];
    m.weighted_f1 += m.support[i] * m.f1[i];
  }
  m.weighted_precision /= m.total;
  m.weighted_recall /= m.total;
  m.weighted_f1 /= m.total;
  m.accuracy = static_cast<double>(correct) / m.total;
  return m;
}

nlohmann::json metrics_to_json(const MetricsReport& m) {
  return nlohmann::json{{"confusion", m.confusion},
                        {"precision", m.precision},
                        {"recall", m.recall},
                        {"f1", m.f1},
                        {"support", m.support},
                        {"macro", {{"precision", m.macro_precision},
                                   {"recall", m.macro_recall},
                                   {"f1", m.macro_f1}}},
                        {"weighted", {{"precision", m.weighted_precision},
                                      {"recall", m.weighted_recall},
                                      {"f1", m.weighted_f1}}},
                        {"accuracy", m.accuracy},
                        {"total", m.total}};
}

std::string metrics_to_csv(const MetricsReport& m) {
  std::string out = "class,precision,recall,f1,support\n";
  char line[160];
  for (size_t i = 0; i < m.precision.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.6f,%.6f,%.6f,%lld\n", i, m.precision[i],
                  m.recall[i], m.f1[i], m.support[i]);
    out += line;
  }
  std::snprintf(line, sizeof(line), "macro,%.6f,%.6f,%.6f,%lld\n", m.macro_precision,
                m.macro_recall, m.macro_f1, m.total);
  out += line;
  std::snprintf(line, sizeof(line), "weighted,%.6f,%.6f,%.6f,%lld\n", m.weighted_precision,
                m.weighted_recall, m.weighted_f1, m.total);
  out += line;
  std::snprintf(line, sizeof(line), "accuracy,%.6f,,,\n", m.accuracy);
  out += line;
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("TrainConfig.batch_size must be >= 1");
  if (!(base_lr > 0.0)) throw ValidationError("TrainConfig.base_lr must be > 0");
  if (stage == Stage::Pretrain && !(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw ValidationError("TrainConfig.mask_ratio must be in (0, 1) for pretraining");
  if (n_threads < 0) throw ValidationError("TrainConfig.n_threads must be >= 0");
}

TrainConfig preset_full_scale_pretrain() {
  TrainConfig cfg;
  cfg.stage = TrainConfig::Stage::Pretrain;
  cfg.steps = 150000;
  cfg.batch_size = 128;
  cfg.base_lr = 1e-3;
  cfg.mask_ratio = 0.9;
  return cfg;
}

TrainConfig preset_full_scale_finetune() {
  TrainConfig cfg;
  cfg.stage = TrainConfig::Stage::Finetune;
  cfg.epochs = 120;
  cfg.batch_size = 128;
  cfg.base_lr = 2e-3;
  return cfg;
}

namespace {

int resolved_threads(int n_threads) {
  if (n_threads > 0) return n_threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

double cosine_lr(const TrainConfig& cfg, int step, int total_steps) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.base_lr * (step + 1) / cfg.warmup_steps;
  if (!cfg.cosine_decay || total_steps <= 1) return cfg.base_lr;
  const int past = cfg.warmup_steps;
  const double frac = static_cast<double>(step - past) / std::max(total_steps - past, 1);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

/// SGD with momentum over the shared tensor layout. When a name filter
/// is set, only tensors whose name passes it are updated.
struct Optimizer {
  EncoderParams velocity;
  double momentum = 0.9;
  bool head_only = false;

  explicit Optimizer(const EncoderConfig& cfg) : velocity(EncoderParams::zeros_like(cfg)) {}

  void step(EncoderParams& params, EncoderGradients& grads, double lr) {
    auto pr = tensor_refs(params);
    auto gr = tensor_refs(grads);
    auto vr = tensor_refs(velocity);
    for (size_t i = 0; i < pr.size(); ++i) {
      if (head_only && pr[i].name != "cls_head") continue;
      double* p = pr[i].data;
      double* g = gr[i].data;
      double* v = vr[i].data;
      for (size_t j = 0; j < pr[i].size; ++j) {
        v[j] = momentum * v[j] - lr * g[j];
        p[j] += v[j];
      }
    }
  }
};

void zero_grads(EncoderGradients& g) {
  for (auto& r : tensor_refs(g)) std::fill(r.data, r.data + r.size, 0.0);
}

void add_grads(EncoderGradients& dst, const EncoderGradients& src) {
  auto dr = tensor_refs(dst);
  auto sr = tensor_refs(const_cast<EncoderGradients&>(src));
  for (size_t i = 0; i < dr.size(); ++i) {
    for (size_t j = 0; j < dr[i].size; ++j) dr[i].data[j] += sr[i].data[j];
  }
}

void scale_grads(EncoderGradients& g, double s) {
  for (auto& r : tensor_refs(g)) {
    for (size_t j = 0; j < r.size; ++j) r.data[j] *= s;
  }
}

void clip_gradients(EncoderGradients& g, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& r : tensor_refs(g)) {
    for (size_t j = 0; j < r.size; ++j) sq += r.data[j] * r.data[j];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) scale_grads(g, max_norm / norm);
}

/// Batch gradient with a fixed reduction order: worker w owns the
/// contiguous slice of the batch it accumulates in index order, and the
/// per-worker sums are combined in worker order. Deterministic for a
/// fixed (seed, n_threads, batch) triple.
struct BatchContext {
  std::vector<std::unique_ptr<WorkspaceHandle>> workspaces;
  std::vector<EncoderGradients> worker_grads;

  BatchContext(const EncoderConfig& cfg, int n_workers) {
    for (int i = 0; i < n_workers; ++i) {
      workspaces.emplace_back(new WorkspaceHandle());
      worker_grads.push_back(EncoderParams::zeros_like(cfg));
    }
  }
};

struct BatchItem {
  const StrideSequence* strides;
  int label;                     // -1 for pretraining
  const std::vector<int>* mask;  // pretraining only
};

double batch_gradients(const std::vector<BatchItem>& batch, const EncoderParams& params,
                       EncoderGradients& out, BatchContext& ctx) {
  const int n_workers = static_cast<int>(ctx.worker_grads.size());
  const size_t n = batch.size();
  std::vector<double> losses(n, 0.0);
  std::vector<std::exception_ptr> errors(n_workers);

  auto work = [&](int w) {
    try {
      EncoderGradients& acc = ctx.worker_grads[w];
      zero_grads(acc);
      EncoderWorkspace* ws = ctx.workspaces[w]->ws;
      const size_t lo = n * w / n_workers;
      const size_t hi = n * (w + 1) / n_workers;
      for (size_t i = lo; i < hi; ++i) {
        const BatchItem& item = batch[i];
        losses[i] = item.mask
                        ? masked_backward(*item.strides, *item.mask, params, acc, ws)
                        : ce_backward(*item.strides, item.label, params, acc, ws);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };

  if (n_workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < n_workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  zero_grads(out);
  for (int w = 0; w < n_workers; ++w) add_grads(out, ctx.worker_grads[w]);
  scale_grads(out, 1.0 / static_cast<double>(n));
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(n);
}

/// Epoch-shuffled index stream.
struct IndexStream {
  std::vector<size_t> order;
  size_t cursor = 0;
  Rng rng;

  IndexStream(size_t n, uint64_t seed) : rng(seed) {
    order.resize(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    reshuffle();
  }
  void reshuffle() {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    cursor = 0;
  }
  size_t next() {
    if (cursor >= order.size()) reshuffle();
    return order[cursor++];
  }
};

double holdout_mse(const StridedDataset& holdout, const EncoderParams& params,
                   double mask_ratio, uint64_t seed) {
  double total = 0.0;
  for (size_t i = 0; i < holdout.size(); ++i) {
    Rng rng(Rng(seed).fork(i).next_u64());
    total += masked_pretrain_loss(holdout.samples[i].strides, mask_ratio, params, rng);
  }
  return holdout.size() ? total / holdout.size() : 0.0;
}

}  // namespace

PretrainResult run_pretrain(const TrainConfig& cfg, const EncoderConfig& enc_cfg,
                            const StridedDataset& train, const StridedDataset* holdout) {
  cfg.validate();
  enc_cfg.validate();
  if (train.size() == 0) throw ValidationError("run_pretrain: empty dataset");

  PretrainResult result{EncoderParams::init(enc_cfg), {}, 0.0, 0.0};
  EncoderParams& params = result.params;
  if (holdout)
    result.holdout_initial_mse = holdout_mse(*holdout, params, cfg.mask_ratio, cfg.seed);

  const int n_workers = resolved_threads(cfg.n_threads);
  BatchContext ctx(enc_cfg, n_workers);
  EncoderGradients grads = EncoderParams::zeros_like(enc_cfg);
  Optimizer opt(enc_cfg);
  opt.momentum = cfg.momentum;
  IndexStream stream(train.size(), cfg.seed ^ 0x5eed5eedULL);
  Rng mask_root(cfg.seed ^ 0x9a5c0ffeeULL);

  std::vector<std::vector<int>> masks(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<BatchItem> batch;
    batch.reserve(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const StridedSample& sample = train.samples[stream.next()];
      // Per-slot mask stream, independent of worker scheduling.
      Rng mask_rng = mask_root.fork(static_cast<uint64_t>(step) * cfg.batch_size + b);
      masks[b] = sample_mask(sample.strides.n_strides, cfg.mask_ratio, mask_rng);
      batch.push_back({&sample.strides, -1, &masks[b]});
    }
    double loss;
    try {
      loss = batch_gradients(batch, params, grads, ctx);
    } catch (const RuntimeFault& e) {
      throw RuntimeFault(std::string(e.what()) + "; pretraining diverged at step " +
                         std::to_string(step));
    }
    if (!std::isfinite(loss))
      throw RuntimeFault("pretraining diverged (non-finite loss) at step " +
                         std::to_string(step));
    result.loss_log.push_back({step, loss});
    clip_gradients(grads, cfg.clip_norm);
    opt.step(params, grads, cosine_lr(cfg, step, cfg.steps));
  }

  if (holdout)
    result.holdout_final_mse = holdout_mse(*holdout, params, cfg.mask_ratio, cfg.seed);
  return result;
}

int collapse_label(int label, int n_classes) {
  if (n_classes == 2) return label > 0 ? 1 : 0;
  return label;
}

int predict(const EncoderParams& params, const StrideSequence& strides) {
  const ForwardResult r = forward(strides, params, ForwardMode::Classify);
  return static_cast<int>(std::max_element(r.logits.begin(), r.logits.end()) -
                          r.logits.begin());
}

namespace {

std::vector<int> predict_all(const EncoderParams& params, const StridedDataset& data,
                             int n_threads) {
  const int n_workers = resolved_threads(n_threads);
  std::vector<int> preds(data.size());
  auto work = [&](int w) {
    const size_t lo = data.size() * w / n_workers;
    const size_t hi = data.size() * (w + 1) / n_workers;
    for (size_t i = lo; i < hi; ++i) preds[i] = predict(params, data.samples[i].strides);
  };
  if (n_workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < n_workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  return preds;
}

}  // namespace

double accuracy_on(const EncoderParams& params, const StridedDataset& data, int n_threads) {
  if (data.size() == 0) throw ValidationError("accuracy_on: empty dataset");
  const std::vector<int> preds = predict_all(params, data, n_threads);
  size_t correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    if (preds[i] == collapse_label(data.samples[i].label, params.cfg.n_classes)) ++correct;
  }
  return static_cast<double>(correct) / data.size();
}

MetricsReport evaluate(const EncoderParams& params, const StridedDataset& test,
                       int n_threads) {
  if (test.size() == 0) throw ValidationError("evaluate: empty test set");
  const int K = params.cfg.n_classes;
  const std::vector<int> preds = predict_all(params, test, n_threads);
  std::vector<std::vector<long long>> confusion(K, std::vector<long long>(K, 0));
  for (size_t i = 0; i < test.size(); ++i) {
    const int y = collapse_label(test.samples[i].label, K);
    if (y < 0 || y >= K) throw ValidationError("evaluate: label out of range");
    confusion[y][preds[i]] += 1;
  }
  return metrics_from_confusion(confusion);
}

FinetuneResult run_finetune(const EncoderParams& backbone, const TrainConfig& cfg,
                            const StridedDataset& train, int n_classes,
                            const StridedDataset* eval_set) {
  cfg.validate();
  if (n_classes != 2 && n_classes != 4)
    throw ValidationError("run_finetune: n_classes must be 2 or 4");
  if (train.size() == 0) throw ValidationError("run_finetune: empty training set");

  std::vector<bool> seen(n_classes, false);
  for (const auto& s : train.samples) seen[collapse_label(s.label, n_classes)] = true;
  for (int k = 0; k < n_classes; ++k) {
    if (!seen[k])
      throw ValidationError("run_finetune: class " + std::to_string(k) +
                            " absent from training set");
  }

  // Attach a fresh zero-initialized head sized for the task; all other
  // tensors come from the backbone.
  EncoderConfig cfgm = backbone.cfg;
  cfgm.n_classes = n_classes;
  FinetuneResult result;
  result.params = EncoderParams::zeros_like(cfgm);
  {
    EncoderParams& dst = result.params;
    EncoderParams& src = const_cast<EncoderParams&>(backbone);
    auto dr = tensor_refs(dst);
    auto sr = tensor_refs(src);
    for (size_t i = 0; i < dr.size(); ++i) {
      if (dr[i].name == "cls_head") continue;
      std::copy(sr[i].data, sr[i].data + sr[i].size, dr[i].data);
    }
  }
  EncoderParams& params = result.params;

  const int n_workers = resolved_threads(cfg.n_threads);
  BatchContext ctx(cfgm, n_workers);
  EncoderGradients grads = EncoderParams::zeros_like(cfgm);
  Optimizer opt(cfgm);
  opt.momentum = cfg.momentum;
  opt.head_only = cfg.freeze_backbone;
  IndexStream stream(train.size(), cfg.seed ^ 0xf1e7u);

  const int steps_per_epoch =
      static_cast<int>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const int total_steps = cfg.epochs * steps_per_epoch;

  int hold_streak = 0;
  int streak_start = -1;
  auto eval_now = [&](int step) {
    if (!eval_set) return;
    const double acc = accuracy_on(params, *eval_set, cfg.n_threads);
    result.eval_history.push_back({step, acc});
    if (cfg.stop_at_accuracy > 0.0 && result.steps_to_target < 0) {
      if (acc >= cfg.stop_at_accuracy) {
        if (hold_streak == 0) streak_start = step;
        ++hold_streak;
        if (hold_streak >= std::max(cfg.stop_hold, 1)) result.steps_to_target = streak_start;
      } else {
        hold_streak = 0;
      }
    }
  };

  for (int step = 0; step < total_steps; ++step) {
    std::vector<BatchItem> batch;
    batch.reserve(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const StridedSample& sample = train.samples[stream.next()];
      batch.push_back({&sample.strides, collapse_label(sample.label, n_classes), nullptr});
    }
    double loss;
    try {
      loss = batch_gradients(batch, params, grads, ctx);
    } catch (const RuntimeFault& e) {
      throw RuntimeFault(std::string(e.what()) + "; fine-tuning diverged at step " +
                         std::to_string(step));
    }
    if (!std::isfinite(loss))
      throw RuntimeFault("fine-tuning diverged (non-finite loss) at step " +
                         std::to_string(step));
    result.loss_log.push_back({step, loss});
    clip_gradients(grads, cfg.clip_norm);
    opt.step(params, grads, cosine_lr(cfg, step, total_steps));
    result.steps_run = step + 1;
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      eval_now(step + 1);
      if (result.steps_to_target >= 0 && cfg.stop_at_accuracy > 0.0) break;
    }
  }
  if (cfg.eval_every <= 0) eval_now(result.steps_run);
  return result;
}

void write_loss_log_csv(const std::vector<LossLogEntry>& log, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFault("cannot write loss log: " + path);
  f << "step,loss\n";
  for (const auto& e : log) f << e.step << ',' << e.loss << '\n';
}

}  // namespace bandmod
