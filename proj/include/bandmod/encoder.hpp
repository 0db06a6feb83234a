#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bandmod/rng.hpp"
#include "bandmod/trace.hpp"

namespace bandmod {

/// Shape of the sequence encoder. stride_bits must match the stride
/// segmentation of the inputs; n_tokens_max bounds the positional table.
struct EncoderConfig {
  int d_model = 64;
  int n_state = 16;
  int n_layers = 2;
  int n_tokens_max = 128;
  int n_classes = 4;
  int stride_bits = 512;
  bool use_residual = true;
  bool use_prenorm = true;
  uint64_t seed = 0;

  void validate() const;
};

/// Per-layer selective state-space parameters. A is diagonal and
/// strictly negative, stored as A_log with A = -exp(A_log) so gradient
/// steps cannot leave the stable region.
struct LayerParams {
  std::vector<double> A_log;    // d_model x n_state
  std::vector<double> W_B;      // d_model x n_state
  std::vector<double> W_C;      // d_model x n_state
  std::vector<double> W_delta;  // d_model
  double b_delta = 0.0;
};

/// Every learnable tensor of the encoder: stride projection, positional
/// table, the SSM layers, classification and reconstruction heads, and
/// the mask embedding used during pre-training.
struct EncoderParams {
  EncoderConfig cfg;
  std::vector<double> W_proj;     // stride_bits x d_model
  std::vector<double> pos;        // n_tokens_max x d_model
  std::vector<LayerParams> layers;
  std::vector<double> cls_head;    // d_model x n_classes
  std::vector<double> recon_head;  // d_model x stride_bits
  std::vector<double> mask_token;  // d_model

  static EncoderParams init(const EncoderConfig& cfg);
  static EncoderParams zeros_like(const EncoderConfig& cfg);
  void validate() const;
};

/// Named view over every learnable coordinate of an EncoderParams
/// (including scalars), in a fixed order shared by checkpoints, gradient
/// containers, finite-difference checks and the optimizer.
struct TensorRef {
  std::string name;
  double* data;
  size_t size;
  std::vector<int> shape;
};
std::vector<TensorRef> tensor_refs(EncoderParams& p);

/// Gradients use the same layout as the parameters they differentiate.
using EncoderGradients = EncoderParams;

// --- Core operations ----------------------------------------------------

/// Zero-order-hold discretization of one diagonal SSM channel:
/// A_bar = exp(delta*A), B_bar = ((exp(delta*A)-1)/A)*B, with the
/// series limit delta*B guarding A near zero.
std::pair<double, double> discretize(double A_diag, double B, double delta);

/// Token embedding x_i = s_i * W_proj + pos_i. Returns N x d_model.
std::vector<double> embed(const StrideSequence& strides, const EncoderParams& params);

/// One selective-scan layer applied to x (n_tokens x d_model): per-token
/// B_t, C_t and a softplus timescale derived from the token itself drive
/// the discrete recurrence h_t = A_bar h_{t-1} + B_bar x_t, y_t = C_t h_t.
std::vector<double> selective_scan(const std::vector<double>& x, int n_tokens,
                                   const LayerParams& layer, const EncoderConfig& cfg);

enum class ForwardMode { Classify, Reconstruct };

struct ForwardResult {
  std::vector<double> logits;  // n_classes (Classify)
  std::vector<double> recon;   // n_tokens x stride_bits (Reconstruct)
  int n_tokens = 0;
};

ForwardResult forward(const StrideSequence& strides, const EncoderParams& params,
                      ForwardMode mode);

std::vector<double> softmax(const std::vector<double>& logits);

/// -log softmax(logits)[label], computed through log-sum-exp.
double cross_entropy(const std::vector<double>& logits, int label);

/// Uniformly samples ceil(mask_ratio*N) token positions to mask.
std::vector<int> sample_mask(int n_tokens, double mask_ratio, Rng& rng);

/// Masked-token reconstruction MSE over the masked positions only.
double masked_pretrain_loss(const StrideSequence& strides, double mask_ratio,
                            const EncoderParams& params, Rng& rng);
double masked_loss_with_mask(const StrideSequence& strides, const std::vector<int>& mask,
                             const EncoderParams& params);

// --- Reverse mode ---------------------------------------------------------

/// Reusable buffers for one sample's forward+backward pass.
struct EncoderWorkspace;
EncoderWorkspace* workspace_create();
void workspace_destroy(EncoderWorkspace* ws);

struct WorkspaceHandle {
  WorkspaceHandle() : ws(workspace_create()) {}
  ~WorkspaceHandle() { workspace_destroy(ws); }
  WorkspaceHandle(const WorkspaceHandle&) = delete;
  WorkspaceHandle& operator=(const WorkspaceHandle&) = delete;
  EncoderWorkspace* ws;
};

/// Cross-entropy objective: returns the sample loss and accumulates
/// exact reverse-mode gradients of every tensor into `grad`.
double ce_backward(const StrideSequence& strides, int label, const EncoderParams& params,
                   EncoderGradients& grad, EncoderWorkspace* ws = nullptr);

/// Masked-MSE objective with an explicit mask set.
double masked_backward(const StrideSequence& strides, const std::vector<int>& mask,
                       const EncoderParams& params, EncoderGradients& grad,
                       EncoderWorkspace* ws = nullptr);

// --- Checkpoints ----------------------------------------------------------
// manifest JSON (<prefix>.json) + little-endian fp32 blob (<prefix>.bin).

void save_checkpoint(const EncoderParams& params, const std::string& prefix);
EncoderParams load_checkpoint(const std::string& prefix);

}  // namespace bandmod
