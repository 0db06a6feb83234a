#include "bandmod/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "bandmod/errors.hpp"

namespace bandmod {

namespace {

constexpr double kNormEps = 1e-6;

double softplus(double z) {
  if (z > 30.0) return z;
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw RuntimeFault(std::string("numeric overflow in ") + what);
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (d_model <= 0 || n_state <= 0 || n_layers <= 0 || n_tokens_max <= 0 || stride_bits <= 0)
    throw ValidationError("EncoderConfig: dimensions must be positive");
  if (n_classes < 2) throw ValidationError("EncoderConfig.n_classes must be >= 2");
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  EncoderParams p;
  p.cfg = cfg;
  const int D = cfg.d_model, S = cfg.n_state, L = cfg.stride_bits;

  auto uniform_fill = [&](std::vector<double>& v, size_t n, double bound) {
    v.resize(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
  };
  auto normal_fill = [&](std::vector<double>& v, size_t n, double std_dev) {
    v.resize(n);
    for (auto& x : v) x = std_dev * rng.normal();
  };

  uniform_fill(p.W_proj, static_cast<size_t>(L) * D, std::sqrt(6.0 / (L + D)));
  normal_fill(p.pos, static_cast<size_t>(cfg.n_tokens_max) * D, 0.02);
  p.layers.resize(cfg.n_layers);
  for (auto& lp : p.layers) {
    // S4D-real style: state n decays at rate n+1.
    lp.A_log.resize(static_cast<size_t>(D) * S);
    for (int d = 0; d < D; ++d)
      for (int s = 0; s < S; ++s) lp.A_log[static_cast<size_t>(d) * S + s] = std::log(s + 1.0);
    uniform_fill(lp.W_B, static_cast<size_t>(D) * S, std::sqrt(6.0 / (D + S)));
    uniform_fill(lp.W_C, static_cast<size_t>(D) * S, std::sqrt(6.0 / (D + S)));
    uniform_fill(lp.W_delta, D, 0.01);
    lp.b_delta = std::log(std::expm1(0.1));  // softplus(b) = 0.1
  }
  p.cls_head.assign(static_cast<size_t>(D) * cfg.n_classes, 0.0);
  uniform_fill(p.recon_head, static_cast<size_t>(D) * L, std::sqrt(6.0 / (D + L)));
  normal_fill(p.mask_token, D, 0.02);
  return p;
}

EncoderParams EncoderParams::zeros_like(const EncoderConfig& cfg) {
  EncoderParams p;
  p.cfg = cfg;
  const int D = cfg.d_model, S = cfg.n_state, L = cfg.stride_bits;
  p.W_proj.assign(static_cast<size_t>(L) * D, 0.0);
  p.pos.assign(static_cast<size_t>(cfg.n_tokens_max) * D, 0.0);
  p.layers.resize(cfg.n_layers);
  for (auto& lp : p.layers) {
    lp.A_log.assign(static_cast<size_t>(D) * S, 0.0);
    lp.W_B.assign(static_cast<size_t>(D) * S, 0.0);
    lp.W_C.assign(static_cast<size_t>(D) * S, 0.0);
    lp.W_delta.assign(D, 0.0);
    lp.b_delta = 0.0;
  }
  p.cls_head.assign(static_cast<size_t>(D) * cfg.n_classes, 0.0);
  p.recon_head.assign(static_cast<size_t>(D) * L, 0.0);
  p.mask_token.assign(D, 0.0);
  return p;
}

void EncoderParams::validate() const {
  cfg.validate();
  const size_t D = cfg.d_model, S = cfg.n_state, L = cfg.stride_bits;
  if (W_proj.size() != L * D || pos.size() != static_cast<size_t>(cfg.n_tokens_max) * D ||
      layers.size() != static_cast<size_t>(cfg.n_layers) ||
      cls_head.size() != D * cfg.n_classes || recon_head.size() != D * L ||
      mask_token.size() != D)
    throw ValidationError("EncoderParams: tensor shapes do not match config");
  for (const auto& lp : layers) {
    if (lp.A_log.size() != D * S || lp.W_B.size() != D * S || lp.W_C.size() != D * S ||
        lp.W_delta.size() != D)
      throw ValidationError("EncoderParams: layer tensor shapes do not match config");
  }
  check_finite(W_proj, "EncoderParams");
}

std::vector<TensorRef> tensor_refs(EncoderParams& p) {
  std::vector<TensorRef> refs;
  const int D = p.cfg.d_model, S = p.cfg.n_state, L = p.cfg.stride_bits;
  auto vec = [&](const std::string& name, std::vector<double>& v, std::vector<int> shape) {
    refs.push_back({name, v.data(), v.size(), std::move(shape)});
  };
  vec("W_proj", p.W_proj, {L, D});
  vec("pos", p.pos, {p.cfg.n_tokens_max, D});
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    vec(base + "A_log", p.layers[l].A_log, {D, S});
    vec(base + "W_B", p.layers[l].W_B, {D, S});
    vec(base + "W_C", p.layers[l].W_C, {D, S});
    vec(base + "W_delta", p.layers[l].W_delta, {D});
    refs.push_back({base + "b_delta", &p.layers[l].b_delta, 1, {1}});
  }
  vec("cls_head", p.cls_head, {D, p.cfg.n_classes});
  vec("recon_head", p.recon_head, {D, L});
  vec("mask_token", p.mask_token, {D});
  return refs;
}

std::pair<double, double> discretize(double A_diag, double B, double delta) {
  if (delta < 0.0) throw ValidationError("discretize: delta must be >= 0");
  if (std::fabs(A_diag) <= 1e-12) {
    return {std::exp(delta * A_diag), delta * B};
  }
  const double e1 = std::expm1(delta * A_diag);
  return {1.0 + e1, e1 / A_diag * B};
}

// --- Forward machinery ----------------------------------------------------

namespace {

struct LayerCache {
  std::vector<double> x_in;      // N x D
  std::vector<double> u;         // N x D (post-norm scan input)
  std::vector<double> inv_std;   // N
  std::vector<double> b, c;      // N x S
  std::vector<double> delta_pre; // N
  std::vector<double> delta;     // N
  std::vector<double> h;         // N x D x S
  std::vector<double> ab, g;     // N x D x S
  std::vector<double> neg_A;     // D x S
};

}  // namespace

struct EncoderWorkspace {
  std::vector<LayerCache> layers;
  std::vector<double> x0;       // embed output, reused as the layer stream
  std::vector<double> x_final;  // N x D
  std::vector<uint8_t> masked;  // N
  std::vector<double> pooled, logits;
  // backward scratch
  std::vector<double> d_x, d_u;
  std::vector<double> dh;
  std::vector<double> db_tok, dc_tok;
};

EncoderWorkspace* workspace_create() { return new EncoderWorkspace(); }
void workspace_destroy(EncoderWorkspace* ws) { delete ws; }

namespace {

void layer_norm_token(const double* x, double* u, double* inv_std_out, int D) {
  double mean = 0.0;
  for (int d = 0; d < D; ++d) mean += x[d];
  mean /= D;
  double var = 0.0;
  for (int d = 0; d < D; ++d) {
    const double c = x[d] - mean;
    var += c * c;
  }
  var /= D;
  const double inv = 1.0 / std::sqrt(var + kNormEps);
  for (int d = 0; d < D; ++d) u[d] = (x[d] - mean) * inv;
  *inv_std_out = inv;
}

// Scan forward over pre-computed inputs u (N x D). When `cache` is set,
// stores everything the backward pass needs; otherwise keeps only a
// rolling state row.
void scan_forward(const double* u, int N, const LayerParams& lp, const EncoderConfig& cfg,
                  double* y_out, LayerCache* cache) {
  const int D = cfg.d_model, S = cfg.n_state;
  const size_t DS = static_cast<size_t>(D) * S;

  std::vector<double> neg_A_local;
  double* neg_A;
  if (cache) {
    cache->neg_A.resize(DS);
    neg_A = cache->neg_A.data();
  } else {
    neg_A_local.resize(DS);
    neg_A = neg_A_local.data();
  }
  for (size_t i = 0; i < DS; ++i) neg_A[i] = -std::exp(lp.A_log[i]);

  std::vector<double> h_roll;
  if (cache) {
    cache->b.resize(static_cast<size_t>(N) * S);
    cache->c.resize(static_cast<size_t>(N) * S);
    cache->delta_pre.resize(N);
    cache->delta.resize(N);
    cache->h.resize(static_cast<size_t>(N) * DS);
    cache->ab.resize(static_cast<size_t>(N) * DS);
    cache->g.resize(static_cast<size_t>(N) * DS);
  } else {
    h_roll.assign(DS, 0.0);
  }
  std::vector<double> b_tok(S), c_tok(S);

  for (int t = 0; t < N; ++t) {
    const double* u_t = u + static_cast<size_t>(t) * D;
    double* b_t = cache ? cache->b.data() + static_cast<size_t>(t) * S : b_tok.data();
    double* c_t = cache ? cache->c.data() + static_cast<size_t>(t) * S : c_tok.data();
    std::fill(b_t, b_t + S, 0.0);
    std::fill(c_t, c_t + S, 0.0);
    double dpre = lp.b_delta;
    for (int d = 0; d < D; ++d) {
      const double ud = u_t[d];
      const double* wb = lp.W_B.data() + static_cast<size_t>(d) * S;
      const double* wc = lp.W_C.data() + static_cast<size_t>(d) * S;
      for (int s = 0; s < S; ++s) {
        b_t[s] += ud * wb[s];
        c_t[s] += ud * wc[s];
      }
      dpre += ud * lp.W_delta[d];
    }
    const double delta = softplus(dpre);
    if (cache) {
      cache->delta_pre[t] = dpre;
      cache->delta[t] = delta;
    }

    double* h_t = cache ? cache->h.data() + static_cast<size_t>(t) * DS : h_roll.data();
    const double* h_prev =
        cache ? (t > 0 ? cache->h.data() + static_cast<size_t>(t - 1) * DS : nullptr)
              : h_roll.data();
    double* ab_t = cache ? cache->ab.data() + static_cast<size_t>(t) * DS : nullptr;
    double* g_t = cache ? cache->g.data() + static_cast<size_t>(t) * DS : nullptr;

    double* y_t = y_out + static_cast<size_t>(t) * D;
    for (int d = 0; d < D; ++d) {
      const double xd = u_t[d];
      const double* a_d = neg_A + static_cast<size_t>(d) * S;
      double* h_td = h_t + static_cast<size_t>(d) * S;
      const double* hp = (cache ? (t > 0 ? h_prev + static_cast<size_t>(d) * S : nullptr)
                                : h_td);  // rolling buffer aliases previous state
      double acc = 0.0;
      for (int s = 0; s < S; ++s) {
        const double a = a_d[s];
        const double e1 = std::expm1(delta * a);
        const double abv = 1.0 + e1;
        const double gv = a != 0.0 ? e1 / a : delta;
        const double prev = hp ? hp[s] : 0.0;
        const double hv = abv * prev + gv * b_t[s] * xd;
        h_td[s] = hv;
        acc += c_t[s] * hv;
        if (ab_t) {
          ab_t[static_cast<size_t>(d) * S + s] = abv;
          g_t[static_cast<size_t>(d) * S + s] = gv;
        }
      }
      y_t[d] = acc;
    }
  }
}

// Embeds strides into out (N x D); masked tokens use the mask embedding.
void embed_into(const StrideSequence& strides, const EncoderParams& p,
                const std::vector<uint8_t>& masked, std::vector<double>& out) {
  const EncoderConfig& cfg = p.cfg;
  const int N = strides.n_strides, D = cfg.d_model, Ls = cfg.stride_bits;
  if (strides.stride_bits != Ls)
    throw ValidationError("embed: stride length does not match encoder config");
  if (N > cfg.n_tokens_max) throw ValidationError("sequence exceeds positional table");
  if (N <= 0) throw ValidationError("embed: empty stride sequence");
  out.assign(static_cast<size_t>(N) * D, 0.0);
  for (int t = 0; t < N; ++t) {
    double* x_t = out.data() + static_cast<size_t>(t) * D;
    const double* pos_t = p.pos.data() + static_cast<size_t>(t) * D;
    if (!masked.empty() && masked[t]) {
      for (int d = 0; d < D; ++d) x_t[d] = p.mask_token[d] + pos_t[d];
      continue;
    }
    std::memcpy(x_t, pos_t, sizeof(double) * D);
    const uint8_t* bits = strides.stride(t);
    for (int j = 0; j < Ls; ++j) {
      if (!bits[j]) continue;
      const double* row = p.W_proj.data() + static_cast<size_t>(j) * D;
      for (int d = 0; d < D; ++d) x_t[d] += row[d];
    }
  }
}

// Runs embed + all layers, filling workspace caches when train=true.
void forward_trunk(const StrideSequence& strides, const EncoderParams& p,
                   const std::vector<int>* mask, EncoderWorkspace& ws, bool train) {
  const EncoderConfig& cfg = p.cfg;
  const int N = strides.n_strides, D = cfg.d_model;

  ws.masked.assign(N, 0);
  if (mask) {
    for (int idx : *mask) {
      if (idx < 0 || idx >= N) throw ValidationError("mask index out of range");
      ws.masked[idx] = 1;
    }
  }
  embed_into(strides, p, ws.masked, ws.x0);

  ws.layers.resize(cfg.n_layers);
  std::vector<double>& stream = ws.x_final;
  stream = ws.x0;
  std::vector<double> y(static_cast<size_t>(N) * D);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerCache& lc = ws.layers[l];
    LayerCache* cache = train ? &lc : nullptr;
    const double* scan_in;
    if (cfg.use_prenorm) {
      lc.u.resize(static_cast<size_t>(N) * D);
      lc.inv_std.resize(N);
      for (int t = 0; t < N; ++t)
        layer_norm_token(stream.data() + static_cast<size_t>(t) * D,
                         lc.u.data() + static_cast<size_t>(t) * D, &lc.inv_std[t], D);
      scan_in = lc.u.data();
    } else {
      if (train) lc.u = stream;
      scan_in = train ? lc.u.data() : stream.data();
    }
    if (train) lc.x_in = stream;
    scan_forward(scan_in, N, p.layers[l], cfg, y.data(), cache);
    if (cfg.use_residual) {
      for (size_t i = 0; i < stream.size(); ++i) stream[i] += y[i];
    } else {
      stream = y;
    }
  }
  check_finite(stream, "scan");
}

}  // namespace

std::vector<double> embed(const StrideSequence& strides, const EncoderParams& params) {
  params.validate();
  std::vector<double> out;
  embed_into(strides, params, {}, out);
  return out;
}

std::vector<double> selective_scan(const std::vector<double>& x, int n_tokens,
                                   const LayerParams& layer, const EncoderConfig& cfg) {
  cfg.validate();
  if (x.size() != static_cast<size_t>(n_tokens) * cfg.d_model)
    throw ValidationError("selective_scan: input size mismatch");
  check_finite(x, "scan input");
  std::vector<double> y(x.size());
  scan_forward(x.data(), n_tokens, layer, cfg, y.data(), nullptr);
  check_finite(y, "scan");
  return y;
}

ForwardResult forward(const StrideSequence& strides, const EncoderParams& params,
                      ForwardMode mode) {
  params.validate();
  WorkspaceHandle wsh;
  EncoderWorkspace& ws = *wsh.ws;
  forward_trunk(strides, params, nullptr, ws, false);
  const EncoderConfig& cfg = params.cfg;
  const int N = strides.n_strides, D = cfg.d_model;

  ForwardResult r;
  r.n_tokens = N;
  if (mode == ForwardMode::Classify) {
    r.logits.assign(cfg.n_classes, 0.0);
    std::vector<double> pooled(D, 0.0);
    for (int t = 0; t < N; ++t) {
      const double* x_t = ws.x_final.data() + static_cast<size_t>(t) * D;
      for (int d = 0; d < D; ++d) pooled[d] += x_t[d];
    }
    for (int d = 0; d < D; ++d) pooled[d] /= N;
    // Normalized pooled features condition the head the same way
    // regardless of backbone scale.
    std::vector<double> normed(D);
    double inv_std;
    layer_norm_token(pooled.data(), normed.data(), &inv_std, D);
    for (int d = 0; d < D; ++d) {
      const double* row = params.cls_head.data() + static_cast<size_t>(d) * cfg.n_classes;
      for (int k = 0; k < cfg.n_classes; ++k) r.logits[k] += normed[d] * row[k];
    }
  } else {
    const int Ls = cfg.stride_bits;
    r.recon.assign(static_cast<size_t>(N) * Ls, 0.0);
    for (int t = 0; t < N; ++t) {
      const double* x_t = ws.x_final.data() + static_cast<size_t>(t) * D;
      double* r_t = r.recon.data() + static_cast<size_t>(t) * Ls;
      for (int d = 0; d < D; ++d) {
        const double xd = x_t[d];
        const double* row = params.recon_head.data() + static_cast<size_t>(d) * Ls;
        for (int j = 0; j < Ls; ++j) r_t[j] += xd * row[j];
      }
    }
  }
  return r;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw ValidationError("softmax: empty logits");
  check_finite(logits, "softmax");
  const double zmax = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - zmax);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

double cross_entropy(const std::vector<double>& logits, int label) {
  if (label < 0 || static_cast<size_t>(label) >= logits.size())
    throw ValidationError("cross_entropy: label out of range");
  check_finite(logits, "cross_entropy");
  const double zmax = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - zmax);
  return std::log(total) - (logits[label] - zmax);
}

std::vector<int> sample_mask(int n_tokens, double mask_ratio, Rng& rng) {
  if (n_tokens <= 0) throw ValidationError("sample_mask: no tokens to mask");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw ValidationError("sample_mask: mask_ratio must be in (0, 1)");
  const int m = static_cast<int>(std::ceil(mask_ratio * n_tokens));
  std::vector<int> idx(n_tokens);
  for (int i = 0; i < n_tokens; ++i) idx[i] = i;
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(rng.below(n_tokens - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// --- Backward pass ----------------------------------------------------------

namespace {

// Backward through the layer stack and the embedding. d_x enters as
// d(loss)/d(final tokens) and the tensor gradients come out in `grad`.
void trunk_backward(const StrideSequence& strides, const EncoderParams& p,
                    EncoderGradients& grad, EncoderWorkspace& ws) {
  const EncoderConfig& cfg = p.cfg;
  const int N = strides.n_strides, D = cfg.d_model, S = cfg.n_state;
  const size_t DS = static_cast<size_t>(D) * S;
  std::vector<double>& d_x = ws.d_x;

  ws.d_u.assign(static_cast<size_t>(N) * D, 0.0);
  ws.dh.assign(DS, 0.0);
  ws.db_tok.assign(S, 0.0);
  ws.dc_tok.assign(S, 0.0);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerCache& lc = ws.layers[l];
    const LayerParams& lp = p.layers[l];
    LayerParams& gl = grad.layers[l];
    std::vector<double>& d_u = ws.d_u;
    std::fill(d_u.begin(), d_u.end(), 0.0);
    std::fill(ws.dh.begin(), ws.dh.end(), 0.0);

    for (int t = N - 1; t >= 0; --t) {
      const double* dy_t = d_x.data() + static_cast<size_t>(t) * D;
      const double* u_t = lc.u.data() + static_cast<size_t>(t) * D;
      const double* b_t = lc.b.data() + static_cast<size_t>(t) * S;
      const double* c_t = lc.c.data() + static_cast<size_t>(t) * S;
      const double* h_t = lc.h.data() + static_cast<size_t>(t) * DS;
      const double* h_prev = t > 0 ? lc.h.data() + static_cast<size_t>(t - 1) * DS : nullptr;
      const double* ab_t = lc.ab.data() + static_cast<size_t>(t) * DS;
      const double* g_t = lc.g.data() + static_cast<size_t>(t) * DS;
      const double delta = lc.delta[t];

      std::fill(ws.dc_tok.begin(), ws.dc_tok.end(), 0.0);
      std::fill(ws.db_tok.begin(), ws.db_tok.end(), 0.0);
      double ddelta = 0.0;

      for (int d = 0; d < D; ++d) {
        const double dyd = dy_t[d];
        const double xd = u_t[d];
        const double* a_d = lc.neg_A.data() + static_cast<size_t>(d) * S;
        const double* h_td = h_t + static_cast<size_t>(d) * S;
        const double* hp_td = h_prev ? h_prev + static_cast<size_t>(d) * S : nullptr;
        const double* ab_td = ab_t + static_cast<size_t>(d) * S;
        const double* g_td = g_t + static_cast<size_t>(d) * S;
        double* dh_d = ws.dh.data() + static_cast<size_t>(d) * S;
        double* gA_d = gl.A_log.data() + static_cast<size_t>(d) * S;
        double du_scan = 0.0;
        for (int s = 0; s < S; ++s) {
          ws.dc_tok[s] += dyd * h_td[s];
          const double dh_ds = dh_d[s] + dyd * c_t[s];
          const double prev = hp_td ? hp_td[s] : 0.0;
          const double abv = ab_td[s];
          const double gv = g_td[s];
          const double a = a_d[s];
          const double dab = dh_ds * prev;
          du_scan += dh_ds * gv * b_t[s];
          ws.db_tok[s] += dh_ds * xd * gv;
          const double dg = dh_ds * xd * b_t[s];
          ddelta += dab * a * abv + dg * abv;
          const double dg_da = a != 0.0 ? (delta * abv - gv) / a : 0.5 * delta * delta;
          const double da = dab * delta * abv + dg * dg_da;
          gA_d[s] += da * a;  // dA/dA_log = -exp(A_log) = a
          dh_d[s] = dh_ds * abv;
        }
        d_u[static_cast<size_t>(t) * D + d] += du_scan;
      }

      const double ddelta_pre = ddelta * sigmoid(lc.delta_pre[t]);
      gl.b_delta += ddelta_pre;
      for (int d = 0; d < D; ++d) {
        d_u[static_cast<size_t>(t) * D + d] += ddelta_pre * lp.W_delta[d];
        gl.W_delta[d] += ddelta_pre * u_t[d];
      }
      for (int d = 0; d < D; ++d) {
        const double ud = u_t[d];
        const double* wb = lp.W_B.data() + static_cast<size_t>(d) * S;
        const double* wc = lp.W_C.data() + static_cast<size_t>(d) * S;
        double* gwb = gl.W_B.data() + static_cast<size_t>(d) * S;
        double* gwc = gl.W_C.data() + static_cast<size_t>(d) * S;
        double du_acc = 0.0;
        for (int s = 0; s < S; ++s) {
          gwb[s] += ud * ws.db_tok[s];
          gwc[s] += ud * ws.dc_tok[s];
          du_acc += wb[s] * ws.db_tok[s] + wc[s] * ws.dc_tok[s];
        }
        d_u[static_cast<size_t>(t) * D + d] += du_acc;
      }
    }

    // Unwind prenorm and the residual connection: d_x becomes the
    // gradient with respect to this layer's input.
    for (int t = 0; t < N; ++t) {
      double* dx_t = d_x.data() + static_cast<size_t>(t) * D;
      const double* du_t = ws.d_u.data() + static_cast<size_t>(t) * D;
      if (cfg.use_prenorm) {
        const double* u_t = lc.u.data() + static_cast<size_t>(t) * D;
        const double inv = lc.inv_std[t];
        double mean_du = 0.0, mean_du_u = 0.0;
        for (int d = 0; d < D; ++d) {
          mean_du += du_t[d];
          mean_du_u += du_t[d] * u_t[d];
        }
        mean_du /= D;
        mean_du_u /= D;
        for (int d = 0; d < D; ++d) {
          const double dx_norm = inv * (du_t[d] - mean_du - u_t[d] * mean_du_u);
          dx_t[d] = (cfg.use_residual ? dx_t[d] : 0.0) + dx_norm;
        }
      } else {
        for (int d = 0; d < D; ++d) {
          dx_t[d] = (cfg.use_residual ? dx_t[d] : 0.0) + du_t[d];
        }
      }
    }
  }

  // Embedding backward.
  const int Ls = cfg.stride_bits;
  for (int t = 0; t < N; ++t) {
    const double* dx_t = d_x.data() + static_cast<size_t>(t) * D;
    double* gpos = grad.pos.data() + static_cast<size_t>(t) * D;
    for (int d = 0; d < D; ++d) gpos[d] += dx_t[d];
    if (ws.masked[t]) {
      for (int d = 0; d < D; ++d) grad.mask_token[d] += dx_t[d];
      continue;
    }
    const uint8_t* bits = strides.stride(t);
    for (int j = 0; j < Ls; ++j) {
      if (!bits[j]) continue;
      double* grow = grad.W_proj.data() + static_cast<size_t>(j) * D;
      for (int d = 0; d < D; ++d) grow[d] += dx_t[d];
    }
  }
}

}  // namespace

double ce_backward(const StrideSequence& strides, int label, const EncoderParams& params,
                   EncoderGradients& grad, EncoderWorkspace* ws_in) {
  const EncoderConfig& cfg = params.cfg;
  if (label < 0 || label >= cfg.n_classes)
    throw ValidationError("ce_backward: label out of range");
  WorkspaceHandle local;
  EncoderWorkspace& ws = ws_in ? *ws_in : *local.ws;
  forward_trunk(strides, params, nullptr, ws, true);
  const int N = strides.n_strides, D = cfg.d_model, K = cfg.n_classes;

  std::vector<double>& pooled = ws.pooled;
  pooled.assign(D, 0.0);
  for (int t = 0; t < N; ++t) {
    const double* x_t = ws.x_final.data() + static_cast<size_t>(t) * D;
    for (int d = 0; d < D; ++d) pooled[d] += x_t[d];
  }
  for (int d = 0; d < D; ++d) pooled[d] /= N;
  std::vector<double> normed(D);
  double inv_std;
  layer_norm_token(pooled.data(), normed.data(), &inv_std, D);

  std::vector<double>& logits = ws.logits;
  logits.assign(K, 0.0);
  for (int d = 0; d < D; ++d) {
    const double* row = params.cls_head.data() + static_cast<size_t>(d) * K;
    for (int k = 0; k < K; ++k) logits[k] += normed[d] * row[k];
  }
  const double loss = cross_entropy(logits, label);

  std::vector<double> dz = softmax(logits);
  dz[label] -= 1.0;

  std::vector<double> dnormed(D, 0.0);
  for (int d = 0; d < D; ++d) {
    const double* row = params.cls_head.data() + static_cast<size_t>(d) * K;
    double* grow = grad.cls_head.data() + static_cast<size_t>(d) * K;
    for (int k = 0; k < K; ++k) {
      grow[k] += normed[d] * dz[k];
      dnormed[d] += row[k] * dz[k];
    }
  }
  double mean_dn = 0.0, mean_dn_n = 0.0;
  for (int d = 0; d < D; ++d) {
    mean_dn += dnormed[d];
    mean_dn_n += dnormed[d] * normed[d];
  }
  mean_dn /= D;
  mean_dn_n /= D;
  ws.d_x.assign(static_cast<size_t>(N) * D, 0.0);
  for (int d = 0; d < D; ++d) {
    const double dpool = inv_std * (dnormed[d] - mean_dn - normed[d] * mean_dn_n);
    const double per_token = dpool / N;
    for (int t = 0; t < N; ++t) ws.d_x[static_cast<size_t>(t) * D + d] = per_token;
  }

  trunk_backward(strides, params, grad, ws);
  return loss;
}

double masked_backward(const StrideSequence& strides, const std::vector<int>& mask,
                       const EncoderParams& params, EncoderGradients& grad,
                       EncoderWorkspace* ws_in) {
  if (mask.empty()) throw ValidationError("masked_backward: empty mask");
  WorkspaceHandle local;
  EncoderWorkspace& ws = ws_in ? *ws_in : *local.ws;
  forward_trunk(strides, params, &mask, ws, true);
  const EncoderConfig& cfg = params.cfg;
  const int N = strides.n_strides, D = cfg.d_model, Ls = cfg.stride_bits;
  const double denom = static_cast<double>(mask.size()) * Ls;

  ws.d_x.assign(static_cast<size_t>(N) * D, 0.0);
  double loss = 0.0;
  std::vector<double> r_t(Ls), dr_t(Ls);
  for (int t : mask) {
    const double* x_t = ws.x_final.data() + static_cast<size_t>(t) * D;
    std::fill(r_t.begin(), r_t.end(), 0.0);
    for (int d = 0; d < D; ++d) {
      const double xd = x_t[d];
      const double* row = params.recon_head.data() + static_cast<size_t>(d) * Ls;
      for (int j = 0; j < Ls; ++j) r_t[j] += xd * row[j];
    }
    const uint8_t* bits = strides.stride(t);
    for (int j = 0; j < Ls; ++j) {
      const double err = r_t[j] - bits[j];
      loss += err * err;
      dr_t[j] = 2.0 * err / denom;
    }
    double* dx_t = ws.d_x.data() + static_cast<size_t>(t) * D;
    for (int d = 0; d < D; ++d) {
      const double xd = x_t[d];
      const double* row = params.recon_head.data() + static_cast<size_t>(d) * Ls;
      double* grow = grad.recon_head.data() + static_cast<size_t>(d) * Ls;
      double acc = 0.0;
      for (int j = 0; j < Ls; ++j) {
        grow[j] += xd * dr_t[j];
        acc += row[j] * dr_t[j];
      }
      dx_t[d] = acc;
    }
  }
  loss /= denom;

  trunk_backward(strides, params, grad, ws);
  return loss;
}

double masked_pretrain_loss(const StrideSequence& strides, double mask_ratio,
                            const EncoderParams& params, Rng& rng) {
  params.validate();
  const std::vector<int> mask = sample_mask(strides.n_strides, mask_ratio, rng);
  return masked_loss_with_mask(strides, mask, params);
}

double masked_loss_with_mask(const StrideSequence& strides, const std::vector<int>& mask,
                             const EncoderParams& params) {
  if (mask.empty()) throw ValidationError("masked loss: empty mask");
  WorkspaceHandle wsh;
  EncoderWorkspace& ws = *wsh.ws;
  forward_trunk(strides, params, &mask, ws, false);
  const EncoderConfig& cfg = params.cfg;
  const int D = cfg.d_model, Ls = cfg.stride_bits;
  double loss = 0.0;
  std::vector<double> r_t(Ls);
  for (int t : mask) {
    const double* x_t = ws.x_final.data() + static_cast<size_t>(t) * D;
    std::fill(r_t.begin(), r_t.end(), 0.0);
    for (int d = 0; d < D; ++d) {
      const double xd = x_t[d];
      const double* row = params.recon_head.data() + static_cast<size_t>(d) * Ls;
      for (int j = 0; j < Ls; ++j) r_t[j] += xd * row[j];
    }
    const uint8_t* bits = strides.stride(t);
    for (int j = 0; j < Ls; ++j) {
      const double err = r_t[j] - bits[j];
      loss += err * err;
    }
  }
  return loss / (static_cast<double>(mask.size()) * Ls);
}

// --- Checkpoints ------------------------------------------------------------

void save_checkpoint(const EncoderParams& params, const std::string& prefix) {
  params.validate();
  auto refs = tensor_refs(const_cast<EncoderParams&>(params));
  nlohmann::json manifest;
  manifest["format"] = "bandmod-ckpt-v1";
  manifest["config"] = {{"d_model", params.cfg.d_model},
                        {"n_state", params.cfg.n_state},
                        {"n_layers", params.cfg.n_layers},
                        {"n_tokens_max", params.cfg.n_tokens_max},
                        {"n_classes", params.cfg.n_classes},
                        {"stride_bits", params.cfg.stride_bits},
                        {"use_residual", params.cfg.use_residual},
                        {"use_prenorm", params.cfg.use_prenorm},
                        {"seed", params.cfg.seed}};
  nlohmann::json tensors = nlohmann::json::array();
  size_t offset = 0;

  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw RuntimeFault("cannot write checkpoint: " + prefix + ".bin");
  for (const auto& r : refs) {
    std::vector<float> f(r.size);
    for (size_t i = 0; i < r.size; ++i) f[i] = static_cast<float>(r.data[i]);
    bin.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(r.size * 4));
    tensors.push_back(
        {{"name", r.name}, {"shape", r.shape}, {"dtype", "f32"}, {"offset", offset}});
    offset += r.size * 4;
  }
  if (!bin.good()) throw RuntimeFault("checkpoint write failed: " + prefix + ".bin");
  bin.close();

  manifest["tensors"] = tensors;
  std::ofstream mf(prefix + ".json", std::ios::binary);
  if (!mf) throw RuntimeFault("cannot write checkpoint: " + prefix + ".json");
  mf << manifest.dump(2) << '\n';
}

EncoderParams load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".json", std::ios::binary);
  if (!mf) throw RuntimeFault("cannot open checkpoint: " + prefix + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "bandmod-ckpt-v1")
    throw ValidationError("checkpoint: unrecognized format");
  const auto& cj = manifest.at("config");
  EncoderConfig cfg;
  cfg.d_model = cj.at("d_model").get<int>();
  cfg.n_state = cj.at("n_state").get<int>();
  cfg.n_layers = cj.at("n_layers").get<int>();
  cfg.n_tokens_max = cj.at("n_tokens_max").get<int>();
  cfg.n_classes = cj.at("n_classes").get<int>();
  cfg.stride_bits = cj.at("stride_bits").get<int>();
  cfg.use_residual = cj.value("use_residual", true);
  cfg.use_prenorm = cj.value("use_prenorm", true);
  cfg.seed = cj.value("seed", 0ULL);
  EncoderParams params = EncoderParams::zeros_like(cfg);

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw RuntimeFault("cannot open checkpoint: " + prefix + ".bin");

  auto refs = tensor_refs(params);
  auto read_into = [&](const nlohmann::json& tj, double* dst, size_t expect) {
    size_t n = 1;
    for (const auto& d : tj.at("shape")) n *= d.get<size_t>();
    if (n != expect)
      throw ValidationError("checkpoint: tensor shape mismatch for " +
                            tj.at("name").get<std::string>());
    bin.seekg(static_cast<std::streamoff>(tj.at("offset").get<size_t>()));
    std::vector<float> f(n);
    bin.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * 4));
    if (!bin.good()) throw RuntimeFault("checkpoint blob truncated");
    for (size_t i = 0; i < n; ++i) dst[i] = f[i];
  };

  for (const auto& tj : manifest.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    bool found = false;
    for (auto& r : refs) {
      if (r.name == name) {
        read_into(tj, r.data, r.size);
        found = true;
        break;
      }
    }
    if (!found) throw ValidationError("checkpoint: unexpected tensor " + name);
  }
  params.validate();
  return params;
}

}  // namespace bandmod
