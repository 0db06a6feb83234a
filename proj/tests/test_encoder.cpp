#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bandmod/encoder.hpp"
#include "bandmod/errors.hpp"
#include "bandmod/rng.hpp"

using namespace bandmod;

namespace {

EncoderConfig tiny_config(uint64_t seed = 1) {
  EncoderConfig cfg;
  cfg.d_model = 4;
  cfg.n_state = 2;
  cfg.n_layers = 1;
  cfg.n_tokens_max = 8;
  cfg.n_classes = 4;
  cfg.stride_bits = 8;
  cfg.seed = seed;
  return cfg;
}

StrideSequence random_strides(int n_tokens, int stride_bits, uint64_t seed) {
  StrideSequence s;
  s.n_strides = n_tokens;
  s.stride_bits = stride_bits;
  s.bits.resize(static_cast<size_t>(n_tokens) * stride_bits);
  Rng rng(seed);
  for (auto& b : s.bits) b = rng.bernoulli(0.4) ? 1 : 0;
  return s;
}

// Direct transcription of the discrete recurrence, kept independent of
// the production scan (explicit exp/expm-free formulas, per-token loop).
std::vector<double> naive_scan(const std::vector<double>& x, int N, const LayerParams& lp,
                               const EncoderConfig& cfg) {
  const int D = cfg.d_model, S = cfg.n_state;
  std::vector<double> y(static_cast<size_t>(N) * D, 0.0);
  std::vector<double> h(static_cast<size_t>(D) * S, 0.0);
  for (int t = 0; t < N; ++t) {
    std::vector<double> b(S, 0.0), c(S, 0.0);
    double dpre = lp.b_delta;
    for (int d = 0; d < D; ++d) {
      for (int s = 0; s < S; ++s) {
        b[s] += x[t * D + d] * lp.W_B[d * S + s];
        c[s] += x[t * D + d] * lp.W_C[d * S + s];
      }
      dpre += x[t * D + d] * lp.W_delta[d];
    }
    const double delta = std::log1p(std::exp(dpre));
    for (int d = 0; d < D; ++d) {
      double acc = 0.0;
      for (int s = 0; s < S; ++s) {
        const double a = -std::exp(lp.A_log[d * S + s]);
        const double a_bar = std::exp(delta * a);
        const double b_bar = (std::exp(delta * a) - 1.0) / a * b[s];
        h[d * S + s] = a_bar * h[d * S + s] + b_bar * x[t * D + d];
        acc += c[s] * h[d * S + s];
      }
      y[t * D + d] = acc;
    }
  }
  return y;
}

}  // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("zero-order hold discretization") {
  // A in the epsilon ball: series limit.
  auto [a0, b0] = discretize(1e-15, 2.0, 0.5);
  CHECK(a0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(b0 == doctest::Approx(1.0).epsilon(1e-12));
  // delta = 0: identity transition, no input coupling.
  auto [a1, b1] = discretize(-3.0, 5.0, 0.0);
  CHECK(a1 == 1.0);
  CHECK(b1 == 0.0);
  // Worked point.
  auto [a2, b2] = discretize(-1.0, 1.0, std::log(2.0));
  CHECK(a2 == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(b2 == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(discretize(-1.0, 1.0, -0.1), ValidationError);
}

TEST_CASE("discrete transition magnitude stays below one") {
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double a_log = rng.uniform(-4.0, 4.0);
    const double delta = rng.uniform(1e-4, 10.0);
    auto [a_bar, b_bar] = discretize(-std::exp(a_log), 1.0, delta);
    CHECK(std::fabs(a_bar) < 1.0);
    (void)b_bar;
  }
}

TEST_CASE("embedding adds projection and positional terms") {
  const EncoderConfig cfg = tiny_config();
  EncoderParams p = EncoderParams::init(cfg);

  StrideSequence zeros = random_strides(3, cfg.stride_bits, 1);
  std::fill(zeros.bits.begin(), zeros.bits.end(), 0);
  const auto x = embed(zeros, p);
  for (int t = 0; t < 3; ++t) {
    for (int d = 0; d < cfg.d_model; ++d)
      CHECK(x[t * cfg.d_model + d] == p.pos[t * cfg.d_model + d]);
  }

  EncoderParams zp = EncoderParams::zeros_like(cfg);
  const auto xz = embed(random_strides(3, cfg.stride_bits, 2), zp);
  for (double v : xz) CHECK(v == 0.0);

  // Brute-force oracle on a 4x8 case.
  const StrideSequence s = random_strides(4, cfg.stride_bits, 3);
  const auto got = embed(s, p);
  for (int t = 0; t < 4; ++t) {
    for (int d = 0; d < cfg.d_model; ++d) {
      double want = p.pos[t * cfg.d_model + d];
      for (int j = 0; j < cfg.stride_bits; ++j)
        want += s.bits[t * cfg.stride_bits + j] * p.W_proj[j * cfg.d_model + d];
      CHECK(got[t * cfg.d_model + d] == doctest::Approx(want).epsilon(1e-14));
    }
  }
}

TEST_CASE("embedding rejects sequences beyond the positional table") {
  const EncoderConfig cfg = tiny_config();
  EncoderParams p = EncoderParams::init(cfg);
  CHECK_THROWS_WITH_AS(embed(random_strides(9, cfg.stride_bits, 1), p),
                       doctest::Contains("positional table"), ValidationError);
}

TEST_CASE("selective scan on zero input returns zeros") {
  const EncoderConfig cfg = tiny_config();
  const EncoderParams p = EncoderParams::init(cfg);
  std::vector<double> x(5 * cfg.d_model, 0.0);
  for (double v : selective_scan(x, 5, p.layers[0], cfg)) CHECK(v == 0.0);
}

TEST_CASE("single token matches the closed form") {
  const EncoderConfig cfg = tiny_config(3);
  const EncoderParams p = EncoderParams::init(cfg);
  Rng rng(12);
  std::vector<double> x(cfg.d_model);
  for (auto& v : x) v = rng.uniform(-1, 1);
  const auto y = selective_scan(x, 1, p.layers[0], cfg);

  const LayerParams& lp = p.layers[0];
  std::vector<double> b(cfg.n_state, 0.0), c(cfg.n_state, 0.0);
  double dpre = lp.b_delta;
  for (int d = 0; d < cfg.d_model; ++d) {
    for (int s = 0; s < cfg.n_state; ++s) {
      b[s] += x[d] * lp.W_B[d * cfg.n_state + s];
      c[s] += x[d] * lp.W_C[d * cfg.n_state + s];
    }
    dpre += x[d] * lp.W_delta[d];
  }
  const double delta = std::log1p(std::exp(dpre));
  for (int d = 0; d < cfg.d_model; ++d) {
    double want = 0.0;
    for (int s = 0; s < cfg.n_state; ++s) {
      auto [a_bar, b_bar] = discretize(-std::exp(lp.A_log[d * cfg.n_state + s]), b[s], delta);
      (void)a_bar;
      want += c[s] * b_bar * x[d];
    }
    CHECK(y[d] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("scan equals the naive recurrence over random configs") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    EncoderConfig cfg = tiny_config(seed);
    cfg.d_model = 3;
    cfg.n_state = 2;
    const EncoderParams p = EncoderParams::init(cfg);
    Rng rng(100 + seed);
    const int N = 6;
    std::vector<double> x(static_cast<size_t>(N) * cfg.d_model);
    for (auto& v : x) v = rng.uniform(-2, 2);
    const auto got = selective_scan(x, N, p.layers[0], cfg);
    const auto want = naive_scan(x, N, p.layers[0], cfg);
    for (size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("softmax basics") {
  const auto u = softmax({0, 0, 0, 0});
  for (double v : u) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  const auto shifted = softmax({7.3, 7.3, 7.3, 7.3});
  for (double v : shifted) CHECK(v == doctest::Approx(0.25).epsilon(1e-13));
  Rng rng(5);
  std::vector<double> z(6);
  for (auto& v : z) v = rng.uniform(-30, 30);
  const auto p = softmax(z);
  double total = 0.0;
  for (double v : p) total += v;
  CHECK(std::fabs(total - 1.0) <= 1e-12);
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy({50, 0, 0, 0}, 0) <= 1e-20);
  CHECK(cross_entropy({1, 1, 1, 1}, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-5, 5);
    const int y = static_cast<int>(rng.below(4));
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    const double naive = -std::log(std::exp(z[y]) / denom);
    CHECK(cross_entropy(z, y) == doctest::Approx(naive).epsilon(1e-12));
  }
  CHECK_THROWS_AS(cross_entropy({0, 0}, 2), ValidationError);
}

TEST_CASE("mask sampling takes the ceiling") {
  Rng rng(4);
  CHECK(sample_mask(10, 0.9, rng).size() == 9);
  CHECK(sample_mask(1, 0.9, rng).size() == 1);
  CHECK(sample_mask(3, 0.5, rng).size() == 2);
  auto m = sample_mask(64, 0.9, rng);
  CHECK(m.size() == 58);  // ceil(0.9*64)
  for (size_t i = 1; i < m.size(); ++i) CHECK(m[i] > m[i - 1]);
}

TEST_CASE("masked loss on a hand-computed toy case") {
  EncoderConfig cfg = tiny_config();
  cfg.d_model = 2;
  cfg.n_state = 1;
  cfg.stride_bits = 4;
  // All-zero parameters: the reconstruction is identically zero, so the
  // loss is the mean of the squared masked bits.
  const EncoderParams p = EncoderParams::zeros_like(cfg);
  StrideSequence s;
  s.n_strides = 3;
  s.stride_bits = 4;
  s.bits = {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 1};
  const double loss = masked_loss_with_mask(s, {0, 2}, p);
  CHECK(loss == doctest::Approx(7.0 / 8.0).epsilon(1e-15));

  // Perfect reconstruction (all-zero bits, zero output) gives zero loss.
  StrideSequence z = s;
  std::fill(z.bits.begin(), z.bits.end(), 0);
  CHECK(masked_loss_with_mask(z, {0, 2}, p) == 0.0);
}

TEST_CASE("gradients match central finite differences") {
  EncoderConfig cfg = tiny_config(7);
  cfg.n_layers = 1;
  EncoderParams params = EncoderParams::init(cfg);
  const StrideSequence s = random_strides(6, cfg.stride_bits, 44);
  const std::vector<int> mask = {0, 3, 5};
  const int label = 2;
  const double h = 1e-5;

  auto ce_loss = [&](EncoderParams& p) {
    return cross_entropy(forward(s, p, ForwardMode::Classify).logits, label);
  };
  auto mse_loss = [&](EncoderParams& p) { return masked_loss_with_mask(s, mask, p); };

  for (int objective = 0; objective < 2; ++objective) {
    EncoderGradients grads = EncoderParams::zeros_like(cfg);
    if (objective == 0) {
      ce_backward(s, label, params, grads);
    } else {
      masked_backward(s, mask, params, grads);
    }
    auto prefs = tensor_refs(params);
    auto grefs = tensor_refs(grads);
    for (size_t r = 0; r < prefs.size(); ++r) {
      for (size_t j = 0; j < prefs[r].size; ++j) {
        const double saved = prefs[r].data[j];
        prefs[r].data[j] = saved + h;
        const double up = objective == 0 ? ce_loss(params) : mse_loss(params);
        prefs[r].data[j] = saved - h;
        const double dn = objective == 0 ? ce_loss(params) : mse_loss(params);
        prefs[r].data[j] = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double got = grefs[r].data[j];
        const double err =
            std::fabs(got - fd) / std::max({std::fabs(got), std::fabs(fd), 1e-6});
        INFO(prefs[r].name << "[" << j << "] got " << got << " fd " << fd);
        CHECK(err <= 1e-4);
      }
    }
  }
}

TEST_CASE("objective-independent tensors get exactly zero gradient") {
  const EncoderConfig cfg = tiny_config(9);
  EncoderParams params = EncoderParams::init(cfg);
  const StrideSequence s = random_strides(5, cfg.stride_bits, 3);

  EncoderGradients g1 = EncoderParams::zeros_like(cfg);
  ce_backward(s, 1, params, g1);
  for (double v : g1.recon_head) CHECK(v == 0.0);
  for (double v : g1.mask_token) CHECK(v == 0.0);

  EncoderGradients g2 = EncoderParams::zeros_like(cfg);
  masked_backward(s, {0, 2}, params, g2);
  for (double v : g2.cls_head) CHECK(v == 0.0);

  // All-zero input bits never touch the projection rows.
  StrideSequence z = s;
  std::fill(z.bits.begin(), z.bits.end(), 0);
  EncoderGradients g3 = EncoderParams::zeros_like(cfg);
  ce_backward(z, 0, params, g3);
  for (double v : g3.W_proj) CHECK(v == 0.0);
}

TEST_CASE("non-finite activations raise a scan overflow error") {
  const EncoderConfig cfg = tiny_config(2);
  EncoderParams params = EncoderParams::init(cfg);
  for (auto& v : params.W_proj) v = 1e308;
  for (auto& v : params.pos) v = 1e308;
  const StrideSequence s = random_strides(4, cfg.stride_bits, 5);
  CHECK_THROWS_WITH_AS(forward(s, params, ForwardMode::Classify),
                       doctest::Contains("overflow"), RuntimeFault);
}

TEST_CASE("checkpoint round trip preserves tensors at fp32 precision") {
  const EncoderConfig cfg = tiny_config(11);
  EncoderParams params = EncoderParams::init(cfg);
  const std::string prefix =
      (std::filesystem::temp_directory_path() / "bandmod_ckpt_test").string();
  save_checkpoint(params, prefix);
  EncoderParams loaded = load_checkpoint(prefix);

  auto a = tensor_refs(params);
  auto b = tensor_refs(loaded);
  REQUIRE(a.size() == b.size());
  for (size_t r = 0; r < a.size(); ++r) {
    REQUIRE(a[r].size == b[r].size);
    for (size_t j = 0; j < a[r].size; ++j) {
      CHECK(b[r].data[j] ==
            doctest::Approx(a[r].data[j]).epsilon(1e-6).scale(std::fabs(a[r].data[j]) + 1.0));
    }
  }

  // Tampered manifest shapes must be rejected.
  const StrideSequence s = random_strides(4, cfg.stride_bits, 5);
  const auto before = forward(s, params, ForwardMode::Classify).logits;
  const auto after = forward(s, loaded, ForwardMode::Classify).logits;
  for (size_t k = 0; k < before.size(); ++k)
    CHECK(after[k] == doctest::Approx(before[k]).epsilon(1e-5));
}

TEST_SUITE_END();
