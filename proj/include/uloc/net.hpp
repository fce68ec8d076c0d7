#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "uloc/core.hpp"
#include "uloc/linalg.hpp"
#include "uloc/rng.hpp"
#include "uloc/sample.hpp"

namespace uloc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct NetConfig {
  std::size_t image_dim = 16;
  std::size_t scan_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t encoder_depth = 2;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  std::size_t fused_dim() const { return 2 * hidden_dim; }

  void validate() const {
    if (image_dim == 0 || scan_dim == 0 || hidden_dim == 0 || num_heads == 0 ||
        encoder_depth == 0) {
      throw ConfigError("NetConfig: all dimensions must be positive");
    }
    if (hidden_dim % num_heads != 0) {
      throw ConfigError("NetConfig: hidden_dim must be divisible by num_heads");
    }
  }

  bool operator==(const NetConfig&) const = default;
};

struct DropoutSpec {
  double rate = 0.2;  // applied to the flattened self-attention output

  void validate() const {
    if (!(rate >= 0.0 && rate < 1.0)) {
      throw ConfigError("DropoutSpec: rate must be in [0, 1)");
    }
  }
};

// Keep/drop flags for the fused activation vector. Kept units are scaled by
// 1/(1-rate) so the expected activation matches the deterministic network.
struct DropoutMask {
  std::vector<std::uint8_t> keep;
  double rate = 0.0;

  double scale() const { return 1.0 / (1.0 - rate); }
};

inline DropoutMask sample_dropout_mask(std::mt19937_64& rng, std::size_t n, double rate) {
  DropoutMask m;
  m.rate = rate;
  m.keep.resize(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) m.keep[i] = u(rng) >= rate ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct DenseLayer {
  Matrix w;  // out x in
  Matrix b;  // out x 1
};

struct AttentionHead {
  Matrix wq, wk, wv;  // hidden x head_dim each
};

struct ModelParams {
  NetConfig config;
  std::vector<DenseLayer> enc_image;
  std::vector<DenseLayer> enc_scan;
  std::vector<AttentionHead> heads;
  Matrix attn_out;  // hidden x hidden
  DenseLayer head_p;   // 2 x fused
  DenseLayer head_sp;  // 1 x fused
  DenseLayer head_q;   // 2 x fused
  DenseLayer head_sq;  // 1 x fused

  template <class F>
  void for_each_tensor(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto layer = [&](const std::string& prefix, auto& layers) {
      for (std::size_t l = 0; l < layers.size(); ++l) {
        f(prefix + "." + std::to_string(l) + ".w", layers[l].w);
        f(prefix + "." + std::to_string(l) + ".b", layers[l].b);
      }
    };
    layer("enc_image", self.enc_image);
    layer("enc_scan", self.enc_scan);
    for (std::size_t h = 0; h < self.heads.size(); ++h) {
      const std::string p = "attn.head" + std::to_string(h);
      f(p + ".wq", self.heads[h].wq);
      f(p + ".wk", self.heads[h].wk);
      f(p + ".wv", self.heads[h].wv);
    }
    f("attn.out", self.attn_out);
    f("head_p.w", self.head_p.w);
    f("head_p.b", self.head_p.b);
    f("head_sp.w", self.head_sp.w);
    f("head_sp.b", self.head_sp.b);
    f("head_q.w", self.head_q.w);
    f("head_q.b", self.head_q.b);
    f("head_sq.w", self.head_sq.w);
    f("head_sq.b", self.head_sq.b);
  }
};

inline ModelParams make_params(const NetConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  auto make_encoder = [&](std::size_t in_dim) {
    std::vector<DenseLayer> layers;
    std::size_t in = in_dim;
    for (std::size_t l = 0; l < cfg.encoder_depth; ++l) {
      layers.push_back({Matrix(cfg.hidden_dim, in), Matrix(cfg.hidden_dim, 1)});
      in = cfg.hidden_dim;
    }
    return layers;
  };
  p.enc_image = make_encoder(cfg.image_dim);
  p.enc_scan = make_encoder(cfg.scan_dim);
  p.heads.resize(cfg.num_heads);
  for (auto& h : p.heads) {
    h.wq = Matrix(cfg.hidden_dim, cfg.head_dim());
    h.wk = Matrix(cfg.hidden_dim, cfg.head_dim());
    h.wv = Matrix(cfg.hidden_dim, cfg.head_dim());
  }
  p.attn_out = Matrix(cfg.hidden_dim, cfg.hidden_dim);
  p.head_p = {Matrix(2, cfg.fused_dim()), Matrix(2, 1)};
  p.head_sp = {Matrix(1, cfg.fused_dim()), Matrix(1, 1)};
  p.head_q = {Matrix(2, cfg.fused_dim()), Matrix(2, 1)};
  p.head_sq = {Matrix(1, cfg.fused_dim()), Matrix(1, 1)};
  return p;
}

inline ModelParams zeros_like(const ModelParams& p) { return make_params(p.config); }

// Xavier-uniform weights; zero biases. The s-heads start near zero so the
// initial predicted variances stay close to 1 and exp(-s) cannot blow up.
inline ModelParams init_params(const NetConfig& cfg, std::uint64_t seed) {
  ModelParams p = make_params(cfg);
  auto rng = make_rng(seed);
  auto fill_uniform = [&](Matrix& m, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : m.a) v = u(rng);
  };
  auto xavier = [&](Matrix& m, std::size_t fan_in, std::size_t fan_out) {
    fill_uniform(m, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  };
  for (auto* enc : {&p.enc_image, &p.enc_scan}) {
    for (auto& l : *enc) xavier(l.w, l.w.cols, l.w.rows);
  }
  for (auto& h : p.heads) {
    xavier(h.wq, cfg.hidden_dim, cfg.head_dim());
    xavier(h.wk, cfg.hidden_dim, cfg.head_dim());
    xavier(h.wv, cfg.hidden_dim, cfg.head_dim());
  }
  xavier(p.attn_out, cfg.hidden_dim, cfg.hidden_dim);
  xavier(p.head_p.w, cfg.fused_dim(), 2);
  xavier(p.head_q.w, cfg.fused_dim(), 2);
  fill_uniform(p.head_sp.w, 0.01);
  fill_uniform(p.head_sq.w, 0.01);
  return p;
}

// Returns the name of the first non-finite tensor, or empty string.
inline std::string first_non_finite(const ModelParams& p) {
  std::string bad;
  p.for_each_tensor([&](const std::string& name, const Matrix& m) {
    if (!bad.empty()) return;
    for (double v : m.a) {
      if (!std::isfinite(v)) {
        bad = name;
        return;
      }
    }
  });
  return bad;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// Intermediate activations kept for the analytic backward pass.
struct ForwardCache {
  Vec image_in, scan_in;
  std::vector<Vec> image_act;  // per encoder layer, post-tanh
  std::vector<Vec> scan_act;
  std::vector<Matrix> q, k, v;  // per head: 2 x head_dim
  std::vector<Matrix> attn;     // per head: 2 x 2 row-softmax weights
  Matrix concat;                // 2 x hidden, heads concatenated
  Matrix proj;                  // 2 x hidden, after output projection
  Vec fused;                    // flattened proj, length 2*hidden
  Vec fused_dropped;            // after dropout mask + inverted scaling
  RawPoseOutput out;
};

namespace detail {

inline Vec dense_tanh(const DenseLayer& l, const Vec& x) {
  Vec y = matvec(l.w, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(y[i] + l.b(i, 0));
  return y;
}

inline Vec dense_linear(const DenseLayer& l, const Vec& x) {
  Vec y = matvec(l.w, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += l.b(i, 0);
  return y;
}

inline Vec matrix_row(const Matrix& m, std::size_t r) {
  return Vec(m.a.begin() + r * m.cols, m.a.begin() + (r + 1) * m.cols);
}

}  // namespace detail

inline ForwardCache forward_cached(const ModelParams& params, const Vec& image_feat,
                                   const Vec& scan_feat,
                                   const DropoutMask* mask = nullptr) {
  const NetConfig& cfg = params.config;
  if (image_feat.size() != cfg.image_dim) {
    throw ConfigError("forward: image feature dim " + std::to_string(image_feat.size()) +
                      " does not match config " + std::to_string(cfg.image_dim));
  }
  if (scan_feat.size() != cfg.scan_dim) {
    throw ConfigError("forward: scan feature dim " + std::to_string(scan_feat.size()) +
                      " does not match config " + std::to_string(cfg.scan_dim));
  }
  if (mask != nullptr && mask->keep.size() != cfg.fused_dim()) {
    throw ConfigError("forward: dropout mask size does not match fused dim");
  }

  ForwardCache c;
  c.image_in = image_feat;
  c.scan_in = scan_feat;

  Vec tok = image_feat;
  for (const auto& l : params.enc_image) {
    tok = detail::dense_tanh(l, tok);
    c.image_act.push_back(tok);
  }
  Vec tok2 = scan_feat;
  for (const auto& l : params.enc_scan) {
    tok2 = detail::dense_tanh(l, tok2);
    c.scan_act.push_back(tok2);
  }

  const Vec& u = c.image_act.back();
  const Vec& v = c.scan_act.back();
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

  c.concat = Matrix(2, cfg.hidden_dim);
  c.q.reserve(cfg.num_heads);
  c.k.reserve(cfg.num_heads);
  c.v.reserve(cfg.num_heads);
  c.attn.reserve(cfg.num_heads);

  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const auto& head = params.heads[h];
    Matrix qm(2, hd), km(2, hd), vm(2, hd);
    const Vec* tokens[2] = {&u, &v};
    for (std::size_t r = 0; r < 2; ++r) {
      const Vec qr = tmatvec(head.wq, *tokens[r]);
      const Vec kr = tmatvec(head.wk, *tokens[r]);
      const Vec vr = tmatvec(head.wv, *tokens[r]);
      for (std::size_t j = 0; j < hd; ++j) {
        qm(r, j) = qr[j];
        km(r, j) = kr[j];
        vm(r, j) = vr[j];
      }
    }
    // scores and row softmax over the 2-token axis
    Matrix am(2, 2);
    for (std::size_t r = 0; r < 2; ++r) {
      double s0 = 0.0, s1 = 0.0;
      for (std::size_t j = 0; j < hd; ++j) {
        s0 += qm(r, j) * km(0, j);
        s1 += qm(r, j) * km(1, j);
      }
      s0 *= inv_sqrt_d;
      s1 *= inv_sqrt_d;
      const double m = std::max(s0, s1);
      const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
      const double z = e0 + e1;
      am(r, 0) = e0 / z;
      am(r, 1) = e1 / z;
    }
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t j = 0; j < hd; ++j) {
        c.concat(r, h * hd + j) = am(r, 0) * vm(0, j) + am(r, 1) * vm(1, j);
      }
    }
    c.q.push_back(std::move(qm));
    c.k.push_back(std::move(km));
    c.v.push_back(std::move(vm));
    c.attn.push_back(std::move(am));
  }

  c.proj = Matrix(2, cfg.hidden_dim);
  for (std::size_t r = 0; r < 2; ++r) {
    const Vec row = detail::matrix_row(c.concat, r);
    const Vec pr = tmatvec(params.attn_out, row);
    for (std::size_t j = 0; j < cfg.hidden_dim; ++j) c.proj(r, j) = pr[j];
  }

  c.fused.resize(cfg.fused_dim());
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < cfg.hidden_dim; ++j) {
      c.fused[r * cfg.hidden_dim + j] = c.proj(r, j);
    }
  }

  c.fused_dropped = c.fused;
  if (mask != nullptr) {
    const double s = mask->scale();
    for (std::size_t i = 0; i < c.fused_dropped.size(); ++i) {
      c.fused_dropped[i] = mask->keep[i] ? c.fused_dropped[i] * s : 0.0;
    }
  }

  const Vec p_out = detail::dense_linear(params.head_p, c.fused_dropped);
  const Vec sp_out = detail::dense_linear(params.head_sp, c.fused_dropped);
  const Vec q_out = detail::dense_linear(params.head_q, c.fused_dropped);
  const Vec sq_out = detail::dense_linear(params.head_sq, c.fused_dropped);
  c.out.p_hat = {p_out[0], p_out[1]};
  c.out.q_hat = {q_out[0], q_out[1]};
  c.out.s_p = sp_out[0];
  c.out.s_q = sq_out[0];
  return c;
}

inline RawPoseOutput forward(const ModelParams& params, const Vec& image_feat,
                             const Vec& scan_feat, const DropoutMask* mask = nullptr) {
  return forward_cached(params, image_feat, scan_feat, mask).out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// (1/2N) sum[exp(-s_p)|p - p_hat|^2 + s_p] + (1/2N) sum[exp(-s_q)|q - q_hat|^2 + s_q]
inline double heteroscedastic_loss(const std::vector<RawPoseOutput>& outputs,
                                   const std::vector<Pose2D>& truths) {
  if (outputs.empty()) throw EmptySample("loss: empty batch");
  if (outputs.size() != truths.size()) {
    throw ConfigError("loss: outputs/truths size mismatch");
  }
  const double n = static_cast<double>(outputs.size());
  double acc_p = 0.0, acc_q = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    const auto& t = truths[i];
    if (!o.finite() || !std::isfinite(t.x) || !std::isfinite(t.y) ||
        !std::isfinite(t.q[0]) || !std::isfinite(t.q[1])) {
      throw DomainError("loss: non-finite batch element " + std::to_string(i));
    }
    const double rp = (t.x - o.p_hat[0]) * (t.x - o.p_hat[0]) +
                      (t.y - o.p_hat[1]) * (t.y - o.p_hat[1]);
    const double rq = (t.q[0] - o.q_hat[0]) * (t.q[0] - o.q_hat[0]) +
                      (t.q[1] - o.q_hat[1]) * (t.q[1] - o.q_hat[1]);
    acc_p += std::exp(-o.s_p) * rp + o.s_p;
    acc_q += std::exp(-o.s_q) * rq + o.s_q;
  }
  return acc_p / (2.0 * n) + acc_q / (2.0 * n);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

struct BatchGradient {
  double loss = 0.0;
  ModelParams grad;
};

namespace detail {

// Accumulates d(loss)/d(params) for one sample given its forward cache.
// d_out holds the loss gradients w.r.t. (p_hat, s_p, q_hat, s_q).
struct OutputGrad {
  Vec2 d_p{0.0, 0.0};
  double d_sp = 0.0;
  Vec2 d_q{0.0, 0.0};
  double d_sq = 0.0;
};

inline void backward_sample(const ModelParams& params, const ForwardCache& c,
                            const OutputGrad& d_out, const DropoutMask* mask,
                            ModelParams& g) {
  const NetConfig& cfg = params.config;
  const std::size_t H = cfg.hidden_dim;
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

  // heads
  const Vec& zd = c.fused_dropped;
  Vec d_zd(zd.size(), 0.0);
  auto head_back = [&](const DenseLayer& head, DenseLayer& gh, const double* dy,
                       std::size_t out_dim) {
    for (std::size_t r = 0; r < out_dim; ++r) {
      gh.b(r, 0) += dy[r];
      double* grow = &gh.w.a[r * gh.w.cols];
      const double* wrow = &head.w.a[r * head.w.cols];
      for (std::size_t cix = 0; cix < zd.size(); ++cix) {
        grow[cix] += dy[r] * zd[cix];
        d_zd[cix] += wrow[cix] * dy[r];
      }
    }
  };
  head_back(params.head_p, g.head_p, d_out.d_p.data(), 2);
  head_back(params.head_sp, g.head_sp, &d_out.d_sp, 1);
  head_back(params.head_q, g.head_q, d_out.d_q.data(), 2);
  head_back(params.head_sq, g.head_sq, &d_out.d_sq, 1);

  // dropout
  Vec d_fused = std::move(d_zd);
  if (mask != nullptr) {
    const double s = mask->scale();
    for (std::size_t i = 0; i < d_fused.size(); ++i) {
      d_fused[i] = mask->keep[i] ? d_fused[i] * s : 0.0;
    }
  }

  // output projection: proj_r = attn_out^T concat_r
  Matrix d_concat(2, H);
  for (std::size_t r = 0; r < 2; ++r) {
    const Vec d_proj_r(d_fused.begin() + r * H, d_fused.begin() + (r + 1) * H);
    const Vec concat_r = matrix_row(c.concat, r);
    add_outer(g.attn_out, concat_r, d_proj_r);
    const Vec d_concat_r = matvec(params.attn_out, d_proj_r);
    for (std::size_t j = 0; j < H; ++j) d_concat(r, j) = d_concat_r[j];
  }

  // attention heads
  Vec d_u(H, 0.0), d_v(H, 0.0);
  const Vec& u = c.image_act.back();
  const Vec& v = c.scan_act.back();
  const Vec* tokens[2] = {&u, &v};
  Vec* d_tokens[2] = {&d_u, &d_v};

  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const auto& head = params.heads[h];
    auto& gh = g.heads[h];
    const Matrix& qm = c.q[h];
    const Matrix& km = c.k[h];
    const Matrix& vm = c.v[h];
    const Matrix& am = c.attn[h];

    Matrix d_o(2, hd);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t j = 0; j < hd; ++j) d_o(r, j) = d_concat(r, h * hd + j);
    }

    Matrix d_a(2, 2), d_vm(2, hd);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t cix = 0; cix < 2; ++cix) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hd; ++j) acc += d_o(r, j) * vm(cix, j);
        d_a(r, cix) = acc;
      }
    }
    for (std::size_t cix = 0; cix < 2; ++cix) {
      for (std::size_t j = 0; j < hd; ++j) {
        d_vm(cix, j) = am(0, cix) * d_o(0, j) + am(1, cix) * d_o(1, j);
      }
    }

    // softmax backward per row
    Matrix d_s(2, 2);
    for (std::size_t r = 0; r < 2; ++r) {
      const double inner = d_a(r, 0) * am(r, 0) + d_a(r, 1) * am(r, 1);
      d_s(r, 0) = am(r, 0) * (d_a(r, 0) - inner);
      d_s(r, 1) = am(r, 1) * (d_a(r, 1) - inner);
    }

    Matrix d_qm(2, hd), d_km(2, hd);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t j = 0; j < hd; ++j) {
        d_qm(r, j) = (d_s(r, 0) * km(0, j) + d_s(r, 1) * km(1, j)) * inv_sqrt_d;
      }
    }
    for (std::size_t cix = 0; cix < 2; ++cix) {
      for (std::size_t j = 0; j < hd; ++j) {
        d_km(cix, j) = (d_s(0, cix) * qm(0, j) + d_s(1, cix) * qm(1, j)) * inv_sqrt_d;
      }
    }

    for (std::size_t r = 0; r < 2; ++r) {
      const Vec d_qr = matrix_row(d_qm, r);
      const Vec d_kr = matrix_row(d_km, r);
      const Vec d_vr = matrix_row(d_vm, r);
      add_outer(gh.wq, *tokens[r], d_qr);
      add_outer(gh.wk, *tokens[r], d_kr);
      add_outer(gh.wv, *tokens[r], d_vr);
      axpy(1.0, matvec(head.wq, d_qr), *d_tokens[r]);
      axpy(1.0, matvec(head.wk, d_kr), *d_tokens[r]);
      axpy(1.0, matvec(head.wv, d_vr), *d_tokens[r]);
    }
  }

  // encoders
  auto encoder_back = [&](const std::vector<DenseLayer>& enc,
                          std::vector<DenseLayer>& genc, const Vec& input,
                          const std::vector<Vec>& acts, Vec d_h) {
    for (std::size_t li = enc.size(); li-- > 0;) {
      const Vec& h_l = acts[li];
      Vec d_a(h_l.size());
      for (std::size_t i = 0; i < h_l.size(); ++i) {
        d_a[i] = d_h[i] * (1.0 - h_l[i] * h_l[i]);
      }
      const Vec& below = (li == 0) ? input : acts[li - 1];
      add_outer(genc[li].w, d_a, below);
      for (std::size_t i = 0; i < d_a.size(); ++i) genc[li].b(i, 0) += d_a[i];
      if (li > 0) d_h = tmatvec(enc[li].w, d_a);
    }
  };
  encoder_back(params.enc_image, g.enc_image, c.image_in, c.image_act, std::move(d_u));
  encoder_back(params.enc_scan, g.enc_scan, c.scan_in, c.scan_act, std::move(d_v));
}

}  // namespace detail

// Exact analytic gradient of heteroscedastic_loss over the batch, for the
// given dropout masks (empty masks vector = deterministic forward).
inline BatchGradient backward(const ModelParams& params, const std::vector<Vec>& image_feats,
                              const std::vector<Vec>& scan_feats,
                              const std::vector<Pose2D>& truths,
                              const std::vector<DropoutMask>& masks = {}) {
  const std::size_t n = image_feats.size();
  if (n == 0) throw EmptySample("backward: empty batch");
  if (scan_feats.size() != n || truths.size() != n ||
      (!masks.empty() && masks.size() != n)) {
    throw ConfigError("backward: batch size mismatch");
  }

  BatchGradient out;
  out.grad = zeros_like(params);
  const double inv_2n = 1.0 / (2.0 * static_cast<double>(n));

  for (std::size_t i = 0; i < n; ++i) {
    const DropoutMask* mask = masks.empty() ? nullptr : &masks[i];
    const ForwardCache cache = forward_cached(params, image_feats[i], scan_feats[i], mask);
    const auto& o = cache.out;
    const auto& t = truths[i];

    const double ep = std::exp(-o.s_p);
    const double eq = std::exp(-o.s_q);
    const double rx = o.p_hat[0] - t.x;
    const double ry = o.p_hat[1] - t.y;
    const double rq0 = o.q_hat[0] - t.q[0];
    const double rq1 = o.q_hat[1] - t.q[1];
    const double rp2 = rx * rx + ry * ry;
    const double rq2 = rq0 * rq0 + rq1 * rq1;

    out.loss += inv_2n * (ep * rp2 + o.s_p + eq * rq2 + o.s_q);

    detail::OutputGrad d;
    d.d_p = {2.0 * inv_2n * ep * rx, 2.0 * inv_2n * ep * ry};
    d.d_q = {2.0 * inv_2n * eq * rq0, 2.0 * inv_2n * eq * rq1};
    d.d_sp = inv_2n * (1.0 - ep * rp2);
    d.d_sq = inv_2n * (1.0 - eq * rq2);
    detail::backward_sample(params, cache, d, mask, out.grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
  NetConfig net;
  double learning_rate = 1e-3;
  std::size_t epochs = 80;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  DropoutSpec dropout{0.2};
  Optimizer optimizer = Optimizer::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    net.validate();
    dropout.validate();
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("TrainConfig: learning_rate must be finite and >= 0");
    }
    if (epochs == 0) throw ConfigError("TrainConfig: epochs must be positive");
    if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be positive");
  }
};

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_mean_loss;
};

namespace detail {

struct AdamState {
  ModelParams m, v;
  std::size_t t = 0;
};

inline void optimizer_step(ModelParams& params, const ModelParams& grad,
                           const TrainConfig& cfg, AdamState& adam) {
  std::vector<Matrix*> ps;
  std::vector<const Matrix*> gs;
  params.for_each_tensor([&](const std::string&, Matrix& m) { ps.push_back(&m); });
  grad.for_each_tensor([&](const std::string&, const Matrix& m) { gs.push_back(&m); });

  if (cfg.optimizer == Optimizer::Sgd) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      for (std::size_t j = 0; j < ps[i]->a.size(); ++j) {
        ps[i]->a[j] -= cfg.learning_rate * gs[i]->a[j];
      }
    }
    return;
  }
  adam.t += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
  std::vector<Matrix*> ms, vs;
  adam.m.for_each_tensor([&](const std::string&, Matrix& m) { ms.push_back(&m); });
  adam.v.for_each_tensor([&](const std::string&, Matrix& m) { vs.push_back(&m); });
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::size_t j = 0; j < ps[i]->a.size(); ++j) {
      const double g = gs[i]->a[j];
      double& m = ms[i]->a[j];
      double& v = vs[i]->a[j];
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      ps[i]->a[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

}  // namespace detail

// Mini-batch training with a fresh dropout mask per sample per step. The whole
// trajectory is a deterministic function of (dataset, config): identical seeds
// reproduce identical parameters and loss curves bit for bit.
inline TrainResult train(const std::vector<SampleTuple>& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw EmptySample("train: empty dataset");
  if (cfg.batch_size > dataset.size()) {
    throw ConfigError("train: batch_size exceeds dataset size");
  }
  for (const auto& s : dataset) {
    if (s.image_feat.size() != cfg.net.image_dim || s.scan.size() != cfg.net.scan_dim) {
      throw ConfigError("train: sample feature dims do not match net config");
    }
  }

  TrainResult result;
  result.params = init_params(cfg.net, substream_seed(cfg.seed, "init"));
  auto shuffle_rng = make_rng(substream_seed(cfg.seed, "train/shuffle"));
  auto dropout_rng = make_rng(substream_seed(cfg.seed, "train/dropout"));

  detail::AdamState adam;
  if (cfg.optimizer == Optimizer::Adam) {
    adam.m = zeros_like(result.params);
    adam.v = zeros_like(result.params);
  }

  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const bool stochastic = cfg.dropout.rate > 0.0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t bn = std::min(cfg.batch_size, n - start);
      std::vector<Vec> imgs, scans;
      std::vector<Pose2D> truths;
      std::vector<DropoutMask> masks;
      imgs.reserve(bn);
      scans.reserve(bn);
      truths.reserve(bn);
      for (std::size_t i = 0; i < bn; ++i) {
        const auto& s = dataset[order[start + i]];
        imgs.push_back(s.image_feat);
        scans.push_back(s.scan);
        truths.push_back(s.pose);
        if (stochastic) {
          masks.push_back(
              sample_dropout_mask(dropout_rng, cfg.net.fused_dim(), cfg.dropout.rate));
        }
      }
      const BatchGradient bg = backward(result.params, imgs, scans, truths, masks);
      if (!std::isfinite(bg.loss)) {
        throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step));
      }
      detail::optimizer_step(result.params, bg.grad, cfg, adam);
      const std::string bad = first_non_finite(result.params);
      if (!bad.empty()) {
        throw TrainingDiverged("train: non-finite tensor '" + bad + "' after step " +
                               std::to_string(step));
      }
      epoch_loss += bg.loss * static_cast<double>(bn);
    }
    result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(n));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint and loss-curve I/O
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json net_config_to_json(const NetConfig& cfg) {
  return nlohmann::json{{"image_dim", cfg.image_dim},
                        {"scan_dim", cfg.scan_dim},
                        {"hidden_dim", cfg.hidden_dim},
                        {"num_heads", cfg.num_heads},
                        {"encoder_depth", cfg.encoder_depth}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig cfg;
  cfg.image_dim = j.at("image_dim").get<std::size_t>();
  cfg.scan_dim = j.at("scan_dim").get<std::size_t>();
  cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  cfg.num_heads = j.at("num_heads").get<std::size_t>();
  cfg.encoder_depth = j.at("encoder_depth").get<std::size_t>();
  cfg.validate();
  return cfg;
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  nlohmann::json tensors = nlohmann::json::object();
  params.for_each_tensor([&](const std::string& name, const Matrix& m) {
    tensors[name] = {{"rows", m.rows}, {"cols", m.cols}, {"data", m.a}};
  });
  const nlohmann::json j = {{"format", "uloc-checkpoint"},
                            {"version", kCheckpointVersion},
                            {"config", net_config_to_json(params.config)},
                            {"tensors", tensors}};
  std::ofstream out(path);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
  out << j.dump(2) << "\n";
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("load_checkpoint: invalid JSON: " + std::string(e.what()));
  }
  if (j.value("format", "") != "uloc-checkpoint" ||
      j.value("version", -1) != kCheckpointVersion) {
    throw SchemaError("load_checkpoint: unsupported checkpoint format/version");
  }
  ModelParams params = make_params(net_config_from_json(j.at("config")));
  const auto& tensors = j.at("tensors");
  std::size_t seen = 0;
  params.for_each_tensor([&](const std::string& name, Matrix& m) {
    if (!tensors.contains(name)) {
      throw SchemaError("load_checkpoint: missing tensor " + name);
    }
    const auto& t = tensors.at(name);
    if (t.at("rows").get<std::size_t>() != m.rows ||
        t.at("cols").get<std::size_t>() != m.cols) {
      throw SchemaError("load_checkpoint: shape mismatch for tensor " + name);
    }
    t.at("data").get_to(m.a);
    if (m.a.size() != m.rows * m.cols) {
      throw SchemaError("load_checkpoint: data size mismatch for tensor " + name);
    }
    ++seen;
  });
  if (seen != tensors.size()) {
    throw SchemaError("load_checkpoint: checkpoint holds unknown tensors");
  }
  return params;
}

inline void write_loss_curve_csv(const std::vector<double>& epoch_mean_loss,
                                 const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_loss_curve_csv: cannot open " + path.string());
  out << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < epoch_mean_loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, epoch_mean_loss[i]);
    out << buf;
  }
}

}  // namespace uloc
