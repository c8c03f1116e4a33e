#pragma once

// Desk-scale point decoder: bilinear support-point features, a lattice-sampled
// RoI sequence, L decoder layers of self-attention / cross-attention / FFN with
// post layer norms, and an MLP point head producing anchor-relative offsets.
// Backpropagation is written out by hand; there is no autodiff here.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointperc/codecs.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/geometry.hpp"
#include "pointperc/random.hpp"
#include "pointperc/sapl.hpp"
#include "pointperc/tensor.hpp"

namespace pointperc {

struct DecoderConfig {
  std::size_t d = 32;
  std::size_t d_ff = 64;
  std::size_t layers = 2;
  std::size_t roi_side = 7;  // G = roi_side^2
  std::size_t head_hidden = 32;
  bool use_posemb = true;
  // Add & Norm around every sub-layer. false gives the bare LN(Sublayer(x))
  // chain, which collapses all support rows to one at init.
  bool residual = true;
  double ln_eps = 1e-14;

  std::size_t roi_count() const { return roi_side * roi_side; }
  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

inline void validate(const DecoderConfig& c) {
  detail::require(c.d >= 4 && c.d % 4 == 0, "d must be a positive multiple of 4");
  detail::require(c.d_ff >= 1 && c.head_hidden >= 1, "hidden sizes must be positive");
  detail::require(c.layers >= 1, "decoder needs at least one layer");
  detail::require(c.roi_side >= 1, "roi_side must be positive");
  detail::require(c.ln_eps > 0.0, "ln_eps must be positive");
}

// H x W x d feature map; cell (r, c) is centred at ((c + 0.5) * stride, (r + 0.5) * stride).
struct FeatureGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  double stride = 1.0;
  std::vector<double> values;

  FeatureGrid() = default;
  FeatureGrid(std::size_t h, std::size_t w, std::size_t d, double stride_px = 1.0)
      : height(h), width(w), channels(d), stride(stride_px), values(h * w * d, 0.0) {}

  double& at(std::size_t r, std::size_t c, std::size_t ch) { return values[(r * width + c) * channels + ch]; }
  double at(std::size_t r, std::size_t c, std::size_t ch) const { return values[(r * width + c) * channels + ch]; }
};

// Grayscale image, row-major, used by the patch projection.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

// Stand-in backbone: a fixed random linear map of non-overlapping patch x patch
// blocks into d channels.
inline FeatureGrid project_patches(const Image& img, std::size_t patch, std::size_t d, std::uint64_t seed) {
  detail::require(patch >= 1 && img.width >= patch && img.height >= patch, "image smaller than one patch");
  const std::size_t gh = img.height / patch;
  const std::size_t gw = img.width / patch;
  const std::size_t fan_in = patch * patch;
  Rng rng(hash_seed({seed, 0x70617463ULL}));
  Matrix proj(fan_in, d);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : proj.values()) v = rng.uniform(-bound, bound);
  FeatureGrid grid(gh, gw, d, static_cast<double>(patch));
  for (std::size_t r = 0; r < gh; ++r) {
    for (std::size_t c = 0; c < gw; ++c) {
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          const double pix = img.at(c * patch + px, r * patch + py);
          const std::size_t k = py * patch + px;
          for (std::size_t ch = 0; ch < d; ++ch) grid.at(r, c, ch) += pix * proj(k, ch);
        }
      }
    }
  }
  return grid;
}

// Clamped bilinear sample at a pixel position.
inline std::vector<double> bilinear_sample(const FeatureGrid& g, Point2 p) {
  detail::require(g.height > 0 && g.width > 0 && g.channels > 0, "empty feature grid");
  const double gx = std::clamp(p.x / g.stride - 0.5, 0.0, static_cast<double>(g.width - 1));
  const double gy = std::clamp(p.y / g.stride - 0.5, 0.0, static_cast<double>(g.height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(gx));
  const auto y0 = static_cast<std::size_t>(std::floor(gy));
  const std::size_t x1 = std::min(x0 + 1, g.width - 1);
  const std::size_t y1 = std::min(y0 + 1, g.height - 1);
  const double tx = gx - static_cast<double>(x0);
  const double ty = gy - static_cast<double>(y0);
  std::vector<double> out(g.channels);
  for (std::size_t ch = 0; ch < g.channels; ++ch) {
    const double top = (1.0 - tx) * g.at(y0, x0, ch) + tx * g.at(y0, x1, ch);
    const double bot = (1.0 - tx) * g.at(y1, x0, ch) + tx * g.at(y1, x1, ch);
    out[ch] = (1.0 - ty) * top + ty * bot;
  }
  return out;
}

// 2-D sinusoidal embedding of a position normalised to [0, 1]^2. Channels
// come in groups of four: sin/cos of x then sin/cos of y per frequency.
inline std::vector<double> sinusoidal_embedding(double nx, double ny, std::size_t d) {
  detail::require(d % 4 == 0, "embedding width must be a multiple of 4");
  const std::size_t bands = d / 4;
  std::vector<double> out(d);
  for (std::size_t k = 0; k < bands; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(bands));
    const double ax = 2.0 * std::numbers::pi * nx * freq;
    const double ay = 2.0 * std::numbers::pi * ny * freq;
    out[4 * k + 0] = std::sin(ax);
    out[4 * k + 1] = std::cos(ax);
    out[4 * k + 2] = std::sin(ay);
    out[4 * k + 3] = std::cos(ay);
  }
  return out;
}

// K x d support point features: bilinear sample plus position embedding.
inline Matrix embed_support_points(const FeatureGrid& grid, const PointSequence& pts, bool use_posemb = true) {
  detail::require(!pts.empty(), "no support points");
  Matrix out(pts.size(), grid.channels);
  const double ext_x = static_cast<double>(grid.width) * grid.stride;
  const double ext_y = static_cast<double>(grid.height) * grid.stride;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto feat = bilinear_sample(grid, pts[i]);
    for (std::size_t ch = 0; ch < grid.channels; ++ch) out(i, ch) = feat[ch];
    if (use_posemb) {
      const auto pe = sinusoidal_embedding(pts[i].x / ext_x, pts[i].y / ext_y, grid.channels);
      for (std::size_t ch = 0; ch < grid.channels; ++ch) out(i, ch) += pe[ch];
    }
  }
  return out;
}

// side^2 x d RoI sequence: bilinear samples at the bin centres of a side x side
// lattice over the anchor, row-major, plus lattice position embedding.
inline Matrix roi_features(const FeatureGrid& grid, const Anchor& anchor, std::size_t side = 7,
                           bool use_posemb = true) {
  detail::require(anchor.w > 0.0 && anchor.h > 0.0, "anchor size must be positive");
  const BBox box = anchor.to_box();
  const double fs = static_cast<double>(side);
  Matrix out(side * side, grid.channels);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double u = (static_cast<double>(c) + 0.5) / fs;
      const double v = (static_cast<double>(r) + 0.5) / fs;
      const auto feat = bilinear_sample(grid, {box.x + u * box.w, box.y + v * box.h});
      const std::size_t row = r * side + c;
      for (std::size_t ch = 0; ch < grid.channels; ++ch) out(row, ch) = feat[ch];
      if (use_posemb) {
        const auto pe = sinusoidal_embedding(u, v, grid.channels);
        for (std::size_t ch = 0; ch < grid.channels; ++ch) out(row, ch) += pe[ch];
      }
    }
  }
  return out;
}

struct AttentionParams {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  friend bool operator==(const AttentionParams&, const AttentionParams&) = default;
};

struct LayerNormParams {
  Matrix gamma, beta;
  friend bool operator==(const LayerNormParams&, const LayerNormParams&) = default;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams ln_self;
  AttentionParams cross_attn;
  LayerNormParams ln_cross;
  Matrix ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  LayerNormParams ln_ffn;
  friend bool operator==(const DecoderLayerParams&, const DecoderLayerParams&) = default;
};

struct DecoderParams {
  DecoderConfig config;
  Matrix reduce_w, reduce_b;  // RoI channel map applied before the layers
  std::vector<DecoderLayerParams> layers;
  Matrix head_w1, head_b1, head_w2, head_b2;

  // Visits every tensor in a fixed order with a stable name.
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("reduce_w", p.reduce_w);
    f("reduce_b", p.reduce_b);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      auto& L = p.layers[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      auto attn = [&](const std::string& tag, auto& a) {
        f(pre + tag + ".wq", a.wq);
        f(pre + tag + ".bq", a.bq);
        f(pre + tag + ".wk", a.wk);
        f(pre + tag + ".bk", a.bk);
        f(pre + tag + ".wv", a.wv);
        f(pre + tag + ".bv", a.bv);
        f(pre + tag + ".wo", a.wo);
        f(pre + tag + ".bo", a.bo);
      };
      auto ln = [&](const std::string& tag, auto& n) {
        f(pre + tag + ".gamma", n.gamma);
        f(pre + tag + ".beta", n.beta);
      };
      attn("self_attn", L.self_attn);
      ln("ln_self", L.ln_self);
      attn("cross_attn", L.cross_attn);
      ln("ln_cross", L.ln_cross);
      f(pre + "ffn_w1", L.ffn_w1);
      f(pre + "ffn_b1", L.ffn_b1);
      f(pre + "ffn_w2", L.ffn_w2);
      f(pre + "ffn_b2", L.ffn_b2);
      ln("ln_ffn", L.ln_ffn);
    }
    f("head_w1", p.head_w1);
    f("head_b1", p.head_b1);
    f("head_w2", p.head_w2);
    f("head_b2", p.head_b2);
  }

  template <typename F>
  void for_each_tensor(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each_tensor(F&& f) const { visit(*this, std::forward<F>(f)); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  friend bool operator==(const DecoderParams&, const DecoderParams&) = default;
};

// All tensors at their shapes, zero filled.
inline DecoderParams zero_params(const DecoderConfig& cfg) {
  validate(cfg);
  const std::size_t d = cfg.d;
  DecoderParams p;
  p.config = cfg;
  p.reduce_w = Matrix(d, d);
  p.reduce_b = Matrix(1, d);
  auto attn = [d] {
    return AttentionParams{Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d),
                           Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d)};
  };
  auto ln = [d] { return LayerNormParams{Matrix(1, d), Matrix(1, d)}; };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    p.layers.push_back({attn(), ln(), attn(), ln(), Matrix(d, cfg.d_ff), Matrix(1, cfg.d_ff),
                        Matrix(cfg.d_ff, d), Matrix(1, d), ln()});
  }
  p.head_w1 = Matrix(d, cfg.head_hidden);
  p.head_b1 = Matrix(1, cfg.head_hidden);
  p.head_w2 = Matrix(cfg.head_hidden, 2);
  p.head_b2 = Matrix(1, 2);
  return p;
}

// Weights uniform in +-1/sqrt(fan_in), biases zero, layer norms identity.
inline DecoderParams init_params(const DecoderConfig& cfg, std::uint64_t seed) {
  DecoderParams p = zero_params(cfg);
  Rng rng(hash_seed({seed, 0x64656364ULL}));
  p.for_each_tensor([&](const std::string& name, Matrix& m) {
    if (name.ends_with(".gamma")) {
      m.fill(1.0);
    } else if (m.rows() > 1) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(m.rows()));
      for (double& v : m.values()) v = rng.uniform(-bound, bound);
    }
  });
  return p;
}

namespace detail {

struct AttentionCache {
  Matrix xq, xkv, q, k, v, weights, context;
};

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

struct LayerCache {
  Matrix input;
  AttentionCache self_attn;
  LayerNormCache ln_self;
  Matrix s_prime;
  AttentionCache cross_attn;
  LayerNormCache ln_cross;
  Matrix z;
  Matrix ffn_pre, ffn_act;
  LayerNormCache ln_ffn;
};

inline void softmax_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : r) v /= sum;
  }
}

// Single-head scaled dot-product attention with output projection.
inline Matrix attention_forward(const AttentionParams& p, const Matrix& xq, const Matrix& xkv, AttentionCache* c) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.wq.cols()));
  Matrix q = affine(xq, p.wq, p.bq);
  Matrix k = affine(xkv, p.wk, p.bk);
  Matrix v = affine(xkv, p.wv, p.bv);
  Matrix w = matmul_nt(q, k);
  for (double& s : w.values()) s *= scale;
  softmax_rows(w);
  Matrix ctx = matmul(w, v);
  Matrix out = affine(ctx, p.wo, p.bo);
  if (c) *c = {xq, xkv, std::move(q), std::move(k), std::move(v), std::move(w), std::move(ctx)};
  return out;
}

// Returns (d xq, d xkv); parameter gradients accumulate into g.
inline std::pair<Matrix, Matrix> attention_backward(const AttentionParams& p, const AttentionCache& c,
                                                    const Matrix& dout, AttentionParams& g) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.wq.cols()));
  add_into(g.wo, matmul_tn(c.context, dout));
  add_into(g.bo, column_sums(dout));
  const Matrix dctx = matmul_nt(dout, p.wo);
  Matrix dw = matmul_nt(dctx, c.v);
  const Matrix dv = matmul_tn(c.weights, dctx);
  for (std::size_t i = 0; i < dw.rows(); ++i) {
    double dotp = 0.0;
    for (std::size_t j = 0; j < dw.cols(); ++j) dotp += dw(i, j) * c.weights(i, j);
    for (std::size_t j = 0; j < dw.cols(); ++j) dw(i, j) = c.weights(i, j) * (dw(i, j) - dotp) * scale;
  }
  const Matrix dq = matmul(dw, c.k);
  const Matrix dk = matmul_tn(dw, c.q);
  add_into(g.wq, matmul_tn(c.xq, dq));
  add_into(g.bq, column_sums(dq));
  add_into(g.wk, matmul_tn(c.xkv, dk));
  add_into(g.bk, column_sums(dk));
  add_into(g.wv, matmul_tn(c.xkv, dv));
  add_into(g.bv, column_sums(dv));
  Matrix dxq = matmul_nt(dq, p.wq);
  Matrix dxkv = matmul_nt(dk, p.wk);
  add_into(dxkv, matmul_nt(dv, p.wv));
  return {std::move(dxq), std::move(dxkv)};
}

inline Matrix layer_norm_forward(const LayerNormParams& p, const Matrix& x, double eps, LayerNormCache* c) {
  const std::size_t n = x.cols();
  Matrix xhat(x.rows(), n);
  std::vector<double> inv_std(x.rows());
  Matrix out(x.rows(), n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (x(i, j) - mean) * inv_std[i];
      out(i, j) = p.gamma(0, j) * xhat(i, j) + p.beta(0, j);
    }
  }
  if (c) *c = {std::move(xhat), std::move(inv_std)};
  return out;
}

inline Matrix layer_norm_backward(const LayerNormParams& p, const LayerNormCache& c, const Matrix& dout,
                                  LayerNormParams& g) {
  const std::size_t n = dout.cols();
  const double fn = static_cast<double>(n);
  Matrix dx(dout.rows(), n);
  for (std::size_t i = 0; i < dout.rows(); ++i) {
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      g.gamma(0, j) += dout(i, j) * c.xhat(i, j);
      g.beta(0, j) += dout(i, j);
      const double dxhat = dout(i, j) * p.gamma(0, j);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * c.xhat(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double dxhat = dout(i, j) * p.gamma(0, j);
      dx(i, j) = c.inv_std[i] / fn * (fn * dxhat - sum_dxhat - c.xhat(i, j) * sum_dxhat_xhat);
    }
  }
  return dx;
}

inline Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Matrix relu_backward(const Matrix& pre, const Matrix& dout) {
  Matrix dx = dout;
  auto p = pre.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(p[i] > 0.0)) d[i] = 0.0;
  return dx;
}

}  // namespace detail

// Intermediate activations kept for the backward pass.
struct ForwardCache {
  Matrix roi_input;
  Matrix roi_reduced;
  std::vector<detail::LayerCache> layers;
  Matrix refined;
  Matrix head_pre, head_act;
  Matrix offsets;
};

// S' = LN(SelfAttn(S)); S_hat = LN(FFN(LN(CrossAttn(S', T)))), repeated per layer,
// each LN also taking the sub-layer input when config.residual is set.
// `support` is K x d, `roi` is G x d.
inline Matrix decoder_forward(const DecoderParams& p, const Matrix& support, const Matrix& roi,
                              ForwardCache* cache = nullptr) {
  const DecoderConfig& cfg = p.config;
  require_shape(support.cols() == cfg.d && roi.cols() == cfg.d, "decoder_forward");
  require_shape(support.rows() >= 1 && roi.rows() >= 1, "decoder_forward");
  Matrix t = affine(roi, p.reduce_w, p.reduce_b);
  if (cache) {
    cache->roi_input = roi;
    cache->roi_reduced = t;
    cache->layers.assign(p.layers.size(), {});
  }
  Matrix s = support;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const DecoderLayerParams& L = p.layers[l];
    detail::LayerCache* c = cache ? &cache->layers[l] : nullptr;
    if (c) c->input = s;
    Matrix sa = detail::attention_forward(L.self_attn, s, s, c ? &c->self_attn : nullptr);
    if (cfg.residual) add_into(sa, s);
    Matrix s_prime = detail::layer_norm_forward(L.ln_self, sa, cfg.ln_eps, c ? &c->ln_self : nullptr);
    Matrix ca = detail::attention_forward(L.cross_attn, s_prime, t, c ? &c->cross_attn : nullptr);
    if (cfg.residual) add_into(ca, s_prime);
    Matrix z = detail::layer_norm_forward(L.ln_cross, ca, cfg.ln_eps, c ? &c->ln_cross : nullptr);
    Matrix pre = affine(z, L.ffn_w1, L.ffn_b1);
    Matrix act = detail::relu(pre);
    Matrix f = affine(act, L.ffn_w2, L.ffn_b2);
    if (cfg.residual) add_into(f, z);
    s = detail::layer_norm_forward(L.ln_ffn, f, cfg.ln_eps, c ? &c->ln_ffn : nullptr);
    if (c) {
      c->s_prime = std::move(s_prime);
      c->z = std::move(z);
      c->ffn_pre = std::move(pre);
      c->ffn_act = std::move(act);
    }
  }
  if (cache) cache->refined = s;
  return s;
}

// K x 2 anchor-normalised offsets from the refined point features.
inline Matrix head_offsets(const DecoderParams& p, const Matrix& refined, ForwardCache* cache = nullptr) {
  Matrix pre = affine(refined, p.head_w1, p.head_b1);
  Matrix act = detail::relu(pre);
  Matrix off = affine(act, p.head_w2, p.head_b2);
  if (cache) {
    cache->head_pre = std::move(pre);
    cache->head_act = std::move(act);
    cache->offsets = off;
  }
  return off;
}

inline OffsetSet to_offsets(const Matrix& m) {
  OffsetSet out;
  out.reserve(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out.push_back({m(i, 0), m(i, 1)});
  return out;
}

inline PointSequence point_head(const DecoderParams& p, const Matrix& refined, const Anchor& anchor,
                                bool cyclic = false) {
  return anchor_decode(to_offsets(head_offsets(p, refined)), anchor, cyclic);
}

// Gradients of the loss w.r.t. every parameter given dL/d(offsets).
inline DecoderParams decoder_backward(const DecoderParams& p, const ForwardCache& c, const Matrix& d_offsets) {
  DecoderParams g = zero_params(p.config);
  add_into(g.head_w2, matmul_tn(c.head_act, d_offsets));
  add_into(g.head_b2, column_sums(d_offsets));
  const Matrix d_act = matmul_nt(d_offsets, p.head_w2);
  const Matrix d_pre = detail::relu_backward(c.head_pre, d_act);
  add_into(g.head_w1, matmul_tn(c.refined, d_pre));
  add_into(g.head_b1, column_sums(d_pre));
  Matrix ds = matmul_nt(d_pre, p.head_w1);

  Matrix dt(c.roi_reduced.rows(), c.roi_reduced.cols());
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const DecoderLayerParams& L = p.layers[li];
    DecoderLayerParams& G = g.layers[li];
    const detail::LayerCache& lc = c.layers[li];
    const Matrix df = detail::layer_norm_backward(L.ln_ffn, lc.ln_ffn, ds, G.ln_ffn);
    add_into(G.ffn_w2, matmul_tn(lc.ffn_act, df));
    add_into(G.ffn_b2, column_sums(df));
    const Matrix dpre = detail::relu_backward(lc.ffn_pre, matmul_nt(df, L.ffn_w2));
    add_into(G.ffn_w1, matmul_tn(lc.z, dpre));
    add_into(G.ffn_b1, column_sums(dpre));
    Matrix dz = matmul_nt(dpre, L.ffn_w1);
    if (p.config.residual) add_into(dz, df);
    const Matrix dca = detail::layer_norm_backward(L.ln_cross, lc.ln_cross, dz, G.ln_cross);
    auto [ds_prime, dt_layer] = detail::attention_backward(L.cross_attn, lc.cross_attn, dca, G.cross_attn);
    add_into(dt, dt_layer);
    if (p.config.residual) add_into(ds_prime, dca);
    const Matrix dsa = detail::layer_norm_backward(L.ln_self, lc.ln_self, ds_prime, G.ln_self);
    auto [dxq, dxkv] = detail::attention_backward(L.self_attn, lc.self_attn, dsa, G.self_attn);
    add_into(dxq, dxkv);
    if (p.config.residual) add_into(dxq, dsa);
    ds = std::move(dxq);
  }
  add_into(g.reduce_w, matmul_tn(c.roi_input, dt));
  add_into(g.reduce_b, column_sums(dt));
  return g;
}

// One synthetic training example: support crop features with its annotated
// points, a query feature map, the proposal anchor and the query ground truth.
struct TrainSample {
  FeatureGrid support_grid;
  PointSequence support_points;
  FeatureGrid query_grid;
  Anchor anchor;
  PointSequence gt_points;
};

struct LossAndGrad {
  LossBreakdown loss;
  PointSequence predicted;
  DecoderParams grad;
};

inline LossAndGrad loss_and_grad(const DecoderParams& p, const TrainSample& s, const SaplConfig& cfg) {
  detail::require(s.gt_points.size() == s.support_points.size(), "gt point count must match support point count");
  const Matrix support = embed_support_points(s.support_grid, s.support_points, p.config.use_posemb);
  const Matrix roi = roi_features(s.query_grid, s.anchor, p.config.roi_side, p.config.use_posemb);
  ForwardCache cache;
  const Matrix refined = decoder_forward(p, support, roi, &cache);
  const Matrix off = head_offsets(p, refined, &cache);
  PointSequence pred = anchor_decode(to_offsets(off), s.anchor, s.gt_points.cyclic);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (!is_finite(pred[i]))
      throw NumericalError("non-finite prediction at point " + std::to_string(i) + ", l1 term undefined");
  LossBreakdown lb = point_loss(pred, s.gt_points, cfg);
  if (!std::isfinite(lb.l1_term)) throw NumericalError("non-finite l1 term");
  if (!std::isfinite(lb.sapl_term)) throw NumericalError("non-finite sapl term");
  Matrix d_off(off.rows(), 2);
  for (std::size_t i = 0; i < off.rows(); ++i) {
    d_off(i, 0) = lb.per_point_grad[i].dx * s.anchor.w;
    d_off(i, 1) = lb.per_point_grad[i].dy * s.anchor.h;
  }
  DecoderParams g = decoder_backward(p, cache, d_off);
  return {std::move(lb), std::move(pred), std::move(g)};
}

// Loss only; used by finite-difference checks.
inline double sample_loss(const DecoderParams& p, const TrainSample& s, const SaplConfig& cfg) {
  const Matrix support = embed_support_points(s.support_grid, s.support_points, p.config.use_posemb);
  const Matrix roi = roi_features(s.query_grid, s.anchor, p.config.roi_side, p.config.use_posemb);
  const PointSequence pred = point_head(p, decoder_forward(p, support, roi), s.anchor, s.gt_points.cyclic);
  return point_loss(pred, s.gt_points, cfg).total;
}

// One SGD step in place; returns the loss measured before the update.
inline LossBreakdown train_step(DecoderParams& p, const TrainSample& s, const SaplConfig& cfg, double lr) {
  LossAndGrad lg = loss_and_grad(p, s, cfg);
  if (!std::isfinite(lg.loss.total)) throw NumericalError("non-finite total loss");
  if (lr != 0.0) {
    std::vector<Matrix*> grads;
    lg.grad.for_each_tensor([&](const std::string&, Matrix& m) { grads.push_back(&m); });
    std::size_t idx = 0;
    p.for_each_tensor([&](const std::string&, Matrix& m) {
      auto pv = m.values();
      auto gv = grads[idx++]->values();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= lr * gv[i];
    });
  }
  return std::move(lg.loss);
}

// Text checkpoint: a JSON header line, then one "name rows cols" line and one
// value line per tensor. Values use 17 significant digits, which round-trips
// doubles exactly.
inline void save_checkpoint(std::ostream& os, const DecoderParams& p, const nlohmann::json& meta = {}) {
  const DecoderConfig& c = p.config;
  nlohmann::ordered_json header;
  header["format"] = "pointperc-decoder-v1";
  header["d"] = c.d;
  header["d_ff"] = c.d_ff;
  header["layers"] = c.layers;
  header["roi_side"] = c.roi_side;
  header["head_hidden"] = c.head_hidden;
  header["use_posemb"] = c.use_posemb;
  header["residual"] = c.residual;
  header["ln_eps"] = c.ln_eps;
  header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  os << header.dump() << '\n';
  char buf[40];
  p.for_each_tensor([&](const std::string& name, const Matrix& m) {
    os << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    bool first = true;
    for (double v : m.values()) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << (first ? "" : " ") << buf;
      first = false;
    }
    os << '\n';
  });
}

struct Checkpoint {
  DecoderParams params;
  nlohmann::json meta;
};

inline Checkpoint load_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("empty checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != "pointperc-decoder-v1") throw ValidationError("unknown checkpoint format");
  DecoderConfig c;
  c.d = header.at("d").get<std::size_t>();
  c.d_ff = header.at("d_ff").get<std::size_t>();
  c.layers = header.at("layers").get<std::size_t>();
  c.roi_side = header.at("roi_side").get<std::size_t>();
  c.head_hidden = header.at("head_hidden").get<std::size_t>();
  c.use_posemb = header.at("use_posemb").get<bool>();
  c.residual = header.at("residual").get<bool>();
  c.ln_eps = header.at("ln_eps").get<double>();
  Checkpoint ck{zero_params(c), header.value("meta", nlohmann::json::object())};
  ck.params.for_each_tensor([&](const std::string& name, Matrix& m) {
    std::string tag_line;
    if (!std::getline(is, tag_line)) throw ValidationError("checkpoint truncated before " + name);
    std::istringstream tag(tag_line);
    std::string got;
    std::size_t rows = 0, cols = 0;
    tag >> got >> rows >> cols;
    if (got != name || rows != m.rows() || cols != m.cols())
      throw ValidationError("checkpoint tensor mismatch at " + name);
    std::string values;
    if (!std::getline(is, values)) throw ValidationError("checkpoint truncated in " + name);
    const char* cur = values.c_str();
    for (double& v : m.values()) {
      char* end = nullptr;
      v = std::strtod(cur, &end);
      if (end == cur) throw ValidationError("checkpoint value parse error in " + name);
      cur = end;
    }
  });
  return ck;
}

}  // namespace pointperc
