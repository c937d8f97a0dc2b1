#pragma once

// Decoder-only transformer over 3-dimensional continuous tokens.
//
//   h0      = x W_embed + b_embed + p_t
//   a       = LN1(h);  q,k,v = a W + b
//   h       = h + softmax(q k^T / sqrt(d_head) + causal mask) v W_o + b_o
//   f       = GELU(LN2(h) W_1 + b_1) W_2 + b_2;  h = h + f
//   y_hat   = h_L W_out + b_out
//
// Every position predicts the next 3-vector. Gradients are computed by hand
// (no tape), one sequence at a time, and reduced across the batch in sequence
// order so results do not depend on the worker count.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chaoscast/chaos_gen.hpp"
#include "chaoscast/error.hpp"
#include "chaoscast/parallel.hpp"

namespace chaoscast {

// Flat buffers are 64-byte aligned so that every tensor sits at a fixed
// alignment; Eigen's kernel choice (and so its rounding) depends on it.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

enum class PositionalEncoding { learned, sinusoidal };

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t context_len = 512;
  std::size_t d_ff = 64;
  std::size_t in_dim = 3;
  std::size_t out_dim = 3;
  PositionalEncoding positional = PositionalEncoding::sinusoidal;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || context_len < 1 || d_ff < 1)
      throw UsageError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
    if (in_dim != 3 || out_dim != 3) throw UsageError("tokens are 3-vectors");
  }

  bool operator==(const ModelConfig&) const = default;
};

// The three reference sizes. Feed-forward width equals d_model, which puts
// the parameter counts at roughly 0.1M / 1M / 10M.
inline ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  if (name == "0.1M") {
    c.n_layers = 4, c.d_model = 64, c.n_heads = 4;
  } else if (name == "1M") {
    c.n_layers = 10, c.d_model = 128, c.n_heads = 8;
  } else if (name == "10M") {
    c.n_layers = 12, c.d_model = 384, c.n_heads = 24;
  } else {
    throw UsageError("unknown model preset '" + name + "' (expected 0.1M, 1M or 10M)");
  }
  c.d_ff = c.d_model;
  return c;
}

enum class ParamGroup { weight, bias, norm_gain, norm_bias, positional };

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  ParamGroup group = ParamGroup::weight;
  bool residual_projection = false;

  std::size_t size() const { return rows * cols; }
  bool decayed() const { return group == ParamGroup::weight; }
};

struct LayerSlots {
  std::size_t ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
};

// Name, shape, offset and role of every learnable tensor, in storage order.
class ParamLayout {
 public:
  static constexpr std::size_t none = static_cast<std::size_t>(-1);

  explicit ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    embed_w = add("embed.w", cfg.in_dim, d, ParamGroup::weight);
    embed_b = add("embed.b", 1, d, ParamGroup::bias);
    if (cfg.positional == PositionalEncoding::learned)
      positions = add("pos", cfg.context_len, d, ParamGroup::positional);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerSlots s{};
      s.ln1_g = add(p + "ln1.g", 1, d, ParamGroup::norm_gain);
      s.ln1_b = add(p + "ln1.b", 1, d, ParamGroup::norm_bias);
      s.w_q = add(p + "attn.w_q", d, d, ParamGroup::weight);
      s.b_q = add(p + "attn.b_q", 1, d, ParamGroup::bias);
      s.w_k = add(p + "attn.w_k", d, d, ParamGroup::weight);
      s.b_k = add(p + "attn.b_k", 1, d, ParamGroup::bias);
      s.w_v = add(p + "attn.w_v", d, d, ParamGroup::weight);
      s.b_v = add(p + "attn.b_v", 1, d, ParamGroup::bias);
      s.w_o = add(p + "attn.w_o", d, d, ParamGroup::weight, true);
      s.b_o = add(p + "attn.b_o", 1, d, ParamGroup::bias);
      s.ln2_g = add(p + "ln2.g", 1, d, ParamGroup::norm_gain);
      s.ln2_b = add(p + "ln2.b", 1, d, ParamGroup::norm_bias);
      s.w_1 = add(p + "ffn.w_1", d, cfg.d_ff, ParamGroup::weight);
      s.b_1 = add(p + "ffn.b_1", 1, cfg.d_ff, ParamGroup::bias);
      s.w_2 = add(p + "ffn.w_2", cfg.d_ff, d, ParamGroup::weight, true);
      s.b_2 = add(p + "ffn.b_2", 1, d, ParamGroup::bias);
      layers.push_back(s);
    }
    out_w = add("out.w", d, cfg.out_dim, ParamGroup::weight);
    out_b = add("out.b", 1, cfg.out_dim, ParamGroup::bias);
  }

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::size_t size() const { return size_; }

  const TensorSpec& find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return t;
    throw ShapeMismatch("no tensor named " + name);
  }

  // Offsets into the flat parameter vector.
  std::size_t embed_w = none, embed_b = none, positions = none, out_w = none, out_b = none;
  std::vector<LayerSlots> layers;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, ParamGroup group,
                  bool residual = false) {
    tensors_.push_back({std::move(name), rows, cols, size_, group, residual});
    const std::size_t at = size_;
    size_ += rows * cols;
    return at;
  }

  std::vector<TensorSpec> tensors_;
  std::size_t size_ = 0;
};

inline std::size_t param_count(const ModelConfig& cfg) { return ParamLayout(cfg).size(); }

// Fixed sine/cosine table, context_len x d_model, row-major.
template <typename Real>
AlignedVector<Real> sinusoidal_table(std::size_t length, std::size_t d) {
  AlignedVector<Real> table(length * d);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      table[t * d + i] = static_cast<Real>(std::sin(static_cast<double>(t) * freq));
      if (i + 1 < d) table[t * d + i + 1] = static_cast<Real>(std::cos(static_cast<double>(t) * freq));
    }
  }
  return table;
}

template <typename Real = double>
struct ModelParams {
  ModelConfig config;
  std::shared_ptr<const ParamLayout> layout;
  AlignedVector<Real> values;
  AlignedVector<Real> fixed_positions;

  ModelParams() = default;
  explicit ModelParams(const ModelConfig& cfg)
      : config(cfg), layout(std::make_shared<const ParamLayout>(cfg)), values(layout->size(), Real{0}) {
    if (cfg.positional == PositionalEncoding::sinusoidal)
      fixed_positions = sinusoidal_table<Real>(cfg.context_len, cfg.d_model);
  }

  std::size_t size() const { return values.size(); }

  std::span<Real> tensor(const std::string& name) {
    const auto& t = layout->find(name);
    return {values.data() + t.offset, t.size()};
  }
  std::span<const Real> tensor(const std::string& name) const {
    const auto& t = layout->find(name);
    return {values.data() + t.offset, t.size()};
  }

  // Zero-filled tensor with the same layout (gradient / moment buffers).
  ModelParams zeros_like() const {
    ModelParams z;
    z.config = config;
    z.layout = layout;
    z.values.assign(values.size(), Real{0});
    z.fixed_positions = fixed_positions;
    return z;
  }
};

// Weights ~ N(0, 0.02^2); residual-branch output projections additionally
// scaled by 1/sqrt(2 n_layers); biases zero; norm gains one.
template <typename Real = double>
ModelParams<Real> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<Real> p(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (const auto& t : p.layout->tensors()) {
    Real* v = p.values.data() + t.offset;
    switch (t.group) {
      case ParamGroup::weight:
      case ParamGroup::positional: {
        const double scale = t.residual_projection ? residual_scale : 1.0;
        for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<Real>(normal(rng) * scale);
        break;
      }
      case ParamGroup::norm_gain:
        std::fill(v, v + t.size(), Real{1});
        break;
      case ParamGroup::bias:
      case ParamGroup::norm_bias:
        std::fill(v, v + t.size(), Real{0});
        break;
    }
  }
  return p;
}

// B x T x 3 block of sequences, row-major (batch, position, component).
template <typename Real = double>
struct SequenceTensor {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<Real> data;

  SequenceTensor() = default;
  SequenceTensor(std::size_t b, std::size_t t) : batch(b), length(t), data(b * t * 3, Real{0}) {}

  Real& at(std::size_t b, std::size_t t, std::size_t k) { return data[(b * length + t) * 3 + k]; }
  Real at(std::size_t b, std::size_t t, std::size_t k) const { return data[(b * length + t) * 3 + k]; }
  Real* row(std::size_t b) { return data.data() + b * length * 3; }
  const Real* row(std::size_t b) const { return data.data() + b * length * 3; }

  bool operator==(const SequenceTensor&) const = default;
};

template <typename Real = double>
struct Batch {
  SequenceTensor<Real> inputs;
  SequenceTensor<Real> targets;

  static Batch from_sequences(std::span<const TrainingSequence> seqs) {
    if (seqs.empty()) throw ShapeMismatch("empty batch");
    const std::size_t T = seqs.front().inputs.size();
    Batch b{SequenceTensor<Real>(seqs.size(), T), SequenceTensor<Real>(seqs.size(), T)};
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (seqs[i].inputs.size() != T || seqs[i].targets.size() != T)
        throw ShapeMismatch("ragged batch");
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < 3; ++k) {
          b.inputs.at(i, t, k) = static_cast<Real>(seqs[i].inputs[t][k]);
          b.targets.at(i, t, k) = static_cast<Real>(seqs[i].targets[t][k]);
        }
    }
    return b;
  }
};

namespace detail {

template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using CMap = Eigen::Map<const Mat<Real>>;
template <typename Real>
using MMap = Eigen::Map<Mat<Real>>;
template <typename Real>
using CRow = Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>;
template <typename Real>
using MRow = Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename Real>
Real gelu(Real u) {
  const Real t = std::tanh(Real(kGeluC) * (u + Real(kGeluA) * u * u * u));
  return Real(0.5) * u * (Real(1) + t);
}

template <typename Real>
Real gelu_grad(Real u) {
  const Real t = std::tanh(Real(kGeluC) * (u + Real(kGeluA) * u * u * u));
  return Real(0.5) * (Real(1) + t) +
         Real(0.5) * u * (Real(1) - t * t) * Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * u * u);
}

template <typename Real>
struct LayerCache {
  Mat<Real> x_in, xhat1, a, q, k, v, attn, x_mid, xhat2, b, u, g;
  std::vector<Real> rstd1, rstd2;
  // n_heads blocks of T x T; entries above the diagonal are exactly zero.
  std::vector<Mat<Real>> probs;
};

template <typename Real>
struct SequenceCache {
  std::vector<LayerCache<Real>> layers;
  Mat<Real> x, y, x_final;
};

// Row-wise layer norm with population variance.
template <typename Real>
void layer_norm(const Mat<Real>& x, const Real* gain, const Real* bias, Mat<Real>& xhat, std::vector<Real>& rstd,
                Mat<Real>& out) {
  const auto T = x.rows(), d = x.cols();
  xhat.resize(T, d);
  out.resize(T, d);
  rstd.resize(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) mean += x(t, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double c = x(t, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const Real r = static_cast<Real>(1.0 / std::sqrt(var + kLayerNormEps));
    rstd[static_cast<std::size_t>(t)] = r;
    for (Eigen::Index j = 0; j < d; ++j) {
      const Real xh = static_cast<Real>(x(t, j) - mean) * r;
      xhat(t, j) = xh;
      out(t, j) = xh * gain[j] + bias[j];
    }
  }
}

// Accumulates gain/bias gradients and returns d(input).
template <typename Real>
Mat<Real> layer_norm_backward(const Mat<Real>& dout, const Mat<Real>& xhat, const std::vector<Real>& rstd,
                              const Real* gain, Real* dgain, Real* dbias) {
  const auto T = dout.rows(), d = dout.cols();
  Mat<Real> dx(T, d);
  std::vector<Real> dxhat(static_cast<std::size_t>(d));
  for (Eigen::Index t = 0; t < T; ++t) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const Real g = dout(t, j);
      dgain[j] += g * xhat(t, j);
      dbias[j] += g;
      dxhat[j] = g * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat(t, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    const Real r = rstd[static_cast<std::size_t>(t)];
    for (Eigen::Index j = 0; j < d; ++j)
      dx(t, j) = r * static_cast<Real>(dxhat[j] - mean_dxhat - xhat(t, j) * mean_dxhat_xhat);
  }
  return dx;
}

template <typename Real>
void add_colsum(const Mat<Real>& m, Real* dst) {
  MRow<Real>(dst, m.cols()) += m.colwise().sum();
}

template <typename Real>
class Engine {
 public:
  explicit Engine(const ModelParams<Real>& p) : p_(p), cfg_(p.config), L_(*p.layout) {}

  // Runs one sequence of length T (inputs T x 3) and writes T x 3 predictions.
  // With keep = true every layer's activations are retained for backward().
  void forward(const Real* inputs, std::size_t T, SequenceCache<Real>& c, bool keep, Real* out) const {
    if (T < 1 || T > cfg_.context_len) throw ShapeMismatch("sequence length outside 1..context_len");
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto Ti = static_cast<Eigen::Index>(T);
    const Real* w = p_.values.data();
    c.x = CMap<Real>(inputs, Ti, 3);

    Mat<Real> h = c.x * CMap<Real>(w + L_.embed_w, 3, d);
    h.rowwise() += CRow<Real>(w + L_.embed_b, d);
    const Real* pos = cfg_.positional == PositionalEncoding::learned ? w + L_.positions : p_.fixed_positions.data();
    h += CMap<Real>(pos, Ti, d);

    c.layers.resize(keep ? cfg_.n_layers : 1);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const LayerSlots& s = L_.layers[l];
      LayerCache<Real>& lc = c.layers[keep ? l : 0];
      lc.x_in = h;
      layer_norm(h, w + s.ln1_g, w + s.ln1_b, lc.xhat1, lc.rstd1, lc.a);
      project(lc.a, w + s.w_q, w + s.b_q, d, lc.q);
      project(lc.a, w + s.w_k, w + s.b_k, d, lc.k);
      project(lc.a, w + s.w_v, w + s.b_v, d, lc.v);
      attention(lc, Ti);
      h.noalias() += lc.attn * CMap<Real>(w + s.w_o, d, d);
      h.rowwise() += CRow<Real>(w + s.b_o, d);
      lc.x_mid = h;
      layer_norm(h, w + s.ln2_g, w + s.ln2_b, lc.xhat2, lc.rstd2, lc.b);
      const auto ff = static_cast<Eigen::Index>(cfg_.d_ff);
      project(lc.b, w + s.w_1, w + s.b_1, ff, lc.u);
      lc.g = lc.u.unaryExpr([](Real u) { return gelu(u); });
      h.noalias() += lc.g * CMap<Real>(w + s.w_2, ff, d);
      h.rowwise() += CRow<Real>(w + s.b_2, d);
    }
    c.x_final = h;
    c.y.noalias() = h * CMap<Real>(w + L_.out_w, d, 3);
    c.y.rowwise() += CRow<Real>(w + L_.out_b, 3);
    MMap<Real>(out, Ti, 3) = c.y;
    for (Eigen::Index i = 0; i < Ti * 3; ++i)
      if (!std::isfinite(static_cast<double>(out[i]))) throw NonFiniteActivation("non-finite model output");
  }

  // Accumulates d(loss)/d(params) into grad given d(loss)/d(outputs).
  // `grad` must point at a buffer laid out (and aligned) like params.values.
  void backward(std::size_t T, const SequenceCache<Real>& c, const Real* dout, Real* grad) const {
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto ff = static_cast<Eigen::Index>(cfg_.d_ff);
    const auto Ti = static_cast<Eigen::Index>(T);
    const Real* w = p_.values.data();
    const Mat<Real> dY = CMap<Real>(dout, Ti, 3);

    MMap<Real>(grad + L_.out_w, d, 3).noalias() += c.x_final.transpose() * dY;
    MRow<Real>(grad + L_.out_b, 3) += dY.colwise().sum();
    Mat<Real> dh = dY * CMap<Real>(w + L_.out_w, d, 3).transpose();

    for (std::size_t li = cfg_.n_layers; li-- > 0;) {
      const LayerSlots& s = L_.layers[li];
      const LayerCache<Real>& lc = c.layers[li];

      // feed-forward branch
      MMap<Real>(grad + s.w_2, ff, d).noalias() += lc.g.transpose() * dh;
      add_colsum(dh, grad + s.b_2);
      Mat<Real> du = dh * CMap<Real>(w + s.w_2, ff, d).transpose();
      du.array() *= lc.u.unaryExpr([](Real u) { return gelu_grad(u); }).array();
      MMap<Real>(grad + s.w_1, d, ff).noalias() += lc.b.transpose() * du;
      add_colsum(du, grad + s.b_1);
      const Mat<Real> db = du * CMap<Real>(w + s.w_1, d, ff).transpose();
      Mat<Real> dmid = layer_norm_backward(db, lc.xhat2, lc.rstd2, w + s.ln2_g, grad + s.ln2_g, grad + s.ln2_b);
      dmid += dh;

      // attention branch
      MMap<Real>(grad + s.w_o, d, d).noalias() += lc.attn.transpose() * dmid;
      add_colsum(dmid, grad + s.b_o);
      const Mat<Real> dattn = dmid * CMap<Real>(w + s.w_o, d, d).transpose();
      Mat<Real> dq(Ti, d), dk(Ti, d), dv(Ti, d);
      attention_backward(lc, dattn, dq, dk, dv);
      Mat<Real> da = dq * CMap<Real>(w + s.w_q, d, d).transpose();
      da.noalias() += dk * CMap<Real>(w + s.w_k, d, d).transpose();
      da.noalias() += dv * CMap<Real>(w + s.w_v, d, d).transpose();
      MMap<Real>(grad + s.w_q, d, d).noalias() += lc.a.transpose() * dq;
      MMap<Real>(grad + s.w_k, d, d).noalias() += lc.a.transpose() * dk;
      MMap<Real>(grad + s.w_v, d, d).noalias() += lc.a.transpose() * dv;
      add_colsum(dq, grad + s.b_q);
      add_colsum(dk, grad + s.b_k);
      add_colsum(dv, grad + s.b_v);
      dh = layer_norm_backward(da, lc.xhat1, lc.rstd1, w + s.ln1_g, grad + s.ln1_g, grad + s.ln1_b);
      dh += dmid;
    }

    MMap<Real>(grad + L_.embed_w, 3, d).noalias() += c.x.transpose() * dh;
    add_colsum(dh, grad + L_.embed_b);
    if (cfg_.positional == PositionalEncoding::learned) MMap<Real>(grad + L_.positions, Ti, d) += dh;
  }

 private:
  static void project(const Mat<Real>& x, const Real* wt, const Real* bias, Eigen::Index out_cols, Mat<Real>& y) {
    y.noalias() = x * CMap<Real>(wt, x.cols(), out_cols);
    y.rowwise() += CRow<Real>(bias, out_cols);
  }

  void attention(LayerCache<Real>& lc, Eigen::Index T) const {
    const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
    const auto dh = static_cast<Eigen::Index>(cfg_.d_head());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    lc.probs.resize(static_cast<std::size_t>(H));
    lc.attn.resize(T, H * dh);
    for (Eigen::Index h = 0; h < H; ++h) {
      Mat<Real>& P = lc.probs[static_cast<std::size_t>(h)];
      const auto Q = lc.q.middleCols(h * dh, dh);
      const auto K = lc.k.middleCols(h * dh, dh);
      P.noalias() = (Q * K.transpose()) * scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        Real* row = P.row(i).data();
        double m = static_cast<double>(row[0]);
        for (Eigen::Index j = 1; j <= i; ++j) m = std::max(m, static_cast<double>(row[j]));
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double e = std::exp(static_cast<double>(row[j]) - m);
          row[j] = static_cast<Real>(e);
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (Eigen::Index j = 0; j <= i; ++j) row[j] = static_cast<Real>(static_cast<double>(row[j]) * inv);
        for (Eigen::Index j = i + 1; j < T; ++j) row[j] = Real(0);
      }
      lc.attn.middleCols(h * dh, dh).noalias() = P * lc.v.middleCols(h * dh, dh);
    }
  }

  void attention_backward(const LayerCache<Real>& lc, const Mat<Real>& dattn, Mat<Real>& dq, Mat<Real>& dk,
                          Mat<Real>& dv) const {
    const auto T = dattn.rows();
    const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
    const auto dh = static_cast<Eigen::Index>(cfg_.d_head());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    Mat<Real> dP(T, T);
    for (Eigen::Index h = 0; h < H; ++h) {
      const Mat<Real>& P = lc.probs[static_cast<std::size_t>(h)];
      const auto dO = dattn.middleCols(h * dh, dh);
      dP.noalias() = dO * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dO;
      // softmax backward restricted to the causal triangle, then fold in the scale
      for (Eigen::Index i = 0; i < T; ++i) {
        const Real* p = P.row(i).data();
        Real* g = dP.row(i).data();
        double dot = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) dot += static_cast<double>(p[j]) * static_cast<double>(g[j]);
        for (Eigen::Index j = 0; j <= i; ++j) g[j] = p[j] * static_cast<Real>(static_cast<double>(g[j]) - dot) * scale;
        for (Eigen::Index j = i + 1; j < T; ++j) g[j] = Real(0);
      }
      dq.middleCols(h * dh, dh).noalias() = dP * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dP.transpose() * lc.q.middleCols(h * dh, dh);
    }
  }

  const ModelParams<Real>& p_;
  const ModelConfig& cfg_;
  const ParamLayout& L_;
};

}  // namespace detail

template <typename Real>
SequenceTensor<Real> forward(const ModelParams<Real>& params, const SequenceTensor<Real>& inputs,
                             std::size_t workers = 1) {
  detail::Engine<Real> engine(params);
  SequenceTensor<Real> out(inputs.batch, inputs.length);
  std::vector<detail::SequenceCache<Real>> caches(std::max<std::size_t>(workers, 1));
  parallel_for(inputs.batch, workers, [&](std::size_t b, std::size_t worker) {
    engine.forward(inputs.row(b), inputs.length, caches[worker], false, out.row(b));
  });
  return out;
}

// Squared error of one sequence, summed over positions and components.
template <typename Real>
double sequence_squared_error(const Real* pred, const Real* target, std::size_t length) {
  double sum = 0.0;
  for (std::size_t i = 0; i < length * 3; ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += e * e;
  }
  return sum;
}

// Mean over batch and positions of the squared error summed over the three
// components.
template <typename Real>
double mse_loss(const SequenceTensor<Real>& pred, const SequenceTensor<Real>& target) {
  if (pred.batch != target.batch || pred.length != target.length) throw ShapeMismatch("mse_loss shape mismatch");
  double total = 0.0;
  for (std::size_t b = 0; b < pred.batch; ++b) total += sequence_squared_error(pred.row(b), target.row(b), pred.length);
  return total / static_cast<double>(pred.batch * pred.length);
}

template <typename Real>
struct GradResult {
  double loss = 0.0;
  ModelParams<Real> grads;
};

// Exact gradient of mse_loss(forward(params, batch.inputs), batch.targets).
// Each sequence's gradient is formed in its own buffer and the buffers are
// summed in sequence order, so the result is independent of `workers`.
template <typename Real>
GradResult<Real> grad(const ModelParams<Real>& params, const Batch<Real>& batch, std::size_t workers = 1) {
  const std::size_t B = batch.inputs.batch, T = batch.inputs.length;
  if (batch.targets.batch != B || batch.targets.length != T) throw ShapeMismatch("targets shape mismatch");
  if (B < 1) throw ShapeMismatch("empty batch");
  workers = std::clamp<std::size_t>(workers, 1, B);
  detail::Engine<Real> engine(params);
  GradResult<Real> result{0.0, params.zeros_like()};
  const double scale = 2.0 / static_cast<double>(B * T);
  std::vector<double> row_loss(B);

  using Buffer = AlignedVector<Real>;
  auto run_row = [&](std::size_t b, detail::SequenceCache<Real>& cache, Buffer& pred, Buffer& dout, Buffer& g) {
    engine.forward(batch.inputs.row(b), T, cache, true, pred.data());
    const Real* tgt = batch.targets.row(b);
    row_loss[b] = sequence_squared_error(pred.data(), tgt, T);
    for (std::size_t i = 0; i < T * 3; ++i)
      dout[i] = static_cast<Real>(scale * (static_cast<double>(pred[i]) - static_cast<double>(tgt[i])));
    std::fill(g.begin(), g.end(), Real{0});
    engine.backward(T, cache, dout.data(), g.data());
  };
  auto accumulate = [&](const Buffer& g) {
    Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>(result.grads.values.data(), g.size()) +=
        Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(g.data(), g.size());
  };

  if (workers == 1) {
    detail::SequenceCache<Real> cache;
    Buffer pred(T * 3), dout(T * 3), g(params.size());
    for (std::size_t b = 0; b < B; ++b) {
      run_row(b, cache, pred, dout, g);
      accumulate(g);
    }
  } else {
    std::vector<detail::SequenceCache<Real>> caches(workers);
    std::vector<Buffer> preds(workers, Buffer(T * 3)), douts(preds);
    std::vector<Buffer> per_row(B, Buffer(params.size()));
    parallel_for(B, workers, [&](std::size_t b, std::size_t wk) {
      run_row(b, caches[wk], preds[wk], douts[wk], per_row[b]);
    });
    for (const auto& g : per_row) accumulate(g);
  }

  double total = 0.0;
  for (double l : row_loss) total += l;
  result.loss = total / static_cast<double>(B * T);
  return result;
}

// Rolls the model forward `steps` times, feeding each last-position
// prediction back as the next input. The context keeps the most recent
// context_len points.
template <typename Real>
std::vector<Vec3> generate_autoregressive(const ModelParams<Real>& params, std::span<const Vec3> context,
                                          std::size_t steps) {
  if (context.empty()) throw ShapeMismatch("empty context");
  detail::Engine<Real> engine(params);
  detail::SequenceCache<Real> cache;
  std::vector<Real> window;
  for (const auto& v : context)
    for (double x : v) window.push_back(static_cast<Real>(x));
  const std::size_t max_len = params.config.context_len;
  std::vector<Vec3> out;
  for (std::size_t s = 0; s < steps; ++s) {
    std::size_t T = window.size() / 3;
    if (T > max_len) {
      window.erase(window.begin(), window.begin() + static_cast<std::ptrdiff_t>((T - max_len) * 3));
      T = max_len;
    }
    std::vector<Real> pred(T * 3);
    engine.forward(window.data(), T, cache, false, pred.data());
    const Vec3 next{static_cast<double>(pred[(T - 1) * 3]), static_cast<double>(pred[(T - 1) * 3 + 1]),
                    static_cast<double>(pred[(T - 1) * 3 + 2])};
    out.push_back(next);
    for (double x : next) window.push_back(static_cast<Real>(x));
  }
  return out;
}

}  // namespace chaoscast
