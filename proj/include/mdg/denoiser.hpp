#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mdg/sample_types.hpp"

namespace mdg {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum Segment : int { kScreenSegment = 0, kPromptSegment = 1, kResponseSegment = 2 };

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_seq_len = 512;
  int n_segments = 3;
  std::uint64_t init_seed = 0;

  /// Throws std::invalid_argument.
  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 2 || max_seq_len < 1)
      throw std::invalid_argument("model config: dimensions must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model not divisible by n_heads");
    if (n_segments != 3) throw std::invalid_argument("model config: expected 3 segments");
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
struct LayerParams {
  Matrix<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> wq, wk, wv, wo;
  Matrix<Scalar> bq, bk, bv, bo;
  Matrix<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> w1, b1, w2, b2;
};

/// All trainable tensors. Biases and gains are stored as 1-row matrices.
template <typename Scalar>
struct Parameters {
  Matrix<Scalar> token_embedding;     // vocab x d
  Matrix<Scalar> position_embedding;  // max_seq_len x d
  Matrix<Scalar> segment_embedding;   // 3 x d
  std::vector<LayerParams<Scalar>> layers;
  Matrix<Scalar> lnf_gain, lnf_bias;
  Matrix<Scalar> w_out, b_out;  // d x vocab, 1 x vocab

  /// Zero tensors with the shapes implied by `cfg`; layer-norm gains are zero too.
  static Parameters zeros(const ModelConfig& cfg) {
    const int d = cfg.d_model;
    Parameters p;
    p.token_embedding = Matrix<Scalar>::Zero(cfg.vocab_size, d);
    p.position_embedding = Matrix<Scalar>::Zero(cfg.max_seq_len, d);
    p.segment_embedding = Matrix<Scalar>::Zero(cfg.n_segments, d);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.ln1_gain = l.ln1_bias = l.ln2_gain = l.ln2_bias = Matrix<Scalar>::Zero(1, d);
      l.wq = l.wk = l.wv = l.wo = Matrix<Scalar>::Zero(d, d);
      l.bq = l.bk = l.bv = l.bo = Matrix<Scalar>::Zero(1, d);
      l.w1 = Matrix<Scalar>::Zero(d, cfg.d_ff);
      l.b1 = Matrix<Scalar>::Zero(1, cfg.d_ff);
      l.w2 = Matrix<Scalar>::Zero(cfg.d_ff, d);
      l.b2 = Matrix<Scalar>::Zero(1, d);
    }
    p.lnf_gain = p.lnf_bias = Matrix<Scalar>::Zero(1, d);
    p.w_out = Matrix<Scalar>::Zero(d, cfg.vocab_size);
    p.b_out = Matrix<Scalar>::Zero(1, cfg.vocab_size);
    return p;
  }

  /// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases; residual output
  /// projections scaled down by sqrt(2 * n_layers).
  static Parameters initialized(const ModelConfig& cfg) {
    cfg.validate();
    auto p = zeros(cfg);
    std::mt19937_64 rng(cfg.init_seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    auto fill = [&](Matrix<Scalar>& m, double scale = 1.0) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng) * scale);
    };
    const double resid = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    fill(p.token_embedding);
    fill(p.position_embedding);
    fill(p.segment_embedding);
    for (auto& l : p.layers) {
      l.ln1_gain.setOnes();
      l.ln2_gain.setOnes();
      fill(l.wq);
      fill(l.wk);
      fill(l.wv);
      fill(l.wo, resid);
      fill(l.w1);
      fill(l.w2, resid);
    }
    p.lnf_gain.setOnes();
    fill(p.w_out);
    return p;
  }

  /// Visits every tensor in a fixed order with its stable name.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <typename Other>
  Parameters<Other> cast() const {
    Parameters<Other> out;
    out.layers.resize(layers.size());
    auto dst = out.tensor_list();
    std::size_t i = 0;
    for_each([&](const std::string&, const Matrix<Scalar>& m) { *dst[i++] = m.template cast<Other>(); });
    return out;
  }

  std::vector<Matrix<Scalar>*> tensor_list() {
    std::vector<Matrix<Scalar>*> out;
    for_each([&](const std::string&, Matrix<Scalar>& m) { out.push_back(&m); });
    return out;
  }

  void set_zero() {
    for_each([](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("token_embedding", p.token_embedding);
    f("position_embedding", p.position_embedding);
    f("segment_embedding", p.segment_embedding);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      auto& l = p.layers[i];
      const std::string pre = "layer" + std::to_string(i) + ".";
      f(pre + "ln1_gain", l.ln1_gain);
      f(pre + "ln1_bias", l.ln1_bias);
      f(pre + "wq", l.wq);
      f(pre + "wk", l.wk);
      f(pre + "wv", l.wv);
      f(pre + "wo", l.wo);
      f(pre + "bq", l.bq);
      f(pre + "bk", l.bk);
      f(pre + "bv", l.bv);
      f(pre + "bo", l.bo);
      f(pre + "ln2_gain", l.ln2_gain);
      f(pre + "ln2_bias", l.ln2_bias);
      f(pre + "w1", l.w1);
      f(pre + "b1", l.b1);
      f(pre + "w2", l.w2);
      f(pre + "b2", l.b2);
    }
    f("lnf_gain", p.lnf_gain);
    f("lnf_bias", p.lnf_bias);
    f("w_out", p.w_out);
    f("b_out", p.b_out);
  }
};

/// Token, segment and position ids of one packed sequence. Position ids restart at zero in
/// every segment so a response slot keeps the same embedding regardless of screen length.
struct SequenceInput {
  std::vector<TokenId> tokens;
  std::vector<int> segments;
  std::vector<int> positions;

  std::size_t size() const { return tokens.size(); }
};

inline SequenceInput pack_sequence(const Conditioning& cond, std::span<const TokenId> response) {
  SequenceInput in;
  auto append = [&](auto tokens, int segment) {
    int pos = 0;
    for (auto t : tokens) {
      in.tokens.push_back(t);
      in.segments.push_back(segment);
      in.positions.push_back(pos++);
    }
  };
  append(std::span<const TokenId>(cond.screen), kScreenSegment);
  append(std::span<const TokenId>(cond.prompt), kPromptSegment);
  append(response, kResponseSegment);
  return in;
}

namespace detail {

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> xhat;
  ColVector<Scalar> rstd;
};

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias,
                          LayerNormCache<Scalar>* cache) {
  constexpr Scalar kEps = Scalar(1e-5);
  const auto n = x.cols();
  const ColVector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> xhat = x.colwise() - mean;
  const ColVector<Scalar> var = xhat.array().square().rowwise().sum() / Scalar(n);
  const ColVector<Scalar> rstd = (var.array() + kEps).rsqrt();
  xhat.array().colwise() *= rstd.array();
  Matrix<Scalar> y = xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dy, const LayerNormCache<Scalar>& c, const Matrix<Scalar>& gain,
                                   Matrix<Scalar>& dgain, Matrix<Scalar>& dbias) {
  dgain.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Matrix<Scalar> dxhat = dy.array().rowwise() * gain.row(0).array();
  const auto n = Scalar(dy.cols());
  const ColVector<Scalar> mean_d = dxhat.rowwise().sum() / n;
  const ColVector<Scalar> mean_dx = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / n;
  Matrix<Scalar> dx = dxhat;
  dx.colwise() -= mean_d;
  dx.array() -= c.xhat.array().colwise() * mean_dx.array();
  dx.array().colwise() *= c.rstd.array();
  return dx;
}

template <typename Scalar>
inline constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)

template <typename Scalar>
void softmax_rows(Matrix<Scalar>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace detail

template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> x_in;
  detail::LayerNormCache<Scalar> ln1;
  Matrix<Scalar> h1, q, k, v;
  std::vector<Matrix<Scalar>> attn;  // per head, seq x seq
  Matrix<Scalar> ctx;
  detail::LayerNormCache<Scalar> ln2;
  Matrix<Scalar> h2, u, g;
};

template <typename Scalar>
struct ForwardCache {
  std::vector<LayerCache<Scalar>> layers;
  detail::LayerNormCache<Scalar> lnf;
  Matrix<Scalar> hf_out;     // final hidden states of the output rows
  std::vector<int> out_rows;  // sequence rows whose logits were produced
};

/// Bidirectional transformer mask predictor. Attention spans the whole packed sequence.
template <typename Scalar>
class Denoiser {
 public:
  Denoiser(ModelConfig cfg, Parameters<Scalar> params) : cfg_(cfg), params_(std::move(params)) { cfg_.validate(); }
  explicit Denoiser(const ModelConfig& cfg) : Denoiser(cfg, Parameters<Scalar>::initialized(cfg)) {}

  const ModelConfig& config() const { return cfg_; }
  const Parameters<Scalar>& params() const { return params_; }
  Parameters<Scalar>& params() { return params_; }

  /// Logits (rows = response positions in sequence order, cols = vocab). Throws
  /// std::invalid_argument on malformed input.
  Matrix<Scalar> forward(const SequenceInput& in, ForwardCache<Scalar>* cache = nullptr) const {
    validate_input(in);
    const int T = static_cast<int>(in.size());
    const int d = cfg_.d_model;
    const int dh = d / cfg_.n_heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    const auto& p = params_;

    Matrix<Scalar> x(T, d);
    for (int i = 0; i < T; ++i)
      x.row(i) = p.token_embedding.row(in.tokens[i]) + p.position_embedding.row(in.positions[i]) +
                 p.segment_embedding.row(in.segments[i]);

    if (cache) cache->layers.resize(p.layers.size());
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
      const auto& l = p.layers[li];
      LayerCache<Scalar> local;
      LayerCache<Scalar>& c = cache ? cache->layers[li] : local;
      if (cache) c.x_in = x;

      Matrix<Scalar> h1 = detail::layer_norm(x, l.ln1_gain, l.ln1_bias, cache ? &c.ln1 : nullptr);
      Matrix<Scalar> q = h1 * l.wq;
      q.rowwise() += l.bq.row(0);
      Matrix<Scalar> k = h1 * l.wk;
      k.rowwise() += l.bk.row(0);
      Matrix<Scalar> v = h1 * l.wv;
      v.rowwise() += l.bv.row(0);

      Matrix<Scalar> ctx(T, d);
      if (cache) c.attn.resize(cfg_.n_heads);
      for (int h = 0; h < cfg_.n_heads; ++h) {
        Matrix<Scalar> a = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
        detail::softmax_rows(a);
        ctx.middleCols(h * dh, dh).noalias() = a * v.middleCols(h * dh, dh);
        if (cache) c.attn[h] = std::move(a);
      }
      Matrix<Scalar> att = ctx * l.wo;
      att.rowwise() += l.bo.row(0);
      x += att;

      Matrix<Scalar> h2 = detail::layer_norm(x, l.ln2_gain, l.ln2_bias, cache ? &c.ln2 : nullptr);
      Matrix<Scalar> u = h2 * l.w1;
      u.rowwise() += l.b1.row(0);
      Matrix<Scalar> g = gelu(u);
      Matrix<Scalar> f = g * l.w2;
      f.rowwise() += l.b2.row(0);
      x += f;

      if (cache) {
        c.h1 = std::move(h1);
        c.q = std::move(q);
        c.k = std::move(k);
        c.v = std::move(v);
        c.ctx = std::move(ctx);
        c.h2 = std::move(h2);
        c.u = std::move(u);
        c.g = std::move(g);
      }
    }

    std::vector<int> out_rows;
    for (int i = 0; i < T; ++i)
      if (in.segments[i] == kResponseSegment) out_rows.push_back(i);
    Matrix<Scalar> xo(static_cast<Eigen::Index>(out_rows.size()), d);
    for (std::size_t r = 0; r < out_rows.size(); ++r) xo.row(static_cast<Eigen::Index>(r)) = x.row(out_rows[r]);
    Matrix<Scalar> hf = detail::layer_norm(xo, p.lnf_gain, p.lnf_bias, cache ? &cache->lnf : nullptr);
    Matrix<Scalar> logits = hf * p.w_out;
    logits.rowwise() += p.b_out.row(0);
    if (cache) {
      cache->hf_out = std::move(hf);
      cache->out_rows = std::move(out_rows);
    }
    return logits;
  }

  /// Accumulates parameter gradients for upstream logit gradients `dlogits`.
  void backward(const SequenceInput& in, const ForwardCache<Scalar>& cache, const Matrix<Scalar>& dlogits,
                Parameters<Scalar>& grads) const {
    const int T = static_cast<int>(in.size());
    const int d = cfg_.d_model;
    const int dh = d / cfg_.n_heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    const auto& p = params_;

    grads.w_out.noalias() += cache.hf_out.transpose() * dlogits;
    grads.b_out.row(0) += dlogits.colwise().sum();
    const Matrix<Scalar> dhf = dlogits * p.w_out.transpose();
    const Matrix<Scalar> dxo = detail::layer_norm_backward(dhf, cache.lnf, p.lnf_gain, grads.lnf_gain, grads.lnf_bias);

    Matrix<Scalar> dx = Matrix<Scalar>::Zero(T, d);
    for (std::size_t r = 0; r < cache.out_rows.size(); ++r) dx.row(cache.out_rows[r]) = dxo.row(static_cast<Eigen::Index>(r));

    for (int li = static_cast<int>(p.layers.size()) - 1; li >= 0; --li) {
      const auto& l = p.layers[li];
      const auto& c = cache.layers[li];
      auto& gl = grads.layers[li];

      // feed-forward block
      gl.w2.noalias() += c.g.transpose() * dx;
      gl.b2.row(0) += dx.colwise().sum();
      Matrix<Scalar> du = dx * l.w2.transpose();
      du.array() *= gelu_grad(c.u).array();
      gl.w1.noalias() += c.h2.transpose() * du;
      gl.b1.row(0) += du.colwise().sum();
      const Matrix<Scalar> dh2 = du * l.w1.transpose();
      dx += detail::layer_norm_backward(dh2, c.ln2, l.ln2_gain, gl.ln2_gain, gl.ln2_bias);

      // attention block
      gl.wo.noalias() += c.ctx.transpose() * dx;
      gl.bo.row(0) += dx.colwise().sum();
      const Matrix<Scalar> dctx = dx * l.wo.transpose();
      Matrix<Scalar> dq(T, d), dk(T, d), dv(T, d);
      for (int h = 0; h < cfg_.n_heads; ++h) {
        const auto& a = c.attn[h];
        const auto dctx_h = dctx.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh).noalias() = a.transpose() * dctx_h;
        Matrix<Scalar> da = dctx_h * c.v.middleCols(h * dh, dh).transpose();
        const ColVector<Scalar> rowdot = (da.array() * a.array()).rowwise().sum();
        da.colwise() -= rowdot;
        da.array() *= a.array();
        da *= scale;
        dq.middleCols(h * dh, dh).noalias() = da * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = da.transpose() * c.q.middleCols(h * dh, dh);
      }
      gl.wq.noalias() += c.h1.transpose() * dq;
      gl.wk.noalias() += c.h1.transpose() * dk;
      gl.wv.noalias() += c.h1.transpose() * dv;
      gl.bq.row(0) += dq.colwise().sum();
      gl.bk.row(0) += dk.colwise().sum();
      gl.bv.row(0) += dv.colwise().sum();
      Matrix<Scalar> dh1 = dq * l.wq.transpose();
      dh1.noalias() += dk * l.wk.transpose();
      dh1.noalias() += dv * l.wv.transpose();
      dx += detail::layer_norm_backward(dh1, c.ln1, l.ln1_gain, gl.ln1_gain, gl.ln1_bias);
    }

    for (int i = 0; i < T; ++i) {
      grads.token_embedding.row(in.tokens[i]) += dx.row(i);
      grads.position_embedding.row(in.positions[i]) += dx.row(i);
      grads.segment_embedding.row(in.segments[i]) += dx.row(i);
    }
  }

 private:
  void validate_input(const SequenceInput& in) const {
    if (in.tokens.empty()) throw std::invalid_argument("forward: empty sequence");
    if (in.segments.size() != in.size() || in.positions.size() != in.size())
      throw std::invalid_argument("forward: token, segment and position lengths differ");
    if (static_cast<int>(in.size()) > cfg_.max_seq_len)
      throw std::invalid_argument("forward: sequence of " + std::to_string(in.size()) + " exceeds max_seq_len " +
                                  std::to_string(cfg_.max_seq_len));
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in.tokens[i] < 0 || in.tokens[i] >= cfg_.vocab_size) throw std::invalid_argument("forward: token id out of range");
      if (in.segments[i] < 0 || in.segments[i] >= cfg_.n_segments) throw std::invalid_argument("forward: bad segment id");
      if (in.positions[i] < 0 || in.positions[i] >= cfg_.max_seq_len)
        throw std::invalid_argument("forward: position id out of range");
    }
  }

  static Matrix<Scalar> gelu(const Matrix<Scalar>& u) {
    const auto c = detail::kGeluC<Scalar>;
    return (Scalar(0.5) * u.array() *
            (Scalar(1) + (c * (u.array() + Scalar(0.044715) * u.array().cube())).tanh()))
        .matrix();
  }

  static Matrix<Scalar> gelu_grad(const Matrix<Scalar>& u) {
    const auto c = detail::kGeluC<Scalar>;
    const auto inner = c * (u.array() + Scalar(0.044715) * u.array().cube());
    const auto th = inner.tanh().eval();
    return (Scalar(0.5) * (Scalar(1) + th) +
            Scalar(0.5) * u.array() * (Scalar(1) - th.square()) * c * (Scalar(1) + Scalar(3 * 0.044715) * u.array().square()))
        .matrix();
  }

  ModelConfig cfg_;
  Parameters<Scalar> params_;
};

struct BatchStats {
  double loss = 0;          ///< mean over the batch of weighted masked NLL sums
  int samples = 0;
  int skipped = 0;          ///< samples with no masked position (zero contribution)
  long masked_tokens = 0;
};

/// Masked-diffusion objective for one batch:
///   loss = (1/B) sum_b w_b * sum_{i : r_t[i] = MASK} -log p(r_0[i] | conditioning, r_t)
/// Gradients of exactly this loss are written to `grads` (overwritten, not accumulated).
/// Samples are evaluated in batch order so the reduction is reproducible.
template <typename Scalar>
BatchStats loss_and_grad(const Denoiser<Scalar>& model, std::span<const TrainingExample> batch,
                         std::type_identity_t<Parameters<Scalar>>* grads) {
  BatchStats stats;
  stats.samples = static_cast<int>(batch.size());
  if (grads) grads->set_zero();
  if (batch.empty()) return stats;
  const Scalar inv_batch = Scalar(1) / Scalar(batch.size());
  double total = 0;
  ForwardCache<Scalar> cache;
  for (const auto& ex : batch) {
    const auto& cs = ex.corrupted;
    const auto& r0 = ex.sample->response;
    if (cs.tokens.size() != r0.size() || cs.mask.size() != r0.size())
      throw std::invalid_argument("loss_and_grad: corrupted response length mismatch");
    const int masked = cs.masked_count();
    if (masked == 0) {
      ++stats.skipped;
      continue;
    }
    stats.masked_tokens += masked;
    const auto in = pack_sequence(ex.sample->cond, cs.tokens);
    Matrix<Scalar> logits = model.forward(in, grads ? &cache : nullptr);
    Matrix<Scalar> dlogits;
    if (grads) dlogits = Matrix<Scalar>::Zero(logits.rows(), logits.cols());
    double sample_loss = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      if (!cs.mask[i]) continue;
      auto row = logits.row(i);
      const Scalar mx = row.maxCoeff();
      const auto e = (row.array() - mx).exp().eval();
      const Scalar z = e.sum();
      sample_loss += static_cast<double>(std::log(z) + mx - row(r0[i]));
      if (grads) {
        dlogits.row(i) = e.matrix() / z;
        dlogits(i, r0[i]) -= Scalar(1);
        dlogits.row(i) *= static_cast<Scalar>(cs.weight) * inv_batch;
      }
    }
    total += cs.weight * sample_loss;
    if (grads) model.backward(in, cache, dlogits, *grads);
  }
  stats.loss = total / static_cast<double>(batch.size());
  return stats;
}

}  // namespace mdg
