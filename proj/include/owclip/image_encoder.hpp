#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "owclip/error.hpp"
#include "owclip/prompt_block.hpp"
#include "owclip/rng.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

// Token sequence entering a layer: the [CLS] token and N patch tokens.
struct TokenSequence {
  Eigen::RowVectorXd cls;
  Eigen::MatrixXd patches;  // N x d_model
  int layer_index = 0;
};

// Opaque forward cache handed back to `backward`.
struct EncoderTrace {
  virtual ~EncoderTrace() = default;
};

// Image side of the dual encoder. An "image" is the raw descriptor of one
// detection proposal; prompts are optional per-layer tokens.
class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;

  virtual std::string name() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  // Layer count and token width a PromptBlock must have; 0 layers means the
  // backend has no prompt slots.
  virtual std::size_t prompt_layers() const = 0;
  virtual std::size_t prompt_width() const = 0;

  // Prompt blocks are concatenated layer by layer in the given order.
  virtual Vector encode_prompted(std::span<const double> image,
                                 std::span<const PromptBlock* const> prompts) const = 0;

  Vector encode(std::span<const double> image) const {
    return encode_prompted(image, std::span<const PromptBlock* const>());
  }
  Vector encode(std::span<const double> image, const PromptBlock& block) const {
    const PromptBlock* p = &block;
    return encode_prompted(image, std::span<const PromptBlock* const>(&p, 1));
  }
  Vector encode(std::span<const double> image, std::span<const PromptBlock* const> prompts) const {
    return encode_prompted(image, prompts);
  }

  // Forward pass with a single prompt block, keeping what `backward` needs.
  virtual Vector forward(std::span<const double> image, const PromptBlock& block,
                         std::unique_ptr<EncoderTrace>& trace) const = 0;

  // Accumulates dLoss/dPrompt into `grad` (same shape as the block) given
  // dLoss/dEmbedding.
  virtual void backward(const EncoderTrace& trace, std::span<const double> grad_embedding,
                        PromptBlock& grad) const = 0;

  // Serialized frozen weights, used in parameter fingerprints.
  virtual std::string weight_bytes() const = 0;
};

// Backend for precomputed embeddings: the "image" already is the embedding.
class PrecomputedEncoder final : public ImageEncoder {
 public:
  explicit PrecomputedEncoder(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ConfigError("embedding dim must be positive");
  }

  std::string name() const override { return "file"; }
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  std::size_t prompt_layers() const override { return 0; }
  std::size_t prompt_width() const override { return 0; }

  Vector encode_prompted(std::span<const double> image,
                         std::span<const PromptBlock* const> prompts) const override {
    if (image.size() != dim_) throw DimensionError("precomputed embedding has wrong dim");
    for (const auto* p : prompts) {
      if (p->length != 0) throw ConfigError("precomputed backend has no prompt slots");
    }
    return l2_normalized(image);
  }

  Vector forward(std::span<const double> image, const PromptBlock& block,
                 std::unique_ptr<EncoderTrace>& trace) const override {
    trace.reset();
    const PromptBlock* p = &block;
    return encode(image, std::span<const PromptBlock* const>(&p, 1));
  }

  void backward(const EncoderTrace&, std::span<const double>, PromptBlock&) const override {}

  std::string weight_bytes() const override { return "precomputed:" + std::to_string(dim_); }

 private:
  std::size_t dim_;
};

struct ToyEncoderConfig {
  std::size_t layers = 2;
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t patches = 4;
  std::size_t input_dim = 16;
  std::size_t output_dim = 16;
  std::size_t mlp_hidden = 32;
  std::uint64_t seed = 7;
};

struct ToyLayerWeights {
  Eigen::MatrixXd wq, wk, wv, wo;  // d_model x d_model
  Eigen::MatrixXd w1;              // d_model x hidden
  Eigen::RowVectorXd b1;           // hidden
  Eigen::MatrixXd w2;              // hidden x d_model
  Eigen::RowVectorXd b2;           // d_model
};

struct ToyEncoderWeights {
  Eigen::RowVectorXd cls;                  // d_model
  std::vector<Eigen::MatrixXd> patch_proj;  // per patch: input_dim x d_model
  Eigen::MatrixXd pos;                     // patches x d_model
  std::vector<ToyLayerWeights> layers;
  Eigen::MatrixXd proj;                    // d_model x output_dim
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm without affine parameters. Returns normalized rows and
// stores 1/sigma per row.
inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, Eigen::VectorXd& rstd) {
  const auto cols = static_cast<double>(x.cols());
  Eigen::MatrixXd y(x.rows(), x.cols());
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / cols;
    const Eigen::RowVectorXd c = x.row(r).array() - mu;
    const double var = c.squaredNorm() / cols;
    rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    y.row(r) = c * rstd(r);
  }
  return y;
}

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& y, const Eigen::VectorXd& rstd,
                                           const Eigen::MatrixXd& dy) {
  const auto cols = static_cast<double>(y.cols());
  Eigen::MatrixXd dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mean_dy = dy.row(r).sum() / cols;
    const double mean_dy_y = dy.row(r).dot(y.row(r)) / cols;
    dx.row(r) = rstd(r) * (dy.row(r).array() - mean_dy - y.row(r).array() * mean_dy_y).matrix();
  }
  return dx;
}

inline void softmax_rows(Eigen::MatrixXd& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
}

inline void append_matrix_bytes(std::string& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    out.append(reinterpret_cast<const char*>(&v), sizeof(double));
  }
}

}  // namespace detail

// Deterministic miniature ViT with deep prompt slots.
//
// Tokenization: cls is a fixed vector; patch i is image * patch_proj[i] + pos[i].
// Each layer is pre-norm: X1 = X + MHA(LN(X)), X2 = X1 + W2 tanh(W1 LN(X1) + b1) + b2.
// Layer l consumes [g, P^l, H] and only g and H continue; the prompt outputs
// are never computed. The embedding is normalize(LN(g_final) * proj).
class ToyImageEncoder final : public ImageEncoder {
 public:
  explicit ToyImageEncoder(ToyEncoderConfig cfg = {}) : cfg_(cfg) {
    if (cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0) {
      throw ConfigError("d_model must be a positive multiple of heads");
    }
    if (cfg.patches == 0 || cfg.layers == 0 || cfg.input_dim == 0 || cfg.output_dim == 0 ||
        cfg.mlp_hidden == 0) {
      throw ConfigError("toy encoder dimensions must be positive");
    }
    init_weights();
  }

  std::string name() const override { return "toy"; }
  std::size_t input_dim() const override { return cfg_.input_dim; }
  std::size_t output_dim() const override { return cfg_.output_dim; }
  std::size_t prompt_layers() const override { return cfg_.layers; }
  std::size_t prompt_width() const override { return cfg_.d_model; }

  const ToyEncoderConfig& config() const { return cfg_; }
  const ToyEncoderWeights& weights() const { return w_; }

  TokenSequence tokenize(std::span<const double> image) const {
    if (image.size() != cfg_.input_dim) {
      throw DimensionError("image descriptor has dim " + std::to_string(image.size()) +
                           ", encoder expects " + std::to_string(cfg_.input_dim));
    }
    const Eigen::Map<const Eigen::RowVectorXd> x(image.data(),
                                                 static_cast<Eigen::Index>(image.size()));
    TokenSequence seq;
    seq.cls = w_.cls;
    seq.patches.resize(static_cast<Eigen::Index>(cfg_.patches),
                       static_cast<Eigen::Index>(cfg_.d_model));
    for (std::size_t i = 0; i < cfg_.patches; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      seq.patches.row(r) = x * w_.patch_proj[i] + w_.pos.row(r);
    }
    return seq;
  }

  Vector encode_tokens(const TokenSequence& seq,
                       std::span<const PromptBlock* const> prompts) const {
    Eigen::MatrixXd keep = stack_keep(seq);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const Eigen::MatrixXd p = prompt_rows(prompts, l);
      LayerCache cache;
      keep = layer_forward(l, keep, p, cache);
    }
    Eigen::VectorXd rstd;
    const Eigen::MatrixXd z = detail::layer_norm(keep.topRows(1), rstd);
    return project(z);
  }

  Vector encode_prompted(std::span<const double> image,
                         std::span<const PromptBlock* const> prompts) const override {
    for (const auto* p : prompts) p->require_shape(cfg_.layers, cfg_.d_model);
    return encode_tokens(tokenize(image), prompts);
  }

  Vector forward(std::span<const double> image, const PromptBlock& block,
                 std::unique_ptr<EncoderTrace>& trace) const override {
    block.require_shape(cfg_.layers, cfg_.d_model);
    auto t = std::make_unique<Trace>();
    Eigen::MatrixXd keep = stack_keep(tokenize(image));
    const PromptBlock* bp = &block;
    const std::span<const PromptBlock* const> blocks(&bp, 1);
    t->layers.resize(cfg_.layers);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      keep = layer_forward(l, keep, prompt_rows(blocks, l), t->layers[l]);
    }
    t->final_ln = detail::layer_norm(keep.topRows(1), t->final_rstd);
    t->prompt_length = block.length;
    const Eigen::RowVectorXd y = t->final_ln * w_.proj;
    t->proj_norm = y.norm();
    Vector e = project(t->final_ln);
    t->embedding = e;
    trace = std::move(t);
    return e;
  }

  void backward(const EncoderTrace& trace_base, std::span<const double> grad_embedding,
                PromptBlock& grad) const override {
    const auto& t = dynamic_cast<const Trace&>(trace_base);
    if (grad_embedding.size() != cfg_.output_dim) throw DimensionError("embedding gradient dim");
    const auto d_out = static_cast<Eigen::Index>(cfg_.output_dim);
    const Eigen::Map<const Eigen::RowVectorXd> de(grad_embedding.data(), d_out);
    const Eigen::Map<const Eigen::RowVectorXd> e(t.embedding.data(), d_out);
    // e = y / |y|  =>  dy = (de - e (e . de)) / |y|
    const Eigen::RowVectorXd dy = (de - e * e.dot(de)) / t.proj_norm;
    const Eigen::MatrixXd dz = dy * w_.proj.transpose();
    const Eigen::MatrixXd dg = detail::layer_norm_backward(t.final_ln, t.final_rstd, dz);

    Eigen::MatrixXd dkeep = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(1 + cfg_.patches),
                                                  static_cast<Eigen::Index>(cfg_.d_model));
    dkeep.row(0) = dg.row(0);
    for (std::size_t l = cfg_.layers; l-- > 0;) {
      Eigen::MatrixXd dprompt;
      dkeep = layer_backward(l, t.layers[l], dkeep, dprompt);
      for (std::size_t m = 0; m < t.prompt_length; ++m) {
        auto g = grad.token(l, m);
        for (std::size_t j = 0; j < cfg_.d_model; ++j) {
          g[j] += dprompt(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j));
        }
      }
    }
  }

  // Full-row layer evaluation over X = [g; P; H] (T x d_model), including the
  // prompt rows that the encoder itself never computes.
  Eigen::MatrixXd layer_forward_full(std::size_t l, const Eigen::MatrixXd& x) const {
    const auto& lw = w_.layers.at(l);
    Eigen::VectorXd rstd;
    const Eigen::MatrixXd a = detail::layer_norm(x, rstd);
    const Eigen::MatrixXd q = a * lw.wq, k = a * lw.wk, v = a * lw.wv;
    const Eigen::MatrixXd o = attention(q, k, v, nullptr);
    const Eigen::MatrixXd x1 = x + o * lw.wo;
    return x1 + mlp(x1, lw, nullptr);
  }

  // Builds the input of layer `l` from the full output of layer l-1: g and H
  // rows are carried over, prompt rows are replaced by fresh tokens.
  Eigen::MatrixXd next_layer_input(const Eigen::MatrixXd& prev_full_output,
                                   std::span<const PromptBlock* const> prompts,
                                   std::size_t l) const {
    const Eigen::MatrixXd p = prompt_rows(prompts, l);
    const auto n = static_cast<Eigen::Index>(cfg_.patches);
    Eigen::MatrixXd x(1 + p.rows() + n, prev_full_output.cols());
    x.row(0) = prev_full_output.row(0);
    if (p.rows() > 0) x.middleRows(1, p.rows()) = p;
    x.bottomRows(n) = prev_full_output.bottomRows(n);
    return x;
  }

  std::string weight_bytes() const override {
    std::string out;
    detail::append_matrix_bytes(out, w_.cls);
    for (const auto& m : w_.patch_proj) detail::append_matrix_bytes(out, m);
    detail::append_matrix_bytes(out, w_.pos);
    for (const auto& lw : w_.layers) {
      for (const auto* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w1, &lw.w2}) {
        detail::append_matrix_bytes(out, *m);
      }
      detail::append_matrix_bytes(out, lw.b1);
      detail::append_matrix_bytes(out, lw.b2);
    }
    detail::append_matrix_bytes(out, w_.proj);
    return out;
  }

 private:
  struct LayerCache {
    Eigen::MatrixXd a_keep, a_prompt;  // layer-normed inputs
    Eigen::VectorXd rstd_keep, rstd_prompt;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per head, R x T
    Eigen::MatrixXd b;                  // LN(X1)
    Eigen::VectorXd rstd_b;
    Eigen::MatrixXd g;                  // tanh(U)
  };

  struct Trace final : EncoderTrace {
    std::vector<LayerCache> layers;
    Eigen::MatrixXd final_ln;
    Eigen::VectorXd final_rstd;
    double proj_norm = 1.0;
    std::size_t prompt_length = 0;
    Vector embedding;
  };

  void init_weights() {
    Rng rng(cfg_.seed);
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto f = static_cast<Eigen::Index>(cfg_.mlp_hidden);
    auto gaussian = [&](Eigen::Index r, Eigen::Index c, double stddev) {
      Eigen::MatrixXd m(r, c);
      for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal(0.0, stddev);
      }
      return m;
    };
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.input_dim));
    const double d_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    const double f_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.mlp_hidden));
    w_.cls = gaussian(1, d, 1.0);
    for (std::size_t i = 0; i < cfg_.patches; ++i) {
      w_.patch_proj.push_back(gaussian(static_cast<Eigen::Index>(cfg_.input_dim), d, in_scale));
    }
    w_.pos = gaussian(static_cast<Eigen::Index>(cfg_.patches), d, 0.1);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      ToyLayerWeights lw;
      lw.wq = gaussian(d, d, d_scale);
      lw.wk = gaussian(d, d, d_scale);
      lw.wv = gaussian(d, d, d_scale);
      lw.wo = gaussian(d, d, d_scale);
      lw.w1 = gaussian(d, f, d_scale);
      lw.b1 = gaussian(1, f, 0.1);
      lw.w2 = gaussian(f, d, f_scale);
      lw.b2 = gaussian(1, d, 0.1);
      w_.layers.push_back(std::move(lw));
    }
    w_.proj = gaussian(d, static_cast<Eigen::Index>(cfg_.output_dim), d_scale);
  }

  Eigen::MatrixXd stack_keep(const TokenSequence& seq) const {
    if (seq.cls.size() != static_cast<Eigen::Index>(cfg_.d_model) ||
        seq.patches.cols() != static_cast<Eigen::Index>(cfg_.d_model) || seq.patches.rows() < 1) {
      throw ConfigError("token sequence does not match encoder width");
    }
    Eigen::MatrixXd keep(1 + seq.patches.rows(), seq.patches.cols());
    keep.row(0) = seq.cls;
    keep.bottomRows(seq.patches.rows()) = seq.patches;
    return keep;
  }

  Eigen::MatrixXd prompt_rows(std::span<const PromptBlock* const> prompts, std::size_t l) const {
    std::size_t total = 0;
    for (const auto* p : prompts) total += p->length;
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(cfg_.d_model));
    Eigen::Index r = 0;
    for (const auto* p : prompts) {
      for (std::size_t m = 0; m < p->length; ++m, ++r) {
        const auto tok = p->token(l, m);
        for (std::size_t j = 0; j < cfg_.d_model; ++j) rows(r, static_cast<Eigen::Index>(j)) = tok[j];
      }
    }
    return rows;
  }

  // Multi-head attention of query rows q over key/value rows k, v.
  Eigen::MatrixXd attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                            const Eigen::MatrixXd& v, std::vector<Eigen::MatrixXd>* probs) const {
    const auto dh = static_cast<Eigen::Index>(cfg_.d_model / cfg_.heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Eigen::MatrixXd out(q.rows(), q.cols());
    if (probs) probs->resize(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      Eigen::MatrixXd s = q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose() * scale;
      detail::softmax_rows(s);
      out.middleCols(c0, dh) = s * v.middleCols(c0, dh);
      if (probs) (*probs)[h] = std::move(s);
    }
    return out;
  }

  Eigen::MatrixXd mlp(const Eigen::MatrixXd& x1, const ToyLayerWeights& lw, LayerCache* c) const {
    Eigen::VectorXd rstd;
    Eigen::MatrixXd b = detail::layer_norm(x1, rstd);
    Eigen::MatrixXd u = b * lw.w1;
    u.rowwise() += lw.b1;
    Eigen::MatrixXd g = u.array().tanh().matrix();
    Eigen::MatrixXd out = g * lw.w2;
    out.rowwise() += lw.b2;
    if (c) {
      c->b = std::move(b);
      c->rstd_b = std::move(rstd);
      c->g = std::move(g);
    }
    return out;
  }

  // keep = [g; H] rows, prompts = P rows. Returns the new [g; H].
  Eigen::MatrixXd layer_forward(std::size_t l, const Eigen::MatrixXd& keep,
                                const Eigen::MatrixXd& prompts, LayerCache& c) const {
    const auto& lw = w_.layers[l];
    c.a_keep = detail::layer_norm(keep, c.rstd_keep);
    c.a_prompt = detail::layer_norm(prompts, c.rstd_prompt);
    Eigen::MatrixXd all(keep.rows() + prompts.rows(), keep.cols());
    all.topRows(keep.rows()) = c.a_keep;
    all.bottomRows(prompts.rows()) = c.a_prompt;
    c.q = c.a_keep * lw.wq;
    c.k = all * lw.wk;
    c.v = all * lw.wv;
    const Eigen::MatrixXd o = attention(c.q, c.k, c.v, &c.attn);
    const Eigen::MatrixXd x1 = keep + o * lw.wo;
    return x1 + mlp(x1, lw, &c);
  }

  Eigen::MatrixXd layer_backward(std::size_t l, const LayerCache& c, const Eigen::MatrixXd& dout,
                                 Eigen::MatrixXd& dprompt) const {
    const auto& lw = w_.layers[l];
    const auto r = c.a_keep.rows();
    const auto dh = static_cast<Eigen::Index>(cfg_.d_model / cfg_.heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch.
    const Eigen::MatrixXd dg = dout * lw.w2.transpose();
    const Eigen::MatrixXd du = (dg.array() * (1.0 - c.g.array().square())).matrix();
    const Eigen::MatrixXd db = du * lw.w1.transpose();
    const Eigen::MatrixXd dx1 = dout + detail::layer_norm_backward(c.b, c.rstd_b, db);

    // Attention branch.
    const Eigen::MatrixXd d_o = dx1 * lw.wo.transpose();
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(c.q.rows(), c.q.cols());
    Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(c.k.rows(), c.k.cols());
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(c.v.rows(), c.v.cols());
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      const Eigen::MatrixXd& p = c.attn[h];
      const Eigen::MatrixXd doh = d_o.middleCols(c0, dh);
      const Eigen::MatrixXd dp = doh * c.v.middleCols(c0, dh).transpose();
      dv.middleCols(c0, dh) = p.transpose() * doh;
      const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
      Eigen::MatrixXd ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
      dq.middleCols(c0, dh) = ds * c.k.middleCols(c0, dh);
      dk.middleCols(c0, dh) = ds.transpose() * c.q.middleCols(c0, dh);
    }
    const Eigen::MatrixXd da_all = dk * lw.wk.transpose() + dv * lw.wv.transpose();
    const Eigen::MatrixXd da_keep = dq * lw.wq.transpose() + da_all.topRows(r);
    dprompt = detail::layer_norm_backward(c.a_prompt, c.rstd_prompt,
                                          da_all.bottomRows(da_all.rows() - r));
    return dx1 + detail::layer_norm_backward(c.a_keep, c.rstd_keep, da_keep);
  }

  Vector project(const Eigen::MatrixXd& z) const {
    const Eigen::RowVectorXd y = z.row(0) * w_.proj;
    Vector e(y.data(), y.data() + y.size());
    normalize_in_place(e);
    return e;
  }

  ToyEncoderConfig cfg_;
  ToyEncoderWeights w_;
};

}  // namespace owclip
