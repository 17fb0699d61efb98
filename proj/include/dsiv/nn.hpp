#pragma once

// Layers, a causal transformer encoder, and Adam.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsiv/errors.hpp"
#include "dsiv/rng.hpp"
#include "dsiv/tensor.hpp"

namespace dsiv::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

/// Dropout randomness is drawn from `rng` only when `training` is set.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::param(std::move(shape), std::move(v));
}

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : in_(in),
        out_(out),
        weight_(uniform_init({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng)),
        bias_(Tensor::param({out}, std::vector<double>(out, 0.0))) {}
  Linear(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
    if (weight_.rank() != 2 || bias_.rank() != 1 || bias_.dim(0) != weight_.dim(1))
      throw ConfigError("linear layer needs weight [in,out] and bias [out], got " + shape_str(weight_.shape()) +
                        " and " + shape_str(bias_.shape()));
    in_ = weight_.dim(0);
    out_ = weight_.dim(1);
  }

  /// `frozen` routes the forward pass through detached parameters, so no
  /// gradient reaches this layer.
  Tensor operator()(const Tensor& x, bool frozen = false) const {
    if (x.dim(x.rank() - 1) != in_)
      throw DimensionError("linear layer expects last extent " + std::to_string(in_) + ", got " + shape_str(x.shape()));
    if (frozen) return matmul(x, weight_.detach()) + bias_.detach();
    return matmul(x, weight_) + bias_;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_, bias_;
};

/// Linear + ReLU stack; the last layer is linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers_.emplace_back(widths[i], widths[i + 1], rng);
  }
  explicit Mlp(std::vector<Linear> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ConfigError("mlp needs at least one layer");
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i)
      if (layers_[i].out_dim() != layers_[i + 1].in_dim())
        throw ConfigError("mlp layer " + std::to_string(i) + " outputs " + std::to_string(layers_[i].out_dim()) +
                          " but layer " + std::to_string(i + 1) + " expects " + std::to_string(layers_[i + 1].in_dim()));
  }

  Tensor operator()(const Tensor& x, bool frozen = false) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](h, frozen);
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, double eps = 1e-5)
      : gain_(Tensor::param({dim}, std::vector<double>(dim, 1.0))),
        bias_(Tensor::param({dim}, std::vector<double>(dim, 0.0))),
        eps_(eps) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain_, bias_, eps_); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor gain_, bias_;
  double eps_ = 1e-5;
};

struct AttentionHead {
  Linear query, key, value;
  std::size_t d_qkv = 0;
};

/// softmax(Q K^T / sqrt(d_qkv)) V per head, heads concatenated, then projected.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t num_heads, Rng& rng) : model_dim_(model_dim) {
    if (num_heads == 0 || model_dim % num_heads != 0)
      throw ConfigError("model dimension " + std::to_string(model_dim) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    const std::size_t d = model_dim / num_heads;
    for (std::size_t j = 0; j < num_heads; ++j)
      heads_.push_back({Linear(model_dim, d, rng), Linear(model_dim, d, rng), Linear(model_dim, d, rng), d});
    output_ = Linear(model_dim, model_dim, rng);
  }

  /// `h` is [batch, time, model_dim]. When `weights` is given it receives one
  /// [batch, time, time] attention matrix per head.
  Tensor operator()(const Tensor& h, bool causal, std::vector<Tensor>* weights = nullptr) const {
    if (h.rank() != 3 || h.dim(2) != model_dim_)
      throw DimensionError("attention expects [batch,time," + std::to_string(model_dim_) + "], got " +
                           shape_str(h.shape()));
    // All per-head projections in one product; each head then reads its slice.
    std::vector<Tensor> ws, bs;
    for (const auto& head : heads_)
      for (const Linear* l : {&head.query, &head.key, &head.value}) {
        ws.push_back(l->weight());
        bs.push_back(l->bias());
      }
    const Tensor proj = matmul(h, concat(ws, 1)) + concat(bs, 0);
    std::vector<Tensor> outputs;
    outputs.reserve(heads_.size());
    std::size_t off = 0;
    for (const auto& head : heads_) {
      const Tensor q = slice(proj, -1, off, off + head.d_qkv);
      const Tensor k = slice(proj, -1, off + head.d_qkv, off + 2 * head.d_qkv);
      const Tensor v = slice(proj, -1, off + 2 * head.d_qkv, off + 3 * head.d_qkv);
      off += 3 * head.d_qkv;
      Tensor scores = matmul(q, transpose(k)) * (1.0 / std::sqrt(static_cast<double>(head.d_qkv)));
      if (causal) scores = causal_mask(scores);
      const Tensor attn = softmax(scores, -1);
      if (weights) weights->push_back(attn);
      outputs.push_back(matmul(attn, v));
    }
    return output_(heads_.size() == 1 ? outputs[0] : concat(outputs, -1));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      const std::string p = prefix + ".head" + std::to_string(j);
      heads_[j].query.collect(p + ".query", out);
      heads_[j].key.collect(p + ".key", out);
      heads_[j].value.collect(p + ".value", out);
    }
    output_.collect(prefix + ".output", out);
  }

  std::size_t num_heads() const { return heads_.size(); }
  const std::vector<AttentionHead>& heads() const { return heads_; }

 private:
  std::size_t model_dim_ = 0;
  std::vector<AttentionHead> heads_;
  Linear output_;
};

/// Post-norm block: x -> LN(x + Drop(MHA(x))) -> LN(. + Drop(FF(.))).
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(std::size_t model_dim, std::size_t num_heads, std::size_t ff_dim, double dropout_rate, Rng& rng)
      : attention_(model_dim, num_heads, rng),
        norm1_(model_dim),
        norm2_(model_dim),
        ff1_(model_dim, ff_dim, rng),
        ff2_(ff_dim, model_dim, rng),
        dropout_(dropout_rate) {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must be in [0,1)");
  }

  Tensor operator()(const Tensor& x, bool causal, const ForwardContext& ctx,
                    std::vector<Tensor>* weights = nullptr) const {
    Tensor a = attention_(x, causal, weights);
    if (ctx.training && dropout_ > 0.0) a = dropout(a, dropout_, true, *ctx.rng);
    const Tensor h = norm1_(x + a);
    Tensor f = ff2_(relu(ff1_(h)));
    if (ctx.training && dropout_ > 0.0) f = dropout(f, dropout_, true, *ctx.rng);
    return norm2_(h + f);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    attention_.collect(prefix + ".attention", out);
    norm1_.collect(prefix + ".norm1", out);
    norm2_.collect(prefix + ".norm2", out);
    ff1_.collect(prefix + ".ff1", out);
    ff2_.collect(prefix + ".ff2", out);
  }

  const MultiHeadAttention& attention() const { return attention_; }

 private:
  MultiHeadAttention attention_;
  LayerNorm norm1_, norm2_;
  Linear ff1_, ff2_;
  double dropout_ = 0.0;
};

struct EncoderConfig {
  std::size_t input_dim = 1;
  std::size_t model_dim = 32;
  std::size_t num_heads = 4;
  std::size_t num_layers = 2;
  std::size_t ff_dim = 64;
  double dropout = 0.1;
  bool causal = true;

  void validate() const {
    if (input_dim == 0 || model_dim == 0 || ff_dim == 0 || num_layers == 0)
      throw ConfigError("encoder dimensions must be positive");
    if (num_heads == 0 || model_dim % num_heads != 0)
      throw ConfigError("model dimension " + std::to_string(model_dim) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must be in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"input_dim", c.input_dim}, {"model_dim", c.model_dim}, {"num_heads", c.num_heads},
       {"num_layers", c.num_layers}, {"ff_dim", c.ff_dim},       {"dropout", c.dropout},
       {"causal", c.causal}};
}

/// Sinusoidal position table [time, dim].
inline Tensor positional_encoding(std::size_t time, std::size_t dim) {
  std::vector<double> pe(time * dim);
  for (std::size_t t = 0; t < time; ++t)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe[t * dim + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  return Tensor({time, dim}, std::move(pe));
}

/// Input projection + sinusoidal positions + stacked blocks.
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    input_ = Linear(cfg_.input_dim, cfg_.model_dim, rng);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l)
      blocks_.emplace_back(cfg_.model_dim, cfg_.num_heads, cfg_.ff_dim, cfg_.dropout, rng);
  }

  /// [batch, time, input_dim] -> [batch, time, model_dim]
  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const {
    if (x.rank() != 3) throw DimensionError("encoder expects [batch,time,features], got " + shape_str(x.shape()));
    if (x.dim(2) != cfg_.input_dim)
      throw DimensionError("encoder expects " + std::to_string(cfg_.input_dim) + " input features, got " +
                           shape_str(x.shape()));
    Tensor h = input_(x) + positional_encoding(x.dim(1), cfg_.model_dim);
    for (const auto& block : blocks_) h = block(h, cfg_.causal, ctx);
    return h;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    input_.collect(prefix + ".input", out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".block" + std::to_string(l), out);
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<EncoderBlock>& blocks() const { return blocks_; }

 private:
  EncoderConfig cfg_;
  Linear input_;
  std::vector<EncoderBlock> blocks_;
};

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  ///< global-norm clip; 0 disables
};

/// Adam with bias correction over one parameter group.
class Adam {
 public:
  Adam() = default;
  Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  /// Applies one update from the accumulated grads, then zeroes them.
  void step() {
    double norm2 = 0.0;
    for (const auto& p : params_) {
      for (double g : p.tensor.grad()) {
        if (std::isnan(g)) throw NumericDomainError("NaN gradient in parameter " + p.name);
        norm2 += g * g;
      }
    }
    const double norm = std::sqrt(norm2);
    clip_scale_ = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& t = params_[k].tensor;
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto x = t.mutable_data();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = g[i] * clip_scale_;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        x[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
      t.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t steps() const { return steps_; }
  double last_clip_scale() const { return clip_scale_; }
  const std::vector<double>& first_moment(std::size_t k) const { return first_.at(k); }
  const ParamList& params() const { return params_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t steps_ = 0;
  double clip_scale_ = 1.0;
};

// ---------------------------------------------------------------------------
// Parameter (de)serialization: {"name": {"shape": [...], "data": [...]}}

inline nlohmann::json params_to_json(const ParamList& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& p : params) j[p.name] = {{"shape", p.tensor.shape()}, {"data", p.tensor.values()}};
  return j;
}

/// Copies values into the existing tensors. Names and shapes must match exactly.
inline void load_params_json(const nlohmann::json& j, ParamList& params) {
  if (j.size() != params.size())
    throw ConfigError("checkpoint holds " + std::to_string(j.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  for (auto& p : params) {
    if (!j.contains(p.name)) throw ConfigError("checkpoint lacks parameter " + p.name);
    const auto& e = j.at(p.name);
    const auto shape = e.at("shape").get<Shape>();
    if (shape != p.tensor.shape())
      throw ConfigError("parameter " + p.name + " has shape " + shape_str(shape) + " in checkpoint but " +
                        shape_str(p.tensor.shape()) + " in model");
    const auto data = e.at("data").get<std::vector<double>>();
    auto dst = p.tensor.mutable_data();
    std::copy(data.begin(), data.end(), dst.begin());
  }
}

/// Value snapshot of a parameter list (data only).
inline std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> s;
  s.reserve(params.size());
  for (const auto& p : params) s.push_back(p.tensor.values());
  return s;
}

inline void restore(ParamList& params, const std::vector<std::vector<double>>& s) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto dst = params[k].tensor.mutable_data();
    std::copy(s[k].begin(), s[k].end(), dst.begin());
  }
}

}  // namespace dsiv::nn
