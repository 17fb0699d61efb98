#pragma once

// Instrument / confounder decomposition of observed histories.
//
// A causal transformer summarizes each history prefix; two positionwise MLPs
// map the summary to an instrument representation z and a confounder
// representation c. Five variational heads estimate conditional densities
// used by CLUB mutual-information bounds:
//   q(a_{s+1} | z_s)  relevance of the instrument, maximized
//   q(y_{s+1} | z_s)  exclusion, minimized with RBF pair weights
//   q(a_{s+1} | c_s)  relevance of the confounder, maximized
//   q(y_{s+1} | c_s)  relevance of the confounder, maximized
//   q(z_s | cbar_s)   independence of z and the pooled confounder, minimized

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsiv/errors.hpp"
#include "dsiv/nn.hpp"
#include "dsiv/panel.hpp"
#include "dsiv/rng.hpp"
#include "dsiv/tensor.hpp"

namespace dsiv {

enum class TargetKind { gaussian, bernoulli };

inline const char* to_string(TargetKind k) { return k == TargetKind::gaussian ? "gaussian" : "bernoulli"; }

/// Either (mean, log_var) for a Gaussian head or logits for a Bernoulli head.
struct HeadOutput {
  TargetKind kind = TargetKind::gaussian;
  Tensor mean, log_var, logits;
};

class VariationalHead {
 public:
  static constexpr double kLogVarMin = -8.0;
  static constexpr double kLogVarMax = 8.0;

  VariationalHead() = default;
  VariationalHead(TargetKind kind, std::size_t cond_dim, std::size_t target_dim, std::size_t hidden, Rng& rng)
      : kind_(kind),
        target_dim_(target_dim),
        net_({cond_dim, hidden, kind == TargetKind::gaussian ? 2 * target_dim : target_dim}, rng) {}
  VariationalHead(TargetKind kind, std::size_t target_dim, nn::Mlp net)
      : kind_(kind), target_dim_(target_dim), net_(std::move(net)) {
    const std::size_t want = kind == TargetKind::gaussian ? 2 * target_dim : target_dim;
    if (net_.out_dim() != want)
      throw ConfigError("variational head net outputs " + std::to_string(net_.out_dim()) + ", expected " +
                        std::to_string(want));
  }

  HeadOutput operator()(const Tensor& cond, bool frozen = false) const {
    if (cond.rank() != 2 || cond.dim(1) != net_.in_dim())
      throw DimensionError("variational head expects [n," + std::to_string(net_.in_dim()) + "] condition, got " +
                           shape_str(cond.shape()));
    const Tensor out = net_(cond, frozen);
    HeadOutput h;
    h.kind = kind_;
    if (kind_ == TargetKind::gaussian) {
      h.mean = slice(out, 1, 0, target_dim_);
      h.log_var = clamp(slice(out, 1, target_dim_, 2 * target_dim_), kLogVarMin, kLogVarMax);
    } else {
      h.logits = out;
    }
    return h;
  }

  void collect(const std::string& prefix, nn::ParamList& out) const { net_.collect(prefix, out); }

  TargetKind kind() const { return kind_; }
  std::size_t target_dim() const { return target_dim_; }
  std::size_t cond_dim() const { return net_.in_dim(); }
  const nn::Mlp& net() const { return net_; }

 private:
  TargetKind kind_ = TargetKind::gaussian;
  std::size_t target_dim_ = 0;
  nn::Mlp net_;
};

namespace detail {

inline void check_target(const HeadOutput& h, const Tensor& target) {
  const Tensor& ref = h.kind == TargetKind::gaussian ? h.mean : h.logits;
  if (target.shape() != ref.shape())
    throw DimensionError("target " + shape_str(target.shape()) + " does not match head output " +
                         shape_str(ref.shape()));
  if (h.kind == TargetKind::bernoulli)
    for (double v : target.data())
      if (v != 0.0 && v != 1.0) throw ContractError("binary head target must be 0 or 1, got " + format_double(v));
}

inline double half_log_two_pi() { return 0.5 * std::log(2.0 * std::numbers::pi); }

}  // namespace detail

/// Per-sample log density [n]: diagonal Gaussian summed over target dims, or
/// Bernoulli log-mass summed over dims.
inline Tensor loglik(const HeadOutput& h, const Tensor& target) {
  detail::check_target(h, target);
  if (h.kind == TargetKind::gaussian) {
    const Tensor inv2var = exp(-h.log_var) * 0.5;
    const Tensor c = h.log_var * -0.5 - detail::half_log_two_pi();
    return sum(c - square(target - h.mean) * inv2var, 1);
  }
  return sum(target * log_sigmoid(h.logits) + (1.0 - target) * log_sigmoid(-h.logits), 1);
}

inline Tensor loglik(const VariationalHead& head, const Tensor& cond, const Tensor& target, bool frozen = false) {
  return loglik(head(cond, frozen), target);
}

enum class MiDirection { maximize, minimize };

namespace detail {

// (1/n^2) sum_i sum_j w_ij [log q(t_i | c_i) - log q(t_j | c_i)] without
// materializing the n x n log-density table. With r_i = sum_j w_ij,
// P = W t and Q = W t^2, the Gaussian inner sum uses the per-row weighted
// mean tw_i = P_i / r_i:
//   sum_j w_ij (t_j - mu_i)^2 = (Q_i - r_i tw_i^2) + r_i (tw_i - mu_i)^2,
// which reproduces the diagonal term exactly when n = 1. An undefined `w`
// means w_ij = 1, computed from column sums.
inline Tensor club_core(const HeadOutput& h, const Tensor& target, const Tensor& w) {
  check_target(h, target);
  const std::size_t n = target.dim(0), d = target.dim(1);
  Tensor r, P, Q;
  const bool gaussian = h.kind == TargetKind::gaussian;
  if (w.defined()) {
    if (w.shape() != Shape{n, n})
      throw ContractError("pair weights " + shape_str(w.shape()) + " do not match batch of " + std::to_string(n));
    std::vector<double> rv(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) rv[i] += w.data()[i * n + j];
    r = Tensor({n, 1}, std::move(rv));
    P = matmul(w, target);
    if (gaussian) Q = matmul(w, square(target));
  } else {
    r = Tensor::full({1, 1}, static_cast<double>(n));
    P = reshape(sum(target, 0), {1, d});
    if (gaussian) Q = reshape(sum(square(target), 0), {1, d});
  }
  Tensor diag, cross;
  if (h.kind == TargetKind::gaussian) {
    const Tensor inv2var = exp(-h.log_var) * 0.5;
    const Tensor c = h.log_var * -0.5 - half_log_two_pi();
    const Tensor tw = P / r;
    diag = r * (c - square(target - h.mean) * inv2var);
    cross = r * c - ((Q - r * square(tw)) + r * square(tw - h.mean)) * inv2var;
  } else {
    const Tensor lp = log_sigmoid(h.logits), ln = log_sigmoid(-h.logits);
    diag = r * (target * lp + (1.0 - target) * ln);
    cross = P * lp + (r - P) * ln;
  }
  return sum(diag - cross) * (1.0 / static_cast<double>(n * n));
}

}  // namespace detail

/// CLUB estimate of I(target; cond); head parameters are frozen. Negated for
/// `maximize` so that every returned loss is minimized.
inline Tensor club_loss(const VariationalHead& head, const Tensor& cond, const Tensor& target, MiDirection dir) {
  const Tensor value = detail::club_core(head(cond, true), target, Tensor());
  return dir == MiDirection::maximize ? -value : value;
}

struct PairWeights {
  Tensor w;  ///< [n, n], rows sum to 1
  double sigma = 1.0;
};

/// k_ij = exp(-|v_i - v_j|^2 / 2 sigma^2), then a softmax over j in each row.
/// Returned as constants.
inline PairWeights rbf_pair_weights(const Tensor& v, double sigma = 1.0) {
  if (!(sigma > 0.0)) throw ConfigError("rbf width must be positive");
  if (v.rank() != 2) throw DimensionError("rbf_pair_weights expects [n,d], got " + shape_str(v.shape()));
  const std::size_t n = v.dim(0), d = v.dim(1);
  const double* x = v.data().data();
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = x[i * d + c] - x[j * d + c];
        dist += diff * diff;
      }
      k[i * n + j] = k[j * n + i] = std::exp(-dist / (2.0 * sigma * sigma));
    }
  for (std::size_t i = 0; i < n; ++i) {
    double* row = k.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
  return {Tensor({n, n}, std::move(k)), sigma};
}

/// Pair-weighted CLUB, minimized as-is. Head parameters are frozen.
inline Tensor weighted_club_loss(const VariationalHead& head, const Tensor& cond, const Tensor& target,
                                 const PairWeights& weights) {
  return detail::club_core(head(cond, true), target, weights.w);
}

// ---------------------------------------------------------------------------
// Decomposition model

struct DecomposeConfig {
  nn::EncoderConfig encoder;  ///< input_dim is set from the data
  std::size_t d_z = 8;
  std::size_t d_c = 16;
  std::size_t repr_hidden = 32;
  std::size_t head_hidden = 32;
  double sigma = 1.0;
  TreatmentKind treatment = TreatmentKind::binary;
  std::size_t d_a = 1;

  void validate() const {
    encoder.validate();
    if (d_z == 0 || d_c == 0 || repr_hidden == 0 || head_hidden == 0)
      throw ConfigError("representation widths must be positive");
    if (!(sigma > 0.0)) throw ConfigError("rbf width must be positive");
    if (d_a == 0) throw ConfigError("treatment width must be positive");
  }
};

struct ReprOutputs {
  Tensor z_rep;  ///< [batch, time, d_z]
  Tensor c_rep;  ///< [batch, time, d_c]
};

/// One training window. Position s of `inputs` carries row s of the panel
/// (with outcome entries masked where unobserved); `a` and `y` hold the
/// treatments and standardized outcomes at the same positions. Mutual
/// information pairs (s, s+1) are formed for s + 1 < `mi_end`.
struct SeqBatch {
  Tensor inputs;  ///< [n, T, d_in]
  Tensor a;       ///< [n, T, d_a]
  Tensor y;       ///< [n, T, 1]
  std::size_t mi_end = 0;

  std::size_t units() const { return inputs.dim(0); }
  std::size_t steps() const { return inputs.dim(1); }
};

/// [B, T, D] -> [B, D] at time s.
inline Tensor at_time(const Tensor& x, std::size_t s) {
  return reshape(slice(x, 1, s, s + 1), {x.dim(0), x.dim(2)});
}

class Decomposer {
 public:
  Decomposer() = default;
  Decomposer(const DecomposeConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.encoder.model_dim;
    encoder_ = nn::TransformerEncoder(cfg_.encoder, rng);
    z_proj_ = nn::Mlp({D, cfg_.repr_hidden, cfg_.d_z}, rng);
    c_proj_ = nn::Mlp({D, cfg_.repr_hidden, cfg_.d_c}, rng);
    const TargetKind ak = cfg_.treatment == TreatmentKind::binary ? TargetKind::bernoulli : TargetKind::gaussian;
    const std::size_t H = cfg_.head_hidden;
    q_za_ = VariationalHead(ak, cfg_.d_z, cfg_.d_a, H, rng);
    q_zy_ = VariationalHead(TargetKind::gaussian, cfg_.d_z, 1, H, rng);
    q_ca_ = VariationalHead(ak, cfg_.d_c, cfg_.d_a, H, rng);
    q_cy_ = VariationalHead(TargetKind::gaussian, cfg_.d_c, 1, H, rng);
    q_zc_ = VariationalHead(TargetKind::gaussian, cfg_.d_c, cfg_.d_z, H, rng);
  }

  ReprOutputs decompose(const Tensor& inputs, const nn::ForwardContext& ctx) const {
    const Tensor h = encoder_(inputs, ctx);
    return {z_proj_(h), c_proj_(h)};
  }

  void collect_representation(nn::ParamList& out) const {
    encoder_.collect("encoder", out);
    z_proj_.collect("z_proj", out);
    c_proj_.collect("c_proj", out);
  }
  void collect_variational(nn::ParamList& out) const {
    q_za_.collect("q_za", out);
    q_zy_.collect("q_zy", out);
    q_ca_.collect("q_ca", out);
    q_cy_.collect("q_cy", out);
    q_zc_.collect("q_zc", out);
  }

  const DecomposeConfig& config() const { return cfg_; }
  const VariationalHead& q_za() const { return q_za_; }
  const VariationalHead& q_zy() const { return q_zy_; }
  const VariationalHead& q_ca() const { return q_ca_; }
  const VariationalHead& q_cy() const { return q_cy_; }
  const VariationalHead& q_zc() const { return q_zc_; }

 private:
  DecomposeConfig cfg_;
  nn::TransformerEncoder encoder_;
  nn::Mlp z_proj_, c_proj_;
  VariationalHead q_za_, q_zy_, q_ca_, q_cy_, q_zc_;
};

/// The five terms of the mutual-information objective, each averaged over
/// the pairs formed in the batch.
struct MiTerms {
  Tensor za, zy, ca, cy, zc;
  Tensor total() const { return za + zy + ca + cy + zc; }
};

namespace detail {

inline void check_mi_batch(const SeqBatch& b, const ReprOutputs& r) {
  if (b.mi_end == 0 || b.mi_end > b.steps()) throw DimensionError("mutual-information window must cover 1..T steps");
  if (r.z_rep.dim(0) != b.units() || r.z_rep.dim(1) != b.steps())
    throw DimensionError("representations " + shape_str(r.z_rep.shape()) + " do not match batch " +
                         shape_str(b.inputs.shape()));
}

}  // namespace detail

/// RBF conditioning vector [a_{s+1}, abar_s, cbar_s, y_s] for the exclusion term.
inline Tensor exclusion_conditioning(const Tensor& a, const Tensor& a_mean, const Tensor& c_mean, const Tensor& y,
                                     std::size_t s) {
  return concat({at_time(a, s + 1), at_time(a_mean, s), at_time(c_mean, s), at_time(y, s)}, 1);
}

/// Exclusion-term pair weights for every pair (s, s+1) of the batch.
inline std::vector<PairWeights> exclusion_weights(const Decomposer& m, const ReprOutputs& r, const SeqBatch& b) {
  detail::check_mi_batch(b, r);
  std::vector<PairWeights> out;
  if (b.mi_end < 2) return out;
  const Tensor c_mean = cumulative_mean(r.c_rep).detach();
  const Tensor a_mean = cumulative_mean(b.a);
  for (std::size_t s = 0; s + 1 < b.mi_end; ++s)
    out.push_back(rbf_pair_weights(exclusion_conditioning(b.a, a_mean, c_mean, b.y, s), m.config().sigma));
  return out;
}

/// Mutual-information terms with frozen heads and the given pair weights;
/// gradients reach only the representations. Zero when the batch forms no pairs.
inline MiTerms mi_terms(const Decomposer& m, const ReprOutputs& r, const SeqBatch& b,
                        const std::vector<PairWeights>& weights) {
  detail::check_mi_batch(b, r);
  const std::size_t pairs = b.mi_end - 1;
  MiTerms t{Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0)};
  if (pairs == 0) return t;
  if (weights.size() != pairs) throw ContractError("expected one pair-weight matrix per pair");
  const Tensor c_mean = cumulative_mean(r.c_rep);
  for (std::size_t s = 0; s < pairs; ++s) {
    const Tensor z = at_time(r.z_rep, s), c = at_time(r.c_rep, s);
    const Tensor a_next = at_time(b.a, s + 1), y_next = at_time(b.y, s + 1);
    t.za = t.za + club_loss(m.q_za(), z, a_next, MiDirection::maximize);
    t.zy = t.zy + weighted_club_loss(m.q_zy(), z, y_next, weights[s]);
    t.ca = t.ca + club_loss(m.q_ca(), c, a_next, MiDirection::maximize);
    t.cy = t.cy + club_loss(m.q_cy(), c, y_next, MiDirection::maximize);
    t.zc = t.zc + club_loss(m.q_zc(), at_time(c_mean, s), z, MiDirection::minimize);
  }
  const double inv = 1.0 / static_cast<double>(pairs);
  t.za = t.za * inv;
  t.zy = t.zy * inv;
  t.ca = t.ca * inv;
  t.cy = t.cy * inv;
  t.zc = t.zc * inv;
  return t;
}

inline MiTerms mi_terms(const Decomposer& m, const ReprOutputs& r, const SeqBatch& b) {
  return mi_terms(m, r, b, exclusion_weights(m, r, b));
}

inline Tensor mi_total_loss(const Decomposer& m, const ReprOutputs& r, const SeqBatch& b) {
  return mi_terms(m, r, b).total();
}

namespace detail {

/// Positions [0, len) of a [B, T, D] tensor flattened to [B*len, D].
inline Tensor flatten_window(const Tensor& x, std::size_t begin, std::size_t len) {
  return reshape(slice(x, 1, begin, begin + len), {x.dim(0) * len, x.dim(2)});
}

}  // namespace detail

/// Negative mean log-likelihood of the five heads on detached
/// representations. Every pair (s, s+1) holds the same number of units, so
/// one mean over all flattened pairs equals the per-step average.
inline Tensor lld_total_loss(const Decomposer& m, const ReprOutputs& r, const SeqBatch& b) {
  detail::check_mi_batch(b, r);
  const std::size_t pairs = b.mi_end - 1;
  if (pairs == 0) return Tensor::scalar(0.0);
  using detail::flatten_window;
  const Tensor z = r.z_rep.detach(), c = r.c_rep.detach();
  const Tensor c_mean = cumulative_mean(c);
  const Tensor z_cond = flatten_window(z, 0, pairs), c_cond = flatten_window(c, 0, pairs);
  const Tensor a_next = flatten_window(b.a, 1, pairs), y_next = flatten_window(b.y, 1, pairs);
  return -(mean(loglik(m.q_za(), z_cond, a_next)) + mean(loglik(m.q_zy(), z_cond, y_next)) +
           mean(loglik(m.q_ca(), c_cond, a_next)) + mean(loglik(m.q_cy(), c_cond, y_next)) +
           mean(loglik(m.q_zc(), flatten_window(c_mean, 0, pairs), z_cond)));
}

}  // namespace dsiv
