#pragma once

// Counterfactual outcome regression with an adversarial moment criterion.
//
// The outcome network h reads [a_s, c_{s-1}] at every position through a
// second causal transformer and predicts y_s. The bridge f maps
// [abar_{s-1}, cbar_{s-1}, z_{s-1}] to a weight M_s; the moment
// mean(M * (yhat - y)) is minimized by h and maximized by f under a quadratic
// penalty on M.
//
// One outer training iteration runs three phases on one mini-batch:
//   1. MSE + alpha * MI + beta * mean(M_detached * r) on encoder, maps and h
//   2. R rounds of variational log-likelihood on the five density heads
//   3. R rounds of the penalized adversary objective on f

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsiv/decompose.hpp"
#include "dsiv/errors.hpp"
#include "dsiv/json_util.hpp"
#include "dsiv/nn.hpp"
#include "dsiv/panel.hpp"
#include "dsiv/rng.hpp"
#include "dsiv/tensor.hpp"

namespace dsiv {

enum class TrainMode { one_step, decision };

inline const char* to_string(TrainMode m) { return m == TrainMode::one_step ? "one-step" : "decision"; }

struct ModelConfig {
  nn::EncoderConfig encoder;  ///< history encoder; input_dim is derived from the data
  nn::EncoderConfig outcome;  ///< outcome transformer; input_dim is derived
  std::size_t d_z = 8;
  std::size_t d_c = 16;
  std::size_t repr_hidden = 32;
  std::size_t head_hidden = 32;
  std::size_t bridge_hidden = 32;
  double sigma = 1.0;

  void validate() const {
    nn::EncoderConfig e = encoder, o = outcome;
    e.input_dim = o.input_dim = 1;
    e.validate();
    o.validate();
    if (d_z == 0 || d_c == 0 || repr_hidden == 0 || head_hidden == 0 || bridge_hidden == 0)
      throw ConfigError("model widths must be positive");
    if (!(sigma > 0.0)) throw ConfigError("rbf width must be positive");
  }
};

struct TrainConfig {
  double alpha = 0.1;
  double beta = 0.1;
  double lr = 1e-3;
  std::size_t iterations = 200;  ///< outer iterations K, one mini-batch each
  std::size_t rounds = 3;        ///< inner rounds R of phases 2 and 3
  std::size_t batch_size = 256;
  double regularizer_coef = 0.25;
  double clip_norm = 5.0;
  std::size_t eval_every = 10;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::one_step;
  std::size_t tau = 5;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha and beta must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (regularizer_coef < 0.0) throw ConfigError("regularizer coefficient must be non-negative");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (mode == TrainMode::decision && (tau == 0 || tau > 20)) throw ConfigError("tau must be in [1,20]");
  }
};

inline nlohmann::json encoder_json(const nn::EncoderConfig& c) {
  return {{"model_dim", c.model_dim}, {"num_heads", c.num_heads}, {"num_layers", c.num_layers},
          {"ff_dim", c.ff_dim},       {"dropout", c.dropout}};
}

inline void read_encoder(const nlohmann::json& j, const std::string& path, nn::EncoderConfig& c) {
  StrictObject o(j, path);
  o.read("model_dim", c.model_dim);
  o.read("num_heads", c.num_heads);
  o.read("num_layers", c.num_layers);
  o.read("ff_dim", c.ff_dim);
  o.read("dropout", c.dropout);
  o.finish();
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"encoder", encoder_json(c.encoder)},
          {"outcome", encoder_json(c.outcome)},
          {"d_z", c.d_z},
          {"d_c", c.d_c},
          {"repr_hidden", c.repr_hidden},
          {"head_hidden", c.head_hidden},
          {"bridge_hidden", c.bridge_hidden},
          {"sigma", c.sigma}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model") {
  ModelConfig c;
  StrictObject o(j, path);
  if (auto* e = o.child("encoder")) read_encoder(*e, path + ".encoder", c.encoder);
  if (auto* e = o.child("outcome")) read_encoder(*e, path + ".outcome", c.outcome);
  o.read("d_z", c.d_z);
  o.read("d_c", c.d_c);
  o.read("repr_hidden", c.repr_hidden);
  o.read("head_hidden", c.head_hidden);
  o.read("bridge_hidden", c.bridge_hidden);
  o.read("sigma", c.sigma);
  o.finish();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"lr", c.lr},
          {"iterations", c.iterations},
          {"rounds", c.rounds},
          {"batch_size", c.batch_size},
          {"regularizer_coef", c.regularizer_coef},
          {"clip_norm", c.clip_norm},
          {"eval_every", c.eval_every},
          {"mode", to_string(c.mode)},
          {"tau", c.tau}};
}

/// The seed is not part of this section; it comes from the run.
inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "training") {
  TrainConfig c;
  StrictObject o(j, path);
  o.read("alpha", c.alpha);
  o.read("beta", c.beta);
  o.read("lr", c.lr);
  o.read("iterations", c.iterations);
  o.read("rounds", c.rounds);
  o.read("batch_size", c.batch_size);
  o.read("regularizer_coef", c.regularizer_coef);
  o.read("clip_norm", c.clip_norm);
  o.read("eval_every", c.eval_every);
  std::string mode = to_string(c.mode);
  o.read("mode", mode);
  if (mode == "one-step")
    c.mode = TrainMode::one_step;
  else if (mode == "decision")
    c.mode = TrainMode::decision;
  else
    throw ConfigError(path + ".mode must be one-step or decision, got " + mode);
  o.read("tau", c.tau);
  o.finish();
  c.validate();
  return c;
}

/// Affine map of outcomes to zero mean and unit variance on the training split.
struct Standardizer {
  double mean = 0.0;
  double scale = 1.0;

  static Standardizer fit(const std::vector<double>& y) {
    Standardizer s;
    if (y.empty()) return s;
    s.mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double ss = 0.0;
    for (double v : y) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(y.size()));
    s.scale = sd > 0.0 ? sd : 1.0;
    return s;
  }
  double forward(double y) const { return (y - mean) / scale; }
  double inverse(double z) const { return z * scale + mean; }
};

/// Shape of the data a model was built for.
struct DataDims {
  std::size_t d_x = 0;
  std::size_t d_a = 1;
  TreatmentKind treatment = TreatmentKind::binary;

  std::size_t input_dim() const { return d_x + d_a + 2; }  // x, a, y, y-observed flag
  bool operator==(const DataDims&) const = default;
};

inline DataDims dims_of(const ObservedPanel& p) { return {p.d_x, p.d_a, p.treatment}; }

// ---------------------------------------------------------------------------
// Losses

inline Tensor mse_loss(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw ContractError("mse_loss shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  return mean(square(pred - truth));
}

struct AdversarialViews {
  Tensor h_view;  ///< mean(M * r), M held fixed
  Tensor f_view;  ///< -(mean(M * r) - c * mean(M^2)), r held fixed
};

inline AdversarialViews adversarial_loss(const Tensor& M, const Tensor& residuals, double regularizer_coef) {
  if (M.shape() != residuals.shape())
    throw ContractError("bridge weights " + shape_str(M.shape()) + " and residuals " + shape_str(residuals.shape()) +
                        " differ in shape");
  if (regularizer_coef < 0.0) throw ConfigError("regularizer coefficient must be non-negative");
  return {mean(M.detach() * residuals),
          -(mean(M * residuals.detach()) - mean(square(M)) * regularizer_coef)};
}

struct LossBundle {
  Tensor total;
  double mse = 0.0, mi = 0.0, adv = 0.0, total_value = 0.0;
  double alpha = 0.0, beta = 0.0;
};

inline LossBundle overall_loss(const Tensor& mse, const Tensor& mi, const Tensor& adv, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha and beta must be non-negative");
  LossBundle b;
  b.alpha = alpha;
  b.beta = beta;
  b.mse = mse.item();
  b.mi = mi.item();
  b.adv = adv.item();
  b.total = mse;
  if (alpha != 0.0) b.total = b.total + mi * alpha;
  if (beta != 0.0) b.total = b.total + adv * beta;
  b.total_value = b.total.item();
  return b;
}

// ---------------------------------------------------------------------------
// Networks

class OutcomeNet {
 public:
  OutcomeNet() = default;
  OutcomeNet(const nn::EncoderConfig& cfg, std::size_t d_a, std::size_t d_c, Rng& rng) : d_a_(d_a), d_c_(d_c) {
    nn::EncoderConfig c = cfg;
    c.input_dim = d_a + d_c;
    c.causal = true;
    encoder_ = nn::TransformerEncoder(c, rng);
    head_ = nn::Linear(c.model_dim, 1, rng);
  }

  /// a [B, T, d_a], c_rep [B, T, d_c] -> predictions [B, T]; position s reads
  /// a_s and c_{s-1}.
  Tensor operator()(const Tensor& a, const Tensor& c_rep, const nn::ForwardContext& ctx) const {
    if (a.rank() != 3 || c_rep.rank() != 3 || a.dim(0) != c_rep.dim(0) || a.dim(1) != c_rep.dim(1))
      throw DimensionError("treatments " + shape_str(a.shape()) + " and confounder representation " +
                           shape_str(c_rep.shape()) + " are not time-aligned");
    if (a.dim(2) != d_a_ || c_rep.dim(2) != d_c_) throw DimensionError("outcome network input widths differ");
    const Tensor h = encoder_(concat({a, shift_right(c_rep)}, 2), ctx);
    const Tensor out = head_(h);
    return reshape(out, {a.dim(0), a.dim(1)});
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    encoder_.collect(prefix + ".encoder", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  std::size_t d_a_ = 0, d_c_ = 0;
  nn::TransformerEncoder encoder_;
  nn::Linear head_;
};

class BridgeNet {
 public:
  BridgeNet() = default;
  BridgeNet(std::size_t d_a, std::size_t d_c, std::size_t d_z, std::size_t hidden, Rng& rng)
      : net_({d_a + d_c + d_z, hidden, hidden, 1}, rng) {}
  explicit BridgeNet(nn::Mlp net) : net_(std::move(net)) {
    if (net_.out_dim() != 1) throw ConfigError("bridge network must output one weight");
  }

  /// Per-position inputs [abar_{s-1}, cbar_{s-1}, z_{s-1}], zeros at s = 0.
  static Tensor inputs(const Tensor& a, const Tensor& c_rep, const Tensor& z_rep) {
    return concat({shift_right(cumulative_mean(a)), shift_right(cumulative_mean(c_rep)), shift_right(z_rep)}, 2);
  }

  /// [B, T, d_a + d_c + d_z] -> [B, T]
  Tensor operator()(const Tensor& in) const {
    if (in.rank() != 3 || in.dim(2) != net_.in_dim())
      throw ConfigError("bridge expects " + std::to_string(net_.in_dim()) + " input features, got " +
                        shape_str(in.shape()));
    return reshape(net_(in), {in.dim(0), in.dim(1)});
  }

  void collect(const std::string& prefix, nn::ParamList& out) const { net_.collect(prefix, out); }
  const nn::Mlp& net() const { return net_; }

 private:
  nn::Mlp net_;
};

inline Tensor bridge_weights(const BridgeNet& f, const Tensor& a, const Tensor& c_rep, const Tensor& z_rep) {
  return f(BridgeNet::inputs(a, c_rep, z_rep));
}

class DsivModel {
 public:
  DsivModel() = default;
  DsivModel(const ModelConfig& cfg, const DataDims& dims, Rng rng) : cfg_(cfg), dims_(dims) {
    cfg_.validate();
    DecomposeConfig dc;
    dc.encoder = cfg_.encoder;
    dc.encoder.input_dim = dims.input_dim();
    dc.encoder.causal = true;
    dc.d_z = cfg_.d_z;
    dc.d_c = cfg_.d_c;
    dc.repr_hidden = cfg_.repr_hidden;
    dc.head_hidden = cfg_.head_hidden;
    dc.sigma = cfg_.sigma;
    dc.treatment = dims.treatment;
    dc.d_a = dims.d_a;
    Rng r1 = rng.substream("decompose"), r2 = rng.substream("outcome"), r3 = rng.substream("bridge");
    decomposer_ = Decomposer(dc, r1);
    outcome_ = OutcomeNet(cfg_.outcome, dims.d_a, cfg_.d_c, r2);
    bridge_ = BridgeNet(dims.d_a, cfg_.d_c, cfg_.d_z, cfg_.bridge_hidden, r3);
  }

  const Decomposer& decomposer() const { return decomposer_; }
  const OutcomeNet& outcome() const { return outcome_; }
  const BridgeNet& bridge() const { return bridge_; }
  const ModelConfig& config() const { return cfg_; }
  const DataDims& dims() const { return dims_; }

  /// Encoder, representation maps and outcome network: updated by phase 1.
  nn::ParamList main_params() const {
    nn::ParamList p;
    decomposer_.collect_representation(p);
    outcome_.collect("outcome", p);
    return p;
  }
  nn::ParamList variational_params() const {
    nn::ParamList p;
    decomposer_.collect_variational(p);
    return p;
  }
  nn::ParamList bridge_params() const {
    nn::ParamList p;
    bridge_.collect("bridge", p);
    return p;
  }
  nn::ParamList all_params() const {
    nn::ParamList p = main_params();
    for (auto& q : variational_params()) p.push_back(q);
    for (auto& q : bridge_params()) p.push_back(q);
    return p;
  }

  Standardizer y_scale;
  TrainMode mode = TrainMode::one_step;
  std::size_t tau = 0;

 private:
  ModelConfig cfg_;
  DataDims dims_;
  Decomposer decomposer_;
  OutcomeNet outcome_;
  BridgeNet bridge_;
};

inline Tensor predict_outcomes(const DsivModel& m, const Tensor& a, const Tensor& c_rep,
                               const nn::ForwardContext& ctx) {
  return m.outcome()(a, c_rep, ctx);
}

// ---------------------------------------------------------------------------
// Batches

/// Which rows of a window are visible. Rows < `observed` carry x, a and y;
/// rows in [observed, length) carry a and, before `covariates_end`, x.
/// Outcome targets are rows [target_begin, length).
struct WindowSpec {
  std::size_t length = 0;
  std::size_t observed = 0;
  std::size_t covariates_end = 0;
  std::size_t target_begin = 0;

  static WindowSpec one_step(std::size_t T) { return {T, T, T, 0}; }
  /// Window starting at row `start`: rows start..start+tau-1 are the
  /// treatment block, the outcome of the last row is the target.
  static WindowSpec decision(std::size_t start, std::size_t tau) {
    return {start + tau, start, start + tau - 1, start + tau - 1};
  }
};

struct TrainBatch {
  SeqBatch seq;
  Tensor target;  ///< [n, length] standardized outcomes; only [target_begin, length) is read
  WindowSpec window;
};

/// Tensors for `units` of an observed panel. Unobserved outcomes never
/// enter `seq`; they appear only in `target`.
inline TrainBatch make_batch(const ObservedPanel& p, const std::vector<std::size_t>& units, const Standardizer& ys,
                             const WindowSpec& w) {
  if (units.empty()) throw DimensionError("empty batch");
  if (w.length == 0 || w.length > p.T || w.observed > w.length || w.covariates_end > w.length ||
      w.target_begin >= w.length)
    throw DimensionError("window does not fit the panel");
  const std::size_t n = units.size(), L = w.length, dx = p.d_x, da = p.d_a, din = dx + da + 2;
  std::vector<double> in(n * L * din, 0.0), a(n * L * da), y(n * L, 0.0), target(n * L);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t i = units[b];
    if (i >= p.n) throw DimensionError("unit index out of range");
    for (std::size_t s = 0; s < L; ++s) {
      double* row = in.data() + (b * L + s) * din;
      if (s < w.covariates_end || s < w.observed)
        for (std::size_t k = 0; k < dx; ++k) row[k] = p.x_at(i, s, k);
      for (std::size_t k = 0; k < da; ++k) row[dx + k] = a[(b * L + s) * da + k] = p.a_at(i, s, k);
      const double ys_val = ys.forward(p.y_at(i, s));
      target[b * L + s] = ys_val;
      if (s < w.observed) {
        row[dx + da] = y[b * L + s] = ys_val;
        row[dx + da + 1] = 1.0;
      }
    }
  }
  TrainBatch tb;
  tb.seq.inputs = Tensor({n, L, din}, std::move(in));
  tb.seq.a = Tensor({n, L, da}, std::move(a));
  tb.seq.y = Tensor({n, L, 1}, std::move(y));
  tb.seq.mi_end = std::max<std::size_t>(w.observed, 1);
  tb.target = Tensor({n, L}, std::move(target));
  tb.window = w;
  return tb;
}

// ---------------------------------------------------------------------------
// Training

struct IterationRecord {
  std::size_t iteration = 0;
  double mse = 0.0, mi = 0.0, adv = 0.0, total = 0.0;
  double lld = std::numeric_limits<double>::quiet_NaN();
  double f_view = std::numeric_limits<double>::quiet_NaN();
  double val_mse = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  std::vector<IterationRecord> trace;
  std::size_t best_iteration = 0;  ///< 0 = the initialization
  double best_val_mse = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;  ///< wall clock; kept out of summary() so artifacts stay reproducible

  /// One line per iteration: iteration mse mi adv val_mse.
  void write_text(std::ostream& os) const {
    os << "iteration mse mi adv val_mse\n";
    for (const auto& r : trace)
      os << r.iteration << ' ' << format_double(r.mse) << ' ' << format_double(r.mi) << ' ' << format_double(r.adv)
         << ' ' << (std::isnan(r.val_mse) ? std::string("nan") : format_double(r.val_mse)) << '\n';
  }

  nlohmann::json summary() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json j = {{"iterations", trace.size()},
                        {"best_iteration", best_iteration},
                        {"best_val_mse", num(best_val_mse)}};
    if (!trace.empty()) {
      const auto& last = trace.back();
      j["final"] = {{"mse", num(last.mse)}, {"mi", num(last.mi)}, {"adv", num(last.adv)}, {"total", num(last.total)}};
    }
    return j;
  }
};

/// Default evaluation window for decision mode: the last tau rows.
inline WindowSpec decision_eval_window(std::size_t T, std::size_t tau) {
  if (tau >= T) throw ConfigError("decision window needs at least one history row");
  return WindowSpec::decision(T - tau, tau);
}

/// Predictions for every unit of `p` in the original outcome scale, [n, L].
inline std::vector<double> predict_panel(const DsivModel& m, const ObservedPanel& p, const WindowSpec& w,
                                         std::size_t chunk = 256) {
  NoGradGuard guard;
  const nn::ForwardContext ctx{false, nullptr};
  std::vector<double> out;
  out.reserve(p.n * w.length);
  for (std::size_t begin = 0; begin < p.n; begin += chunk) {
    std::vector<std::size_t> units(std::min(chunk, p.n - begin));
    std::iota(units.begin(), units.end(), begin);
    const TrainBatch b = make_batch(p, units, m.y_scale, w);
    const ReprOutputs r = m.decomposer().decompose(b.seq.inputs, ctx);
    const Tensor pred = predict_outcomes(m, b.seq.a, r.c_rep, ctx);
    for (double v : pred.data()) out.push_back(m.y_scale.inverse(v));
  }
  return out;
}

/// Mean squared error of the window targets in the original scale.
inline double window_mse(const DsivModel& m, const ObservedPanel& p, const WindowSpec& w) {
  const auto pred = predict_panel(m, p, w);
  double s = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < p.n; ++i)
    for (std::size_t t = w.target_begin; t < w.length; ++t) {
      const double d = pred[i * w.length + t] - p.y_at(i, t);
      s += d * d;
      ++cnt;
    }
  return s / static_cast<double>(cnt);
}

/// Alternating trainer; exposes each phase so the parameter partition can be
/// checked directly.
class Trainer {
 public:
  Trainer(DsivModel& model, TrainConfig cfg)
      : model_(model),
        cfg_(cfg),
        dropout_rng_(Rng(cfg.seed).substream("dropout")),
        main_(model.main_params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm}),
        variational_(model.variational_params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm}),
        bridge_(model.bridge_params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm}) {
    cfg_.validate();
  }

  /// Rows of `adv` positions: skip s = 0, whose bridge input is empty.
  static std::size_t adversarial_begin(const WindowSpec& w) { return std::max<std::size_t>(w.target_begin, 1); }

  LossBundle phase_main(const TrainBatch& b) {
    const nn::ForwardContext ctx{true, &dropout_rng_};
    const ReprOutputs r = model_.decomposer().decompose(b.seq.inputs, ctx);
    const Tensor pred = predict_outcomes(model_, b.seq.a, r.c_rep, ctx);
    const std::size_t L = b.window.length, tb = b.window.target_begin;
    const Tensor mse = mse_loss(slice(pred, 1, tb, L), slice(b.target, 1, tb, L));
    Tensor mi = Tensor::scalar(0.0);
    if (cfg_.alpha != 0.0) mi = mi_total_loss(model_.decomposer(), r, b.seq);
    Tensor adv = Tensor::scalar(0.0);
    const std::size_t ab = adversarial_begin(b.window);
    if (cfg_.beta != 0.0 && ab < L) {
      Tensor M;
      {
        NoGradGuard guard;
        M = bridge_weights(model_.bridge(), b.seq.a, r.c_rep.detach(), r.z_rep.detach());
      }
      const Tensor resid = slice(pred, 1, ab, L) - slice(b.target, 1, ab, L);
      adv = adversarial_loss(slice(M, 1, ab, L), resid, cfg_.regularizer_coef).h_view;
    }
    LossBundle bundle = overall_loss(mse, mi, adv, cfg_.alpha, cfg_.beta);
    if (!std::isfinite(bundle.total_value)) return bundle;
    bundle.total.backward();
    main_.step();
    return bundle;
  }

  /// Representations and predictions of the current parameters, evaluation
  /// mode, no graph. Phases 2 and 3 read these as constants.
  struct Frozen {
    ReprOutputs reps;
    Tensor pred;
  };

  Frozen freeze(const TrainBatch& b) const {
    NoGradGuard guard;
    const nn::ForwardContext ctx{false, nullptr};
    Frozen f;
    f.reps = model_.decomposer().decompose(b.seq.inputs, ctx);
    f.pred = predict_outcomes(model_, b.seq.a, f.reps.c_rep, ctx);
    return f;
  }

  /// Mean LLD over the R rounds.
  double phase_variational(const TrainBatch& b) { return phase_variational(b, freeze(b)); }
  double phase_variational(const TrainBatch& b, const Frozen& fz) {
    if (cfg_.rounds == 0 || b.seq.mi_end < 2) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    for (std::size_t k = 0; k < cfg_.rounds; ++k) {
      const Tensor loss = lld_total_loss(model_.decomposer(), fz.reps, b.seq);
      acc += loss.item();
      loss.backward();
      variational_.step();
    }
    return acc / static_cast<double>(cfg_.rounds);
  }

  /// Mean adversary objective over the R rounds.
  double phase_bridge(const TrainBatch& b) { return phase_bridge(b, freeze(b)); }
  double phase_bridge(const TrainBatch& b, const Frozen& fz) {
    const std::size_t L = b.window.length, ab = adversarial_begin(b.window);
    if (cfg_.rounds == 0 || ab >= L) return std::numeric_limits<double>::quiet_NaN();
    Tensor in, resid;
    {
      NoGradGuard guard;
      in = BridgeNet::inputs(b.seq.a, fz.reps.c_rep, fz.reps.z_rep);
      resid = slice(fz.pred, 1, ab, L) - slice(b.target, 1, ab, L);
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < cfg_.rounds; ++k) {
      const Tensor M = slice(model_.bridge()(in), 1, ab, L);
      const Tensor loss = adversarial_loss(M, resid, cfg_.regularizer_coef).f_view;
      acc += loss.item();
      loss.backward();
      bridge_.step();
    }
    return acc / static_cast<double>(cfg_.rounds);
  }

  const TrainConfig& config() const { return cfg_; }

 private:
  DsivModel& model_;
  TrainConfig cfg_;
  Rng dropout_rng_;
  nn::Adam main_, variational_, bridge_;
};

/// Trains `model` in place and restores the parameters with the lowest
/// validation MSE. The outcome standardizer is fitted on `train`.
inline TrainReport fit(DsivModel& model, const ObservedPanel& train, const ObservedPanel& val, const TrainConfig& cfg,
                       const std::function<void(const IterationRecord&)>& on_record = {}) {
  cfg.validate();
  if (val.n == 0) throw ConfigError("validation split is empty");
  if (train.n == 0) throw ConfigError("training split is empty");
  if (!(dims_of(train) == model.dims()) || !(dims_of(val) == model.dims()))
    throw ConfigError("dataset dimensions do not match the model");
  if (train.T != val.T) throw ConfigError("training and validation sequence lengths differ");
  if (cfg.mode == TrainMode::decision && cfg.tau >= train.T)
    throw ConfigError("decision window tau must be shorter than the sequence");

  const auto t0 = std::chrono::steady_clock::now();
  model.y_scale = Standardizer::fit(train.y);
  model.mode = cfg.mode;
  model.tau = cfg.mode == TrainMode::decision ? cfg.tau : 0;

  TrainReport report;
  const WindowSpec val_window =
      cfg.mode == TrainMode::one_step ? WindowSpec::one_step(val.T) : decision_eval_window(val.T, cfg.tau);
  if (cfg.iterations == 0) {
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
  }

  Trainer trainer(model, cfg);
  const Rng root(cfg.seed);
  Rng shuffle = root.substream("shuffle"), window_rng = root.substream("window");
  nn::ParamList all = model.all_params();
  std::vector<std::vector<double>> best = nn::snapshot(all);
  report.best_val_mse = window_mse(model, val, val_window);

  std::vector<std::size_t> order(train.n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = train.n;
  const std::size_t bs = std::min(cfg.batch_size, train.n);
  for (std::size_t k = 1; k <= cfg.iterations; ++k) {
    if (cursor + bs > train.n) {
      for (std::size_t i = train.n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      cursor = 0;
    }
    const std::vector<std::size_t> units(order.begin() + static_cast<long>(cursor),
                                         order.begin() + static_cast<long>(cursor + bs));
    cursor += bs;
    WindowSpec w = WindowSpec::one_step(train.T);
    if (cfg.mode == TrainMode::decision)
      w = WindowSpec::decision(1 + window_rng.below(train.T - cfg.tau), cfg.tau);
    const TrainBatch batch = make_batch(train, units, model.y_scale, w);

    IterationRecord rec;
    rec.iteration = k;
    try {
      const LossBundle lb = trainer.phase_main(batch);
      rec.mse = lb.mse;
      rec.mi = lb.mi;
      rec.adv = lb.adv;
      rec.total = lb.total_value;
      if (!std::isfinite(lb.total_value)) throw TrainingError("training loss diverged", k);
      if (cfg.alpha != 0.0 || cfg.beta != 0.0) {
        const Trainer::Frozen fz = trainer.freeze(batch);
        if (cfg.alpha != 0.0) rec.lld = trainer.phase_variational(batch, fz);
        if (cfg.beta != 0.0) rec.f_view = trainer.phase_bridge(batch, fz);
      }
    } catch (const NumericDomainError& e) {
      throw TrainingError(e.what(), k);
    }
    if (k % cfg.eval_every == 0 || k == cfg.iterations) {
      rec.val_mse = window_mse(model, val, val_window);
      if (!std::isfinite(rec.val_mse)) throw TrainingError("validation error diverged", k);
      if (rec.val_mse < report.best_val_mse) {
        report.best_val_mse = rec.val_mse;
        report.best_iteration = k;
        best = nn::snapshot(all);
      }
    }
    report.trace.push_back(rec);
    if (on_record) on_record(rec);
  }
  nn::restore(all, best);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json checkpoint_json(const DsivModel& m) {
  return {{"format", "dsiv-checkpoint"},
          {"version", 1},
          {"model", to_json(m.config())},
          {"dims", {{"d_x", m.dims().d_x}, {"d_a", m.dims().d_a}, {"treatment", to_string(m.dims().treatment)}}},
          {"y_scale", {{"mean", m.y_scale.mean}, {"scale", m.y_scale.scale}}},
          {"mode", to_string(m.mode)},
          {"tau", m.tau},
          {"params", nn::params_to_json(m.all_params())}};
}

inline DsivModel model_from_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("format") != "dsiv-checkpoint") throw ConfigError("not a checkpoint document");
    const ModelConfig cfg = model_config_from_json(j.at("model"));
    DataDims dims;
    dims.d_x = j.at("dims").at("d_x").get<std::size_t>();
    dims.d_a = j.at("dims").at("d_a").get<std::size_t>();
    dims.treatment =
        j.at("dims").at("treatment") == "binary" ? TreatmentKind::binary : TreatmentKind::continuous;
    DsivModel m(cfg, dims, Rng(0));
    m.y_scale.mean = j.at("y_scale").at("mean").get<double>();
    m.y_scale.scale = j.at("y_scale").at("scale").get<double>();
    m.mode = j.at("mode") == "decision" ? TrainMode::decision : TrainMode::one_step;
    m.tau = j.at("tau").get<std::size_t>();
    nn::ParamList params = m.all_params();
    nn::load_params_json(j.at("params"), params);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const DsivModel& m, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << checkpoint_json(m).dump() << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

inline DsivModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace dsiv
