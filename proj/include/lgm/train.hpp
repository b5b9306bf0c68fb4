#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lgm/checkpoint.hpp"
#include "lgm/clamping.hpp"
#include "lgm/data.hpp"
#include "lgm/exact.hpp"
#include "lgm/inference.hpp"
#include "lgm/model.hpp"

namespace lgm {

class TrainError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Batch parallelism. LGM_THREADS caps the worker count (0 or unset = auto).
// ---------------------------------------------------------------------------

inline std::size_t worker_count() {
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("LGM_THREADS")) {
    const long v = std::atol(env);
    if (v > 0) n = std::size_t(v);
  }
  return n;
}

namespace detail {

// Runs fn(i) for i in [0, n); results must be written to per-index slots so
// reductions stay deterministic.
inline void parallel_for(std::size_t n,
                         const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training configuration and targets.
// ---------------------------------------------------------------------------

enum class GradientEstimator { Backprop, Analytic };

struct TrainConfig {
  std::size_t batch_size = 20;
  InferenceConfig inference{Method::SumProduct, Schedule::Sequential, 5};
  int eval_iterations = 0;  // 0: evaluate with the training truncation
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double label_smoothing = 0.0;
  int max_epochs = 50;
  int patience = 3;
  std::uint64_t seed = 0;
  GradientEstimator estimator = GradientEstimator::Backprop;

  InferenceConfig eval_inference() const {
    InferenceConfig e = inference;
    if (eval_iterations > 0) e.iterations = eval_iterations;
    return e;
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size},
            {"method", to_string(inference.method)},
            {"schedule", to_string(inference.schedule)},
            {"iterations", inference.iterations},
            {"eval_iterations", eval_iterations},
            {"learning_rate", learning_rate},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"label_smoothing", label_smoothing},
            {"max_epochs", max_epochs},
            {"patience", patience},
            {"seed", seed},
            {"gradient",
             estimator == GradientEstimator::Backprop ? "backprop"
                                                      : "analytic"}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size");
    if (j.contains("method"))
      c.inference.method = method_from_string(j.at("method"));
    if (j.contains("schedule"))
      c.inference.schedule = schedule_from_string(j.at("schedule"));
    if (j.contains("iterations")) c.inference.iterations = j.at("iterations");
    if (j.contains("eval_iterations"))
      c.eval_iterations = j.at("eval_iterations");
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate");
    if (j.contains("beta1")) c.beta1 = j.at("beta1");
    if (j.contains("beta2")) c.beta2 = j.at("beta2");
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon");
    if (j.contains("label_smoothing"))
      c.label_smoothing = j.at("label_smoothing");
    if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs");
    if (j.contains("patience")) c.patience = j.at("patience");
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("gradient"))
      c.estimator = j.at("gradient") == "analytic"
                        ? GradientEstimator::Analytic
                        : GradientEstimator::Backprop;
    if (c.batch_size < 1) throw TrainError("batch size must be positive");
    if (!(c.label_smoothing >= 0.0 && c.label_smoothing < 1.0))
      throw TrainError("label smoothing must lie in [0,1)");
    return c;
  }
};

// Mixes the one-hot target with the uniform distribution: the correct class
// keeps 1 - (K-1)e/K, every other class gets e/K.
inline std::vector<double> smoothed_target(std::size_t classes,
                                           std::size_t label,
                                           double epsilon) {
  if (label >= classes) throw TrainError("target label out of range");
  std::vector<double> t(classes, epsilon / double(classes));
  t[label] += 1.0 - epsilon;
  return t;
}

// Cross-entropy of the completed output belief against a class-probability
// vector, computed in the compact domain:
//   loss = logsumexp*(b) - sum_{c>=1} t_c b_c.
inline Tensor nll_loss(const Tensor& output_belief,
                       const std::vector<double>& target) {
  const std::size_t k1 = output_belief.size();
  if (target.size() != k1 + 1)
    throw TrainError("target length does not match the output labels");
  Tensor b = reshape(output_belief, {k1});
  Tensor lse = logsumexp_star(b, 0);
  Tensor tc(Shape{k1},
            std::vector<double>(target.begin() + 1, target.end()));
  return sub(lse, contract(tc, b, {{0, 0}}));
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double epsilon)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(epsilon) {}

  void step(Parameters& params,
            const std::vector<std::vector<double>>& grads) {
    const std::size_t count = params.unary.size() + params.pairwise.size();
    if (grads.size() != count)
      throw TrainError("gradient count does not match the parameters");
    if (m_.empty()) {
      m_.resize(count);
      v_.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        m_[i].assign(grads[i].size(), 0.0);
        v_[i].assign(grads[i].size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < count; ++i) {
      Tensor& p = i < params.unary.size()
                      ? params.unary[i]
                      : params.pairwise[i - params.unary.size()];
      std::vector<double> x = p.data();
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      for (std::size_t k = 0; k < x.size(); ++k) {
        m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
        v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
        x[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
      p = Tensor(p.shape(), std::move(x));
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Analytic likelihood gradient (difference of clamped and free moments).
// ---------------------------------------------------------------------------

struct GradientSet {
  std::vector<std::vector<double>> unary, pairwise;

  static GradientSet zeros_like(const LgmGraph& g) {
    GradientSet s;
    for (const Layer& l : g.layers())
      s.unary.emplace_back(numel(l.unary_shape()), 0.0);
    for (std::size_t ci = 0; ci < g.connections().size(); ++ci)
      s.pairwise.emplace_back(numel(g.pairwise_shape(ci)), 0.0);
    return s;
  }
};

namespace detail {

struct MomentSnapshot {
  std::vector<std::vector<std::vector<double>>> node;  // layer, node, label
  const InferenceState* state;
  const EffectiveEnergies* eff;
};

// Pairwise distribution of one free-free edge from the two-sided cavity
// terms: P(xi,xj) ~ exp(-E + u_i(xi) + u_j(xj)) including the implicit
// zero slices.
inline void edge_pair_belief(const double* w_block, std::size_t lf,
                             std::size_t lt, const double* u_from,
                             const double* u_to, double* out) {
  const std::size_t lf1 = lf - 1, lt1 = lt - 1;
  double m = 0.0;
  for (std::size_t a = 0; a < lf; ++a)
    for (std::size_t b = 0; b < lt; ++b) {
      double s = (a >= 1 ? u_from[a - 1] : 0.0) + (b >= 1 ? u_to[b - 1] : 0.0);
      if (a >= 1 && b >= 1) s -= w_block[(a - 1) * lt1 + (b - 1)];
      out[a * lt + b] = s;
      m = std::max(m, s);
    }
  double z = 0.0;
  for (std::size_t k = 0; k < lf * lt; ++k) z += std::exp(out[k] - m);
  const double log_z = m + std::log(z);
  for (std::size_t k = 0; k < lf * lt; ++k)
    out[k] = std::exp(out[k] - log_z);
}

}  // namespace detail

// Gradient of -log P(y = target | clamps) w.r.t. every stored energy entry,
// estimated as the clamped-minus-free difference of node and edge moments
// under the chosen truncated inference. Pairwise moments use the two-sided
// cavity product for message passing and the believes product for mean
// field. Max-product carries no probabilistic moments.
inline GradientSet analytic_nll_gradient(
    const LgmGraph& g, const Parameters& params, const ClampSpec& clamps,
    std::size_t target, const InferenceConfig& cfg,
    const RhoMap* rho = nullptr, InferenceState* free_state_out = nullptr,
    EffectiveEnergies* free_eff_out = nullptr) {
  if (cfg.method == Method::MaxProduct)
    throw TrainError("analytic gradient needs a probabilistic method");
  RhoMap computed;
  if (cfg.method == Method::TreeReweighted && !rho) {
    computed = compute_rho(g);
    rho = &computed;
  }

  ClampSpec clamped = clamps;
  clamped.set(g.output_layer(), 0, NodeClamp::hard(target));

  EffectiveEnergies eff_cl = apply_clamps(g, params, clamped);
  InferenceState st_cl = run_inference(g, eff_cl, cfg, rho);
  EffectiveEnergies eff_fr = apply_clamps(g, params, clamps);
  InferenceState st_fr = run_inference(g, eff_fr, cfg, rho);

  auto moments = [&](const EffectiveEnergies& eff, const InferenceState& st) {
    detail::MomentSnapshot m;
    m.state = &st;
    m.eff = &eff;
    for (std::size_t li = 0; li < g.layers().size(); ++li)
      m.node.push_back(layer_distributions(g, eff, st, li));
    return m;
  };
  detail::MomentSnapshot cl = moments(eff_cl, st_cl);
  detail::MomentSnapshot fr = moments(eff_fr, st_fr);

  GradientSet grad = GradientSet::zeros_like(g);

  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    const std::size_t l1 = g.layer(li).labels - 1;
    auto& out = grad.unary[li];
    for (std::size_t i = 0; i < g.layer(li).node_count(); ++i)
      for (std::size_t a = 1; a <= l1; ++a)
        out[i * l1 + (a - 1)] = cl.node[li][i][a] - fr.node[li][i][a];
  }

  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    const std::size_t fi = g.from_index(ci), ti = g.to_index(ci);
    const Layer& lf = g.layer(fi);
    const Layer& lt = g.layer(ti);
    const std::size_t lf1 = lf.labels - 1, lt1 = lt.labels - 1;
    std::vector<double> pair_cl(lf.labels * lt.labels);
    std::vector<double> pair_fr(lf.labels * lt.labels);

    for_each_edge_indexed(
        g, ci,
        [&](std::size_t p, std::size_t q, std::size_t wbase,
            std::size_t msg_ordinal) {
          auto fill = [&](const detail::MomentSnapshot& snap, double* out) {
            const bool p_obs =
                snap.eff->obs[fi].any && snap.eff->obs[fi].observed[p];
            const bool q_obs =
                snap.eff->obs[ti].any && snap.eff->obs[ti].observed[q];
            if (p_obs || q_obs || cfg.method == Method::MeanField ||
                !snap.eff->active[ci]) {
              for (std::size_t a = 0; a < lf.labels; ++a)
                for (std::size_t b = 0; b < lt.labels; ++b)
                  out[a * lt.labels + b] =
                      snap.node[fi][p][a] * snap.node[ti][q][b];
              return;
            }
            const auto& bf = snap.state->believes[fi].data();
            const auto& bt = snap.state->believes[ti].data();
            const auto& mf = snap.state->msg_into_from[ci].data();
            const auto& mt = snap.state->msg_into_to[ci].data();
            std::vector<double> uf(lf1), ut(lt1);
            for (std::size_t a = 0; a < lf1; ++a)
              uf[a] = bf[p * lf1 + a] - mf[msg_ordinal * lf1 + a];
            for (std::size_t b = 0; b < lt1; ++b)
              ut[b] = bt[q * lt1 + b] - mt[msg_ordinal * lt1 + b];
            detail::edge_pair_belief(
                params.pairwise[ci].data().data() + wbase, lf.labels,
                lt.labels, uf.data(), ut.data(), out);
          };
          fill(cl, pair_cl.data());
          fill(fr, pair_fr.data());
          auto& out = grad.pairwise[ci];
          for (std::size_t a = 1; a <= lf1; ++a)
            for (std::size_t b = 1; b <= lt1; ++b)
              out[wbase + (a - 1) * lt1 + (b - 1)] +=
                  pair_cl[a * lt.labels + b] - pair_fr[a * lt.labels + b];
        });
  }

  if (free_state_out) *free_state_out = std::move(st_fr);
  if (free_eff_out) *free_eff_out = std::move(eff_fr);
  return grad;
}

// ---------------------------------------------------------------------------
// Training loop: truncated inference on a tape, batch-mean loss, Adam,
// validation-driven early stopping.
// ---------------------------------------------------------------------------

struct DataPolicy {
  ClampPolicy clamp;
  double p_obs = 1.0;
  std::uint64_t mask_seed = 0;
  bool resample_masks = true;  // fresh masks each epoch
  std::size_t limit = 0;       // use only the first N pool samples

  nlohmann::json to_json() const {
    return {{"mode", to_string(clamp.mode)},
            {"colors", clamp.colors},
            {"threshold", clamp.threshold},
            {"p_obs", p_obs},
            {"mask_seed", mask_seed},
            {"resample_masks", resample_masks},
            {"limit", limit}};
  }
  static DataPolicy from_json(const nlohmann::json& j) {
    DataPolicy p;
    if (j.contains("mode"))
      p.clamp.mode = clamp_mode_from_string(j.at("mode"));
    if (j.contains("colors")) p.clamp.colors = j.at("colors");
    if (j.contains("threshold")) p.clamp.threshold = j.at("threshold");
    if (j.contains("p_obs")) p.p_obs = j.at("p_obs");
    if (j.contains("mask_seed")) p.mask_seed = j.at("mask_seed");
    if (j.contains("resample_masks")) p.resample_masks = j.at("resample_masks");
    if (j.contains("limit")) p.limit = j.at("limit");
    return p;
  }

  ClampSpec clamps_for(const LgmGraph& g, const Dataset& data,
                       std::size_t sample, std::uint64_t epoch) const {
    const std::vector<double> image = data.image(sample);
    if (p_obs >= 1.0) return clamp.make(g, image);
    const std::uint64_t seed =
        resample_masks ? mask_seed ^ detail::splitmix64(epoch + 1)
                       : mask_seed;
    const auto visible =
        observation_mask(seed, sample, image.size(), p_obs);
    return clamp.make(g, image, &visible);
  }
};

struct EpochMetrics {
  int epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double val_accuracy = 0.0;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_nll = 0.0;
  std::size_t count = 0;
};

// Accuracy and plain mean NLL of argmax predictions over the given indices.
inline EvalResult evaluate(const LgmGraph& g, const Parameters& params,
                           const Dataset& data,
                           const std::vector<std::uint32_t>& indices,
                           const DataPolicy& policy,
                           const InferenceConfig& cfg,
                           const RhoMap* rho = nullptr,
                           std::uint64_t mask_epoch = 0) {
  RhoMap computed;
  if (cfg.method == Method::TreeReweighted && !rho) {
    computed = compute_rho(g);
    rho = &computed;
  }
  const std::size_t out_layer = g.output_layer();
  std::vector<std::uint8_t> hit(indices.size(), 0);
  std::vector<double> nll(indices.size(), 0.0);
  detail::parallel_for(indices.size(), [&](std::size_t slot) {
    const std::size_t idx = indices[slot];
    ClampSpec clamps = policy.clamps_for(g, data, idx, mask_epoch);
    EffectiveEnergies eff = apply_clamps(g, params, clamps);
    InferenceState st = run_inference(g, eff, cfg, rho);
    const auto dist = layer_distributions(g, eff, st, out_layer)[0];
    hit[slot] = argmax_label(dist) == data.labels[idx] ? 1 : 0;
    nll[slot] = -std::log(std::max(dist[data.labels[idx]], 1e-300));
  });
  EvalResult r;
  r.count = indices.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    r.accuracy += hit[i];
    r.mean_nll += nll[i];
  }
  if (r.count > 0) {
    r.accuracy /= double(r.count);
    r.mean_nll /= double(r.count);
  }
  return r;
}

struct TrainResult {
  Parameters params;  // best validation checkpoint
  int best_epoch = 0;
  double best_val_nll = 0.0;
  std::vector<EpochMetrics> history;
  Split split;
};

inline TrainResult train(const LgmGraph& g, const Dataset& pool,
                         const TrainConfig& cfg, const DataPolicy& policy,
                         const std::function<void(const EpochMetrics&)>&
                             on_epoch = nullptr) {
  const std::size_t usable =
      policy.limit > 0 ? std::min(policy.limit, pool.size()) : pool.size();
  if (usable == 0) throw TrainError("empty dataset");
  Split split = split_dataset(usable, cfg.seed);

  RhoMap rho_storage;
  const RhoMap* rho = nullptr;
  if (cfg.inference.method == Method::TreeReweighted) {
    rho_storage = compute_rho(g);
    rho = &rho_storage;
  }

  Parameters params = init_parameters(g, cfg.seed);
  AdamOptimizer adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
  const std::size_t out_layer = g.output_layer();
  const std::size_t classes = g.layer(out_layer).labels;
  const std::size_t tensor_count = params.unary.size() + params.pairwise.size();

  TrainResult result;
  result.split = split;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::mt19937_64 shuffle_rng(detail::splitmix64(cfg.seed ^ 0x5e11d0d5ULL));
  std::vector<std::uint32_t> order = split.train;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;

    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t bsz =
          std::min(cfg.batch_size, order.size() - start);
      std::vector<std::vector<std::vector<double>>> grads(bsz);
      std::vector<double> losses(bsz, 0.0);

      detail::parallel_for(bsz, [&](std::size_t slot) {
        const std::size_t idx = order[start + slot];
        ClampSpec clamps = policy.clamps_for(g, pool, idx, epoch);
        const auto target =
            smoothed_target(classes, pool.labels[idx], cfg.label_smoothing);

        if (cfg.estimator == GradientEstimator::Backprop) {
          Tape tape;
          Parameters watched = params.watched_on(tape);
          EffectiveEnergies eff = apply_clamps(g, watched, clamps);
          InferenceState st = run_inference(g, eff, cfg.inference, rho);
          Tensor loss = nll_loss(st.believes[out_layer], target);
          losses[slot] = loss.value();
          GradientMap gm = tape.backward(loss);
          auto& slot_grads = grads[slot];
          slot_grads.reserve(tensor_count);
          for (const Tensor& t : watched.unary)
            slot_grads.push_back(gm.at(t).data());
          for (const Tensor& t : watched.pairwise)
            slot_grads.push_back(gm.at(t).data());
        } else {
          InferenceState free_state;
          EffectiveEnergies free_eff;
          GradientSet est = analytic_nll_gradient(
              g, params, clamps, pool.labels[idx], cfg.inference, rho,
              &free_state, &free_eff);
          // reported loss keeps the smoothed objective; the estimator
          // differentiates the plain likelihood
          losses[slot] =
              nll_loss(free_state.believes[out_layer], target).value();
          auto& slot_grads = grads[slot];
          slot_grads.reserve(tensor_count);
          for (auto& u : est.unary) slot_grads.push_back(std::move(u));
          for (auto& w : est.pairwise) slot_grads.push_back(std::move(w));
        }
      });

      std::vector<std::vector<double>> mean_grads(tensor_count);
      for (std::size_t t = 0; t < tensor_count; ++t)
        mean_grads[t].assign(grads[0][t].size(), 0.0);
      const double inv = 1.0 / double(bsz);
      for (std::size_t slot = 0; slot < bsz; ++slot)
        for (std::size_t t = 0; t < tensor_count; ++t) {
          const auto& gsrc = grads[slot][t];
          auto& dst = mean_grads[t];
          for (std::size_t k = 0; k < gsrc.size(); ++k)
            dst[k] += inv * gsrc[k];
        }

      for (double l : losses) {
        if (!std::isfinite(l))
          throw TrainError("non-finite training loss at epoch " +
                           std::to_string(epoch));
        epoch_loss += l;
      }
      seen += bsz;
      adam.step(params, mean_grads);
    }

    // validation under the smoothed objective for the stopping signal
    double val_loss = 0.0;
    {
      std::vector<double> per(split.val.size(), 0.0);
      detail::parallel_for(split.val.size(), [&](std::size_t slot) {
        const std::size_t idx = split.val[slot];
        ClampSpec clamps = policy.clamps_for(g, pool, idx, 0);
        EffectiveEnergies eff = apply_clamps(g, params, clamps);
        InferenceState st = run_inference(g, eff, cfg.eval_inference(), rho);
        per[slot] = nll_loss(st.believes[out_layer],
                             smoothed_target(classes, pool.labels[idx],
                                             cfg.label_smoothing))
                        .value();
      });
      for (double v : per) val_loss += v;
      if (!split.val.empty()) val_loss /= double(split.val.size());
    }
    EvalResult val =
        evaluate(g, params, pool, split.val, policy, cfg.eval_inference(),
                 rho, 0);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_nll = seen ? epoch_loss / double(seen) : 0.0;
    m.val_nll = val_loss;
    m.val_accuracy = val.accuracy;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);

    if (val_loss < best_val) {
      best_val = val_loss;
      result.params = params;
      result.best_epoch = epoch;
      result.best_val_nll = val_loss;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (result.history.empty()) throw TrainError("no epochs ran");
  if (result.params.unary.empty()) {
    result.params = params;
    result.best_epoch = int(result.history.size());
    result.best_val_nll = best_val;
  }
  return result;
}

inline std::string metrics_to_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,train_nll,val_nll,val_accuracy\n";
  char line[128];
  for (const auto& m : history) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g\n", m.epoch,
                  m.train_nll, m.val_nll, m.val_accuracy);
    out += line;
  }
  return out;
}

}  // namespace lgm
