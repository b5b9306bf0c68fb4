#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lgm/clamping.hpp"
#include "lgm/model.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

class InferenceError : public Error {
 public:
  using Error::Error;
};

enum class Method { MeanField, SumProduct, TreeReweighted, MaxProduct };
enum class Schedule { Parallel, Sequential };

inline Method method_from_string(const std::string& s) {
  if (s == "mf") return Method::MeanField;
  if (s == "lbp") return Method::SumProduct;
  if (s == "trw") return Method::TreeReweighted;
  if (s == "maxprod") return Method::MaxProduct;
  throw InferenceError("unknown inference method: " + s);
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::MeanField: return "mf";
    case Method::SumProduct: return "lbp";
    case Method::TreeReweighted: return "trw";
    case Method::MaxProduct: return "maxprod";
  }
  return "lbp";
}

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "parallel") return Schedule::Parallel;
  if (s == "sequential") return Schedule::Sequential;
  throw InferenceError("unknown schedule: " + s);
}

inline std::string to_string(Schedule s) {
  return s == Schedule::Parallel ? "parallel" : "sequential";
}

struct InferenceConfig {
  Method method = Method::SumProduct;
  Schedule schedule = Schedule::Sequential;
  int iterations = 1;
};

// Edge appearance probabilities per connection, plus the reciprocal laid out
// against the pairwise tensor (the message update divides energies by rho).
struct RhoMap {
  std::vector<Tensor> message_weight;  // broadcastable against messages
  std::vector<Tensor> energy_scale;    // 1/rho against aligned energies
};

// Spanning trees are drawn leaf-to-root with the output layer as root: each
// node of the child layer picks one of its neighbors in the parent layer
// uniformly, so rho = 1 / (number of parent-layer neighbors).
inline RhoMap compute_rho(const LgmGraph& g) {
  if (!g.layer_graph_is_tree())
    throw InferenceError(
        "tree-reweighted message passing needs a tree of layers");
  RhoMap rho;
  const auto& dist = g.distance_to_output();
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    const Connection& c = g.connection(ci);
    const std::size_t fi = g.from_index(ci), ti = g.to_index(ci);
    const Layer& lf = g.layer(fi);
    const Layer& lt = g.layer(ti);
    const bool child_is_from = dist[fi] > dist[ti];
    if (c.kind == ConnKind::Dense) {
      const double parents = child_is_from ? double(lt.node_count())
                                           : double(lf.node_count());
      rho.message_weight.push_back(Tensor::scalar(1.0 / parents));
      rho.energy_scale.push_back(Tensor::scalar(parents));
      continue;
    }
    const std::size_t d = c.kernel.size();
    if (!child_is_from) {
      // every to-layer node sees the full patch
      double parents = double(lf.channels);
      for (std::size_t k : c.kernel) parents *= double(k);
      rho.message_weight.push_back(Tensor::scalar(1.0 / parents));
      rho.energy_scale.push_back(Tensor::scalar(parents));
      continue;
    }
    // per from-node patch coverage
    const std::size_t spatial_n =
        std::accumulate(lf.spatial.begin(), lf.spatial.end(), std::size_t{1},
                        std::multiplies<std::size_t>());
    std::vector<double> cover(spatial_n, 0.0);
    {
      Tensor ones(Shape{lf.spatial.begin(), lf.spatial.end()},
                  std::vector<double>(spatial_n, 1.0));
      Tensor unf = unfold(ones, 0, c.kernel, c.stride, c.dilation);
      Tensor folded = fold(unf, 0, lf.spatial, c.kernel, c.stride,
                           c.dilation);
      cover = folded.data();
    }
    std::vector<double> rho_node(spatial_n, 1.0);
    for (std::size_t i = 0; i < spatial_n; ++i)
      if (cover[i] > 0.0) rho_node[i] = 1.0 / (cover[i] * double(lt.channels));
    Tensor rho_sp(Shape{lf.spatial.begin(), lf.spatial.end()},
                  std::move(rho_node));
    Tensor rho_edges = unfold(rho_sp, 0, c.kernel, c.stride, c.dilation);
    std::vector<double> inv(rho_edges.size());
    for (std::size_t i = 0; i < inv.size(); ++i)
      inv[i] = 1.0 / rho_edges.data()[i];
    Shape msg_shape{1, 1};
    msg_shape.insert(msg_shape.end(), rho_edges.shape().begin(),
                     rho_edges.shape().end());
    msg_shape.push_back(1);
    Shape w_shape = msg_shape;
    w_shape.push_back(1);
    rho.message_weight.push_back(
        reshape(Tensor(rho_edges.shape(), rho_edges.data()), msg_shape));
    rho.energy_scale.push_back(
        Tensor(w_shape, std::move(inv)));
  }
  return rho;
}

// rho = 1 on every edge; reduces tree-reweighted updates to plain LBP.
inline RhoMap unit_rho(const LgmGraph& g) {
  RhoMap rho;
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    rho.message_weight.push_back(Tensor::scalar(1.0));
    rho.energy_scale.push_back(Tensor::scalar(1.0));
  }
  return rho;
}

// Log-domain compact state: per-layer believes shaped like the unaries, and
// per-connection messages in both directions. Messages are stored per edge
// (conv connections expand over positions, carrying no weight sharing) with
// the target's label axis last.
struct InferenceState {
  std::vector<Tensor> believes;
  std::vector<Tensor> msg_into_from;
  std::vector<Tensor> msg_into_to;
};

enum class Direction { IntoTo, IntoFrom };

namespace detail {

inline Shape message_shape(const LgmGraph& g, std::size_t ci, Direction dir) {
  const Connection& c = g.connection(ci);
  const Layer& lf = g.layer(g.from_index(ci));
  const Layer& lt = g.layer(g.to_index(ci));
  const std::size_t label =
      (dir == Direction::IntoTo ? lt.labels : lf.labels) - 1;
  if (c.kind == ConnKind::Dense)
    return {lf.node_count(), lt.node_count(), label};
  Shape s{lf.channels, lt.channels};
  s.insert(s.end(), c.kernel.begin(), c.kernel.end());
  s.insert(s.end(), lt.spatial.begin(), lt.spatial.end());
  s.push_back(label);
  return s;
}

inline Tensor aligned_energy(const LgmGraph& g, const EffectiveEnergies& eff,
                             std::size_t ci) {
  const Connection& c = g.connection(ci);
  return align_pairwise(eff.pairwise[ci], c.kind, c.kernel.size(),
                        eff.positioned[ci]);
}

// Source-side believes laid out against the per-edge message layout.
inline Tensor edge_aligned_belief(const LgmGraph& g, std::size_t ci,
                                  const Tensor& belief, Direction dir) {
  const Connection& c = g.connection(ci);
  if (c.kind == ConnKind::Dense) {
    const Layer& lf = g.layer(g.from_index(ci));
    const Layer& lt = g.layer(g.to_index(ci));
    if (dir == Direction::IntoTo)
      return reshape(belief, {lf.node_count(), 1, lf.labels - 1});
    return reshape(belief, {1, lt.node_count(), lt.labels - 1});
  }
  const std::size_t d = c.kernel.size();
  if (dir == Direction::IntoTo) {
    Tensor unf = unfold(belief, 1, c.kernel, c.stride, c.dilation);
    Shape s = unf.shape();  // (cf, kernel..., pos..., lf-1)
    Shape aligned{s[0], 1};
    aligned.insert(aligned.end(), s.begin() + 1, s.end());
    return reshape(unf, std::move(aligned));
  }
  const Layer& lt = g.layer(g.to_index(ci));
  Shape aligned{1, lt.channels};
  aligned.insert(aligned.end(), d, 1);
  aligned.insert(aligned.end(), lt.spatial.begin(), lt.spatial.end());
  aligned.push_back(lt.labels - 1);
  return reshape(belief, std::move(aligned));
}

}  // namespace detail

// Post-observation state: believes 0 (uniform) and messages 0 (neutral).
inline InferenceState init_state(const LgmGraph& g,
                                 const EffectiveEnergies& eff) {
  InferenceState st;
  for (std::size_t li = 0; li < g.layers().size(); ++li)
    st.believes.emplace_back(g.layer(li).unary_shape());
  st.msg_into_from.resize(g.connections().size());
  st.msg_into_to.resize(g.connections().size());
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    if (!eff.active[ci]) continue;
    st.msg_into_from[ci] =
        Tensor(detail::message_shape(g, ci, Direction::IntoFrom));
    st.msg_into_to[ci] =
        Tensor(detail::message_shape(g, ci, Direction::IntoTo));
  }
  return st;
}

// One message update in the two-term normalized form: the reduction over the
// source labels runs through logsumexp* (sum-product) or relu.max (max-
// product); tree-reweighted passing divides the energies by rho first.
inline Tensor message_update(const LgmGraph& g, const EffectiveEnergies& eff,
                             const InferenceState& state, std::size_t ci,
                             Direction dir, Method method,
                             const RhoMap* rho = nullptr) {
  const bool into_to = dir == Direction::IntoTo;
  const std::size_t src_layer =
      into_to ? g.from_index(ci) : g.to_index(ci);
  const Tensor& reverse =
      into_to ? state.msg_into_from[ci] : state.msg_into_to[ci];
  Tensor wa = detail::aligned_energy(g, eff, ci);
  if (method == Method::TreeReweighted) {
    if (!rho) throw InferenceError("tree-reweighted update needs a rho map");
    wa = mul(wa, rho->energy_scale[ci]);
  }
  Tensor src = detail::edge_aligned_belief(g, ci, state.believes[src_layer],
                                           dir);
  Tensor a0 = sub(src, reverse);
  const std::size_t label_axis = into_to ? wa.rank() - 2 : wa.rank() - 1;
  Shape a0r_shape = a0.shape();
  a0r_shape.insert(a0r_shape.end() - (into_to ? 0 : 1), 1);
  Tensor x = sub(reshape(a0, std::move(a0r_shape)), wa);
  Tensor t1, t2;
  if (method == Method::MaxProduct) {
    t1 = relu_max_star(x, label_axis);
    t2 = relu_max_star(a0, a0.rank() - 1);
  } else {
    t1 = logsumexp_star(x, label_axis);
    t2 = logsumexp_star(a0, a0.rank() - 1);
  }
  Shape t2r = t2.shape();
  t2r.push_back(1);
  return sub(t1, reshape(t2, std::move(t2r)));
}

namespace detail {

// Sums a per-edge tensor (value axis last) into the target layer's
// unary-shaped layout.
inline Tensor sum_into_layer(const LgmGraph& g, std::size_t ci,
                             const Tensor& per_edge, bool target_is_to) {
  const Connection& c = g.connection(ci);
  const Layer& lf = g.layer(g.from_index(ci));
  const Layer& lt = g.layer(g.to_index(ci));
  if (c.kind == ConnKind::Dense) {
    Tensor s = sum(per_edge, {target_is_to ? std::size_t{0} : std::size_t{1}});
    return reshape(s, target_is_to ? lt.unary_shape() : lf.unary_shape());
  }
  const std::size_t d = c.kernel.size();
  if (target_is_to) {
    std::vector<std::size_t> axes{0};
    for (std::size_t a = 0; a < d; ++a) axes.push_back(2 + a);
    return sum(per_edge, axes);  // (c_to, pos..., label)
  }
  Tensor s = sum(per_edge, {1});  // (c_from, kernel..., pos..., label)
  return fold(s, 1, lf.spatial, c.kernel, c.stride, c.dilation);
}

}  // namespace detail

// Belief update for the message-passing family: b = -V + sum of incoming
// messages, each weighted by rho under tree-reweighting.
inline Tensor bp_belief_update(const LgmGraph& g,
                               const EffectiveEnergies& eff,
                               const InferenceState& state, std::size_t layer,
                               Method method, const RhoMap* rho = nullptr) {
  Tensor b = neg(eff.unary[layer]);
  for (const auto& inc : g.incident(layer)) {
    if (!eff.active[inc.connection]) continue;
    Tensor m = inc.is_from ? state.msg_into_from[inc.connection]
                           : state.msg_into_to[inc.connection];
    if (method == Method::TreeReweighted) {
      if (!rho) throw InferenceError("tree-reweighted update needs a rho map");
      m = mul(m, rho->message_weight[inc.connection]);
    }
    b = add(b, detail::sum_into_layer(g, inc.connection, m, !inc.is_from));
  }
  return b;
}

// Mean-field belief update: b = -V - sum over neighbors of the expected
// pairwise energies under the neighbors' current believes (the implicit
// label contributes nothing by the compact constraint).
inline Tensor mean_field_belief_update(const LgmGraph& g,
                                       const EffectiveEnergies& eff,
                                       const InferenceState& state,
                                       std::size_t layer) {
  Tensor b = neg(eff.unary[layer]);
  for (const auto& inc : g.incident(layer)) {
    const std::size_t ci = inc.connection;
    if (!eff.active[ci]) continue;
    const bool target_is_to = !inc.is_from;
    const std::size_t src_layer =
        target_is_to ? g.from_index(ci) : g.to_index(ci);
    const Tensor& src_b = state.believes[src_layer];
    Tensor sb = softmax_star(src_b, src_b.rank() - 1);
    Tensor aligned =
        detail::edge_aligned_belief(g, ci, sb,
                                    target_is_to ? Direction::IntoTo
                                                 : Direction::IntoFrom);
    Tensor wa = detail::aligned_energy(g, eff, ci);
    // align the source believes against (..., l_from-1, l_to-1)
    Shape s = aligned.shape();
    s.insert(s.end() - (target_is_to ? 0 : 1), 1);
    Tensor prod = mul(wa, reshape(aligned, std::move(s)));
    // sum over the source label axis, then over the source node axes
    Tensor per_edge =
        sum(prod, {target_is_to ? prod.rank() - 2 : prod.rank() - 1});
    b = sub(b, detail::sum_into_layer(g, ci, per_edge, target_is_to));
  }
  return b;
}

namespace detail {

inline std::vector<std::size_t> sweep_order(const LgmGraph& g) {
  std::vector<std::size_t> order(g.layers().size());
  std::iota(order.begin(), order.end(), 0);
  const auto& dist = g.distance_to_output();
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return dist[a] < dist[b];
                   });
  return order;
}

}  // namespace detail

// One full inference iteration in place.
inline void inference_step(const LgmGraph& g, const EffectiveEnergies& eff,
                           InferenceState& state, const InferenceConfig& cfg,
                           const RhoMap* rho = nullptr) {
  const Method method = cfg.method;
  if (cfg.schedule == Schedule::Parallel) {
    if (method == Method::MeanField) {
      std::vector<Tensor> next = state.believes;
      for (std::size_t li = 0; li < g.layers().size(); ++li) {
        if (eff.obs[li].all) continue;
        next[li] = mean_field_belief_update(g, eff, state, li);
      }
      state.believes = std::move(next);
      return;
    }
    std::vector<Tensor> new_into_from = state.msg_into_from;
    std::vector<Tensor> new_into_to = state.msg_into_to;
    for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
      if (!eff.active[ci]) continue;
      new_into_to[ci] =
          message_update(g, eff, state, ci, Direction::IntoTo, method, rho);
      new_into_from[ci] =
          message_update(g, eff, state, ci, Direction::IntoFrom, method, rho);
    }
    state.msg_into_from = std::move(new_into_from);
    state.msg_into_to = std::move(new_into_to);
    for (std::size_t li = 0; li < g.layers().size(); ++li) {
      if (eff.obs[li].all) continue;
      state.believes[li] = bp_belief_update(g, eff, state, li, method, rho);
    }
    return;
  }

  // Sequential: sweep every layer from the output toward the input; per
  // layer first refresh its incoming messages, then its belief.
  for (std::size_t li : detail::sweep_order(g)) {
    if (eff.obs[li].all) continue;
    if (method != Method::MeanField) {
      for (const auto& inc : g.incident(li)) {
        if (!eff.active[inc.connection]) continue;
        Tensor m = message_update(
            g, eff, state, inc.connection,
            inc.is_from ? Direction::IntoFrom : Direction::IntoTo, method,
            rho);
        (inc.is_from ? state.msg_into_from
                     : state.msg_into_to)[inc.connection] = std::move(m);
      }
      state.believes[li] = bp_belief_update(g, eff, state, li, method, rho);
    } else {
      state.believes[li] = mean_field_belief_update(g, eff, state, li);
    }
  }
}

// Runs exactly cfg.iterations steps from the neutral initialization.
inline InferenceState run_inference(const LgmGraph& g,
                                    const EffectiveEnergies& eff,
                                    const InferenceConfig& cfg,
                                    const RhoMap* rho = nullptr) {
  if (cfg.iterations < 1)
    throw InferenceError("iteration count must be at least 1");
  RhoMap computed;
  if (cfg.method == Method::TreeReweighted && !rho) {
    computed = compute_rho(g);
    rho = &computed;
  }
  InferenceState state = init_state(g, eff);
  for (int t = 0; t < cfg.iterations; ++t)
    inference_step(g, eff, state, cfg, rho);
  return state;
}

// Clamps, folds, and runs. Clamps may address input layers only.
inline InferenceState run_inference(const LgmGraph& g,
                                    const Parameters& params,
                                    const ClampSpec& clamps,
                                    const InferenceConfig& cfg,
                                    EffectiveEnergies* eff_out = nullptr,
                                    const RhoMap* rho = nullptr) {
  clamps.validate_input_only(g);
  EffectiveEnergies eff = apply_clamps(g, params, clamps);
  InferenceState st = run_inference(g, eff, cfg, rho);
  if (eff_out) *eff_out = std::move(eff);
  return st;
}

// Full per-node label distributions of one layer; observed nodes report
// their observation (the belief-filling read-out).
inline std::vector<std::vector<double>> layer_distributions(
    const LgmGraph& g, const EffectiveEnergies& eff,
    const InferenceState& state, std::size_t layer) {
  const Layer& l = g.layer(layer);
  const std::size_t l1 = l.labels - 1;
  const auto& b = state.believes[layer].data();
  const LayerObservation& obs = eff.obs[layer];
  std::vector<std::vector<double>> out(l.node_count());
  for (std::size_t i = 0; i < l.node_count(); ++i) {
    if (obs.any && obs.observed[i]) {
      std::vector<double> dist(l.labels, 0.0);
      const auto& q = obs.probs.data();
      double rest = 0.0;
      for (std::size_t a = 1; a < l.labels; ++a) {
        dist[a] = q[i * l1 + (a - 1)];
        rest += dist[a];
      }
      dist[0] = 1.0 - rest;
      out[i] = std::move(dist);
    } else {
      out[i] = complete_distribution(std::vector<double>(
          b.begin() + static_cast<long>(i * l1),
          b.begin() + static_cast<long>((i + 1) * l1)));
    }
  }
  return out;
}

// Per-layer decoded labels (argmax of believes; ties to the lowest label).
inline std::vector<std::vector<std::size_t>> decode_labels(
    const LgmGraph& g, const EffectiveEnergies& eff,
    const InferenceState& state) {
  std::vector<std::vector<std::size_t>> out(g.layers().size());
  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    auto dists = layer_distributions(g, eff, state, li);
    for (const auto& d : dists) out[li].push_back(argmax_label(d));
  }
  return out;
}

}  // namespace lgm
