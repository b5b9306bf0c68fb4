#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "lgm/clamping.hpp"
#include "lgm/model.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

class OracleError : public Error {
 public:
  using Error::Error;
};

// Brute-force enumeration over a small model. Ground truth for marginals,
// conditionals, MAP and KL; clarity over speed, guarded by a state-space cap.
namespace exact {

constexpr std::size_t kDefaultStateCap = 1000000;

namespace detail {

struct Edge {
  std::size_t a, b;     // global node ids
  std::size_t base;     // offset of the compact label block
  std::size_t lb1;      // stride of the a-label within the block
  const std::vector<double>* w;
};

struct Problem {
  const LgmGraph* graph;
  std::vector<std::size_t> layer_offset;   // global id = offset[layer] + node
  std::vector<std::size_t> labels;         // per global node
  std::vector<std::size_t> layer_of;       // per global node
  std::vector<const std::vector<double>*> unary;  // per layer
  std::vector<std::size_t> unary_stride;   // labels-1 per layer
  std::vector<Edge> edges;
  std::vector<long> fixed;                 // label or -1
  std::vector<std::size_t> free_nodes;     // enumeration order
  std::size_t states = 1;
};

inline Problem setup(const LgmGraph& g, const Parameters& params,
                     const ClampSpec& clamps, std::size_t state_cap,
                     const std::vector<std::size_t>* order) {
  clamps.validate(g);
  Problem p;
  p.graph = &g;
  const std::size_t nl = g.layers().size();
  p.layer_offset.resize(nl);
  std::size_t total = 0;
  for (std::size_t li = 0; li < nl; ++li) {
    p.layer_offset[li] = total;
    total += g.layer(li).node_count();
  }
  p.labels.resize(total);
  p.layer_of.resize(total);
  p.fixed.assign(total, -1);
  for (std::size_t li = 0; li < nl; ++li) {
    const Layer& l = g.layer(li);
    for (std::size_t i = 0; i < l.node_count(); ++i) {
      p.labels[p.layer_offset[li] + i] = l.labels;
      p.layer_of[p.layer_offset[li] + i] = li;
    }
    p.unary.push_back(&params.unary[li].data());
    p.unary_stride.push_back(l.labels - 1);
    if (const auto* lc = clamps.layer_clamps(li)) {
      for (std::size_t i = 0; i < lc->size(); ++i) {
        if ((*lc)[i].kind == ClampKind::Hard)
          p.fixed[p.layer_offset[li] + i] =
              static_cast<long>((*lc)[i].label);
        else if ((*lc)[i].kind == ClampKind::Soft)
          throw OracleError(
              "enumeration oracle takes hard or unobserved clamps only");
      }
    }
  }
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    const std::size_t fo = p.layer_offset[g.from_index(ci)];
    const std::size_t to = p.layer_offset[g.to_index(ci)];
    const std::size_t lb1 = g.layer(g.to_index(ci)).labels - 1;
    const auto* w = &params.pairwise[ci].data();
    for_each_edge(g, ci,
                  [&](std::size_t a, std::size_t b, std::size_t base) {
                    p.edges.push_back({fo + a, to + b, base, lb1, w});
                  });
  }
  if (order) {
    if (order->size() != total)
      throw OracleError("enumeration order must cover every node");
    for (std::size_t id : *order)
      if (p.fixed[id] < 0) p.free_nodes.push_back(id);
  } else {
    for (std::size_t id = 0; id < total; ++id)
      if (p.fixed[id] < 0) p.free_nodes.push_back(id);
  }
  for (std::size_t id : p.free_nodes) {
    if (p.states > state_cap / p.labels[id])
      throw OracleError("state space exceeds the enumeration cap");
    p.states *= p.labels[id];
  }
  return p;
}

inline double energy(const Problem& p, const std::vector<std::size_t>& x) {
  double e = 0.0;
  for (std::size_t li = 0; li < p.unary.size(); ++li) {
    const std::size_t off = p.layer_offset[li];
    const std::size_t n = p.graph->layer(li).node_count();
    const std::size_t l1 = p.unary_stride[li];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t xi = x[off + i];
      if (xi >= 1) e += (*p.unary[li])[i * l1 + (xi - 1)];
    }
  }
  for (const Edge& ed : p.edges) {
    const std::size_t xa = x[ed.a], xb = x[ed.b];
    if (xa >= 1 && xb >= 1)
      e += (*ed.w)[ed.base + (xa - 1) * ed.lb1 + (xb - 1)];
  }
  return e;
}

// Enumerates assignments (fixed labels held), calling fn(x, -energy).
template <class F>
inline void for_each_state(const Problem& p, F&& fn) {
  std::vector<std::size_t> x(p.labels.size(), 0);
  for (std::size_t id = 0; id < x.size(); ++id)
    if (p.fixed[id] >= 0) x[id] = static_cast<std::size_t>(p.fixed[id]);
  for (std::size_t s = 0;; ++s) {
    fn(x, -energy(p, x));
    if (s + 1 == p.states) break;
    for (std::size_t k = p.free_nodes.size(); k-- > 0;) {
      const std::size_t id = p.free_nodes[k];
      if (++x[id] < p.labels[id]) break;
      x[id] = 0;
    }
  }
}

inline double logsumexp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

// Exact conditional marginals P(x_i | clamps) per layer per node; hard
// clamped nodes report their observed one-hot distribution.
inline std::vector<std::vector<std::vector<double>>> marginals(
    const LgmGraph& g, const Parameters& params, const ClampSpec& clamps,
    std::size_t state_cap = kDefaultStateCap,
    const std::vector<std::size_t>* order = nullptr) {
  const auto p = detail::setup(g, params, clamps, state_cap, order);
  const std::size_t total = p.labels.size();

  // log-weight accumulation per (node, label) via a running max pass first
  double max_lw = -std::numeric_limits<double>::infinity();
  detail::for_each_state(p, [&](const std::vector<std::size_t>&, double lw) {
    max_lw = std::max(max_lw, lw);
  });
  std::vector<std::vector<double>> acc(total);
  for (std::size_t id = 0; id < total; ++id)
    acc[id].assign(p.labels[id], 0.0);
  double z = 0.0;
  detail::for_each_state(p, [&](const std::vector<std::size_t>& x, double lw) {
    const double w = std::exp(lw - max_lw);
    z += w;
    for (std::size_t id = 0; id < total; ++id) acc[id][x[id]] += w;
  });

  std::vector<std::vector<std::vector<double>>> out(g.layers().size());
  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    const std::size_t n = g.layer(li).node_count();
    out[li].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& dist = acc[p.layer_offset[li] + i];
      for (double& v : dist) v /= z;
      out[li][i] = std::move(dist);
    }
  }
  return out;
}

// -log P(output = target | clamps).
inline double nll(const LgmGraph& g, const Parameters& params,
                  const ClampSpec& clamps, std::size_t target,
                  std::size_t state_cap = kDefaultStateCap) {
  const std::size_t out_layer = g.output_layer();
  if (target >= g.layer(out_layer).labels)
    throw OracleError("target label out of range");
  const auto p = detail::setup(g, params, clamps, state_cap, nullptr);
  const std::size_t out_id = p.layer_offset[out_layer];
  if (p.fixed[out_id] >= 0)
    throw OracleError("output node is clamped");
  std::vector<double> all, hit;
  detail::for_each_state(p, [&](const std::vector<std::size_t>& x, double lw) {
    all.push_back(lw);
    if (x[out_id] == target) hit.push_back(lw);
  });
  return detail::logsumexp(all) - detail::logsumexp(hit);
}

// Minimum-energy assignment; ties resolve to the lexicographically smallest
// labeling in enumeration order.
inline std::vector<std::vector<std::size_t>> map_assignment(
    const LgmGraph& g, const Parameters& params, const ClampSpec& clamps,
    std::size_t state_cap = kDefaultStateCap) {
  const auto p = detail::setup(g, params, clamps, state_cap, nullptr);
  std::vector<std::size_t> best;
  double best_lw = -std::numeric_limits<double>::infinity();
  detail::for_each_state(p, [&](const std::vector<std::size_t>& x, double lw) {
    if (lw > best_lw) {
      best_lw = lw;
      best = x;
    }
  });
  std::vector<std::vector<std::size_t>> out(g.layers().size());
  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    const std::size_t n = g.layer(li).node_count();
    out[li].assign(best.begin() + static_cast<long>(p.layer_offset[li]),
                   best.begin() + static_cast<long>(p.layer_offset[li] + n));
  }
  return out;
}

// KL(Q || P(. | clamps)) where Q is the product of the given compact
// log-domain believes over the free nodes.
inline double mean_field_kl(const LgmGraph& g, const Parameters& params,
                            const ClampSpec& clamps,
                            const std::vector<Tensor>& believes,
                            std::size_t state_cap = kDefaultStateCap) {
  const auto p = detail::setup(g, params, clamps, state_cap, nullptr);

  // per free node: completed distribution
  std::vector<std::vector<double>> q(p.labels.size());
  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    const Layer& l = g.layer(li);
    const std::size_t l1 = l.labels - 1;
    const auto& b = believes[li].data();
    for (std::size_t i = 0; i < l.node_count(); ++i) {
      std::vector<double> compact(b.begin() + static_cast<long>(i * l1),
                                  b.begin() + static_cast<long>((i + 1) * l1));
      q[p.layer_offset[li] + i] = complete_distribution(compact);
    }
  }

  std::vector<double> all;
  detail::for_each_state(p, [&](const std::vector<std::size_t>&, double lw) {
    all.push_back(lw);
  });
  const double log_z = detail::logsumexp(all);

  double kl = 0.0;
  detail::for_each_state(p, [&](const std::vector<std::size_t>& x, double lw) {
    double log_q = 0.0;
    for (std::size_t id : p.free_nodes) log_q += std::log(q[id][x[id]]);
    const double qx = std::exp(log_q);
    if (qx > 0.0) kl += qx * (log_q - (lw - log_z));
  });
  return kl;
}

// log Z of the conditioned model (diagnostic).
inline double log_partition(const LgmGraph& g, const Parameters& params,
                            const ClampSpec& clamps,
                            std::size_t state_cap = kDefaultStateCap) {
  const auto p = detail::setup(g, params, clamps, state_cap, nullptr);
  std::vector<double> all;
  detail::for_each_state(p, [&](const std::vector<std::size_t>&, double lw) {
    all.push_back(lw);
  });
  return detail::logsumexp(all);
}

}  // namespace exact
}  // namespace lgm
