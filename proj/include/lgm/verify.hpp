#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "lgm/exact.hpp"
#include "lgm/inference.hpp"
#include "lgm/model.hpp"
#include "lgm/train.hpp"

namespace lgm::verify {

// A random LGM whose node graph is a tree, so sum-product is exact: spine
// links are either dense funnels into a single node or non-overlapping 1D
// local/conv partitions (kernel == stride), both of which keep the node
// graph acyclic.
struct TreeModel {
  GraphSpec spec;
  LgmGraph graph;
  Parameters params;
};

inline TreeModel random_tree_model(std::mt19937_64& rng,
                                   double energy_range = 2.0,
                                   std::size_t max_labels = 4,
                                   std::size_t max_nodes = 12,
                                   std::size_t max_states = 100000) {
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<std::size_t> spine_len(1, 3);
  std::uniform_int_distribution<std::size_t> factor_dist(1, 3);

  // spine sizes from input to output; each step shrinks by an integer
  // factor until a single node funnels into the output
  std::vector<std::size_t> sizes;
  for (;;) {
    const std::size_t hidden = spine_len(rng);
    sizes.assign(hidden + 2, 1);
    for (std::size_t i = sizes.size() - 2; i-- > 0;)
      sizes[i] = sizes[i + 1] * factor_dist(rng);
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (total <= max_nodes) break;
  }

  // label counts capped so the full state space stays enumerable
  std::vector<std::size_t> labels(sizes.size());
  {
    double budget = double(max_states);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      std::size_t cap = max_labels;
      while (cap > 2 &&
             std::pow(double(cap), double(sizes[i])) > budget / 4.0)
        --cap;
      std::uniform_int_distribution<std::size_t> label_dist(2, cap);
      labels[i] = label_dist(rng);
      budget /= std::pow(double(labels[i]), double(sizes[i]));
      if (budget < 4.0) budget = 4.0;
    }
  }

  GraphSpec spec;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    Layer l;
    l.name = "l" + std::to_string(i);
    l.role = i == 0 ? LayerRole::Input
                    : (i + 1 == sizes.size() ? LayerRole::Output
                                             : LayerRole::Hidden);
    l.labels = labels[i];
    // multi-node layers are 1-channel spatial rows so partition links can
    // address them; single nodes stay flat
    if (sizes[i] > 1) {
      l.channels = 1;
      l.spatial = {sizes[i]};
    } else {
      l.channels = 1;
    }
    spec.layers.push_back(std::move(l));
  }
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    Connection c;
    c.from = "l" + std::to_string(i);
    c.to = "l" + std::to_string(i + 1);
    if (sizes[i + 1] == 1) {
      // funnel into one node: dense keeps the node graph a tree
      c.kind = ConnKind::Dense;
    } else {
      // disjoint patches: kernel == stride partitions the from layer
      const std::size_t k = sizes[i] / sizes[i + 1];
      c.kind = coin(rng) ? ConnKind::Local : ConnKind::Conv;
      c.kernel = {k};
      c.stride = {k};
      c.dilation = {1};
    }
    spec.connections.push_back(std::move(c));
  }

  TreeModel m{spec, build_graph(spec), {}};
  m.params = init_parameters(m.graph, rng());
  std::uniform_real_distribution<double> e(-energy_range, energy_range);
  for (auto& u : m.params.unary) {
    std::vector<double> v(u.size());
    for (auto& x : v) x = e(rng);
    u = Tensor(u.shape(), std::move(v));
  }
  for (auto& w : m.params.pairwise) {
    std::vector<double> v(w.size());
    for (auto& x : v) x = e(rng);
    w = Tensor(w.shape(), std::move(v));
  }
  return m;
}

// Longest shortest path of the node graph, counted in nodes along the path
// (edges + 1); the number of iterations after which zero-initialized
// message passing is exact on a tree.
inline std::size_t node_diameter_iterations(const LgmGraph& g) {
  std::size_t total = 0;
  std::vector<std::size_t> offset(g.layers().size());
  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    offset[li] = total;
    total += g.layer(li).node_count();
  }
  std::vector<std::vector<std::size_t>> adj(total);
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    const std::size_t fo = offset[g.from_index(ci)];
    const std::size_t to = offset[g.to_index(ci)];
    for_each_edge(g, ci, [&](std::size_t a, std::size_t b, std::size_t) {
      adj[fo + a].push_back(to + b);
      adj[to + b].push_back(fo + a);
    });
  }
  std::size_t diameter = 0;
  std::vector<long> dist(total);
  for (std::size_t s = 0; s < total; ++s) {
    std::fill(dist.begin(), dist.end(), -1L);
    dist[s] = 0;
    std::deque<std::size_t> q{s};
    while (!q.empty()) {
      const std::size_t at = q.front();
      q.pop_front();
      diameter = std::max(diameter, static_cast<std::size_t>(dist[at]));
      for (std::size_t n : adj[at])
        if (dist[n] < 0) {
          dist[n] = dist[at] + 1;
          q.push_back(n);
        }
    }
  }
  return diameter + 1;
}

// Random hard clamps on a fraction of the input nodes.
inline ClampSpec random_input_clamps(std::mt19937_64& rng, const LgmGraph& g,
                                     double clamp_fraction = 0.5) {
  ClampSpec clamps(g);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t li : g.input_layers()) {
    const Layer& l = g.layer(li);
    std::uniform_int_distribution<std::size_t> lab(0, l.labels - 1);
    for (std::size_t i = 0; i < l.node_count(); ++i)
      if (u(rng) < clamp_fraction) clamps.set(li, i, NodeClamp::hard(lab(rng)));
  }
  return clamps;
}

// ---------------------------------------------------------------------------
// Self-contained property checks against the enumeration oracle.
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_error = 0.0;
  std::string note;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t tree_trials = 30;
  std::size_t map_trials = 20;
  std::size_t kl_trials = 10;
  // Test-harness hook: adds a constant to one message tensor after the
  // first iteration of the tree-exactness check, which must break it.
  double message_perturbation = 0.0;
};

inline std::vector<CheckResult> run_verification(const VerifyOptions& opt) {
  std::vector<CheckResult> results;

  {  // sum-product on node trees vs exact conditionals
    CheckResult r{"tree-exactness (sum-product vs enumeration)", true, 0.0,
                  ""};
    std::mt19937_64 rng(opt.seed + 1);
    for (std::size_t trial = 0; trial < opt.tree_trials; ++trial) {
      auto model = random_tree_model(rng);
      ClampSpec clamps = random_input_clamps(rng, model.graph, 0.5);
      const std::size_t T = node_diameter_iterations(model.graph);
      auto oracle = exact::marginals(model.graph, model.params, clamps);
      EffectiveEnergies eff = apply_clamps(model.graph, model.params, clamps);
      InferenceConfig cfg{Method::SumProduct, Schedule::Sequential, int(T)};
      InferenceState st = init_state(model.graph, eff);
      for (int t = 0; t < cfg.iterations; ++t)
        inference_step(model.graph, eff, st, cfg);
      if (opt.message_perturbation != 0.0) {
        // emulate a buggy message update: shift one message tensor and
        // rebuild the belief it feeds
        for (std::size_t ci = 0; ci < model.graph.connections().size();
             ++ci) {
          if (!eff.active[ci]) continue;
          st.msg_into_to[ci] = add(
              st.msg_into_to[ci], Tensor::scalar(opt.message_perturbation));
          const std::size_t li = model.graph.to_index(ci);
          st.believes[li] = bp_belief_update(model.graph, eff, st, li,
                                             Method::SumProduct);
          break;
        }
      }
      for (std::size_t li = 0; li < model.graph.layers().size(); ++li) {
        auto dists = layer_distributions(model.graph, eff, st, li);
        for (std::size_t i = 0; i < dists.size(); ++i)
          for (std::size_t x = 0; x < dists[i].size(); ++x)
            r.max_error = std::max(
                r.max_error, std::abs(dists[i][x] - oracle[li][i][x]));
      }
    }
    r.pass = r.max_error < 1e-8;
    results.push_back(r);
  }

  {  // max-product decodes the exact MAP assignment
    CheckResult r{"map-decoding (max-product vs enumeration)", true, 0.0, ""};
    std::mt19937_64 rng(opt.seed + 2);
    std::size_t wrong = 0, total = 0;
    for (std::size_t trial = 0; trial < opt.map_trials; ++trial) {
      auto model = random_tree_model(rng);
      ClampSpec clamps = random_input_clamps(rng, model.graph, 0.5);
      const std::size_t T = node_diameter_iterations(model.graph);
      auto oracle = exact::map_assignment(model.graph, model.params, clamps);
      EffectiveEnergies eff;
      InferenceConfig cfg{Method::MaxProduct, Schedule::Sequential, int(T)};
      InferenceState st =
          run_inference(model.graph, model.params, clamps, cfg, &eff);
      auto decoded = decode_labels(model.graph, eff, st);
      for (std::size_t li = 0; li < decoded.size(); ++li)
        for (std::size_t i = 0; i < decoded[li].size(); ++i) {
          ++total;
          if (decoded[li][i] != oracle[li][i]) ++wrong;
        }
    }
    r.max_error = total ? double(wrong) / double(total) : 0.0;
    r.pass = wrong == 0;
    results.push_back(r);
  }

  {  // tape gradients vs central finite differences
    CheckResult r{"gradient-fidelity (backprop vs finite differences)", true,
                  0.0, ""};
    std::mt19937_64 rng(opt.seed + 3);
    for (int trial = 0; trial < 3; ++trial) {
      auto model = random_tree_model(rng);
      ClampSpec clamps = random_input_clamps(rng, model.graph, 0.7);
      InferenceConfig cfg{Method::SumProduct, Schedule::Sequential, 3};
      const std::size_t out = model.graph.output_layer();
      const std::size_t classes = model.graph.layer(out).labels;
      const std::size_t target = rng() % classes;

      auto loss_of = [&](const Parameters& p) {
        EffectiveEnergies eff = apply_clamps(model.graph, p, clamps);
        InferenceState st = run_inference(model.graph, eff, cfg);
        return nll_loss(st.believes[out],
                        smoothed_target(classes, target, 0.0))
            .value();
      };

      Tape tape;
      Parameters watched = model.params.watched_on(tape);
      EffectiveEnergies eff = apply_clamps(model.graph, watched, clamps);
      InferenceState st = run_inference(model.graph, eff, cfg);
      GradientMap gm = tape.backward(
          nll_loss(st.believes[out], smoothed_target(classes, target, 0.0)));

      for (std::size_t ci = 0; ci < watched.pairwise.size(); ++ci) {
        const Tensor& w = model.params.pairwise[ci];
        const auto& grad = gm.at(watched.pairwise[ci]).data();
        for (int probe = 0; probe < 4; ++probe) {
          const std::size_t k = rng() % w.size();
          const double h = 1e-4;
          Parameters plus = model.params, minus = model.params;
          std::vector<double> vp = w.data(), vm = w.data();
          vp[k] += h;
          vm[k] -= h;
          plus.pairwise[ci] = Tensor(w.shape(), std::move(vp));
          minus.pairwise[ci] = Tensor(w.shape(), std::move(vm));
          const double fd = (loss_of(plus) - loss_of(minus)) / (2 * h);
          const double rel =
              std::abs(grad[k] - fd) / std::max(std::abs(fd), 1e-3);
          r.max_error = std::max(r.max_error, rel);
        }
      }
    }
    r.pass = r.max_error < 1e-4;
    results.push_back(r);
  }

  {  // tree-reweighting with unit rho collapses onto plain LBP
    CheckResult r{"trw-reduction (unit rho equals LBP bitwise)", true, 0.0,
                  ""};
    std::mt19937_64 rng(opt.seed + 4);
    auto model = random_tree_model(rng);
    ClampSpec clamps = random_input_clamps(rng, model.graph, 0.3);
    RhoMap ones = unit_rho(model.graph);
    InferenceConfig lbp{Method::SumProduct, Schedule::Sequential, 4};
    InferenceConfig trw{Method::TreeReweighted, Schedule::Sequential, 4};
    InferenceState a = run_inference(model.graph, model.params, clamps, lbp);
    InferenceState b = run_inference(model.graph, model.params, clamps, trw,
                                     nullptr, &ones);
    for (std::size_t li = 0; li < a.believes.size(); ++li) {
      const auto& da = a.believes[li].data();
      const auto& db = b.believes[li].data();
      for (std::size_t k = 0; k < da.size(); ++k)
        if (da[k] != db[k]) {
          r.pass = false;
          r.max_error =
              std::max(r.max_error, std::abs(da[k] - db[k]));
        }
    }
    results.push_back(r);
  }

  {  // soft clamps at {0,1} agree with hard clamps bitwise
    CheckResult r{"clamp-endpoints (soft {0,1} equals hard bitwise)", true,
                  0.0, ""};
    std::mt19937_64 rng(opt.seed + 5);
    GraphSpec spec;
    spec.layers = {{"v", LayerRole::Input, 6, {}, 2},
                   {"h", LayerRole::Hidden, 3, {}, 2},
                   {"y", LayerRole::Output, 1, {}, 4}};
    spec.connections = {{"v", "h", ConnKind::Dense, {}, {}, {}},
                        {"h", "y", ConnKind::Dense, {}, {}, {}}};
    LgmGraph g = build_graph(spec);
    Parameters p = init_parameters(g, rng());
    ClampSpec hard(g), soft(g);
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t bit = i % 2;
      hard.set(0, i, NodeClamp::hard(bit));
      soft.set(0, i, NodeClamp::soft(double(bit)));
    }
    InferenceConfig cfg{Method::SumProduct, Schedule::Sequential, 3};
    InferenceState a = run_inference(g, p, hard, cfg);
    InferenceState b = run_inference(g, p, soft, cfg);
    for (std::size_t li = 0; li < a.believes.size(); ++li) {
      const auto& da = a.believes[li].data();
      const auto& db = b.believes[li].data();
      for (std::size_t k = 0; k < da.size(); ++k)
        if (da[k] != db[k]) {
          r.pass = false;
          r.max_error = std::max(r.max_error, std::abs(da[k] - db[k]));
        }
    }
    results.push_back(r);
  }

  {  // sequential mean field never increases the oracle KL
    CheckResult r{"mf-descent (sequential updates never raise KL)", true,
                  0.0, ""};
    std::mt19937_64 rng(opt.seed + 6);
    for (std::size_t trial = 0; trial < opt.kl_trials; ++trial) {
      auto model = random_tree_model(rng);
      EffectiveEnergies eff =
          apply_clamps(model.graph, model.params, ClampSpec(model.graph));
      InferenceState st = init_state(model.graph, eff);
      InferenceConfig cfg{Method::MeanField, Schedule::Sequential, 1};
      double last = exact::mean_field_kl(model.graph, model.params,
                                         ClampSpec(model.graph), st.believes);
      for (int it = 0; it < 6; ++it) {
        inference_step(model.graph, eff, st, cfg);
        const double kl = exact::mean_field_kl(
            model.graph, model.params, ClampSpec(model.graph), st.believes);
        r.max_error = std::max(r.max_error, kl - last);
        last = kl;
      }
    }
    r.pass = r.max_error < 1e-9;
    results.push_back(r);
  }

  return results;
}

}  // namespace lgm::verify
