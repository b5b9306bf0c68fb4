#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lgm/model.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

class ClampError : public Error {
 public:
  using Error::Error;
};

enum class ClampKind { Unobserved, Hard, Soft };

struct NodeClamp {
  ClampKind kind = ClampKind::Unobserved;
  std::size_t label = 0;  // Hard
  double q = 0.0;         // Soft: mean of the binary node in [0,1]

  static NodeClamp unobserved() { return {}; }
  static NodeClamp hard(std::size_t label) {
    return {ClampKind::Hard, label, 0.0};
  }
  static NodeClamp soft(double q) { return {ClampKind::Soft, 0, q}; }
};

// Per-node conditioning of a graph: hard states, soft probabilistic states,
// or unobserved. Layers without entries are fully unobserved.
class ClampSpec {
 public:
  ClampSpec() = default;
  explicit ClampSpec(const LgmGraph& g) : per_layer_(g.layers().size()) {}

  void set(std::size_t layer, std::size_t node, NodeClamp c) {
    if (layer >= per_layer_.size())
      throw ClampError("clamp layer index out of range");
    auto& v = per_layer_[layer];
    if (v.size() <= node) v.resize(node + 1);
    v[node] = c;
  }

  const std::vector<NodeClamp>* layer_clamps(std::size_t layer) const {
    if (layer >= per_layer_.size() || per_layer_[layer].empty())
      return nullptr;
    return &per_layer_[layer];
  }

  bool empty() const {
    for (const auto& v : per_layer_)
      for (const auto& c : v)
        if (c.kind != ClampKind::Unobserved) return false;
    return true;
  }

  void validate(const LgmGraph& g) const {
    for (std::size_t li = 0; li < per_layer_.size(); ++li) {
      const auto& v = per_layer_[li];
      if (v.empty()) continue;
      const Layer& layer = g.layer(li);
      if (v.size() > layer.node_count())
        throw ClampError("clamp on layer " + layer.name +
                         " addresses more nodes than it has");
      for (const NodeClamp& c : v) {
        if (c.kind == ClampKind::Hard && c.label >= layer.labels)
          throw ClampError("hard clamp label out of range on layer " +
                           layer.name);
        if (c.kind == ClampKind::Soft) {
          if (layer.labels != 2)
            throw ClampError("soft clamp requires a binary layer, got " +
                             layer.name);
          if (!(c.q >= 0.0 && c.q <= 1.0))
            throw ClampError("soft clamp probability outside [0,1]");
        }
      }
    }
  }

  void validate_input_only(const LgmGraph& g) const {
    validate(g);
    for (std::size_t li = 0; li < per_layer_.size(); ++li) {
      if (per_layer_[li].empty()) continue;
      bool any = false;
      for (const NodeClamp& c : per_layer_[li])
        any = any || c.kind != ClampKind::Unobserved;
      if (any && g.layer(li).role != LayerRole::Input)
        throw ClampError("clamp on non-input layer " + g.layer(li).name);
    }
  }

 private:
  std::vector<std::vector<NodeClamp>> per_layer_;
};

// Per-layer observation bookkeeping derived from a ClampSpec.
struct LayerObservation {
  bool any = false;
  bool all = false;
  std::vector<std::uint8_t> observed;  // per node
  Tensor probs;      // compact observation distribution per node, 0 when free
  Tensor free_mask;  // (channels, spatial..., 1); 1.0 = free node
};

// The per-sample reduced problem: observed nodes folded into their
// neighbors' unaries, pairwise energies masked where a side is observed.
struct EffectiveEnergies {
  std::vector<Tensor> unary;     // per layer
  std::vector<Tensor> pairwise;  // per connection (valid iff active)
  std::vector<bool> active;      // any free-free edge left
  std::vector<bool> positioned;  // pairwise carries explicit position axes
  std::vector<LayerObservation> obs;

  std::vector<std::size_t> folded_nodes(std::size_t layer) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < obs[layer].observed.size(); ++i)
      if (obs[layer].observed[i]) out.push_back(i);
    return out;
  }
};

namespace detail {

inline LayerObservation observe_layer(const Layer& layer,
                                      const std::vector<NodeClamp>* clamps) {
  LayerObservation o;
  const std::size_t n = layer.node_count();
  o.observed.assign(n, 0);
  if (!clamps) return o;
  const std::size_t l1 = layer.labels - 1;
  std::vector<double> probs(n * l1, 0.0);
  std::vector<double> free_mask(n, 1.0);
  std::size_t seen = 0;
  for (std::size_t i = 0; i < clamps->size(); ++i) {
    const NodeClamp& c = (*clamps)[i];
    if (c.kind == ClampKind::Unobserved) continue;
    o.observed[i] = 1;
    free_mask[i] = 0.0;
    ++seen;
    if (c.kind == ClampKind::Hard) {
      if (c.label >= 1) probs[i * l1 + (c.label - 1)] = 1.0;
    } else {
      probs[i * l1] = c.q;
    }
  }
  o.any = seen > 0;
  o.all = seen == n;
  if (o.any) {
    o.probs = Tensor(layer.unary_shape(), std::move(probs));
    Shape mask_shape{layer.channels};
    mask_shape.insert(mask_shape.end(), layer.spatial.begin(),
                      layer.spatial.end());
    mask_shape.push_back(1);
    o.free_mask = Tensor(std::move(mask_shape), std::move(free_mask));
  }
  return o;
}

// Aligns a pairwise tensor to the edge layout
// (c_from, c_to, kernel..., positions..., l_from-1, l_to-1); conv tensors
// get broadcastable singleton position axes.
inline Tensor align_pairwise(const Tensor& w, ConnKind kind, std::size_t d,
                             bool positioned) {
  if (kind == ConnKind::Dense) return w;
  if (kind == ConnKind::Local || positioned) return w;
  Shape s = w.shape();  // (cf, ct, kernel..., lf-1, lt-1)
  Shape aligned(s.begin(), s.begin() + 2 + static_cast<long>(d));
  aligned.insert(aligned.end(), d, 1);
  aligned.push_back(s[s.size() - 2]);
  aligned.push_back(s[s.size() - 1]);
  return reshape(w, std::move(aligned));
}

}  // namespace detail

// Turns observations into the reduced inference problem: for every edge with
// an observed endpoint, the expected pairwise energy folds into the free
// endpoint's unary (hard states slice, soft states weight by q*), and the
// edge drops out of message passing.
inline EffectiveEnergies apply_clamps(const LgmGraph& g,
                                      const Parameters& params,
                                      const ClampSpec& clamps) {
  clamps.validate(g);
  EffectiveEnergies eff;
  const std::size_t nl = g.layers().size();
  const std::size_t nc = g.connections().size();
  eff.unary = params.unary;
  eff.pairwise.resize(nc);
  eff.active.assign(nc, false);
  eff.positioned.assign(nc, false);
  eff.obs.resize(nl);
  for (std::size_t li = 0; li < nl; ++li)
    eff.obs[li] = detail::observe_layer(g.layer(li), clamps.layer_clamps(li));

  for (std::size_t ci = 0; ci < nc; ++ci) {
    const Connection& c = g.connection(ci);
    const std::size_t fi = g.from_index(ci), ti = g.to_index(ci);
    const Layer& lf = g.layer(fi);
    const Layer& lt = g.layer(ti);
    const LayerObservation& of = eff.obs[fi];
    const LayerObservation& ot = eff.obs[ti];
    const Tensor& w = params.pairwise[ci];
    const std::size_t d = c.kernel.size();

    if (c.kind == ConnKind::Dense) {
      const std::size_t nf = lf.node_count(), nt = lt.node_count();
      const std::size_t lf1 = lf.labels - 1, lt1 = lt.labels - 1;
      if (of.any) {
        Tensor q = reshape(of.probs, {nf, lf1});
        Tensor contrib = contract(q, w, {{0, 0}, {1, 2}});  // (nt, lt-1)
        eff.unary[ti] =
            add(eff.unary[ti], reshape(contrib, lt.unary_shape()));
      }
      if (ot.any) {
        Tensor q = reshape(ot.probs, {nt, lt1});
        Tensor contrib = contract(q, w, {{0, 1}, {1, 3}});  // (nf, lf-1)
        eff.unary[fi] =
            add(eff.unary[fi], reshape(contrib, lf.unary_shape()));
      }
    } else {
      const std::size_t lf1 = lf.labels - 1, lt1 = lt.labels - 1;
      Tensor wa = detail::align_pairwise(w, c.kind, d, false);
      if (of.any) {
        Tensor uq = unfold(of.probs, 1, c.kernel, c.stride, c.dilation);
        // (cf, kernel..., pos..., lf-1) -> (cf, 1, kernel..., pos..., lf-1, 1)
        Shape s = uq.shape();
        Shape aligned{s[0], 1};
        aligned.insert(aligned.end(), s.begin() + 1, s.end());
        aligned.push_back(1);
        Tensor prod = mul(wa, reshape(uq, std::move(aligned)));
        std::vector<std::size_t> axes{0};           // c_from
        for (std::size_t a = 0; a < d; ++a) axes.push_back(2 + a);  // kernel
        axes.push_back(prod.rank() - 2);            // l_from-1
        Tensor contrib = sum(prod, axes);           // (c_to, pos..., lt-1)
        eff.unary[ti] = add(eff.unary[ti], contrib);
      }
      if (ot.any) {
        // (c_to, pos..., lt-1) -> (1, c_to, 1 x d, pos..., 1, lt-1)
        Shape aligned{1, lt.channels};
        aligned.insert(aligned.end(), d, 1);
        aligned.insert(aligned.end(), lt.spatial.begin(), lt.spatial.end());
        aligned.push_back(1);
        aligned.push_back(lt1);
        Tensor prod = mul(wa, reshape(ot.probs, std::move(aligned)));
        std::vector<std::size_t> axes{1};            // c_to
        axes.push_back(prod.rank() - 1);             // l_to-1
        Tensor per_edge = sum(prod, axes);  // (cf, kernel..., pos..., lf-1)
        Tensor contrib =
            fold(per_edge, 1, lf.spatial, c.kernel, c.stride, c.dilation);
        eff.unary[fi] = add(eff.unary[fi], contrib);
        (void)lf1;
      }
    }

    // Message passing keeps only edges between two free nodes.
    const bool from_free = !of.all, to_free = !ot.all;
    if (!(from_free && to_free)) continue;
    eff.active[ci] = true;
    if (!of.any && !ot.any) {
      eff.pairwise[ci] = w;
      eff.positioned[ci] = c.kind == ConnKind::Local;
      continue;
    }
    if (c.kind == ConnKind::Dense) {
      const std::size_t nf = lf.node_count(), nt = lt.node_count();
      std::vector<double> mask(nf * nt, 1.0);
      for (std::size_t i = 0; i < nf; ++i)
        for (std::size_t j = 0; j < nt; ++j)
          if ((of.any && of.observed[i]) || (ot.any && ot.observed[j]))
            mask[i * nt + j] = 0.0;
      eff.pairwise[ci] =
          mul(w, Tensor({nf, nt, 1, 1}, std::move(mask)));
    } else {
      Tensor wa = detail::align_pairwise(w, c.kind, d, false);
      Tensor mask = Tensor::scalar(1.0);
      if (of.any) {
        Tensor uf = unfold(of.free_mask, 1, c.kernel, c.stride, c.dilation);
        Shape s = uf.shape();  // (cf, kernel..., pos..., 1)
        Shape aligned{s[0], 1};
        aligned.insert(aligned.end(), s.begin() + 1, s.end());
        aligned.push_back(1);
        mask = mul(mask, reshape(uf, std::move(aligned)));
      }
      if (ot.any) {
        Shape aligned{1, lt.channels};
        aligned.insert(aligned.end(), d, 1);
        aligned.insert(aligned.end(), lt.spatial.begin(), lt.spatial.end());
        aligned.push_back(1);
        aligned.push_back(1);
        mask = mul(mask, reshape(ot.free_mask, std::move(aligned)));
      }
      eff.pairwise[ci] = mul(wa, mask);
      eff.positioned[ci] = true;
    }
  }
  return eff;
}

// Value-level view of the reduced problem, usable as plain Parameters for
// oracle comparisons: masked pairwise energies, folded unaries.
inline Parameters effective_as_parameters(const LgmGraph& g,
                                          const EffectiveEnergies& eff) {
  Parameters p;
  p.unary = eff.unary;
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    if (eff.active[ci]) {
      p.pairwise.push_back(eff.pairwise[ci]);
    } else {
      p.pairwise.push_back(Tensor::zeros(g.pairwise_shape(ci)));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Intensity discretization.
// ---------------------------------------------------------------------------

// label = min(floor(v * n_colors), n_colors - 1) over uniform bins on [0,1].
inline std::vector<std::size_t> quantize(const std::vector<double>& values,
                                         std::size_t n_colors) {
  if (n_colors < 2) throw ClampError("quantize: need at least 2 colors");
  std::vector<std::size_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!(v >= 0.0 && v <= 1.0))
      throw ClampError("quantize: value outside [0,1]");
    out[i] = std::min(static_cast<std::size_t>(v * double(n_colors)),
                      n_colors - 1);
  }
  return out;
}

inline std::vector<std::size_t> binarize(const std::vector<double>& values,
                                         double threshold = 0.5) {
  std::vector<std::size_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = values[i] >= threshold ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Input conditioning policy used by training and the CLI.
// ---------------------------------------------------------------------------

enum class ClampMode { Binarize, Quantize, Soft };

inline ClampMode clamp_mode_from_string(const std::string& s) {
  if (s == "binarize") return ClampMode::Binarize;
  if (s == "quantize") return ClampMode::Quantize;
  if (s == "soft") return ClampMode::Soft;
  throw ClampError("unknown clamp mode: " + s);
}

inline std::string to_string(ClampMode m) {
  switch (m) {
    case ClampMode::Binarize: return "binarize";
    case ClampMode::Quantize: return "quantize";
    case ClampMode::Soft: return "soft";
  }
  return "soft";
}

struct ClampPolicy {
  ClampMode mode = ClampMode::Soft;
  std::size_t colors = 2;    // quantize bins
  double threshold = 0.5;    // binarize split point

  // Builds the input-layer clamps for one image; `visible` (optional)
  // marks pixels to clamp, others stay unobserved.
  ClampSpec make(const LgmGraph& g, const std::vector<double>& pixels,
                 const std::vector<std::uint8_t>* visible = nullptr) const {
    if (g.input_layers().size() != 1)
      throw ClampError("clamp policy expects a single input layer");
    const std::size_t li = g.input_layers()[0];
    const Layer& layer = g.layer(li);
    if (pixels.size() != layer.node_count())
      throw ClampError("pixel count does not match the input layer");
    ClampSpec spec(g);
    std::vector<std::size_t> labels;
    if (mode == ClampMode::Binarize)
      labels = binarize(pixels, threshold);
    else if (mode == ClampMode::Quantize)
      labels = quantize(pixels, colors);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      if (visible && !(*visible)[i]) continue;
      if (mode == ClampMode::Soft) {
        const double q = pixels[i];
        if (!(q >= 0.0 && q <= 1.0))
          throw ClampError("soft clamp intensity outside [0,1]");
        spec.set(li, i, NodeClamp::soft(q));
      } else {
        spec.set(li, i, NodeClamp::hard(labels[i]));
      }
    }
    spec.validate(g);
    return spec;
  }
};

}  // namespace lgm
