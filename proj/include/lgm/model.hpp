#pragma once

#include <cstdint>
#include <deque>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

class GraphError : public Error {
 public:
  using Error::Error;
};

enum class LayerRole { Input, Hidden, Output };
enum class ConnKind { Dense, Conv, Local };

struct Layer {
  std::string name;
  LayerRole role = LayerRole::Hidden;
  std::size_t channels = 1;
  std::vector<std::size_t> spatial;  // empty for flat layers
  std::size_t labels = 2;

  std::size_t node_count() const {
    std::size_t n = channels;
    for (std::size_t s : spatial) n *= s;
    return n;
  }
  // Compact unary layout: (channels, spatial..., labels-1); flat layers
  // store (nodes, labels-1).
  Shape unary_shape() const {
    Shape s{channels};
    s.insert(s.end(), spatial.begin(), spatial.end());
    s.push_back(labels - 1);
    return s;
  }
};

struct Connection {
  std::string from, to;
  ConnKind kind = ConnKind::Dense;
  std::vector<std::size_t> kernel, stride, dilation;  // empty for dense
};

// Textual graph description; the on-disk format is a JSON document with
// "layers" and "connections" arrays.
struct GraphSpec {
  std::vector<Layer> layers;
  std::vector<Connection> connections;

  static GraphSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static GraphSpec load(const std::string& path);
};

// Validated layered topology. Layers hold homogeneous multi-label nodes;
// connections are dense, convolutional, or local (unshared) couplings
// between two distinct layers.
class LgmGraph {
 public:
  struct Incidence {
    std::size_t connection;
    bool is_from;  // this layer is the connection's from side
  };

  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<Connection>& connections() const { return connections_; }
  const Layer& layer(std::size_t i) const { return layers_[i]; }
  const Connection& connection(std::size_t i) const { return connections_[i]; }

  std::size_t layer_index(const std::string& name) const {
    auto it = name_to_index_.find(name);
    if (it == name_to_index_.end())
      throw GraphError("unknown layer: " + name);
    return it->second;
  }
  std::size_t from_index(std::size_t conn) const {
    return layer_index(connections_[conn].from);
  }
  std::size_t to_index(std::size_t conn) const {
    return layer_index(connections_[conn].to);
  }

  const std::vector<Incidence>& incident(std::size_t layer) const {
    return incident_[layer];
  }

  std::size_t output_layer() const { return output_layer_; }
  const std::vector<std::size_t>& input_layers() const {
    return input_layers_;
  }
  std::size_t depth() const { return depth_; }

  // Hop distance from each layer to the output layer.
  const std::vector<std::size_t>& distance_to_output() const {
    return dist_to_output_;
  }

  bool layer_graph_is_tree() const {
    return connections_.size() + 1 == layers_.size();
  }

  // Spatial extents of the to layer reproduced by sliding the kernel over
  // the from layer (the geometry every Conv/Local connection satisfies).
  std::vector<std::size_t> patch_output_shape(std::size_t conn) const {
    const Connection& c = connections_[conn];
    const Layer& f = layers_[from_index(conn)];
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < c.kernel.size(); ++i) {
      const std::size_t span = c.dilation[i] * (c.kernel[i] - 1) + 1;
      if (span > f.spatial[i])
        throw GraphError("connection " + c.from + "->" + c.to +
                         ": kernel exceeds input extent");
      out.push_back((f.spatial[i] - span) / c.stride[i] + 1);
    }
    return out;
  }

  // Compact pairwise layout for a connection:
  //   Dense (n_from, n_to, lf-1, lt-1)
  //   Conv  (c_from, c_to, kernel..., lf-1, lt-1)
  //   Local (c_from, c_to, kernel..., s_to..., lf-1, lt-1)
  Shape pairwise_shape(std::size_t conn) const {
    const Connection& c = connections_[conn];
    const Layer& f = layers_[from_index(conn)];
    const Layer& t = layers_[to_index(conn)];
    if (c.kind == ConnKind::Dense)
      return Shape{f.node_count(), t.node_count(), f.labels - 1,
                   t.labels - 1};
    Shape s{f.channels, t.channels};
    s.insert(s.end(), c.kernel.begin(), c.kernel.end());
    if (c.kind == ConnKind::Local)
      s.insert(s.end(), t.spatial.begin(), t.spatial.end());
    s.push_back(f.labels - 1);
    s.push_back(t.labels - 1);
    return s;
  }

 private:
  friend LgmGraph build_graph(const GraphSpec&);
  std::vector<Layer> layers_;
  std::vector<Connection> connections_;
  std::unordered_map<std::string, std::size_t> name_to_index_;
  std::vector<std::vector<Incidence>> incident_;
  std::vector<std::size_t> input_layers_;
  std::size_t output_layer_ = 0;
  std::size_t depth_ = 0;
  std::vector<std::size_t> dist_to_output_;
};

inline LgmGraph build_graph(const GraphSpec& spec) {
  LgmGraph g;
  g.layers_ = spec.layers;
  g.connections_ = spec.connections;

  if (g.layers_.empty()) throw GraphError("graph has no layers");
  for (std::size_t i = 0; i < g.layers_.size(); ++i) {
    const Layer& l = g.layers_[i];
    if (!g.name_to_index_.emplace(l.name, i).second)
      throw GraphError("duplicate layer name: " + l.name);
    if (l.labels < 2)
      throw GraphError("layer " + l.name + ": needs at least 2 labels");
    if (l.node_count() == 0)
      throw GraphError("layer " + l.name + ": empty layer");
    for (std::size_t s : l.spatial)
      if (s == 0) throw GraphError("layer " + l.name + ": zero extent");
    if (l.role == LayerRole::Input) g.input_layers_.push_back(i);
  }

  std::size_t outputs = 0;
  for (std::size_t i = 0; i < g.layers_.size(); ++i) {
    if (g.layers_[i].role != LayerRole::Output) continue;
    ++outputs;
    g.output_layer_ = i;
    if (g.layers_[i].node_count() != 1)
      throw GraphError("output layer " + g.layers_[i].name +
                       " must hold exactly one node");
  }
  if (outputs != 1) throw GraphError("graph needs exactly one output layer");
  if (g.input_layers_.empty()) throw GraphError("graph needs an input layer");

  g.incident_.resize(g.layers_.size());
  for (std::size_t ci = 0; ci < g.connections_.size(); ++ci) {
    Connection& c = g.connections_[ci];
    const std::size_t fi = g.layer_index(c.from);
    const std::size_t ti = g.layer_index(c.to);
    if (fi == ti)
      throw GraphError("intra-layer connection on " + c.from);
    if (c.kind == ConnKind::Dense) {
      if (!c.kernel.empty() || !c.stride.empty() || !c.dilation.empty())
        throw GraphError("dense connection " + c.from + "->" + c.to +
                         " takes no kernel parameters");
    } else {
      const Layer& f = g.layers_[fi];
      const Layer& t = g.layers_[ti];
      const std::size_t d = c.kernel.size();
      if (d == 0)
        throw GraphError("connection " + c.from + "->" + c.to +
                         ": kernel required");
      if (c.stride.empty()) c.stride.assign(d, 1);
      if (c.dilation.empty()) c.dilation.assign(d, 1);
      if (c.stride.size() != d || c.dilation.size() != d)
        throw GraphError("connection " + c.from + "->" + c.to +
                         ": kernel/stride/dilation rank mismatch");
      if (f.spatial.size() != d || t.spatial.size() != d)
        throw GraphError("connection " + c.from + "->" + c.to +
                         ": layer spatial rank does not match kernel");
      for (std::size_t i = 0; i < d; ++i)
        if (c.kernel[i] == 0 || c.stride[i] == 0 || c.dilation[i] == 0)
          throw GraphError("connection " + c.from + "->" + c.to +
                           ": kernel, stride, dilation must be positive");
      if (g.patch_output_shape(ci) != t.spatial)
        throw GraphError("connection " + c.from + "->" + c.to +
                         ": kernel geometry does not reproduce the target "
                         "spatial shape");
    }
    g.incident_[fi].push_back({ci, true});
    g.incident_[ti].push_back({ci, false});
  }

  // Reachability from the input layers over undirected connections.
  {
    std::vector<bool> seen(g.layers_.size(), false);
    std::deque<std::size_t> queue;
    for (std::size_t i : g.input_layers_) {
      seen[i] = true;
      queue.push_back(i);
    }
    while (!queue.empty()) {
      const std::size_t at = queue.front();
      queue.pop_front();
      for (const auto& inc : g.incident_[at]) {
        const std::size_t other =
            inc.is_from ? g.to_index(inc.connection) : g.from_index(inc.connection);
        if (!seen[other]) {
          seen[other] = true;
          queue.push_back(other);
        }
      }
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
      if (!seen[i])
        throw GraphError("layer " + g.layers_[i].name +
                         " is not reachable from the input layer");
  }

  // BFS distances to the output layer; depth is the farthest input layer.
  {
    constexpr auto kInf = std::numeric_limits<std::size_t>::max();
    g.dist_to_output_.assign(g.layers_.size(), kInf);
    g.dist_to_output_[g.output_layer_] = 0;
    std::deque<std::size_t> queue{g.output_layer_};
    while (!queue.empty()) {
      const std::size_t at = queue.front();
      queue.pop_front();
      for (const auto& inc : g.incident_[at]) {
        const std::size_t other =
            inc.is_from ? g.to_index(inc.connection) : g.from_index(inc.connection);
        if (g.dist_to_output_[other] == kInf) {
          g.dist_to_output_[other] = g.dist_to_output_[at] + 1;
          queue.push_back(other);
        }
      }
    }
    g.depth_ = 0;
    for (std::size_t i : g.input_layers_)
      g.depth_ = std::max(g.depth_, g.dist_to_output_[i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Parameters in the compact log-domain layout: the first label's slice of
// every unary and pairwise energy is pinned to zero and never stored.
// ---------------------------------------------------------------------------

struct Parameters {
  std::vector<Tensor> unary;     // per layer, Layer::unary_shape()
  std::vector<Tensor> pairwise;  // per connection, LgmGraph::pairwise_shape()

  Parameters watched_on(Tape& tape) const {
    Parameters out;
    out.unary.reserve(unary.size());
    out.pairwise.reserve(pairwise.size());
    for (const Tensor& t : unary) out.unary.push_back(tape.watch(t));
    for (const Tensor& t : pairwise) out.pairwise.push_back(tape.watch(t));
    return out;
  }
};

// Zero unaries; pairwise entries i.i.d. normal with std 1/sqrt(fan-in),
// fan-in counted as edges arriving at one to-layer node.
inline Parameters init_parameters(const LgmGraph& g, std::uint64_t seed) {
  Parameters p;
  for (const Layer& l : g.layers()) p.unary.emplace_back(l.unary_shape());
  std::mt19937_64 rng(seed);
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
    const Connection& c = g.connection(ci);
    std::size_t fan_in;
    if (c.kind == ConnKind::Dense) {
      fan_in = g.layer(g.from_index(ci)).node_count();
    } else {
      fan_in = g.layer(g.from_index(ci)).channels;
      for (std::size_t k : c.kernel) fan_in *= k;
    }
    std::normal_distribution<double> dist(0.0,
                                          1.0 / std::sqrt(double(fan_in)));
    const Shape shape = g.pairwise_shape(ci);
    std::vector<double> values(numel(shape));
    for (double& v : values) v = dist(rng);
    p.pairwise.emplace_back(shape, std::move(values));
  }
  return p;
}

inline std::size_t count_parameters(const LgmGraph& g) {
  std::size_t n = 0;
  for (const Layer& l : g.layers()) n += numel(l.unary_shape());
  for (std::size_t ci = 0; ci < g.connections().size(); ++ci)
    n += numel(g.pairwise_shape(ci));
  return n;
}

// Rearranges a pairwise tensor into the reverse-direction layout: channel or
// node axes swap places, label axes swap places, patch axes stay. An
// involution that preserves every entry.
inline Tensor flip(const LgmGraph& g, std::size_t conn, const Tensor& w) {
  const Shape expect = g.pairwise_shape(conn);
  const Shape flipped_expect = [&] {
    Shape s = expect;
    std::swap(s[0], s[1]);
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    return s;
  }();
  if (w.shape() != expect && w.shape() != flipped_expect)
    throw ShapeError("flip: tensor does not match connection layout");
  std::vector<std::size_t> perm(w.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[0], perm[1]);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(w, perm);
}

// Enumerates every edge of a connection as (from-node, to-node, base flat
// offset of the compact label block in the pairwise tensor, edge ordinal in
// the per-edge message layout (c_from, c_to, kernel..., positions...)). The
// label block is laid out row-major: entry (x_from, x_to) lives at
// base + (x_from-1)*(l_to-1) + (x_to-1).
template <class F>
inline void for_each_edge_indexed(const LgmGraph& g, std::size_t conn,
                                  F&& fn) {
  const Connection& c = g.connection(conn);
  const Layer& f = g.layer(g.from_index(conn));
  const Layer& t = g.layer(g.to_index(conn));
  const std::size_t label_block = (f.labels - 1) * (t.labels - 1);
  if (c.kind == ConnKind::Dense) {
    const std::size_t nf = f.node_count(), nt = t.node_count();
    for (std::size_t i = 0; i < nf; ++i)
      for (std::size_t j = 0; j < nt; ++j)
        fn(i, j, (i * nt + j) * label_block, i * nt + j);
    return;
  }
  const std::size_t d = c.kernel.size();
  const std::size_t sf =
      std::accumulate(f.spatial.begin(), f.spatial.end(), std::size_t{1},
                      std::multiplies<std::size_t>());
  const std::size_t st =
      std::accumulate(t.spatial.begin(), t.spatial.end(), std::size_t{1},
                      std::multiplies<std::size_t>());
  std::size_t nk = 1;
  for (std::size_t k : c.kernel) nk *= k;
  const auto f_strides = row_major_strides(f.spatial);
  std::vector<std::size_t> kk(d, 0);
  for (std::size_t ki = 0; ki < nk; ++ki) {
    std::vector<std::size_t> oo(d, 0);
    for (std::size_t oi = 0; oi < st; ++oi) {
      std::size_t from_pos = 0;
      for (std::size_t a = 0; a < d; ++a)
        from_pos +=
            (c.stride[a] * oo[a] + c.dilation[a] * kk[a]) * f_strides[a];
      for (std::size_t cf = 0; cf < f.channels; ++cf)
        for (std::size_t ct = 0; ct < t.channels; ++ct) {
          const std::size_t ordinal =
              ((cf * t.channels + ct) * nk + ki) * st + oi;
          const std::size_t base =
              c.kind == ConnKind::Local
                  ? ordinal * label_block
                  : ((cf * t.channels + ct) * nk + ki) * label_block;
          fn(cf * sf + from_pos, ct * st + oi, base, ordinal);
        }
      for (std::size_t a = d; a-- > 0;) {
        if (++oo[a] < t.spatial[a]) break;
        oo[a] = 0;
      }
    }
    for (std::size_t a = d; a-- > 0;) {
      if (++kk[a] < c.kernel[a]) break;
      kk[a] = 0;
    }
  }
}

template <class F>
inline void for_each_edge(const LgmGraph& g, std::size_t conn, F&& fn) {
  for_each_edge_indexed(g, conn,
                        [&](std::size_t p, std::size_t q, std::size_t base,
                            std::size_t) { fn(p, q, base); });
}

// ---------------------------------------------------------------------------
// JSON document handling for GraphSpec.
// ---------------------------------------------------------------------------

inline LayerRole layer_role_from_string(const std::string& s) {
  if (s == "input") return LayerRole::Input;
  if (s == "hidden") return LayerRole::Hidden;
  if (s == "output") return LayerRole::Output;
  throw GraphError("unknown layer role: " + s);
}

inline std::string to_string(LayerRole r) {
  switch (r) {
    case LayerRole::Input: return "input";
    case LayerRole::Hidden: return "hidden";
    case LayerRole::Output: return "output";
  }
  return "hidden";
}

inline ConnKind conn_kind_from_string(const std::string& s) {
  if (s == "dense") return ConnKind::Dense;
  if (s == "conv") return ConnKind::Conv;
  if (s == "local") return ConnKind::Local;
  throw GraphError("unknown connection kind: " + s);
}

inline std::string to_string(ConnKind k) {
  switch (k) {
    case ConnKind::Dense: return "dense";
    case ConnKind::Conv: return "conv";
    case ConnKind::Local: return "local";
  }
  return "dense";
}

inline GraphSpec GraphSpec::from_json(const nlohmann::json& j) {
  GraphSpec spec;
  for (const auto& jl : j.at("layers")) {
    Layer l;
    l.name = jl.at("name").get<std::string>();
    l.role = layer_role_from_string(jl.at("role").get<std::string>());
    l.channels = jl.at("channels").get<std::size_t>();
    if (jl.contains("spatial"))
      l.spatial = jl.at("spatial").get<std::vector<std::size_t>>();
    l.labels = jl.at("labels").get<std::size_t>();
    spec.layers.push_back(std::move(l));
  }
  if (j.contains("connections"))
    for (const auto& jc : j.at("connections")) {
      Connection c;
      c.from = jc.at("from").get<std::string>();
      c.to = jc.at("to").get<std::string>();
      c.kind = conn_kind_from_string(jc.at("kind").get<std::string>());
      if (jc.contains("kernel"))
        c.kernel = jc.at("kernel").get<std::vector<std::size_t>>();
      if (jc.contains("stride"))
        c.stride = jc.at("stride").get<std::vector<std::size_t>>();
      if (jc.contains("dilation"))
        c.dilation = jc.at("dilation").get<std::vector<std::size_t>>();
      spec.connections.push_back(std::move(c));
    }
  return spec;
}

inline nlohmann::json GraphSpec::to_json() const {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const Layer& l : layers) {
    nlohmann::json jl{{"name", l.name},
                      {"role", to_string(l.role)},
                      {"channels", l.channels},
                      {"labels", l.labels}};
    if (!l.spatial.empty()) jl["spatial"] = l.spatial;
    j["layers"].push_back(std::move(jl));
  }
  j["connections"] = nlohmann::json::array();
  for (const Connection& c : connections) {
    nlohmann::json jc{{"from", c.from}, {"to", c.to},
                      {"kind", to_string(c.kind)}};
    if (!c.kernel.empty()) jc["kernel"] = c.kernel;
    if (!c.stride.empty()) jc["stride"] = c.stride;
    if (!c.dilation.empty()) jc["dilation"] = c.dilation;
    j["connections"].push_back(std::move(jc));
  }
  return j;
}

inline GraphSpec GraphSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw GraphError("cannot open graph document: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw GraphError("invalid graph document " + path + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace lgm
