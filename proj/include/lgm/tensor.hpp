#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lgm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class NumericsError : public Error {
 public:
  using Error::Error;
};
class TapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {

inline void ensure_finite(const std::vector<double>& v, const char* op) {
  // x * 0 is 0 for every finite x and NaN otherwise, so one accumulated
  // probe flags any NaN or infinity in the buffer
  double probe = 0.0;
  for (double x : v) probe += x * 0.0;
  if (!(probe == 0.0))
    throw NumericsError(std::string("non-finite value produced by ") + op);
}

// Shape of the broadcast of a and b under right-aligned rules; size-1 extents
// stretch. Throws on incompatible extents.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": incompatible shapes " +
                       shape_str(a) + " and " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Right-aligned strides of `in` against the broadcast shape `out`; 0 where the
// input extent is stretched.
inline std::vector<std::size_t> broadcast_strides(const Shape& out,
                                                  const Shape& in) {
  std::vector<std::size_t> st(out.size(), 0);
  const auto in_st = row_major_strides(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    st[off + i] = in[i] == 1 ? 0 : in_st[i];
  return st;
}

// Merges adjacent axes whose strides are jointly contiguous, shrinking the
// rank the odometer has to walk. Pure reindexing: the visit order over the
// output stays exactly row-major.
inline void coalesce_axes(std::vector<std::size_t>& ext,
                          std::vector<std::size_t>* s1,
                          std::vector<std::size_t>* s2) {
  std::size_t w = 0;
  for (std::size_t d = 0; d < ext.size(); ++d) {
    if (ext[d] == 1) continue;  // trivial axis
    if (w > 0) {
      const std::size_t p = w - 1;
      const bool ok1 = (*s1)[p] == (*s1)[d] * ext[d];
      const bool ok2 = !s2 || (*s2)[p] == (*s2)[d] * ext[d];
      if (ok1 && ok2) {
        ext[p] *= ext[d];
        (*s1)[p] = (*s1)[d];
        if (s2) (*s2)[p] = (*s2)[d];
        continue;
      }
    }
    ext[w] = ext[d];
    (*s1)[w] = (*s1)[d];
    if (s2) (*s2)[w] = (*s2)[d];
    ++w;
  }
  ext.resize(w);
  s1->resize(w);
  if (s2) s2->resize(w);
}

// Odometer walk over `out`, yielding flat indices into two broadcast inputs.
template <class F>
inline void for_each_broadcast2(const Shape& out, const Shape& a,
                                const Shape& b, F&& fn) {
  const std::size_t n = numel(out);
  if (n == 0) return;
  std::vector<std::size_t> ext = out;
  auto sa = broadcast_strides(out, a);
  auto sb = broadcast_strides(out, b);
  coalesce_axes(ext, &sa, &sb);
  const std::size_t r = ext.size();
  if (r <= 1) {
    const std::size_t da = r ? sa[0] : 0, db = r ? sb[0] : 0;
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o, ia += da, ib += db) fn(o, ia, ib);
    return;
  }
  const std::size_t inner = ext[r - 1];
  const std::size_t da = sa[r - 1], db = sb[r - 1];
  std::vector<std::size_t> idx(r - 1, 0);
  std::size_t ia = 0, ib = 0, o = 0;
  for (;;) {
    std::size_t ja = ia, jb = ib;
    for (std::size_t i = 0; i < inner; ++i, ja += da, jb += db)
      fn(o++, ja, jb);
    if (o == n) break;
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < ext[d]) break;
      ia -= sa[d] * ext[d];
      ib -= sb[d] * ext[d];
      idx[d] = 0;
    }
  }
}

template <class F>
inline void for_each_broadcast1(const Shape& out, const Shape& a, F&& fn) {
  const std::size_t n = numel(out);
  if (n == 0) return;
  std::vector<std::size_t> ext = out;
  auto sa = broadcast_strides(out, a);
  coalesce_axes(ext, &sa, nullptr);
  const std::size_t r = ext.size();
  if (r <= 1) {
    const std::size_t da = r ? sa[0] : 0;
    std::size_t ia = 0;
    for (std::size_t o = 0; o < n; ++o, ia += da) fn(o, ia);
    return;
  }
  const std::size_t inner = ext[r - 1];
  const std::size_t da = sa[r - 1];
  std::vector<std::size_t> idx(r - 1, 0);
  std::size_t ia = 0, o = 0;
  for (;;) {
    std::size_t ja = ia;
    for (std::size_t i = 0; i < inner; ++i, ja += da) fn(o++, ja);
    if (o == n) break;
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      if (idx[d] < ext[d]) break;
      ia -= sa[d] * ext[d];
      idx[d] = 0;
    }
  }
}

struct TapeAccess;

}  // namespace detail

class Tape;

// Dense row-major tensor of 64-bit floats. Value semantics: the payload is
// immutable and shared between copies. A tensor may carry a handle into a
// Tape, in which case operations consuming it are recorded for reverse-mode
// differentiation.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(numel(shape_), 0.0)) {}
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data_->size() != numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  const std::vector<double>& data() const { return *data_; }

  double value() const {
    if (size() != 1) throw ShapeError("value() on non-scalar tensor");
    return (*data_)[0];
  }
  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("at(): rank mismatch");
    const auto st = row_major_strides(shape_);
    std::size_t flat = 0, d = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[d]) throw ShapeError("at(): index out of range");
      flat += i * st[d++];
    }
    return (*data_)[flat];
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;

  friend class Tape;
  friend struct detail::TapeAccess;
};

// Gradients of the watched leaves of a tape, keyed by leaf handle.
class GradientMap {
 public:
  const Tensor& at(const Tensor& leaf) const {
    auto it = leaf.tracked() ? grads_.find(leaf.node()) : grads_.end();
    if (it == grads_.end() || leaf.tape() != tape_)
      throw TapeError("tensor is not a watched leaf of this tape");
    return it->second;
  }
  bool contains(const Tensor& leaf) const {
    return leaf.tracked() && leaf.tape() == tape_ &&
           grads_.count(leaf.node()) > 0;
  }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::unordered_map<int, Tensor> grads_;
};

// Records the forward pass as a topologically ordered list of operations.
// Single-writer: one forward pass, one backward() call, then discard.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `t` as a differentiable leaf and returns the tape-bound handle.
  Tensor watch(const Tensor& t) {
    if (t.tracked()) {
      if (t.tape() != this) throw TapeError("tensor already bound to a tape");
      return t;
    }
    Tensor out = t;
    out.tape_ = this;
    out.node_ = add_node({}, t.shape(), nullptr);
    leaves_.push_back(out.node_);
    return out;
  }

  // Reverse sweep from a recorded scalar; the tape is consumed.
  GradientMap backward(const Tensor& loss) {
    if (consumed_) throw TapeError("tape already consumed by backward()");
    if (!loss.tracked() || loss.tape() != this)
      throw TapeError("loss is not recorded on this tape");
    if (loss.size() != 1) throw TapeError("loss must be scalar");
    consumed_ = true;

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node_] = {1.0};
    for (int i = loss.node_; i >= 0; --i) {
      if (grads[i].empty()) continue;
      const Node& node = nodes_[i];
      if (!node.pull) continue;  // leaf: keep its gradient for collection
      auto parent_grad = [&](int slot) -> std::vector<double>* {
        const int p = node.parents[slot];
        if (p < 0) return nullptr;
        auto& g = grads[p];
        if (g.empty()) g.assign(numel(nodes_[p].shape), 0.0);
        return &g;
      };
      node.pull(grads[i], parent_grad);
      grads[i].clear();
      grads[i].shrink_to_fit();
    }

    GradientMap out;
    out.tape_ = this;
    for (int leaf : leaves_) {
      const Shape& s = nodes_[leaf].shape;
      if (grads[leaf].empty())
        out.grads_.emplace(leaf, Tensor(s));
      else
        out.grads_.emplace(leaf, Tensor(s, std::move(grads[leaf])));
    }
    return out;
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  using PullFn = std::function<void(
      const std::vector<double>&,
      const std::function<std::vector<double>*(int)>&)>;

 private:
  struct Node {
    std::vector<int> parents;
    Shape shape;
    PullFn pull;  // null for leaves
  };

  int add_node(std::vector<int> parents, Shape shape, PullFn pull) {
    if (consumed_) throw TapeError("tape already consumed; cannot record");
    nodes_.push_back({std::move(parents), std::move(shape), std::move(pull)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
  bool consumed_ = false;

  friend struct detail::TapeAccess;
};

namespace detail {

struct TapeAccess {
  // Wraps a computed payload as a Tensor, recording a tape node when any
  // input is tracked. All tracked inputs must share one tape.
  static Tensor make(Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs,
                     Tape::PullFn pull, const char* op) {
    ensure_finite(values, op);
    Tensor out(std::move(shape), std::move(values));
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
      if (!t->tracked()) continue;
      if (tape && tape != t->tape())
        throw TapeError(std::string(op) + ": inputs on different tapes");
      tape = t->tape();
    }
    if (!tape) return out;
    std::vector<int> parents;
    parents.reserve(inputs.size());
    for (const Tensor* t : inputs)
      parents.push_back(t->tracked() ? t->node() : -1);
    out.tape_ = tape;
    out.node_ = tape->add_node(std::move(parents), out.shape(),
                               std::move(pull));
    return out;
  }

  static std::shared_ptr<const std::vector<double>> payload(const Tensor& t) {
    return t.data_;
  }

  // As make(), but shares an already-validated payload (used by reshape).
  static Tensor make_view(Shape shape, const Tensor& src, Tape::PullFn pull,
                          const char* op) {
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = src.data_;
    if (!src.tracked()) return out;
    out.tape_ = src.tape();
    out.node_ = src.tape()->add_node({src.node()}, out.shape_,
                                     std::move(pull));
    (void)op;
    return out;
  }
};

// Adds `gout` (laid out as `out_shape`) into `acc` (laid out as `in_shape`),
// summing over broadcast axes.
inline void add_reduced(const std::vector<double>& gout, const Shape& out_shape,
                        const Shape& in_shape, std::vector<double>& acc) {
  for_each_broadcast1(out_shape, in_shape,
                      [&](std::size_t o, std::size_t i) { acc[i] += gout[o]; });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations (right-aligned broadcasting).
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd>
inline Tensor binary_elementwise(const Tensor& a, const Tensor& b, Fwd fwd,
                                 const char* op, Tape::PullFn pull) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  std::vector<double> out(numel(out_shape));
  const auto& da = a.data();
  const auto& db = b.data();
  for_each_broadcast2(out_shape, a.shape(), b.shape(),
                      [&](std::size_t o, std::size_t ia, std::size_t ib) {
                        out[o] = fwd(da[ia], db[ib]);
                      });
  return TapeAccess::make(out_shape, std::move(out), {&a, &b}, std::move(pull),
                          op);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  const Shape out_shape =
      detail::broadcast_shape(a.shape(), b.shape(), "add");
  const Shape sa = a.shape(), sb = b.shape();
  return detail::binary_elementwise(
      a, b, [](double x, double y) { return x + y; }, "add",
      [out_shape, sa, sb](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) detail::add_reduced(g, out_shape, sa, *ga);
        if (auto* gb = grad(1)) detail::add_reduced(g, out_shape, sb, *gb);
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const Shape out_shape =
      detail::broadcast_shape(a.shape(), b.shape(), "sub");
  const Shape sa = a.shape(), sb = b.shape();
  return detail::binary_elementwise(
      a, b, [](double x, double y) { return x - y; }, "sub",
      [out_shape, sa, sb](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) detail::add_reduced(g, out_shape, sa, *ga);
        if (auto* gb = grad(1)) {
          detail::for_each_broadcast1(
              out_shape, sb,
              [&](std::size_t o, std::size_t i) { (*gb)[i] -= g[o]; });
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const Shape out_shape =
      detail::broadcast_shape(a.shape(), b.shape(), "mul");
  const Shape sa = a.shape(), sb = b.shape();
  auto da = detail::TapeAccess::payload(a);
  auto db = detail::TapeAccess::payload(b);
  return detail::binary_elementwise(
      a, b, [](double x, double y) { return x * y; }, "mul",
      [out_shape, sa, sb, da, db](const std::vector<double>& g,
                                  const auto& grad) {
        auto* ga = grad(0);
        auto* gb = grad(1);
        detail::for_each_broadcast2(
            out_shape, sa, sb,
            [&](std::size_t o, std::size_t ia, std::size_t ib) {
              if (ga) (*ga)[ia] += g[o] * (*db)[ib];
              if (gb) (*gb)[ib] += g[o] * (*da)[ia];
            });
      });
}

namespace detail {

template <class Fwd>
inline Tensor unary_elementwise(const Tensor& a, Fwd fwd, const char* op,
                                Tape::PullFn pull) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = fwd(da[i]);
  return TapeAccess::make(a.shape(), std::move(out), {&a}, std::move(pull),
                          op);
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return -x; }, "neg",
      [](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] -= g[i];
      });
}

inline Tensor exp(const Tensor& a) {
  auto da = detail::TapeAccess::payload(a);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp((*da)[i]);
  auto saved = std::make_shared<std::vector<double>>(out);
  return detail::TapeAccess::make(
      a.shape(), std::move(out), {&a},
      [saved](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] * (*saved)[i];
      },
      "exp");
}

inline Tensor log(const Tensor& a) {
  auto da = detail::TapeAccess::payload(a);
  for (double x : *da)
    if (!(x > 0.0)) throw NumericsError("log of non-positive value");
  return detail::unary_elementwise(
      a, [](double x) { return std::log(x); }, "log",
      [da](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] / (*da)[i];
      });
}

inline Tensor relu(const Tensor& a) {
  auto da = detail::TapeAccess::payload(a);
  return detail::unary_elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, "relu",
      [da](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if ((*da)[i] > 0.0) (*ga)[i] += g[i];
      });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) {
  return mul(Tensor::scalar(c), a);
}
inline Tensor operator*(const Tensor& a, double c) {
  return mul(a, Tensor::scalar(c));
}

// ---------------------------------------------------------------------------
// Shape manipulation.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: element count mismatch " +
                     shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::TapeAccess::make_view(
      std::move(shape), a,
      [](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      },
      "reshape");
}

namespace detail {

inline std::vector<double> permute_raw(const double* in, const Shape& shape,
                                       const std::vector<std::size_t>& perm,
                                       Shape* out_shape) {
  const std::size_t r = shape.size();
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = shape[perm[i]];
  const auto in_st = row_major_strides(shape);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) st[i] = in_st[perm[i]];
  std::vector<double> out(numel(os));
  if (!out.empty()) {
    std::vector<std::size_t> idx(r, 0);
    std::size_t ii = 0;
    for (std::size_t o = 0;; ++o) {
      out[o] = in[ii];
      if (o + 1 == out.size()) break;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        ii += st[d];
        if (idx[d] < os[d]) break;
        ii -= st[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  *out_shape = std::move(os);
  return out;
}

}  // namespace detail

// Out axis i is input axis perm[i].
inline Tensor permute(const Tensor& a, std::vector<std::size_t> perm) {
  if (perm.size() != a.rank()) throw ShapeError("permute: rank mismatch");
  {
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
      if (p >= perm.size() || seen[p])
        throw ShapeError("permute: invalid permutation");
      seen[p] = true;
    }
  }
  Shape out_shape;
  std::vector<double> out =
      detail::permute_raw(a.data().data(), a.shape(), perm, &out_shape);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  const Shape node_shape = out_shape;
  return detail::TapeAccess::make(
      std::move(out_shape), std::move(out), {&a},
      [node_shape, inv](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) {
          Shape back_shape;
          auto gback =
              detail::permute_raw(g.data(), node_shape, inv, &back_shape);
          for (std::size_t i = 0; i < gback.size(); ++i) (*ga)[i] += gback[i];
        }
      },
      "permute");
}

// Sum over the given axes (duplicates rejected); result drops those axes.
inline Tensor sum(const Tensor& a, std::vector<std::size_t> axes) {
  std::vector<bool> reduce(a.rank(), false);
  for (std::size_t ax : axes) {
    if (ax >= a.rank()) throw ShapeError("sum: axis out of range");
    if (reduce[ax]) throw ShapeError("sum: duplicate axis");
    reduce[ax] = true;
  }
  Shape out_shape;
  Shape keep_shape(a.rank());  // reduced axes flattened to extent 1
  for (std::size_t i = 0; i < a.rank(); ++i) {
    keep_shape[i] = reduce[i] ? 1 : a.shape()[i];
    if (!reduce[i]) out_shape.push_back(a.shape()[i]);
  }
  std::vector<double> out(numel(out_shape), 0.0);
  const auto& da = a.data();
  detail::for_each_broadcast1(a.shape(), keep_shape,
                              [&](std::size_t i, std::size_t o) {
                                out[o] += da[i];
                              });
  const Shape in_shape = a.shape();
  return detail::TapeAccess::make(
      out_shape, std::move(out), {&a},
      [in_shape, keep_shape](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) {
          detail::for_each_broadcast1(
              in_shape, keep_shape,
              [&](std::size_t i, std::size_t o) { (*ga)[i] += g[o]; });
        }
      },
      "sum");
}

inline Tensor sum(const Tensor& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(a, std::move(axes));
}

// ---------------------------------------------------------------------------
// Generalized contraction.
// ---------------------------------------------------------------------------

namespace detail {

struct ContractPlan {
  Shape out_shape;
  std::vector<std::size_t> a_free, b_free, a_con, b_con;
};

inline ContractPlan contract_plan(
    const Shape& sa, const Shape& sb,
    const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  ContractPlan plan;
  std::vector<bool> ca(sa.size(), false), cb(sb.size(), false);
  for (auto [ai, bi] : pairs) {
    if (ai >= sa.size() || bi >= sb.size())
      throw ShapeError("contract: axis out of range");
    if (ca[ai] || cb[bi]) throw ShapeError("contract: duplicate axis in pairs");
    if (sa[ai] != sb[bi])
      throw ShapeError("contract: extent mismatch on paired axes (" +
                       std::to_string(sa[ai]) + " vs " +
                       std::to_string(sb[bi]) + ")");
    ca[ai] = cb[bi] = true;
    plan.a_con.push_back(ai);
    plan.b_con.push_back(bi);
  }
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (!ca[i]) {
      plan.a_free.push_back(i);
      plan.out_shape.push_back(sa[i]);
    }
  for (std::size_t i = 0; i < sb.size(); ++i)
    if (!cb[i]) {
      plan.b_free.push_back(i);
      plan.out_shape.push_back(sb[i]);
    }
  return plan;
}

// Flat offsets of every multi-index combination over `axes` of `shape`.
inline std::vector<std::size_t> axis_offsets(
    const Shape& shape, const std::vector<std::size_t>& axes) {
  const auto st = row_major_strides(shape);
  std::size_t n = 1;
  for (std::size_t ax : axes) n *= shape[ax];
  std::vector<std::size_t> offs(n, 0);
  std::size_t repeat = 1;
  for (std::size_t k = axes.size(); k-- > 0;) {
    const std::size_t ax = axes[k];
    const std::size_t ext = shape[ax], stride = st[ax];
    const std::size_t block = repeat * ext;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t digit = (i / repeat) % ext;
      offs[i] += digit * stride;
    }
    repeat = block;
  }
  return offs;
}

inline std::vector<double> contract_raw(
    const double* A, const Shape& sa, const double* B, const Shape& sb,
    const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
    Shape* out_shape) {
  const ContractPlan plan = contract_plan(sa, sb, pairs);
  const auto offs_a = axis_offsets(sa, plan.a_free);
  const auto offs_b = axis_offsets(sb, plan.b_free);
  const auto offs_ak = axis_offsets(sa, plan.a_con);
  const auto offs_bk = axis_offsets(sb, plan.b_con);
  std::vector<double> out(offs_a.size() * offs_b.size(), 0.0);
  const std::size_t nb = offs_b.size();
  for (std::size_t ra = 0; ra < offs_a.size(); ++ra) {
    double* row = out.data() + ra * nb;
    const double* abase = A + offs_a[ra];
    for (std::size_t k = 0; k < offs_ak.size(); ++k) {
      const double va = abase[offs_ak[k]];
      if (va == 0.0) continue;
      const double* bbase = B + offs_bk[k];
      for (std::size_t rb = 0; rb < nb; ++rb) row[rb] += va * bbase[offs_b[rb]];
    }
  }
  *out_shape = plan.out_shape;
  return out;
}

}  // namespace detail

// Generalized tensor contraction: sums over the paired axes; the result is
// a's free axes (in order) followed by b's free axes.
inline Tensor contract(const Tensor& a, const Tensor& b,
                       const std::vector<std::pair<std::size_t, std::size_t>>&
                           pairs) {
  const Shape sa = a.shape(), sb = b.shape();
  Shape out_shape;
  std::vector<double> out = detail::contract_raw(
      a.data().data(), sa, b.data().data(), sb, pairs, &out_shape);
  auto da = detail::TapeAccess::payload(a);
  auto db = detail::TapeAccess::payload(b);

  // Backward for one side: contract the output gradient with the other
  // operand over that operand's free axes, then permute back into this
  // operand's axis order.
  const detail::ContractPlan plan = detail::contract_plan(sa, sb, pairs);
  auto pull_side = [](const std::vector<double>& g, const Shape& gshape,
                      const std::vector<double>& other, const Shape& so,
                      const std::vector<std::size_t>& g_axes_for_other,
                      const std::vector<std::size_t>& other_free,
                      const std::vector<std::size_t>& my_free,
                      const std::vector<std::size_t>& my_con,
                      const std::vector<std::size_t>& other_con,
                      std::size_t my_rank, std::vector<double>& acc) {
    std::vector<std::pair<std::size_t, std::size_t>> p2;
    for (std::size_t t = 0; t < other_free.size(); ++t)
      p2.emplace_back(g_axes_for_other[t], other_free[t]);
    Shape tmp_shape;
    auto tmp = detail::contract_raw(g.data(), gshape, other.data(), so, p2,
                                    &tmp_shape);
    // tmp axes: [my_free...] then [other contracted axes ascending], the
    // latter corresponding to my contracted axes via the pair list.
    std::vector<std::size_t> other_con_sorted = other_con;
    std::sort(other_con_sorted.begin(), other_con_sorted.end());
    std::vector<std::size_t> axes_mine = my_free;
    for (std::size_t oc : other_con_sorted) {
      const std::size_t slot = static_cast<std::size_t>(
          std::find(other_con.begin(), other_con.end(), oc) -
          other_con.begin());
      axes_mine.push_back(my_con[slot]);
    }
    std::vector<std::size_t> perm(my_rank);
    for (std::size_t j = 0; j < my_rank; ++j)
      perm[j] = static_cast<std::size_t>(
          std::find(axes_mine.begin(), axes_mine.end(), j) -
          axes_mine.begin());
    Shape final_shape;
    auto fixed = detail::permute_raw(tmp.data(), tmp_shape, perm, &final_shape);
    for (std::size_t i = 0; i < fixed.size(); ++i) acc[i] += fixed[i];
  };

  const Shape gshape = out_shape;
  std::vector<std::size_t> g_axes_a(plan.a_free.size());
  std::iota(g_axes_a.begin(), g_axes_a.end(), 0);
  std::vector<std::size_t> g_axes_b(plan.b_free.size());
  std::iota(g_axes_b.begin(), g_axes_b.end(), plan.a_free.size());

  return detail::TapeAccess::make(
      std::move(out_shape), std::move(out), {&a, &b},
      [=](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0))
          pull_side(g, gshape, *db, sb, g_axes_b, plan.b_free, plan.a_free,
                    plan.a_con, plan.b_con, sa.size(), *ga);
        if (auto* gb = grad(1))
          pull_side(g, gshape, *da, sa, g_axes_a, plan.a_free, plan.b_free,
                    plan.b_con, plan.a_con, sb.size(), *gb);
      },
      "contract");
}

// ---------------------------------------------------------------------------
// Label-axis reductions with an implicit leading zero entry. Along the given
// axis a tensor stores values for labels 1..l-1; label 0 is pinned to 0 and
// participates in every reduction.
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
  std::size_t outer = 1, extent = 0, inner = 1;
  Shape reduced_shape;
};

inline AxisSplit axis_split(const Shape& shape, std::size_t axis,
                            const char* op) {
  if (axis >= shape.size())
    throw ShapeError(std::string(op) + ": axis out of range");
  if (shape[axis] == 0)
    throw ShapeError(std::string(op) + ": empty label axis");
  AxisSplit s;
  s.extent = shape[axis];
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  s.reduced_shape = shape;
  s.reduced_shape.erase(s.reduced_shape.begin() + static_cast<long>(axis));
  return s;
}

}  // namespace detail

// softmax over the label axis with the implicit zero label: out_i =
// exp(x_i) / (1 + sum_j exp(x_j)). Same shape as the input; the implicit
// label's probability is 1 - sum of outputs.
inline Tensor softmax_star(const Tensor& x, std::size_t axis) {
  const auto sp = detail::axis_split(x.shape(), axis, "softmax_star");
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = (o * sp.extent) * sp.inner + in;
      double m = 0.0;
      for (std::size_t j = 0; j < sp.extent; ++j)
        m = std::max(m, dx[base + j * sp.inner]);
      double denom = std::exp(-m);
      for (std::size_t j = 0; j < sp.extent; ++j)
        denom += std::exp(dx[base + j * sp.inner] - m);
      for (std::size_t j = 0; j < sp.extent; ++j)
        out[base + j * sp.inner] =
            std::exp(dx[base + j * sp.inner] - m) / denom;
    }
  auto saved = std::make_shared<std::vector<double>>(out);
  return detail::TapeAccess::make(
      x.shape(), std::move(out), {&x},
      [saved, sp](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) {
          const auto& p = *saved;
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t in = 0; in < sp.inner; ++in) {
              const std::size_t base = (o * sp.extent) * sp.inner + in;
              double dot = 0.0;
              for (std::size_t j = 0; j < sp.extent; ++j) {
                const std::size_t k = base + j * sp.inner;
                dot += g[k] * p[k];
              }
              for (std::size_t j = 0; j < sp.extent; ++j) {
                const std::size_t k = base + j * sp.inner;
                (*ga)[k] += p[k] * (g[k] - dot);
              }
            }
        }
      },
      "softmax_star");
}

// log(1 + sum_j exp(x_j)) over the label axis; the axis is dropped.
// Stabilized by shifting with max(0, max_j x_j) so the implicit label cannot
// underflow.
inline Tensor logsumexp_star(const Tensor& x, std::size_t axis) {
  const auto sp = detail::axis_split(x.shape(), axis, "logsumexp_star");
  std::vector<double> out(sp.outer * sp.inner);
  const auto& dx = x.data();
  if (sp.extent == 1 && sp.inner == 1) {
    // binary labels: log(1 + e^x), shift-stabilized
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double v = dx[o];
      out[o] = v <= 0.0 ? std::log1p(std::exp(v))
                        : v + std::log1p(std::exp(-v));
    }
  } else
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = (o * sp.extent) * sp.inner + in;
      double m = 0.0;
      for (std::size_t j = 0; j < sp.extent; ++j)
        m = std::max(m, dx[base + j * sp.inner]);
      double s = std::exp(-m);
      for (std::size_t j = 0; j < sp.extent; ++j)
        s += std::exp(dx[base + j * sp.inner] - m);
      out[o * sp.inner + in] = m + std::log(s);
    }
  auto dxp = detail::TapeAccess::payload(x);
  auto outp = std::make_shared<std::vector<double>>(out);
  return detail::TapeAccess::make(
      sp.reduced_shape, std::move(out), {&x},
      [dxp, outp, sp](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) {
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t in = 0; in < sp.inner; ++in) {
              const std::size_t base = (o * sp.extent) * sp.inner + in;
              const double lse = (*outp)[o * sp.inner + in];
              const double go = g[o * sp.inner + in];
              for (std::size_t j = 0; j < sp.extent; ++j) {
                const std::size_t k = base + j * sp.inner;
                (*ga)[k] += go * std::exp((*dxp)[k] - lse);
              }
            }
        }
      },
      "logsumexp_star");
}

// max(0, max_j x_j) over the label axis; the axis is dropped. The subgradient
// routes to the argmax entry, or vanishes when the implicit label wins.
inline Tensor relu_max_star(const Tensor& x, std::size_t axis) {
  const auto sp = detail::axis_split(x.shape(), axis, "relu_max_star");
  std::vector<double> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::int64_t>>(out.size(), -1);
  const auto& dx = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = (o * sp.extent) * sp.inner + in;
      double m = 0.0;
      std::int64_t best = -1;
      for (std::size_t j = 0; j < sp.extent; ++j) {
        const double v = dx[base + j * sp.inner];
        if (v > m) {
          m = v;
          best = static_cast<std::int64_t>(j);
        }
      }
      out[o * sp.inner + in] = m;
      (*arg)[o * sp.inner + in] = best;
    }
  return detail::TapeAccess::make(
      sp.reduced_shape, std::move(out), {&x},
      [arg, sp](const std::vector<double>& g, const auto& grad) {
        if (auto* ga = grad(0)) {
          for (std::size_t r = 0; r < g.size(); ++r) {
            const std::int64_t j = (*arg)[r];
            if (j < 0) continue;
            const std::size_t o = r / sp.inner, in = r % sp.inner;
            (*ga)[(o * sp.extent + static_cast<std::size_t>(j)) * sp.inner +
                  in] += g[r];
          }
        }
      },
      "relu_max_star");
}

// ---------------------------------------------------------------------------
// Patch extraction (no padding) and its adjoint.
// ---------------------------------------------------------------------------

namespace detail {

struct PatchGeometry {
  std::size_t axis0 = 0;
  std::vector<std::size_t> spatial, kernel, stride, dilation, out_pos;
  std::size_t lead = 1, trail = 1;
};

inline PatchGeometry patch_geometry(const Shape& shape, std::size_t axis0,
                                    const std::vector<std::size_t>& kernel,
                                    const std::vector<std::size_t>& stride,
                                    const std::vector<std::size_t>& dilation) {
  PatchGeometry g;
  g.axis0 = axis0;
  const std::size_t d = kernel.size();
  if (d == 0) throw ShapeError("unfold: empty kernel");
  if (stride.size() != d || dilation.size() != d)
    throw ShapeError("unfold: kernel/stride/dilation rank mismatch");
  if (axis0 + d > shape.size())
    throw ShapeError("unfold: spatial axes out of range");
  for (std::size_t i = 0; i < d; ++i) {
    if (kernel[i] == 0 || stride[i] == 0 || dilation[i] == 0)
      throw ShapeError("unfold: kernel, stride and dilation must be positive");
    const std::size_t s_in = shape[axis0 + i];
    const std::size_t span = dilation[i] * (kernel[i] - 1) + 1;
    if (span > s_in)
      throw ShapeError("unfold: kernel exceeds input extent under dilation");
    g.spatial.push_back(s_in);
    g.out_pos.push_back((s_in - span) / stride[i] + 1);
  }
  g.kernel = kernel;
  g.stride = stride;
  g.dilation = dilation;
  for (std::size_t i = 0; i < axis0; ++i) g.lead *= shape[i];
  for (std::size_t i = axis0 + d; i < shape.size(); ++i) g.trail *= shape[i];
  return g;
}

inline Shape unfolded_shape(const Shape& in, const PatchGeometry& g) {
  Shape out(in.begin(), in.begin() + static_cast<long>(g.axis0));
  out.insert(out.end(), g.kernel.begin(), g.kernel.end());
  out.insert(out.end(), g.out_pos.begin(), g.out_pos.end());
  out.insert(out.end(), in.begin() + static_cast<long>(g.axis0 + g.kernel.size()),
             in.end());
  return out;
}

// Walks (kernel offsets x output positions) yielding the flat source offset
// within one spatial block, in the row-major order of the unfolded layout.
template <class F>
inline void for_each_patch(const PatchGeometry& g, F&& fn) {
  const std::size_t d = g.kernel.size();
  std::vector<std::size_t> sstride(d, 1);
  for (std::size_t i = d; i-- > 1;)
    sstride[i - 1] = sstride[i] * g.spatial[i];
  std::vector<std::size_t> kk(d, 0), oo(d, 0);
  const std::size_t nk =
      std::accumulate(g.kernel.begin(), g.kernel.end(), std::size_t{1},
                      std::multiplies<std::size_t>());
  const std::size_t no =
      std::accumulate(g.out_pos.begin(), g.out_pos.end(), std::size_t{1},
                      std::multiplies<std::size_t>());
  std::size_t patch = 0;
  for (std::size_t ki = 0; ki < nk; ++ki) {
    for (std::size_t oi = 0; oi < no; ++oi, ++patch) {
      std::size_t src = 0;
      for (std::size_t i = 0; i < d; ++i)
        src += (g.stride[i] * oo[i] + g.dilation[i] * kk[i]) * sstride[i];
      fn(patch, src);
      for (std::size_t i = d; i-- > 0;) {
        if (++oo[i] < g.out_pos[i]) break;
        oo[i] = 0;
      }
    }
    for (std::size_t i = d; i-- > 0;) {
      if (++kk[i] < g.kernel[i]) break;
      kk[i] = 0;
    }
  }
}

inline std::vector<double> unfold_raw(const double* in, const Shape& in_shape,
                                      const PatchGeometry& g) {
  const Shape out_shape = unfolded_shape(in_shape, g);
  std::vector<double> out(numel(out_shape));
  const std::size_t sblock =
      std::accumulate(g.spatial.begin(), g.spatial.end(), std::size_t{1},
                      std::multiplies<std::size_t>());
  const std::size_t patches = numel(out_shape) / (g.lead * g.trail);
  for (std::size_t l = 0; l < g.lead; ++l) {
    const double* src_base = in + l * sblock * g.trail;
    double* dst_base = out.data() + l * patches * g.trail;
    detail::for_each_patch(g, [&](std::size_t patch, std::size_t src) {
      std::memcpy(dst_base + patch * g.trail, src_base + src * g.trail,
                  g.trail * sizeof(double));
    });
  }
  return out;
}

inline void fold_add_raw(const double* in, const PatchGeometry& g,
                         double* out) {
  const std::size_t sblock =
      std::accumulate(g.spatial.begin(), g.spatial.end(), std::size_t{1},
                      std::multiplies<std::size_t>());
  std::size_t patches = 1;
  for (std::size_t k : g.kernel) patches *= k;
  for (std::size_t o : g.out_pos) patches *= o;
  for (std::size_t l = 0; l < g.lead; ++l) {
    const double* src_base = in + l * patches * g.trail;
    double* dst_base = out + l * sblock * g.trail;
    detail::for_each_patch(g, [&](std::size_t patch, std::size_t dst) {
      const double* s = src_base + patch * g.trail;
      double* d = dst_base + dst * g.trail;
      for (std::size_t t = 0; t < g.trail; ++t) d[t] += s[t];
    });
  }
}

}  // namespace detail

// Gathers sliding patches of the `kernel.size()` spatial axes starting at
// `axis0` into dedicated axes: (lead..., kernel..., positions..., trail...).
// No padding: patches must fit inside the input.
inline Tensor unfold(const Tensor& x, std::size_t axis0,
                     const std::vector<std::size_t>& kernel,
                     const std::vector<std::size_t>& stride,
                     const std::vector<std::size_t>& dilation) {
  const auto g =
      detail::patch_geometry(x.shape(), axis0, kernel, stride, dilation);
  Shape out_shape = detail::unfolded_shape(x.shape(), g);
  std::vector<double> out = detail::unfold_raw(x.data().data(), x.shape(), g);
  return detail::TapeAccess::make(
      std::move(out_shape), std::move(out), {&x},
      [g](const std::vector<double>& gr, const auto& grad) {
        if (auto* ga = grad(0)) detail::fold_add_raw(gr.data(), g, ga->data());
      },
      "unfold");
}

// Adjoint of unfold: scatter-adds patch entries back onto the spatial grid.
// `x` is laid out (lead..., kernel..., positions..., trail...) with the
// kernel axes starting at `axis0`.
inline Tensor fold(const Tensor& x, std::size_t axis0,
                   const std::vector<std::size_t>& spatial,
                   const std::vector<std::size_t>& kernel,
                   const std::vector<std::size_t>& stride,
                   const std::vector<std::size_t>& dilation) {
  const std::size_t d = kernel.size();
  if (axis0 + 2 * d > x.rank()) throw ShapeError("fold: axes out of range");
  Shape in_shape(x.shape().begin(), x.shape().begin() + static_cast<long>(axis0));
  in_shape.insert(in_shape.end(), spatial.begin(), spatial.end());
  in_shape.insert(in_shape.end(),
                  x.shape().begin() + static_cast<long>(axis0 + 2 * d),
                  x.shape().end());
  const auto g = detail::patch_geometry(in_shape, axis0, kernel, stride,
                                        dilation);
  if (detail::unfolded_shape(in_shape, g) != x.shape())
    throw ShapeError("fold: input layout does not match patch geometry");
  std::vector<double> out(numel(in_shape), 0.0);
  detail::fold_add_raw(x.data().data(), g, out.data());
  const Shape folded_shape = in_shape;
  return detail::TapeAccess::make(
      std::move(in_shape), std::move(out), {&x},
      [g, folded_shape](const std::vector<double>& gr, const auto& grad) {
        if (auto* ga = grad(0)) {
          auto back = detail::unfold_raw(gr.data(), folded_shape, g);
          for (std::size_t i = 0; i < back.size(); ++i) (*ga)[i] += back[i];
        }
      },
      "fold");
}

// ---------------------------------------------------------------------------
// Value-level helpers (no differentiation).
// ---------------------------------------------------------------------------

// Completes a compact log-belief row to the full label distribution,
// implicit label first.
inline std::vector<double> complete_distribution(
    const std::vector<double>& compact) {
  double m = 0.0;
  for (double v : compact) m = std::max(m, v);
  double denom = std::exp(-m);
  for (double v : compact) denom += std::exp(v - m);
  std::vector<double> out(compact.size() + 1);
  out[0] = std::exp(-m) / denom;
  for (std::size_t j = 0; j < compact.size(); ++j)
    out[j + 1] = std::exp(compact[j] - m) / denom;
  return out;
}

// Argmax with ties resolved to the lowest label.
inline std::size_t argmax_label(const std::vector<double>& dist) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < dist.size(); ++i)
    if (dist[i] > dist[best]) best = i;
  return best;
}

}  // namespace lgm
