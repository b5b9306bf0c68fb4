#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lgm/model.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Single-file container: versioned header, graph document, run settings,
// named little-endian float64 tensors, metrics text.
struct Checkpoint {
  static constexpr char kMagic[8] = {'L', 'G', 'M', 'C', 'K', 'P', 'T', 0};
  static constexpr std::uint32_t kVersion = 1;

  GraphSpec spec;
  nlohmann::json settings;  // training configuration and input policy
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string metrics_csv;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  // Parameter tensors in graph order under the names V/<layer> and
  // W/<from>-><to>.
  static std::vector<std::pair<std::string, Tensor>> name_parameters(
      const LgmGraph& g, const Parameters& p) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t li = 0; li < g.layers().size(); ++li)
      out.emplace_back("V/" + g.layer(li).name, p.unary[li]);
    for (std::size_t ci = 0; ci < g.connections().size(); ++ci)
      out.emplace_back(
          "W/" + g.connection(ci).from + "->" + g.connection(ci).to,
          p.pairwise[ci]);
    return out;
  }

  Parameters parameters_for(const LgmGraph& g) const {
    Parameters p;
    auto find = [&](const std::string& name) -> const Tensor& {
      for (const auto& [n, t] : tensors)
        if (n == name) return t;
      throw CheckpointError("checkpoint is missing tensor " + name);
    };
    for (std::size_t li = 0; li < g.layers().size(); ++li) {
      const Tensor& t = find("V/" + g.layer(li).name);
      if (t.shape() != g.layer(li).unary_shape())
        throw CheckpointError("stored unary shape mismatch on layer " +
                              g.layer(li).name);
      p.unary.push_back(t);
    }
    for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
      const Tensor& t = find("W/" + g.connection(ci).from + "->" +
                             g.connection(ci).to);
      if (t.shape() != g.pairwise_shape(ci))
        throw CheckpointError("stored pairwise shape mismatch on " +
                              g.connection(ci).from + "->" +
                              g.connection(ci).to);
      p.pairwise.push_back(t);
    }
    return p;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  os.write(b, 8);
}
inline void put_blob(std::ostream& os, const std::string& s) {
  put_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), long(s.size()));
}

struct Reader {
  std::ifstream in;
  std::string path;
  explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw CheckpointError("cannot open checkpoint " + p);
  }
  void bytes(void* out, std::size_t n) {
    in.read(static_cast<char*>(out), long(n));
    if (std::size_t(in.gcount()) != n)
      throw CheckpointError("truncated checkpoint " + path);
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string blob() {
    std::string s(u32(), '\0');
    bytes(s.data(), s.size());
    return s;
  }
};

}  // namespace detail

inline void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  os.write(kMagic, 8);
  detail::put_u32(os, kVersion);
  detail::put_blob(os, spec.to_json().dump());
  detail::put_blob(os, settings.dump());
  detail::put_u32(os, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_blob(os, name);
    detail::put_u32(os, std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u64(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             long(t.size() * sizeof(double)));
  }
  detail::put_blob(os, metrics_csv);
  if (!os) throw CheckpointError("write failure on checkpoint " + path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
  detail::Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError(path + " is not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version) + " in " + path);
  Checkpoint c;
  try {
    c.spec = GraphSpec::from_json(nlohmann::json::parse(r.blob()));
    c.settings = nlohmann::json::parse(r.blob());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint metadata in " + path + ": " +
                          e.what());
  }
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.blob();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(numel(shape));
    r.bytes(values.data(), values.size() * sizeof(double));
    c.tensors.emplace_back(std::move(name),
                           Tensor(std::move(shape), std::move(values)));
  }
  c.metrics_csv = r.blob();
  return c;
}

}  // namespace lgm
