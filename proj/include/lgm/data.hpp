#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm {

class DataError : public Error {
 public:
  using Error::Error;
};

// MNIST-style image dataset. Pixels stay in their byte form; intensities in
// [0,1] are materialized per sample.
struct Dataset {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // n * rows * cols
  std::vector<std::uint8_t> labels;  // n, values 0..9

  std::size_t size() const { return labels.size(); }
  std::size_t pixels_per_image() const { return rows * cols; }

  std::vector<double> image(std::size_t i) const {
    const std::size_t n = pixels_per_image();
    std::vector<double> out(n);
    const std::uint8_t* p = pixels.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) out[k] = double(p[k]) / 255.0;
    return out;
  }
};

namespace detail {

// zlib's gz layer reads plain files transparently, which covers the
// "optionally gzip-compressed" part of the format.
inline std::vector<std::uint8_t> read_binary(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0)
    out.insert(out.end(), buf, buf + got);
  const bool bad = got < 0;
  gzclose(f);
  if (bad) throw DataError("corrupt or truncated stream in " + path);
  return out;
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b,
                          std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

inline void put_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  os.write(b, 4);
}

}  // namespace detail

// IDX pair: images with magic 0x00000803 (count, rows, cols, bytes) and
// labels with magic 0x00000801 (count, bytes); both big-endian, optionally
// gzip-compressed.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  const auto ib = detail::read_binary(images_path);
  if (ib.size() < 16 || detail::be32(ib, 0) != 0x00000803)
    throw DataError("bad image magic in " + images_path);
  const std::size_t count = detail::be32(ib, 4);
  const std::size_t rows = detail::be32(ib, 8);
  const std::size_t cols = detail::be32(ib, 12);
  if (ib.size() != 16 + count * rows * cols)
    throw DataError("truncated image payload in " + images_path);

  const auto lb = detail::read_binary(labels_path);
  if (lb.size() < 8 || detail::be32(lb, 0) != 0x00000801)
    throw DataError("bad label magic in " + labels_path);
  const std::size_t lcount = detail::be32(lb, 4);
  if (lb.size() != 8 + lcount)
    throw DataError("truncated label payload in " + labels_path);
  if (lcount != count)
    throw DataError("image/label count mismatch: " + std::to_string(count) +
                    " vs " + std::to_string(lcount));

  Dataset d;
  d.rows = rows;
  d.cols = cols;
  d.pixels.assign(ib.begin() + 16, ib.end());
  d.labels.assign(lb.begin() + 8, lb.end());
  return d;
}

inline void save_idx(const Dataset& d, const std::string& images_path,
                     const std::string& labels_path, bool gzip = false) {
  if (gzip) {
    auto put = [](gzFile f, std::uint32_t v) {
      const std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16),
                                 std::uint8_t(v >> 8), std::uint8_t(v)};
      gzwrite(f, b, 4);
    };
    gzFile fi = gzopen(images_path.c_str(), "wb");
    if (!fi) throw DataError("cannot write " + images_path);
    put(fi, 0x00000803);
    put(fi, std::uint32_t(d.size()));
    put(fi, std::uint32_t(d.rows));
    put(fi, std::uint32_t(d.cols));
    gzwrite(fi, d.pixels.data(), unsigned(d.pixels.size()));
    gzclose(fi);
    gzFile fl = gzopen(labels_path.c_str(), "wb");
    if (!fl) throw DataError("cannot write " + labels_path);
    put(fl, 0x00000801);
    put(fl, std::uint32_t(d.size()));
    gzwrite(fl, d.labels.data(), unsigned(d.labels.size()));
    gzclose(fl);
    return;
  }
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw DataError("cannot write " + images_path);
  detail::put_be32(fi, 0x00000803);
  detail::put_be32(fi, std::uint32_t(d.size()));
  detail::put_be32(fi, std::uint32_t(d.rows));
  detail::put_be32(fi, std::uint32_t(d.cols));
  fi.write(reinterpret_cast<const char*>(d.pixels.data()),
           long(d.pixels.size()));
  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw DataError("cannot write " + labels_path);
  detail::put_be32(fl, 0x00000801);
  detail::put_be32(fl, std::uint32_t(d.size()));
  fl.write(reinterpret_cast<const char*>(d.labels.data()),
           long(d.labels.size()));
}

// Seeded permutation split into train/validation index views.
struct Split {
  std::vector<std::uint32_t> train, val;
};

inline Split split_dataset(std::size_t n, std::uint64_t seed,
                           double train_fraction = 0.8) {
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t cut =
      static_cast<std::size_t>(double(n) * train_fraction);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + long(cut));
  s.val.assign(idx.begin() + long(cut), idx.end());
  return s;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Per-pixel Bernoulli(p_obs) visibility flags, a pure function of
// (seed, sample index, pixel index) so masks never depend on image content.
inline std::vector<std::uint8_t> observation_mask(std::uint64_t seed,
                                                  std::uint64_t sample_index,
                                                  std::size_t n_pixels,
                                                  double p_obs) {
  if (!(p_obs >= 0.0 && p_obs <= 1.0))
    throw DataError("observation probability outside [0,1]");
  std::mt19937_64 rng(
      detail::splitmix64(seed ^ detail::splitmix64(sample_index)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::uint8_t> mask(n_pixels);
  for (auto& m : mask) m = u(rng) < p_obs ? 1 : 0;
  return mask;
}

}  // namespace lgm
