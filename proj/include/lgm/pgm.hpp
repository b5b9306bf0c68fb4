#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm {

class PgmError : public Error {
 public:
  using Error::Error;
};

struct PgmImage {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> bytes;  // row-major

  std::vector<double> intensities() const {
    std::vector<double> out(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
      out[i] = double(bytes[i]) / 255.0;
    return out;
  }
};

// Binary (P5) or ASCII (P2) grayscale, 8-bit only.
inline PgmImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PgmError("cannot open image " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2")
    throw PgmError(path + " is not a P5/P2 image");
  auto next_token = [&]() {
    std::string tok;
    for (;;) {
      if (!(in >> tok)) throw PgmError("truncated header in " + path);
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
  };
  PgmImage img;
  img.cols = std::stoul(next_token());
  img.rows = std::stoul(next_token());
  const unsigned maxval = unsigned(std::stoul(next_token()));
  if (maxval != 255) throw PgmError(path + ": only 8-bit images supported");
  img.bytes.resize(img.rows * img.cols);
  if (magic == "P5") {
    in.get();  // single whitespace after the header
    in.read(reinterpret_cast<char*>(img.bytes.data()), long(img.bytes.size()));
    if (std::size_t(in.gcount()) != img.bytes.size())
      throw PgmError("truncated pixel data in " + path);
  } else {
    for (auto& b : img.bytes) {
      unsigned v;
      if (!(in >> v) || v > 255)
        throw PgmError("bad pixel value in " + path);
      b = std::uint8_t(v);
    }
  }
  return img;
}

inline void write_pgm(const std::string& path, const PgmImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PgmError("cannot write image " + path);
  out << "P5\n" << img.cols << " " << img.rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.bytes.data()),
            long(img.bytes.size()));
  if (!out) throw PgmError("write failure on " + path);
}

}  // namespace lgm
