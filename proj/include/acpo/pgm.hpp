#pragma once

// Binary PGM (P5) image export and import, maxval 255. Images live in [0,1]
// as doubles everywhere in the pipeline; quantization to 8 bits happens only
// here, at the file boundary.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "acpo/errors.hpp"
#include "acpo/tensor.hpp"

namespace acpo {

inline void write_pgm(const Tensor& img, const std::string& path) {
  if (img.shape().size() != 2)
    throw ShapeError("write_pgm: expected a [H,W] image, got " + shape_str(img.shape()));
  int h = img.shape()[0], w = img.shape()[1];
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("write_pgm: cannot write '" + path + "'");
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double v = img.at(y * w + x);
      if (v < 0.0) v = 0.0;
      if (v > 1.0) v = 1.0;
      row[static_cast<size_t>(x)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(row.data()), w);
  }
  if (!f.good()) throw ConfigError("write_pgm: short write to '" + path + "'");
}

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comment lines,
// which the format allows anywhere in the header.
inline std::string pgm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

inline int pgm_int(std::istream& in, const std::string& path, const char* what) {
  std::string tok = pgm_token(in);
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
    throw DependencyError("read_pgm: '" + path + "' has a malformed " + what);
  return std::stoi(tok);
}

}  // namespace detail

inline Tensor read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DependencyError("read_pgm: cannot open '" + path + "'");
  std::string magic = detail::pgm_token(f);
  if (magic != "P5")
    throw DependencyError("read_pgm: '" + path + "' is not binary PGM (magic '" + magic + "')");
  int w = detail::pgm_int(f, path, "width");
  int h = detail::pgm_int(f, path, "height");
  int maxval = detail::pgm_int(f, path, "maxval");
  if (w < 1 || h < 1)
    throw DependencyError("read_pgm: '" + path + "' has empty dimensions");
  if (maxval != 255)
    throw DependencyError("read_pgm: '" + path + "' has maxval " + std::to_string(maxval) +
                          ", only 255 is supported");
  // The header ends with exactly one whitespace byte before the raster.
  std::vector<char> bytes(static_cast<size_t>(w) * h);
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw DependencyError("read_pgm: '" + path + "' raster is truncated");
  std::vector<double> v(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i)
    v[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return Tensor::from({h, w}, std::move(v));
}

}  // namespace acpo
