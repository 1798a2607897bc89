#pragma once

// binvox reader/writer. ASCII header ("#binvox 1", "dim D D D",
// "translate tx ty tz", "scale s", "data"), then byte-pair run-length
// encoding: value byte in {0, 1}, count byte in [1, 255]. The stream is in
// xzy order (index = x*D^2 + z*D + y), which is exactly BinaryGrid's linear
// cell order. The writer emits maximal runs, so write(read(f)) == f for
// canonically encoded files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "voxfuse/common.hpp"
#include "voxfuse/voxel.hpp"

namespace voxfuse {

struct BinvoxFile {
  BinaryGrid grid;
  double translate[3] = {0.0, 0.0, 0.0};
  double scale = 1.0;
};

inline BinvoxFile read_binvox_file(const std::filesystem::path& path,
                                   int expected_res = -1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("binvox: cannot open '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line) || line.rfind("#binvox", 0) != 0) {
    throw DataError("binvox: bad magic in '" + path.string() + "'");
  }
  {
    std::istringstream ls(line);
    std::string tag;
    int version = -1;
    ls >> tag >> version;
    if (version != 1) {
      throw DataError("binvox: unsupported version in '" + path.string() + "'");
    }
  }

  BinvoxFile f;
  int dx = -1, dy = -1, dz = -1;
  bool have_dim = false, have_data = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "data") {
      have_data = true;
      break;
    } else if (word == "dim") {
      if (!(ls >> dx >> dy >> dz)) throw DataError("binvox: malformed dim line");
      have_dim = true;
    } else if (word == "translate") {
      if (!(ls >> f.translate[0] >> f.translate[1] >> f.translate[2])) {
        throw DataError("binvox: malformed translate line");
      }
    } else if (word == "scale") {
      if (!(ls >> f.scale)) throw DataError("binvox: malformed scale line");
    } else if (word.empty() || word[0] == '#') {
      continue;
    } else {
      throw DataError("binvox: unexpected header line '" + line + "'");
    }
  }
  if (!have_data) throw DataError("binvox: missing data section");
  if (!have_dim || dx < 1) throw DataError("binvox: missing or invalid dim");
  if (dx != dy || dy != dz) {
    throw DataError("binvox: non-cubic dimensions " + std::to_string(dx) + "," +
                    std::to_string(dy) + "," + std::to_string(dz));
  }
  if (expected_res > 0 && dx != expected_res) {
    throw DataError("binvox: dimension " + std::to_string(dx) + ", expected " +
                    std::to_string(expected_res));
  }

  f.grid = BinaryGrid(dx);
  const std::size_t total = f.grid.cells.size();
  std::size_t filled = 0;
  char pair[2];
  while (filled < total) {
    if (!in.read(pair, 2)) {
      throw DataError("binvox: truncated run-length stream (" +
                      std::to_string(filled) + " of " + std::to_string(total) +
                      " cells)");
    }
    const unsigned char value = static_cast<unsigned char>(pair[0]);
    const unsigned char count = static_cast<unsigned char>(pair[1]);
    if (value > 1) throw DataError("binvox: run value byte out of {0,1}");
    if (count < 1) throw DataError("binvox: zero-length run");
    if (filled + count > total) {
      throw DataError("binvox: run-length stream overruns the grid");
    }
    for (unsigned c = 0; c < count; ++c) f.grid.cells[filled++] = value;
  }
  return f;
}

inline BinaryGrid read_binvox(const std::filesystem::path& path,
                              int expected_res = -1) {
  return read_binvox_file(path, expected_res).grid;
}

inline std::string encode_binvox(const BinaryGrid& grid,
                                 const double translate[3], double scale) {
  char head[160];
  std::snprintf(head, sizeof(head),
                "#binvox 1\ndim %d %d %d\ntranslate %g %g %g\nscale %g\ndata\n",
                grid.res, grid.res, grid.res, translate[0], translate[1],
                translate[2], scale);
  std::string out(head);
  std::size_t i = 0;
  const std::size_t total = grid.cells.size();
  while (i < total) {
    const std::uint8_t value = grid.cells[i];
    std::size_t run = 1;
    while (i + run < total && grid.cells[i + run] == value && run < 255) ++run;
    out.push_back(static_cast<char>(value));
    out.push_back(static_cast<char>(run));
    i += run;
  }
  return out;
}

inline void write_binvox(const BinaryGrid& grid, const std::filesystem::path& path,
                         const double translate[3] = nullptr, double scale = 1.0) {
  for (auto c : grid.cells) {
    if (c > 1) throw ContractError("write_binvox: grid must be binary");
  }
  static constexpr double kZero[3] = {0.0, 0.0, 0.0};
  const std::string bytes = encode_binvox(grid, translate ? translate : kZero, scale);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("binvox: cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("binvox: short write to '" + path.string() + "'");
}

}  // namespace voxfuse
