#pragma once

// Binary occupancy grid. Cells are stored in the same linear order the
// binvox stream uses: index = x * R^2 + z * R + y (x slowest, y fastest).
// Probability grids are plain tensors whose trailing R^3 elements follow the
// identical linear order, so grid <-> tensor conversions are flat copies.

#include <cstdint>
#include <vector>

#include "voxfuse/common.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

struct BinaryGrid {
  int res = 0;
  std::vector<std::uint8_t> cells;  // size res^3, values 0/1

  BinaryGrid() = default;
  explicit BinaryGrid(int r) : res(r), cells(static_cast<std::size_t>(r) * r * r, 0) {
    if (r < 1) throw ShapeError("BinaryGrid: resolution must be positive");
  }

  static std::size_t index(int res, int x, int y, int z) {
    return static_cast<std::size_t>(x) * res * res +
           static_cast<std::size_t>(z) * res + static_cast<std::size_t>(y);
  }

  bool at(int x, int y, int z) const { return cells[index(res, x, y, z)] != 0; }
  void set(int x, int y, int z, bool v) { cells[index(res, x, y, z)] = v ? 1 : 0; }

  std::size_t count_occupied() const {
    std::size_t n = 0;
    for (auto c : cells) n += c;
    return n;
  }

  bool operator==(const BinaryGrid& o) const {
    return res == o.res && cells == o.cells;
  }

  template <Scalar T>
  Tensor<T> to_tensor() const {
    std::vector<T> v(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) v[i] = static_cast<T>(cells[i]);
    return Tensor<T>::from_data({1, 1, res, res, res}, std::move(v));
  }
};

}  // namespace voxfuse
