#pragma once

// Dense row-major image grid used for B-mode images, confidence maps,
// binary masks and depth maps. Index order is (h, w): row h counts away
// from the transducer / camera top row.

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace scanpilot {

template <class T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> data;  // data[h * width + w]

  Grid() = default;
  Grid(int w, int h, T fill = T{})
      : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {
    if (w < 1 || h < 1) throw std::invalid_argument("Grid: dimensions must be >= 1");
  }

  T& at(int h, int w) { return data[static_cast<std::size_t>(h) * width + w]; }
  const T& at(int h, int w) const { return data[static_cast<std::size_t>(h) * width + w]; }

  bool in_bounds(int h, int w) const { return h >= 0 && h < height && w >= 0 && w < width; }
  bool empty() const { return data.empty(); }
  std::size_t size() const { return data.size(); }

  template <class U>
  bool same_shape(const Grid<U>& o) const {
    return width == o.width && height == o.height;
  }
};

using UsImage = Grid<double>;       // intensities in [0, 1]
using ConfidenceGrid = Grid<double>;
using BinaryGrid = Grid<uint8_t>;
using DepthGrid = Grid<double>;     // meters; <= 0 marks invalid depth

}  // namespace scanpilot
