#pragma once

// Data-parallel inner loops of detection: filter correlation over a feature
// grid and the generalized distance transform. The default entry points use
// OpenMP; `reference::` holds the serial versions kept for testing and
// benchmarking. Both produce bit-identical results: every output element is
// computed by the same sequence of floating-point operations.

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "partmix/features.hpp"
#include "partmix/geometry.hpp"

namespace partmix {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Linear weights over an h x w x dim window, same layout as WindowDescriptor.
struct Filter {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<double> weights;

  Filter() = default;
  Filter(int h, int w, int d) : height(h), width(w), dim(d), weights(std::size_t(h) * w * d, 0.0) {}

  double& at(int r, int c, int d) { return weights[(std::size_t(r) * width + c) * dim + d]; }
  double at(int r, int c, int d) const { return weights[(std::size_t(r) * width + c) * dim + d]; }
  std::size_t size() const { return weights.size(); }
  bool operator==(const Filter&) const = default;
};

// Dense real-valued map over grid locations; may hold -inf.
struct Map2D {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  Map2D() = default;
  Map2D(int r, int c, double fill = 0.0) : rows(r), cols(c), values(std::size_t(r) * c, fill) {}

  double& at(int y, int x) { return values[std::size_t(y) * cols + x]; }
  double at(int y, int x) const { return values[std::size_t(y) * cols + x]; }
  bool contains(Cell p) const { return p.x >= 0 && p.y >= 0 && p.x < cols && p.y < rows; }
  bool operator==(const Map2D&) const = default;
};

// Result of a 2-D distance transform: values plus the maximizing source
// location for every output location.
struct DistanceTransform {
  Map2D values;
  std::vector<int> arg_x;
  std::vector<int> arg_y;

  Cell arg(int y, int x) const {
    const std::size_t i = std::size_t(y) * values.cols + x;
    return {arg_x[i], arg_y[i]};
  }
};

// Dot product of a filter with the window whose top-left cell is `origin`.
// No bounds checking.
double window_dot(const FeatureGrid& grid, const Filter& filter, Cell origin);

// 1-D generalized distance transform (max form):
//   out[x] = max_x' f[x'] - beta * (x - x')^2,  arg[x] = smallest maximizer.
// Linear time lower-envelope algorithm. `f` must be finite, beta >= 0.
// Throws DomainError for beta < 0.
void gdt_1d(std::span<const double> f, double beta, std::span<double> out, std::span<int> arg);

namespace kernels {

// response(y, x) = filter . window at (y, x), for every placement that fits.
// SizeError when the filter is larger than the grid or dims disagree.
Map2D correlate(const FeatureGrid& grid, const Filter& filter);

// Separable 2-D transform: rows with beta_x, then columns with beta_y.
DistanceTransform dt_2d(const Map2D& response, double beta_x, double beta_y);

}  // namespace kernels

namespace kernels::reference {

Map2D correlate(const FeatureGrid& grid, const Filter& filter);
DistanceTransform dt_2d(const Map2D& response, double beta_x, double beta_y);

}  // namespace kernels::reference

}  // namespace partmix
