#pragma once

// Oriented-gradient descriptors on a cell grid, pyramids, window extraction,
// canonical warping and PCA reduction of window descriptors.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "partmix/geometry.hpp"

namespace partmix {

// Grayscale raster, intensities in [0, 255], row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, float fill = 0.0f);

  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

struct HogConfig {
  int orientations = 9;
  float clip = 0.2f;
  float epsilon = 1e-4f;

  int dim() const { return 4 * orientations; }
};

// Dense per-cell descriptor array (rows x cols x dim), row-major with the
// channel index fastest.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(int rows, int cols, int dim, int cell_size = 8, double scale = 1.0);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int dim() const { return dim_; }
  int cell_size() const { return cell_size_; }
  double scale() const { return scale_; }
  void set_scale(double s) { scale_ = s; }

  float at(int r, int c, int d) const { return values_[index(r, c, d)]; }
  float& at(int r, int c, int d) { return values_[index(r, c, d)]; }
  std::span<const float> cell(int r, int c) const {
    return {values_.data() + index(r, c, 0), static_cast<std::size_t>(dim_)};
  }
  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  bool operator==(const FeatureGrid&) const = default;

 private:
  std::size_t index(int r, int c, int d) const {
    return (static_cast<std::size_t>(r) * cols_ + c) * dim_ + d;
  }

  int rows_ = 0;
  int cols_ = 0;
  int dim_ = 0;
  int cell_size_ = 8;
  double scale_ = 1.0;
  std::vector<float> values_;
};

struct FeaturePyramid {
  std::vector<FeatureGrid> levels;
  double scale_step = 2.0;
  // Source image size in pixels; 0 when the pyramid was built from grids.
  int image_width = 0;
  int image_height = 0;
  // Non-fatal notes, e.g. requested levels dropped because the image got too small.
  std::vector<std::string> warnings;
};

// Flattened (h x w x dim) block of a grid.
struct WindowDescriptor {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<float> values;

  std::size_t size() const { return values.size(); }
};

// Throws SizeError unless the image holds at least 3 cells per axis.
FeatureGrid compute_features(const Image& image, int cell_size = 8, const HogConfig& cfg = {});

// Level i is computed on the image resampled by scale_step^-i. Levels that
// would be too small are dropped and noted in `warnings`.
FeaturePyramid build_pyramid(const Image& image, int cell_size, double scale_step, int n_levels,
                             const HogConfig& cfg = {});

// Copies the h x w block whose top-left cell is `origin`. RangeError if it
// does not fit.
WindowDescriptor extract_window(const FeatureGrid& grid, Cell origin, int h, int w);

// Resamples `bbox` (plus one cell of context on every side) to the canonical
// cell shape and describes it. ValidationError on degenerate boxes.
WindowDescriptor warp_to_canonical(const Image& image, const Rect& bbox, int canonical_rows,
                                   int canonical_cols, int cell_size = 8, const HogConfig& cfg = {});

Image resize_bilinear(const Image& image, int new_width, int new_height);

struct PcaResult {
  std::vector<double> mean;
  // out_dim rows of length input_dim; unit-norm principal directions.
  std::vector<std::vector<double>> components;
  // All eigenvalues of the (1/n) covariance, descending.
  std::vector<double> eigenvalues;
  std::vector<std::vector<double>> projected;
  bool rank_deficient = false;
};

// Projects mean-centred vectors onto the top-variance subspace. When
// `aspect_ratios` is non-empty its entries are appended as a final
// coordinate. Dimensions beyond the data rank are zero and flagged.
PcaResult pca_reduce(std::span<const std::vector<double>> vectors, int out_dim,
                     std::span<const double> aspect_ratios = {});

std::vector<double> to_double(const WindowDescriptor& w);

}  // namespace partmix
