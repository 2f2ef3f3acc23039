#pragma once

// Deterministic synthetic detection data with sub-categories and a
// long-tailed distribution of part layouts.
//
// An object is a root box of root_cells x root_cells cells with P-1 square
// parts inside it. Its layout is one of n_shapes anchor sets drawn with
// probability proportional to (k+1)^-alpha; its sub-category is the layout
// index modulo n_subcategories and selects a body pattern over the root box.
// Background clutter repeats single parts and the average body pattern, so
// neither parts alone nor a single rigid template separate objects from
// clutter.
//
// Feature mode writes descriptor grids directly (dim channels: two body
// channels then one channel per part). Raster mode draws oriented bars into
// grayscale images and describes them with the HOG front end.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "partmix/eval.hpp"
#include "partmix/features.hpp"
#include "partmix/partmodel.hpp"

namespace partmix {

struct SynthConfig {
  int n_subcategories = 4;
  int parts = 3;  // including the root
  double shape_tail_exponent = 2.0;
  double noise_level = 0.2;
  int n_images = 100;          // one object each
  int n_negative_images = 20;  // clutter only
  int image_size = 16;         // grid cells per side
  std::uint64_t seed = 0;
  // Fixes layouts and appearance patterns; splits generated with different
  // `seed` but the same world share them.
  std::uint64_t world_seed = 0;

  int n_shapes = 64;
  int root_cells = 6;
  int part_cells = 2;
  double part_jitter = 0.3;  // chance of a one-cell shift per part axis
  int clutter = 4;           // distractor patches per image
  double body_amplitude = 0.5;
  double part_amplitude = 1.0;
  bool raster = false;
  int cell_size = 8;

  int dim() const { return 2 + parts - 1; }
};

// Throws ValidationError naming the offending field.
void validate(const SynthConfig& cfg);

struct ShapeLibrary {
  std::vector<AnchorSet> shapes;  // part offsets from the root origin
  std::vector<double> probabilities;

  int sample(std::mt19937_64& rng) const;
};

// Distinct layouts whose part windows fit the root box, in an order drawn
// from world_seed; probabilities follow the power law over that order.
ShapeLibrary make_shape_library(const SynthConfig& cfg);

struct SynthObject {
  std::size_t image = 0;
  Rect bbox;  // pixels, root box
  Placement placement;
  int subcategory = 0;
  int shape = 0;  // library index
};

struct SynthDataset {
  std::vector<std::string> ids;
  std::vector<FeatureGrid> grids;
  std::vector<Image> images;  // raster mode only
  std::vector<GroundTruth> gt;  // one entry per image, empty for negatives
  std::vector<SynthObject> objects;
  ShapeLibrary library;

  std::size_t num_positive_images() const { return objects.size(); }
};

SynthDataset generate(const SynthConfig& cfg);

struct ShapeBin {
  AnchorSet shape;
  int count = 0;
};

// Counts of distinct quantized part layouts, most frequent first (ties by
// layout). ValidationError when placements disagree in part count.
std::vector<ShapeBin> shape_histogram(const std::vector<Placement>& placements, double q = 1.0);

}  // namespace partmix
