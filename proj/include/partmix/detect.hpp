#pragma once

// Dense scanning of a feature pyramid, greedy non-maximum suppression and
// the JSON-lines detection record.

#include <optional>
#include <string>
#include <vector>

#include "partmix/features.hpp"
#include "partmix/geometry.hpp"
#include "partmix/partmodel.hpp"
#include "partmix/train.hpp"

namespace partmix {

struct Detection {
  Rect bbox;           // root window in source-image pixels, clipped
  double score = 0.0;  // bias included; Platt probability when calibrated
  int level = 0;
  Cell root;           // root cell at that level
  // Template index for mixtures, exemplar index for epm/edpm, 0 otherwise.
  int component = 0;
  std::optional<Placement> placement;
  // z_j - z_root - anchor_j per part; dpm and edpm only.
  std::optional<std::vector<Cell>> deformations;
  std::vector<Rect> part_boxes;  // transferred part windows in pixels
};

// Pixel rectangle of an h x w cell window at `origin` on `grid`. The one-cell
// border dropped by the descriptor is added back; the result is clipped to
// the image when its size is known.
Rect cell_window_to_pixels(const FeatureGrid& grid, Cell origin, int h, int w, int image_width = 0,
                           int image_height = 0);

// Every root location scoring above `threshold`, ordered by (level, row,
// column, component). Levels smaller than the model are skipped.
std::vector<Detection> detect(const StarModel& model, const FeaturePyramid& pyramid, double threshold);
std::vector<Detection> detect(const MixtureModel& model, const FeaturePyramid& pyramid,
                              double threshold);

// Single-level pyramid around a bare grid.
FeaturePyramid single_level(FeatureGrid grid);

// Greedy by descending score (stable on ties); a box survives when its IoU
// with every earlier survivor is at most `overlap_thresh`.
std::vector<Detection> nms(std::vector<Detection> dets, double overlap_thresh = 0.5);

// One JSON object per line:
// {image_id, bbox:[x,y,w,h], score, model_ref, exemplar, deformations}.
std::string to_json_line(const Detection& d, const std::string& image_id,
                         const std::string& model_ref);
std::string to_json_lines(const std::vector<Detection>& dets, const std::string& image_id,
                          const std::string& model_ref);

}  // namespace partmix
