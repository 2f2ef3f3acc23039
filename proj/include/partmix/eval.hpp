#pragma once

// Overlap matching, precision/recall and average precision.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "partmix/geometry.hpp"

namespace partmix {

// Intersection over union. DomainError for a box with zero or negative area.
double iou(const Rect& a, const Rect& b);

struct GroundTruthBox {
  Rect box;
  bool difficult = false;
};

struct GroundTruth {
  std::string image_id;
  std::vector<GroundTruthBox> boxes;
};

struct ScoredBox {
  std::string image_id;
  Rect bbox;
  double score = 0.0;
};

enum class MatchLabel { tp, fp, ignored };

// Stable descending sort by score: equal scores keep input order.
void sort_by_score(std::vector<ScoredBox>& dets);

// Greedy matching in the given order. A detection takes the unmatched
// non-difficult box it overlaps most (IoU >= thresh) and is a tp; failing
// that, overlapping a difficult box makes it ignored; otherwise fp.
std::vector<MatchLabel> match_detections(std::span<const ScoredBox> dets,
                                         std::span<const GroundTruth> gt, double iou_thresh = 0.5);

// Non-difficult boxes.
int count_positives(std::span<const GroundTruth> gt);

// Area under the precision/recall staircase with the precision envelope made
// monotone; `eleven_point` averages the envelope at recall 0, 0.1, ..., 1.
// Ignored labels are skipped. DomainError when n_pos < 1.
double average_precision(std::span<const MatchLabel> labels, int n_pos, bool eleven_point = false);

// (recall, precision) after each counted detection.
std::vector<std::pair<double, double>> pr_curve(std::span<const MatchLabel> labels, int n_pos);
std::string pr_curve_csv(std::span<const MatchLabel> labels, int n_pos);

// Number of positions where the two vectors disagree. SizeError on length mismatch.
int zero_one_error(std::span<const int> predictions, std::span<const int> labels);

// Convenience: sort, match and score one detection list.
double evaluate_ap(std::vector<ScoredBox> dets, std::span<const GroundTruth> gt,
                   double iou_thresh = 0.5, bool eleven_point = false);

}  // namespace partmix
