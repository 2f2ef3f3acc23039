#pragma once

// Star-structured part models and their inference.
//
// A StarModel has a root filter and P-1 deformable parts. Part j prefers to
// sit at root + anchor_j; leaving that spot costs bx*dx^2 + by*dy^2. Three
// shape models share the same appearance filters:
//
//   dpm   one anchor set, quadratic springs           (dynamic programming)
//   epm   only the exemplar shapes are allowed; each  (enumeration over cached
//         scores the dpm springs at that shape         part responses)
//   edpm  max over exemplar anchor sets, each with    (one shared distance
//         the shared springs                          transform per part)
//
// Coordinates are cells at one pyramid level; a Placement stores the
// top-left cell of every filter window, index 0 being the root. A root
// location is admissible for an anchor set when every part window placed at
// its anchor fits the grid; other (root, anchor set) pairs score -inf. The
// brute-force oracles apply the same rule.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "partmix/features.hpp"
#include "partmix/kernels.hpp"

namespace partmix {

enum class ModelVariant { dpm, epm, edpm };

std::string to_string(ModelVariant v);

// Quadratic deformation cost coefficients.
struct Spring {
  double bx = 0.05;
  double by = 0.05;
  bool operator==(const Spring&) const = default;
};

struct DeformablePart {
  Filter filter;
  Cell anchor;  // preferred offset from the root window origin
  Spring spring;
  bool operator==(const DeformablePart&) const = default;
};

// Offsets of parts 1..P-1 relative to the root.
using AnchorSet = std::vector<Cell>;
// Window origins of all P filters; [0] is the root.
using Placement = std::vector<Cell>;

// Platt sigmoid p(s) = 1 / (1 + exp(a*s + b)); a < 0 for well-ordered scores.
struct PlattParams {
  double a = -1.0;
  double b = 0.0;
  double operator()(double score) const;
  bool operator==(const PlattParams&) const = default;
};

struct StarModel {
  Filter root;
  std::vector<DeformablePart> parts;
  ModelVariant variant = ModelVariant::dpm;
  // Exemplar anchor sets for epm/edpm; unused by dpm.
  std::vector<AnchorSet> exemplars;
  double bias = 0.0;
  std::optional<PlattParams> platt;

  int num_parts() const { return 1 + static_cast<int>(parts.size()); }
  AnchorSet dpm_anchors() const;
  // The anchor sets scored by inference: {dpm_anchors()} for dpm, exemplars otherwise.
  std::vector<AnchorSet> anchor_sets() const;
  bool operator==(const StarModel&) const = default;
};

// Throws ValidationError when filters disagree in dim, anchor sets have the
// wrong arity, or springs violate the variant's positivity requirement.
void validate(const StarModel& model, double beta_min = 1e-3);

// Per-root-location scores with the recovered configuration.
struct PartScoreMap {
  int rows = 0;
  int cols = 0;
  int num_parts = 0;
  std::vector<double> score;   // -inf where nothing is admissible
  std::vector<int> exemplar;   // chosen anchor set, -1 when none
  std::vector<Cell> placement; // rows * cols * num_parts
  std::size_t distance_transforms = 0;

  double at(int y, int x) const { return score[std::size_t(y) * cols + x]; }
  int exemplar_at(int y, int x) const { return exemplar[std::size_t(y) * cols + x]; }
  Placement placement_at(int y, int x) const;
};

struct BestConfiguration {
  double score = kNegInf;
  int exemplar = -1;
  Placement placement;
};

// Highest-scoring root location, first in raster order on ties.
BestConfiguration best_of(const PartScoreMap& map);

// Root response first, then one map per part. SizeError if any filter does
// not fit the grid.
std::vector<Map2D> part_responses(const StarModel& model, const FeatureGrid& grid);
namespace kernels::reference {
std::vector<Map2D> part_responses(const StarModel& model, const FeatureGrid& grid);
}

// Dynamic programming over the dpm anchor set (any variant's filters/springs).
PartScoreMap score_dpm(const StarModel& model, const FeatureGrid& grid);

// Enumeration of exemplar shapes over cached part responses; each exemplar
// carries its dpm shape score. ValidationError when there are no exemplars.
PartScoreMap score_epm(const StarModel& model, const FeatureGrid& grid);

// Shared-message inference: one distance transform per part, then per
// exemplar only shifted lookups. Ties go to the smaller exemplar index.
PartScoreMap score_edpm(const StarModel& model, const FeatureGrid& grid);

// Dispatches on model.variant.
PartScoreMap score_model(const StarModel& model, const FeatureGrid& grid);
namespace kernels::reference {
PartScoreMap score_edpm(const StarModel& model, const FeatureGrid& grid);
}

// Shape prior b(z) of the model's variant. -inf for an epm at a shape that
// matches no exemplar.
double shape_score(const StarModel& model, const Placement& z);

// Appearance plus shape score of one explicit configuration; -inf when a
// window leaves the grid.
double configuration_score(const StarModel& model, const FeatureGrid& grid, const Placement& z);

// A placement's equivalent rigid template: parts summed at their shifted
// positions over the bounding box of all windows.
struct SynthesizedTemplate {
  Filter filter;
  Cell origin;  // top-left of the bounding box, same frame as the placement
  double bias = 0.0;
};

SynthesizedTemplate synthesize_template(const StarModel& model, const Placement& z);

// Part offsets from the root origin. With q > 1 each offset is rounded to
// the nearest multiple of q cells; q <= 1 keeps raw cells.
AnchorSet relative_shape(const Placement& z, double q = 1.0);

// Exhaustive search over every placement (and exemplar). Refuses instances
// with more than `max_configurations` combinations (DomainError).
BestConfiguration score_bruteforce(const StarModel& model, const FeatureGrid& grid,
                                   double max_configurations = 1e7);

}  // namespace partmix
