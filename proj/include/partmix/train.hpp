#pragma once

// Hinge-loss training of rigid templates and supervised star models,
// regularization cross-validation, Platt calibration and mixtures.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partmix/features.hpp"
#include "partmix/kernels.hpp"
#include "partmix/partmodel.hpp"

namespace partmix {

struct Template {
  Filter filter;
  double bias = 0.0;
  std::optional<PlattParams> platt;
  int mixture_id = 0;

  double raw_score(const WindowDescriptor& w) const;
  // Platt probability when calibrated, raw score otherwise.
  double score(const WindowDescriptor& w) const;
  double calibrate(double raw) const { return platt ? (*platt)(raw) : raw; }
  bool operator==(const Template&) const = default;
};

struct MixtureModel {
  std::vector<Template> templates;

  int K() const { return static_cast<int>(templates.size()); }
  // max over components of the calibrated score; every template must match
  // the window's shape.
  double score(const WindowDescriptor& w) const;
  bool operator==(const MixtureModel&) const = default;
};

struct TrainConfig {
  double C = 0.01;
  std::vector<double> C_grid;  // empty: default_C_grid(feature dim)
  int folds = 5;
  int neg_per_image_cap = 20;
  // Stop when the largest projected-gradient violation drops below this.
  double convergence_tol = 1e-3;
  int max_epochs = 5000;
  int mining_rounds = 10;
  int min_pos = 2;
  std::uint64_t seed = 0;
  // Lower bound for learned spring coefficients of star models.
  double beta_min = 1e-3;
};

// {0.002, 0.02, 0.2, 2, 20} / dim.
std::vector<double> default_C_grid(std::size_t feature_dim);

// Rows of `x` are examples; y is +1 / -1. A row's weight multiplies its
// hinge loss, so a row of weight k stands for k identical examples.
struct SvmData {
  std::size_t dim = 0;
  std::vector<double> x;
  std::vector<int> y;
  std::vector<double> weight;

  std::size_t size() const { return y.size(); }
  const double* row(std::size_t i) const { return x.data() + i * dim; }
  void add(std::span<const double> v, int label, double w = 1.0);
};

struct SvmSolution {
  std::vector<double> w;
  double b = 0.0;
  double objective = 0.0;  // (1/2)|w|^2 + C sum hinge
  bool converged = false;
  int epochs = 0;
  std::vector<double> alpha;  // dual variables, reusable as a warm start
};

// Exact minimizer of (1/2)|w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b)) with
// an unregularized bias: dual coordinate descent over a seeded per-epoch
// permutation, the equality constraint handled by an augmented Lagrangian. DataError on
// non-finite input, ValidationError unless both classes are present.
// A warm start reuses alpha for the leading examples and the bias.
SvmSolution solve_svm(const SvmData& data, double C, const TrainConfig& cfg = {},
                      const SvmSolution* warm = nullptr);

double hinge_objective(const SvmData& data, std::span<const double> w, double b, double C);

struct LinearResult {
  Template model;
  double objective = 0.0;
  bool converged = false;
};

// One rigid template from fixed window sets (no mining). All windows must
// share one shape; identical windows are merged into one weighted row.
LinearResult train_linear(std::span<const WindowDescriptor> pos,
                          std::span<const WindowDescriptor> neg, double C,
                          const TrainConfig& cfg = {});

struct CvRow {
  double C = 0.0;
  double mean_ap = 0.0;
  std::vector<double> fold_ap;
};

struct CvResult {
  double best_C = 0.0;
  std::vector<CvRow> table;
  int folds_used = 0;
  std::vector<std::string> notes;
};

// Stratified k-fold over window sets; identical windows share a fold and are
// scored once when held out. Each C is scored by the mean held-out
// window-ranking AP. Ties go to the smaller C. Folds shrink (with a note)
// when there are fewer distinct positives than folds; fewer than 2 distinct
// positives is a ValidationError.
CvResult cross_validate_C(std::span<const WindowDescriptor> pos,
                          std::span<const WindowDescriptor> neg, std::span<const double> C_grid,
                          int folds, std::uint64_t seed, const TrainConfig& cfg = {});

struct PlattFit {
  PlattParams params;
  bool separated = false;  // scores perfectly separate the classes
  int iterations = 0;
};

// Newton fit of 1/(1+exp(A s + B)) to Platt's smoothed targets.
// ValidationError unless both labels (+1 / -1) occur.
PlattFit platt_calibrate(std::span<const double> scores, std::span<const int> labels);

struct MinedTraining {
  std::vector<double> w;
  double b = 0.0;
  // Full objective (every negative location counted) after each accepted
  // round; non-increasing.
  std::vector<double> objective_history;
  int rounds = 0;
  bool converged = false;
  std::size_t negatives_cached = 0;
  // Training-set scores used for calibration.
  std::vector<double> train_scores;
  std::vector<int> train_labels;
};

// Rigid template with hard-negative mining over whole negative grids.
struct TemplateTraining {
  Template model;
  MinedTraining log;
};
TemplateTraining train_template(std::span<const WindowDescriptor> pos,
                                std::span<const FeatureGrid> neg_images, double C,
                                const TrainConfig& cfg);

struct MixtureTraining {
  MixtureModel model;
  std::vector<MinedTraining> logs;
  std::vector<int> skipped;  // cluster indices with fewer than min_pos positives
  std::vector<std::string> notes;
};

// One calibrated template per cluster against the shared negatives.
MixtureTraining train_mixture(const std::vector<std::vector<WindowDescriptor>>& clusters,
                              std::span<const FeatureGrid> neg_images, const TrainConfig& cfg);

struct StarShape {
  int root_rows = 0;
  int root_cols = 0;
  int part_rows = 0;
  int part_cols = 0;
};

struct AnnotatedExample {
  std::size_t grid = 0;  // index into the positive grids
  Placement placement;   // root origin then part origins, in cells
};

struct StarTraining {
  StarModel model;
  MinedTraining log;
  int projected_springs = 0;  // spring coordinates clamped to beta_min
};

// Supervised-parts training: positives at their annotated placements,
// negatives at the model's best placement. Anchors are mean annotated
// offsets rounded to cells. ValidationError when a part window leaves its
// root window or the annotation arity is wrong.
StarTraining train_star_model(std::span<const FeatureGrid> pos_grids,
                              std::span<const AnnotatedExample> examples,
                              std::span<const FeatureGrid> neg_images, const StarShape& shape,
                              double C, const TrainConfig& cfg);

// Copies the star's filters and springs; exemplar anchor sets are the
// distinct quantized training shapes in first-seen order.
StarModel build_edpm(const StarModel& star, std::span<const Placement> placements, double q = 1.0);
StarModel build_epm(const StarModel& star, std::span<const Placement> placements, double q = 1.0);

// Joint feature vector of a configuration: root window, part windows,
// then (-dx^2, -dy^2) per part relative to the anchors.
std::vector<double> star_features(const StarModel& model, const FeatureGrid& grid,
                                  const Placement& z);

}  // namespace partmix
