#pragma once

// Experiment runner: train every model family over a grid of mixture counts
// K and training-set sizes N on partition-consistent resamples, evaluate
// detection AP on a held-out split, and summarize.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "partmix/cluster.hpp"
#include "partmix/synthdata.hpp"
#include "partmix/train.hpp"

namespace partmix {

enum class Family { mixture, dpm, epm, edpm };
std::string to_string(Family f);
Family family_from_string(const std::string& s);  // ValidationError on unknown names

struct ExperimentConfig {
  std::vector<int> K_list{1, 2, 4, 8, 16};
  // Sizes above the available positives are dropped; N_max is always added.
  std::vector<int> N_list{50, 100, 500, 1000, 3000};
  int resamples = 5;
  std::vector<double> C_grid;  // empty: default_C_grid(window dim)
  std::vector<Family> families{Family::mixture};
  std::vector<std::uint64_t> seeds{0};
  bool cross_validate = true;  // false: every cell trains with train.C

  // Synthetic source. Each seed s generates its own world, a training pool
  // (synth.seed = s), a validation split and a test split from fresh seeds.
  SynthConfig synth;
  int validation_images = 40;
  int test_images = 100;
  int test_negative_images = 40;

  TrainConfig train;
  double exemplar_q = 1.0;
  // EDPM springs are the star's springs times one of these factors, picked
  // by validation AP (ties to the smaller factor).
  std::vector<double> edpm_spring_scales{1, 3, 10, 30, 100};
  double nms_overlap = 0.5;
  int pca_dim = 32;
  int threads = 0;  // 0: OpenMP default
};

enum class Split { train, validation, test };

// Generator settings for one split of seed `seed`'s world.
SynthConfig split_synth(const ExperimentConfig& cfg, std::uint64_t seed, Split split);

// Solver seed of the cells trained on resample `resample` of seed `seed`.
std::uint64_t cell_train_seed(std::uint64_t seed, int resample);

// Root windows of the pool's objects, in object order.
std::vector<WindowDescriptor> pool_windows(const SynthDataset& pool, int root_cells);

// Hierarchical clustering of the pool windows deep enough for the largest K.
ClusterTree cluster_pool(const ExperimentConfig& cfg, const std::vector<WindowDescriptor>& windows,
                         std::uint64_t seed);

// Descending sample sizes: N_max = pool size, then every listed N below it.
std::vector<std::size_t> sample_sizes(const ExperimentConfig& cfg, std::size_t n_max);

// Partitioned-sampling seed of resample `resample` of seed `seed`.
std::uint64_t partition_seed(std::uint64_t seed, int resample);

// JSON document; missing keys keep their defaults, unknown keys are a
// ValidationError.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
void validate(const ExperimentConfig& cfg);

struct ExperimentRecord {
  Family family = Family::mixture;
  int K = 1;
  int N = 0;
  std::uint64_t seed = 0;
  int resample = 0;
  double C = 0.0;
  double spring_scale = 1.0;  // EDPM only
  double ap = 0.0;
  double val_ap = 0.0;
  double train_objective = 0.0;
  double train_seconds = 0.0;
  double test_seconds = 0.0;
  // Best K on the validation split for this (family, N, seed, resample).
  bool selected = false;
  std::string status = "ok";

  bool ok() const { return status == "ok"; }
  bool operator==(const ExperimentRecord&) const = default;
};

struct ExperimentResult {
  std::vector<ExperimentRecord> records;  // sorted by (family, K, N, seed, resample)
  std::vector<std::string> notes;
  std::vector<int> shape_counts;  // long-tail histogram of the first seed's pool
  bool complete = true;
};

// With out_dir set, each finished cell is persisted and listed in
// out_dir/manifest.json, and its trained model is saved under
// out_dir/models; resume reuses cells already listed there.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                bool resume = false);

struct LogLinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;  // root-mean-square residual
  bool degenerate = false;
  std::size_t points = 0;

  // 10^((target - intercept) / slope); +inf when degenerate or the slope
  // is not positive.
  double n_for_target(double target_ap) const;
};

// Least squares of AP against log10 N. ValidationError unless at least 3
// distinct N have AP < 1.
LogLinearFit fit_loglinear(const std::vector<std::pair<double, double>>& n_ap);
LogLinearFit fit_loglinear(const std::vector<ExperimentRecord>& records, Family family);

struct TimingRow {
  std::string model;  // "dpm", "edpm", "naive"
  int M = 1;
  double median_seconds = 0.0;
  std::size_t dt_calls_per_image = 0;
};

struct BenchmarkConfig {
  int grid_size = 40;
  int dim = 36;  // HOG cell descriptor size
  int parts = 6;
  int root_cells = 6;
  int part_cells = 3;
  int n_grids = 2;
  std::vector<int> edpm_M{6, 100, 1000};
  std::vector<int> naive_M{6, 100};
  int repetitions = 5;
  std::uint64_t seed = 0;
};

// Median of `repetitions` timed passes over the grids after one warm-up.
std::vector<TimingRow> benchmark_inference(const BenchmarkConfig& cfg);

// ap_vs_n.csv, ap_vs_k.csv, loglinear.csv, longtail.csv, timing.csv in
// `dir`. With `family_filter`, only that family's records are written
// (ValidationError naming the filter when none match).
void emit_outputs(const std::filesystem::path& dir, const ExperimentResult& result,
                  const std::vector<TimingRow>& timing = {},
                  const std::optional<Family>& family_filter = std::nullopt,
                  double target_ap = 0.95);

std::string records_to_csv(const std::vector<ExperimentRecord>& records);
std::vector<ExperimentRecord> records_from_csv(const std::string& text);

// --- regularization study ------------------------------------------------

struct RegularizationConfig {
  SynthConfig synth;
  int n_clean = 40;
  int n_noisy = 20;
  double fixed_C = 1.0;
  // Empty: powers of two from the smallest default grid value upwards, so
  // halving any C but the first stays on the grid.
  std::vector<double> C_grid;
  int folds = 5;
  TrainConfig train;
  int test_images = 100;
  int test_negative_images = 40;
};

struct RegularizationOutcome {
  std::uint64_t seed = 0;
  double ap_fixed_base = 0.0;
  double ap_fixed_doubled = 0.0;
  double ap_cv_base = 0.0;
  double ap_cv_doubled = 0.0;
  double C_cv_base = 0.0;
  double C_cv_doubled = 0.0;
  // Training objective of the base solution on the doubled set over its
  // value on the base set.
  double objective_ratio = 0.0;
};

// One rigid template trained on clean plus noisy positives, and again with
// every positive duplicated; both at a fixed C and at the cross-validated C.
RegularizationOutcome regularization_study(const RegularizationConfig& cfg, std::uint64_t seed);

}  // namespace partmix
