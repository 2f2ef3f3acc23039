#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "partmix/cluster.hpp"
#include "partmix/data_io.hpp"
#include "partmix/detect.hpp"
#include "partmix/error.hpp"
#include "partmix/eval.hpp"
#include "partmix/harness.hpp"

using namespace partmix;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : config_from_json(read_file(path));
}

int cmd_run(const std::string& config_path, const std::optional<std::uint64_t>& seed, const fs::path& out_dir,
            bool resume, const std::string& family, double target_ap) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.seeds = {*seed};
  std::optional<Family> filter;
  if (!family.empty()) filter = family_from_string(family);
  fs::create_directories(out_dir);
  const ExperimentResult res = run_experiment(cfg, out_dir, resume);
  for (const auto& n : res.notes) std::cerr << "note: " << n << "\n";

  // Mean AP of the validation-selected K per (family, N).
  std::map<std::pair<Family, int>, std::pair<double, int>> curve;
  int failed = 0;
  for (const auto& r : res.records) {
    if (!r.ok()) {
      ++failed;
      std::cerr << "failed cell: " << to_string(r.family) << " K=" << r.K << " N=" << r.N << " seed=" << r.seed
                << " r=" << r.resample << ": " << r.status << "\n";
    }
    if (r.selected) {
      auto& c = curve[{r.family, r.N}];
      c.first += r.ap;
      c.second += 1;
    }
  }
  std::printf("%-8s %8s %10s %6s\n", "family", "N", "mean_AP", "runs");
  for (const auto& [key, acc] : curve)
    std::printf("%-8s %8d %10.4f %6d\n", to_string(key.first).c_str(), key.second, acc.first / acc.second,
                acc.second);
  if (!res.records.empty()) emit_outputs(out_dir, res, {}, filter, target_ap);
  std::printf("%zu records, %d failed, outputs in %s\n", res.records.size(), failed, out_dir.string().c_str());
  return res.complete ? 0 : 1;
}

int cmd_bench(BenchmarkConfig cfg, const std::optional<fs::path>& out_dir) {
  const auto rows = benchmark_inference(cfg);
  std::printf("%-6s %6s %14s %10s\n", "model", "M", "median_s", "dt/image");
  for (const auto& r : rows)
    std::printf("%-6s %6d %14.6f %10zu\n", r.model.c_str(), r.M, r.median_seconds, r.dt_calls_per_image);
  if (out_dir) {
    std::string csv = "model,M,median_seconds,dt_calls_per_image\n";
    for (const auto& r : rows)
      csv += r.model + "," + std::to_string(r.M) + "," + std::to_string(r.median_seconds) + "," +
             std::to_string(r.dt_calls_per_image) + "\n";
    write_file_atomic(*out_dir / "timing.csv", csv);
  }
  return 0;
}

int cmd_gen_synth(const std::string& config_path, std::uint64_t seed, const fs::path& out_dir,
                  const std::string& split, bool raster) {
  const ExperimentConfig cfg = load_config(config_path);
  const Split which = split == "train" ? Split::train : split == "validation" ? Split::validation : Split::test;
  SynthConfig sc = split_synth(cfg, seed, which);
  sc.raster = raster;
  const SynthDataset ds = generate(sc);
  const fs::path manifest = write_synth_dataset(out_dir, ds, which == Split::test ? "test" : "train", raster);
  std::printf("%zu images, %zu objects, manifest %s\n", ds.ids.size(), ds.objects.size(),
              manifest.string().c_str());
  return 0;
}

int cmd_eval(const fs::path& model_path, const fs::path& manifest_path, const std::string& detections_path,
             const std::string& pr_path, double overlap, bool eleven_point, int levels) {
  const SavedModel saved = load_model(model_path);
  const Dataset data = load_dataset(manifest_path);
  std::ofstream det_out;
  if (!detections_path.empty()) {
    det_out.open(detections_path);
    if (!det_out) throw IoError("cannot open " + detections_path);
  }
  std::vector<ScoredBox> boxes;
  for (std::size_t i = 0; i < data.manifest.entries.size(); ++i) {
    const std::string& id = data.manifest.entries[i].id;
    const FeaturePyramid pyr =
        data.is_grid(i) ? single_level(data.grid(i)) : build_pyramid(data.image(i), 8, 1.5, levels);
    const auto dets = std::visit(
        [&](const auto& m) { return nms(detect(m, pyr, -std::numeric_limits<double>::infinity()), overlap); },
        saved.model);
    for (const auto& d : dets) boxes.push_back({id, d.bbox, d.score});
    if (det_out) det_out << to_json_lines(dets, id, model_path.filename().string());
  }
  sort_by_score(boxes);
  const auto labels = match_detections(boxes, data.ground_truth);
  const int n_pos = count_positives(data.ground_truth);
  if (n_pos == 0) throw ValidationError("eval: dataset has no positive boxes");
  if (!pr_path.empty()) write_file_atomic(pr_path, pr_curve_csv(labels, n_pos));
  std::printf("AP %.6f over %zu images, %d positives, %zu detections\n",
              average_precision(labels, n_pos, eleven_point), data.manifest.entries.size(), n_pos, boxes.size());
  return 0;
}

int cmd_sample_partitions(const std::string& config_path, std::uint64_t seed, int resample,
                          const fs::path& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  const SynthDataset pool = generate(split_synth(cfg, seed, Split::train));
  const auto windows = pool_windows(pool, cfg.synth.root_cells);
  const ClusterTree tree = cluster_pool(cfg, windows, seed);
  const auto family = partitioned_sample(leaf_members(tree), sample_sizes(cfg, windows.size()),
                                         partition_seed(seed, resample));
  const ConsistentSets sets = refine_consistency(tree, family);
  const fs::path out = out_dir / ("partitions_s" + std::to_string(seed) + "_r" + std::to_string(resample) + ".json");
  write_file_atomic(out, partitions_to_json(family));
  for (std::size_t n = 0; n < sets.sizes.size(); ++n) {
    std::printf("N=%zu:", sets.sizes[n]);
    for (std::size_t d = 0; d < sets.depths.size(); ++d) {
      std::printf(" K%d[", 1 << sets.depths[d]);
      bool first = true;
      for (const auto& c : sets.at(static_cast<int>(d), n)) {
        std::printf(first ? "%zu" : " %zu", c.size());
        first = false;
      }
      std::printf("]");
    }
    std::printf("\n");
  }
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Template mixtures and exemplar part models: training, detection and scaling experiments"};
  app.require_subcommand(1);

  std::string config_path, family, detections_path, pr_path, split = "train";
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  bool resume = false, raster = false, eleven_point = false;
  double target_ap = 0.95, overlap = 0.5;
  int resample = 0, levels = 5;
  std::string model_path, manifest_path;

  auto* run = app.add_subcommand("run", "Run the K x N experiment grid from a JSON config");
  run->add_option("--config", config_path, "experiment config JSON")->required()->check(CLI::ExistingFile);
  auto* run_seed = run->add_option("--seed", seed, "run this single seed instead of the config's seeds");
  run->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
  run->add_flag("--resume", resume, "reuse cells completed by an earlier run in --out-dir");
  run->add_option("--family", family, "only emit this family's records");
  run->add_option("--target-ap", target_ap, "AP target for the log-linear extrapolation")->capture_default_str();

  BenchmarkConfig bc;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench", "Time DPM, EDPM and naive mixture scoring");
  bench->add_option("--seed", bc.seed)->capture_default_str();
  bench->add_option("--out-dir", bench_out, "write timing.csv here");
  bench->add_option("--grid-size", bc.grid_size)->capture_default_str();
  bench->add_option("--parts", bc.parts)->capture_default_str();
  bench->add_option("--repetitions", bc.repetitions)->capture_default_str();
  bench->add_option("--edpm-M", bc.edpm_M, "exemplar counts for EDPM");
  bench->add_option("--naive-M", bc.naive_M, "mixture counts for the per-mixture baseline");

  auto* gen = app.add_subcommand("gen-synth", "Write one synthetic split to disk");
  gen->add_option("--config", config_path, "experiment config JSON (its synth section is used)")
      ->check(CLI::ExistingFile);
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--out-dir", out_dir)->required();
  gen->add_option("--split", split)->check(CLI::IsMember({"train", "validation", "test"}))->capture_default_str();
  gen->add_flag("--raster", raster, "write PGM images instead of feature grids");

  auto* ev = app.add_subcommand("eval", "Detect with a saved model on a dataset and report AP");
  ev->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--detections", detections_path, "write detections as JSON lines");
  ev->add_option("--pr-csv", pr_path, "write the precision/recall curve");
  ev->add_option("--nms", overlap, "NMS overlap threshold")->capture_default_str();
  ev->add_option("--levels", levels, "pyramid levels for raster images")->capture_default_str();
  ev->add_flag("--eleven-point", eleven_point, "11-point interpolated AP");

  auto* sp = app.add_subcommand("sample-partitions", "Cluster a synthetic pool and draw nested samples");
  sp->add_option("--config", config_path)->check(CLI::ExistingFile);
  sp->add_option("--seed", seed)->capture_default_str();
  sp->add_option("--resample", resample)->capture_default_str();
  sp->add_option("--out-dir", out_dir)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run)
      return cmd_run(config_path, run_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt, out_dir,
                     resume, family, target_ap);
    if (*bench) return cmd_bench(bc, bench_out.empty() ? std::nullopt : std::optional<fs::path>(bench_out));
    if (*gen) return cmd_gen_synth(config_path, seed, out_dir, split, raster);
    if (*ev) return cmd_eval(model_path, manifest_path, detections_path, pr_path, overlap, eleven_point, levels);
    if (*sp) return cmd_sample_partitions(config_path, seed, resample, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
