#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "partmix/data_io.hpp"
#include "partmix/detect.hpp"
#include "partmix/error.hpp"
#include "partmix/harness.hpp"

using namespace partmix;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.synth.n_subcategories = 2;
  c.synth.n_images = 24;
  c.synth.n_negative_images = 6;
  c.synth.n_shapes = 16;
  c.K_list = {1, 2};
  c.N_list = {12};
  c.resamples = 1;
  c.families = {Family::mixture};
  c.seeds = {3};
  c.cross_validate = false;
  c.validation_images = 8;
  c.test_images = 8;
  c.test_negative_images = 4;
  c.pca_dim = 8;
  c.edpm_spring_scales = {1, 10};
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("partmix_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<ExperimentRecord> without_times(std::vector<ExperimentRecord> recs) {
  for (auto& r : recs) r.train_seconds = r.test_seconds = 0.0;
  return recs;
}

ExperimentRecord record(Family f, int K, int N, std::uint64_t seed, double ap) {
  ExperimentRecord r;
  r.family = f;
  r.K = K;
  r.N = N;
  r.seed = seed;
  r.ap = ap;
  r.val_ap = ap;
  return r;
}

}  // namespace

TEST_CASE("degenerate grid equals a direct train and evaluate") {
  ExperimentConfig cfg = tiny();
  cfg.K_list = {1};
  cfg.N_list = {cfg.synth.n_images};
  const auto res = run_experiment(cfg);
  REQUIRE(res.records.size() == 1);
  const auto& r = res.records[0];
  CHECK(r.ok());
  CHECK(r.selected);
  CHECK(r.N == cfg.synth.n_images);
  CHECK(res.complete);

  const std::uint64_t s = cfg.seeds[0];
  const SynthDataset pool = generate(split_synth(cfg, s, Split::train));
  const SynthDataset test = generate(split_synth(cfg, s, Split::test));
  std::vector<WindowDescriptor> pos;
  for (const auto& o : pool.objects)
    pos.push_back(extract_window(pool.grids[o.image], o.placement[0], cfg.synth.root_cells,
                                 cfg.synth.root_cells));
  std::vector<FeatureGrid> negs;
  for (std::size_t i = 0; i < pool.gt.size(); ++i)
    if (pool.gt[i].boxes.empty()) negs.push_back(pool.grids[i]);
  TrainConfig tc = cfg.train;
  tc.seed = cell_train_seed(s, 0);
  const auto mix = train_mixture({pos}, negs, tc);
  std::vector<ScoredBox> boxes;
  for (std::size_t i = 0; i < test.grids.size(); ++i)
    for (const auto& d : nms(detect(mix.model, single_level(test.grids[i]), -1e300), cfg.nms_overlap))
      boxes.push_back({test.ids[i], d.bbox, d.score});
  CHECK(r.ap == evaluate_ap(boxes, test.gt));
  CHECK(r.ap >= 0.0);
  CHECK(r.ap <= 1.0);
}

TEST_CASE("splits are fresh draws of one world") {
  const ExperimentConfig cfg = tiny();
  const auto tr = split_synth(cfg, 5, Split::train);
  const auto va = split_synth(cfg, 5, Split::validation);
  const auto te = split_synth(cfg, 5, Split::test);
  CHECK(tr.world_seed == 5);
  CHECK(va.world_seed == 5);
  CHECK(te.world_seed == 5);
  CHECK(std::set<std::uint64_t>{tr.seed, va.seed, te.seed}.size() == 3);
  CHECK(te.n_images == cfg.test_images);
  CHECK(te.n_negative_images == cfg.test_negative_images);
  CHECK(va.n_images == cfg.validation_images);
}

TEST_CASE("experiment table is deterministic and one K is selected per cell group") {
  ExperimentConfig cfg = tiny();
  cfg.resamples = 2;
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  CHECK(without_times(a.records) == without_times(b.records));
  // K in {1, 2} x N in {12, 24} x 2 resamples.
  CHECK(a.records.size() == 8);
  std::map<std::tuple<int, int>, int> selected;
  for (const auto& r : a.records) {
    CHECK(r.ok());
    CHECK(r.ap >= 0.0);
    CHECK(r.ap <= 1.0);
    selected[{r.N, r.resample}] += r.selected ? 1 : 0;
  }
  for (const auto& [k, n] : selected) CHECK(n == 1);
  CHECK(std::is_sorted(a.records.begin(), a.records.end(), [](const auto& x, const auto& y) {
    return std::tie(x.family, x.K, x.N, x.seed, x.resample) < std::tie(y.family, y.K, y.N, y.seed, y.resample);
  }));
}

TEST_CASE("cells train only on their partitioned sample") {
  ExperimentConfig cfg = tiny();
  cfg.families = {Family::mixture, Family::dpm};
  cfg.resamples = 2;
  cfg.N_list = {6, 12};
  const fs::path dir = scratch("audit");
  const auto res = run_experiment(cfg, dir);
  REQUIRE(res.complete);

  std::map<std::string, std::vector<int>> ids;
  for (const auto& e : fs::directory_iterator(dir / "cells")) {
    const json j = json::parse(read_file(e.path()));
    ids[e.path().stem().string()] = j.at("train_ids").get<std::vector<int>>();
  }
  const int n_max = cfg.synth.n_images;
  for (int r = 0; r < 2; ++r) {
    std::vector<int> prev;
    for (int N : {n_max, 12, 6}) {
      auto key = [&](const std::string& kind, int K) {
        return kind + "_K" + std::to_string(K) + "_N" + std::to_string(N) + "_s3_r" + std::to_string(r);
      };
      const auto& k1 = ids.at(key("mixture", 1));
      CHECK(k1.size() == std::size_t(N));
      CHECK(std::set<int>(k1.begin(), k1.end()).size() == k1.size());
      CHECK(ids.at(key("mixture", 2)) == k1);
      CHECK(ids.at(key("star", 1)) == k1);
      for (int id : k1) {
        CHECK(id >= 0);
        CHECK(id < n_max);
      }
      if (!prev.empty()) CHECK(std::includes(prev.begin(), prev.end(), k1.begin(), k1.end()));
      prev = k1;
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("resume reuses completed cells and recomputes the rest") {
  const ExperimentConfig cfg = tiny();
  const fs::path dir = scratch("resume");
  const auto first = run_experiment(cfg, dir);
  REQUIRE(first.complete);
  json m = json::parse(read_file(dir / "manifest.json"));
  CHECK(m.at("completed").size() == 4);
  CHECK(m.at("failed").empty());
  CHECK(m.at("missing").empty());
  CHECK(config_from_json(m.at("config").dump()).K_list == cfg.K_list);

  const auto again = run_experiment(cfg, dir, true);
  CHECK(again.records == first.records);
  CHECK(std::find(again.notes.begin(), again.notes.end(), "resumed 4 completed cells") != again.notes.end());

  // Forget one cell: it is retrained, the others are loaded as they were.
  const std::string dropped = m.at("completed").back().get<std::string>();
  m["completed"].erase(m["completed"].size() - 1);
  write_file_atomic(dir / "manifest.json", m.dump());
  const auto partial = run_experiment(cfg, dir, true);
  CHECK(fs::exists(dir / "cells" / (dropped + ".json")));
  CHECK(std::find(partial.notes.begin(), partial.notes.end(), "resumed 3 completed cells") != partial.notes.end());
  CHECK(without_times(partial.records) == without_times(first.records));
  const json after = json::parse(read_file(dir / "manifest.json"));
  CHECK(after.at("completed").size() == 4);
  fs::remove_all(dir);
}

TEST_CASE("config json") {
  ExperimentConfig cfg = tiny();
  cfg.families = {Family::edpm, Family::mixture};
  cfg.C_grid = {0.5, 0.25};
  cfg.train.C = 0.125;
  cfg.synth.part_jitter = 0.1;
  const auto back = config_from_json(config_to_json(cfg));
  CHECK(back.families == cfg.families);
  CHECK(back.C_grid == cfg.C_grid);
  CHECK(back.train.C == cfg.train.C);
  CHECK(back.synth.part_jitter == cfg.synth.part_jitter);
  CHECK(config_to_json(back) == config_to_json(cfg));

  CHECK(config_from_json("{}").K_list == ExperimentConfig{}.K_list);
  CHECK_THROWS_WITH_AS(config_from_json(R"({"K_lst": [1]})"), doctest::Contains("K_lst"), ValidationError);
  CHECK_THROWS_WITH_AS(config_from_json(R"({"synth": {"nosie": 1}})"), doctest::Contains("synth.nosie"),
                       ValidationError);
  CHECK_THROWS_AS(config_from_json(R"({"K_list": [1, 3]})"), ValidationError);
  CHECK_THROWS_AS(config_from_json(R"({"K_list": []})"), ValidationError);
  CHECK_THROWS_AS(config_from_json(R"({"families": ["svm"]})"), ValidationError);
  CHECK_THROWS_AS(config_from_json("{"), ParseError);
}

TEST_CASE("log-linear fit") {
  SUBCASE("exact fit") {
    std::vector<std::pair<double, double>> pts;
    for (double n : {10.0, 100.0, 1000.0, 3000.0}) pts.emplace_back(n, 0.1 * std::log10(n));
    const auto fit = fit_loglinear(pts);
    CHECK(fit.slope == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(std::abs(fit.intercept) < 1e-12);
    CHECK(fit.residual < 1e-12);
    CHECK(!fit.degenerate);
    CHECK(fit.points == 4);
  }
  SUBCASE("extrapolation") {
    // (0.95 - 0.35) / 0.05 = 12.
    std::vector<std::pair<double, double>> pts;
    for (double n : {10.0, 100.0, 1000.0}) pts.emplace_back(n, 0.35 + 0.05 * std::log10(n));
    const auto fit = fit_loglinear(pts);
    CHECK(fit.n_for_target(0.95) == doctest::Approx(1e12).epsilon(1e-9));
    LogLinearFit hand;
    hand.slope = 0.05;
    hand.intercept = 0.35;
    CHECK(std::log10(hand.n_for_target(0.95)) == doctest::Approx(12.0).epsilon(1e-12));
  }
  SUBCASE("order does not matter") {
    std::vector<std::pair<double, double>> pts{{50, 0.31}, {100, 0.42}, {500, 0.44}, {1000, 0.52}, {3000, 0.55}};
    const auto a = fit_loglinear(pts);
    std::reverse(pts.begin(), pts.end());
    const auto b = fit_loglinear(pts);
    std::mt19937_64 rng(1);
    std::shuffle(pts.begin(), pts.end(), rng);
    const auto c = fit_loglinear(pts);
    CHECK(a.slope == b.slope);
    CHECK(a.intercept == b.intercept);
    CHECK(a.residual == b.residual);
    CHECK(a.slope == c.slope);
    CHECK(a.residual == c.residual);
  }
  SUBCASE("constant AP is flagged") {
    const auto fit = fit_loglinear({{10, 0.5}, {100, 0.5}, {1000, 0.5}});
    CHECK(fit.degenerate);
    CHECK(std::isinf(fit.n_for_target(0.95)));
  }
  SUBCASE("falling AP never reaches a higher target") {
    const auto fit = fit_loglinear({{10, 0.5}, {100, 0.4}, {1000, 0.3}});
    CHECK(fit.slope < 0);
    CHECK(std::isinf(fit.n_for_target(0.95)));
  }
  SUBCASE("needs three N with AP below one") {
    CHECK_THROWS_AS(fit_loglinear({{10, 0.5}, {100, 0.6}}), ValidationError);
    CHECK_THROWS_AS(fit_loglinear({{10, 0.5}, {100, 0.6}, {1000, 1.0}}), ValidationError);
    CHECK_THROWS_AS(fit_loglinear({{10, 0.5}, {10, 0.6}, {100, 0.7}}), ValidationError);
  }
  SUBCASE("records use the selected K averaged per N") {
    std::vector<ExperimentRecord> recs;
    for (int N : {10, 100, 1000})
      for (std::uint64_t s : {0, 1}) {
        auto r = record(Family::mixture, 1, N, s, 0.1 * std::log10(double(N)) + (s ? 0.01 : -0.01));
        r.selected = true;
        recs.push_back(r);
        auto other = record(Family::mixture, 2, N, s, 0.9);
        recs.push_back(other);
      }
    const auto fit = fit_loglinear(recs, Family::mixture);
    CHECK(fit.slope == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(fit.residual < 1e-12);
  }
}

TEST_CASE("records csv round trip and order") {
  std::vector<ExperimentRecord> recs;
  recs.push_back(record(Family::edpm, 1, 100, 2, 0.1 + 0.2));
  recs.push_back(record(Family::mixture, 4, 50, 1, 1.0 / 3.0));
  recs.push_back(record(Family::mixture, 1, 100, 0, 1e-300));
  recs.push_back(record(Family::mixture, 1, 50, 9, 0.0));
  recs.back().status = "failed: solver diverged";
  recs[0].spring_scale = 30;
  recs[0].train_seconds = 12.345678901234567;
  recs[1].selected = true;
  recs[2].C = 0.002 / 144;
  const std::string csv = records_to_csv(recs);
  const auto back = records_from_csv(csv);
  REQUIRE(back.size() == recs.size());
  auto sorted = recs;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return std::tie(a.family, a.K, a.N, a.seed) < std::tie(b.family, b.K, b.N, b.seed);
  });
  CHECK(back == sorted);
  CHECK(records_to_csv(back) == csv);
  CHECK_THROWS_AS(records_from_csv("nonsense\n"), ParseError);
  CHECK_THROWS_AS(records_from_csv(csv.substr(0, csv.find('\n') + 1) + "mixture,1,2\n"), ParseError);
}

TEST_CASE("emit_outputs writes every file and names an empty filter") {
  ExperimentResult res;
  for (int N : {10, 100, 1000}) {
    auto r = record(Family::mixture, 1, N, 0, 0.2 + 0.1 * std::log10(double(N)));
    r.selected = true;
    res.records.push_back(r);
  }
  res.shape_counts = {5, 3, 1};
  const fs::path dir = scratch("emit");
  emit_outputs(dir, res, {{"edpm", 6, 0.5, 2}});
  for (const char* f : {"ap_vs_n.csv", "ap_vs_k.csv", "loglinear.csv", "longtail.csv", "timing.csv"})
    CHECK(fs::exists(dir / f));
  CHECK(records_from_csv(read_file(dir / "ap_vs_n.csv")) == res.records);
  CHECK(read_file(dir / "longtail.csv") == "rank,count\n1,5\n2,3\n3,1\n");
  {
    const std::string ll = read_file(dir / "loglinear.csv");
    const std::string row = ll.substr(ll.find('\n') + 1);
    CHECK(row.rfind("mixture,", 0) == 0);
    CHECK(std::stod(row.substr(8)) == doctest::Approx(0.1).epsilon(1e-12));
  }
  CHECK_THROWS_WITH_AS(emit_outputs(dir, res, {}, Family::edpm), doctest::Contains("edpm"), ValidationError);
  CHECK_THROWS_AS(emit_outputs(dir, ExperimentResult{}), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("benchmark counts one distance transform per part") {
  BenchmarkConfig cfg;
  cfg.grid_size = 14;
  cfg.dim = 4;
  cfg.parts = 4;
  cfg.edpm_M = {1, 6, 50};
  cfg.naive_M = {1, 6};
  cfg.repetitions = 1;
  const auto rows = benchmark_inference(cfg);
  REQUIRE(rows.size() == 6);
  for (const auto& r : rows) {
    CHECK(r.median_seconds >= 0.0);
    if (r.model == "naive")
      CHECK(r.dt_calls_per_image == std::size_t(r.M * (cfg.parts - 1)));
    else
      CHECK(r.dt_calls_per_image == std::size_t(cfg.parts - 1));
  }
}

TEST_CASE("regularization study on a small world") {
  RegularizationConfig cfg;
  cfg.synth.n_subcategories = 1;
  cfg.synth.n_negative_images = 8;
  cfg.n_clean = 10;
  cfg.n_noisy = 5;
  cfg.test_images = 10;
  cfg.test_negative_images = 4;
  cfg.folds = 3;
  const auto a = regularization_study(cfg, 4);
  const auto b = regularization_study(cfg, 4);
  CHECK(a.ap_fixed_base == b.ap_fixed_base);
  CHECK(a.ap_cv_doubled == b.ap_cv_doubled);
  // Duplicating positives adds their hinge loss once more.
  CHECK(a.objective_ratio >= 1.0);
  CHECK(a.C_cv_base > 0);
  CHECK(a.C_cv_doubled > 0);
  for (double ap : {a.ap_fixed_base, a.ap_fixed_doubled, a.ap_cv_base, a.ap_cv_doubled}) {
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }
}

TEST_CASE("two subcategories favour two templates at large N") {
  ExperimentConfig cfg;
  cfg.synth.n_subcategories = 2;
  cfg.synth.n_shapes = 16;
  cfg.synth.noise_level = 1.0;
  cfg.synth.n_images = 200;
  cfg.synth.n_negative_images = 30;
  cfg.K_list = {1, 2};
  cfg.N_list = {200};
  cfg.resamples = 1;
  cfg.cross_validate = false;
  cfg.validation_images = 20;
  cfg.test_images = 60;
  cfg.test_negative_images = 20;
  cfg.pca_dim = 16;
  cfg.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto res = run_experiment(cfg);
  std::map<std::uint64_t, std::map<int, double>> ap;
  for (const auto& r : res.records) ap[r.seed][r.K] = r.ap;
  int wins = 0;
  for (const auto& [s, by_k] : ap) wins += by_k.at(2) >= by_k.at(1);
  CHECK(ap.size() == 10);
  CHECK(wins > 5);
}
