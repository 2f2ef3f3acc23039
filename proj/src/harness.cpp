#include "partmix/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>

#include <omp.h>

#include "json.hpp"
#include "partmix/data_io.hpp"
#include "partmix/detect.hpp"
#include "partmix/error.hpp"
#include "partmix/eval.hpp"

namespace partmix {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

constexpr std::uint64_t kValidationStream = 0x5a17d0c3ULL;
constexpr std::uint64_t kTestStream = 0x7e57c0deULL;

int log2_exact(int k) {
  int d = 0;
  while ((1 << d) < k) ++d;
  return d;
}

SynthConfig split_config(const SynthConfig& base, std::uint64_t seed, std::uint64_t stream, int positives,
                         int negatives) {
  SynthConfig c = base;
  c.world_seed = seed;
  c.seed = seed ^ stream;
  c.n_images = positives;
  c.n_negative_images = negatives;
  return c;
}

std::vector<FeatureGrid> negative_grids(const SynthDataset& ds) {
  std::vector<FeatureGrid> out;
  for (std::size_t i = 0; i < ds.gt.size(); ++i)
    if (ds.gt[i].boxes.empty()) out.push_back(ds.grids[i]);
  return out;
}

WindowDescriptor root_window(const SynthDataset& ds, const SynthObject& o, int R) {
  return extract_window(ds.grids[o.image], o.placement[0], R, R);
}

// Random negative windows for cross-validation, `per_image` from each grid.
std::vector<WindowDescriptor> sample_negative_windows(const std::vector<FeatureGrid>& negs, int R,
                                                      int per_image, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<WindowDescriptor> out;
  for (const auto& g : negs) {
    if (g.rows() < R || g.cols() < R) continue;
    std::uniform_int_distribution<int> ry(0, g.rows() - R), rx(0, g.cols() - R);
    for (int k = 0; k < per_image; ++k) out.push_back(extract_window(g, {rx(rng), ry(rng)}, R, R));
  }
  return out;
}

template <typename Model>
double detection_ap(const Model& model, const SynthDataset& ds, double overlap) {
  std::vector<ScoredBox> boxes;
  for (std::size_t i = 0; i < ds.grids.size(); ++i) {
    FeaturePyramid pyr = single_level(ds.grids[i]);
    for (const auto& d : nms(detect(model, pyr, -std::numeric_limits<double>::infinity()), overlap))
      boxes.push_back({ds.ids[i], d.bbox, d.score});
  }
  return evaluate_ap(std::move(boxes), ds.gt);
}

struct SeedData {
  SynthDataset pool, val, test;
  std::vector<WindowDescriptor> windows;
  std::vector<FeatureGrid> negs;
  std::vector<WindowDescriptor> cv_negs;
  ClusterTree tree;
  std::vector<std::size_t> sizes;
};

std::string cell_key(const std::string& kind, int K, int N, std::uint64_t seed, int resample) {
  return kind + "_K" + std::to_string(K) + "_N" + std::to_string(N) + "_s" + std::to_string(seed) + "_r" +
         std::to_string(resample);
}

json record_json(const ExperimentRecord& r) {
  return {{"family", to_string(r.family)}, {"K", r.K},
          {"N", r.N},                      {"seed", r.seed},
          {"resample", r.resample},        {"C", r.C},
          {"spring_scale", r.spring_scale},
          {"ap", r.ap},                    {"val_ap", r.val_ap},
          {"train_objective", r.train_objective},
          {"train_seconds", r.train_seconds},
          {"test_seconds", r.test_seconds},
          {"status", r.status}};
}

ExperimentRecord record_from(const json& j) {
  ExperimentRecord r;
  r.family = family_from_string(j.at("family").get<std::string>());
  r.K = j.at("K").get<int>();
  r.N = j.at("N").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.resample = j.at("resample").get<int>();
  r.C = j.at("C").get<double>();
  r.spring_scale = j.at("spring_scale").get<double>();
  r.ap = j.at("ap").get<double>();
  r.val_ap = j.at("val_ap").get<double>();
  r.train_objective = j.at("train_objective").get<double>();
  r.train_seconds = j.at("train_seconds").get<double>();
  r.test_seconds = j.at("test_seconds").get<double>();
  r.status = j.at("status").get<std::string>();
  return r;
}

bool record_less(const ExperimentRecord& a, const ExperimentRecord& b) {
  return std::tie(a.family, a.K, a.N, a.seed, a.resample) < std::tie(b.family, b.K, b.N, b.seed, b.resample);
}

void mark_selected(std::vector<ExperimentRecord>& records) {
  std::map<std::tuple<Family, int, std::uint64_t, int>, std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    r.selected = false;
    if (!r.ok()) continue;
    const auto key = std::make_tuple(r.family, r.N, r.seed, r.resample);
    const auto it = best.find(key);
    if (it == best.end()) {
      best.emplace(key, i);
      continue;
    }
    const auto& cur = records[it->second];
    if (r.val_ap > cur.val_ap || (r.val_ap == cur.val_ap && r.K < cur.K)) it->second = i;
  }
  for (const auto& [k, i] : best) records[i].selected = true;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(Family f) {
  switch (f) {
    case Family::mixture: return "mixture";
    case Family::dpm: return "dpm";
    case Family::epm: return "epm";
    case Family::edpm: return "edpm";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "mixture") return Family::mixture;
  if (s == "dpm") return Family::dpm;
  if (s == "epm") return Family::epm;
  if (s == "edpm") return Family::edpm;
  throw ValidationError("unknown model family '" + s + "' (expected mixture, dpm, epm or edpm)");
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.K_list.empty()) throw ValidationError("ExperimentConfig: K_list is empty");
  if (cfg.N_list.empty()) throw ValidationError("ExperimentConfig: N_list is empty");
  if (cfg.families.empty()) throw ValidationError("ExperimentConfig: families is empty");
  if (cfg.seeds.empty()) throw ValidationError("ExperimentConfig: seeds is empty");
  for (int k : cfg.K_list)
    if (k < 1 || (k & (k - 1)) != 0)
      throw ValidationError("ExperimentConfig: K_list entries must be powers of two, got " + std::to_string(k));
  for (int n : cfg.N_list)
    if (n < 1) throw ValidationError("ExperimentConfig: N_list entries must be positive");
  if (cfg.resamples < 1) throw ValidationError("ExperimentConfig: resamples must be positive");
  for (double c : cfg.C_grid)
    if (!(c > 0)) throw ValidationError("ExperimentConfig: C_grid entries must be positive");
  if (cfg.edpm_spring_scales.empty()) throw ValidationError("ExperimentConfig: edpm_spring_scales is empty");
  for (double f : cfg.edpm_spring_scales)
    if (!(f > 0)) throw ValidationError("ExperimentConfig: edpm_spring_scales entries must be positive");
  if (cfg.test_images < 1) throw ValidationError("ExperimentConfig: test_images must be positive");
  if (cfg.validation_images < 1) throw ValidationError("ExperimentConfig: validation_images must be positive");
  validate(cfg.synth);
}

std::string config_to_json(const ExperimentConfig& c) {
  json fam = json::array();
  for (auto f : c.families) fam.push_back(to_string(f));
  const SynthConfig& s = c.synth;
  json j{{"K_list", c.K_list},
         {"N_list", c.N_list},
         {"resamples", c.resamples},
         {"C_grid", c.C_grid},
         {"families", fam},
         {"seeds", c.seeds},
         {"cross_validate", c.cross_validate},
         {"validation_images", c.validation_images},
         {"test_images", c.test_images},
         {"test_negative_images", c.test_negative_images},
         {"exemplar_q", c.exemplar_q},
         {"edpm_spring_scales", c.edpm_spring_scales},
         {"nms_overlap", c.nms_overlap},
         {"pca_dim", c.pca_dim},
         {"threads", c.threads},
         {"train",
          {{"C", c.train.C},
           {"folds", c.train.folds},
           {"neg_per_image_cap", c.train.neg_per_image_cap},
           {"convergence_tol", c.train.convergence_tol},
           {"max_epochs", c.train.max_epochs},
           {"mining_rounds", c.train.mining_rounds},
           {"min_pos", c.train.min_pos},
           {"beta_min", c.train.beta_min}}},
         {"synth",
          {{"n_subcategories", s.n_subcategories},
           {"parts", s.parts},
           {"shape_tail_exponent", s.shape_tail_exponent},
           {"noise_level", s.noise_level},
           {"n_images", s.n_images},
           {"n_negative_images", s.n_negative_images},
           {"image_size", s.image_size},
           {"n_shapes", s.n_shapes},
           {"root_cells", s.root_cells},
           {"part_cells", s.part_cells},
           {"part_jitter", s.part_jitter},
           {"clutter", s.clutter},
           {"body_amplitude", s.body_amplitude},
           {"part_amplitude", s.part_amplitude},
           {"raster", s.raster},
           {"cell_size", s.cell_size}}}};
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  // Every key must be consumed; leftovers are reported.
  auto take = [](json& obj, const char* key, auto& dst, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
      dst = obj.at(key).get<std::remove_reference_t<decltype(dst)>>();
    } catch (const json::exception& e) {
      throw ValidationError("config: bad value for " + where + key + ": " + e.what());
    }
    obj.erase(key);
  };
  auto leftovers = [](const json& obj, const std::string& where) {
    if (!obj.empty()) throw ValidationError("config: unknown key " + where + obj.begin().key());
  };
  try {
    take(j, "K_list", c.K_list, "");
    take(j, "N_list", c.N_list, "");
    take(j, "resamples", c.resamples, "");
    take(j, "C_grid", c.C_grid, "");
    take(j, "seeds", c.seeds, "");
    take(j, "cross_validate", c.cross_validate, "");
    take(j, "validation_images", c.validation_images, "");
    take(j, "test_images", c.test_images, "");
    take(j, "test_negative_images", c.test_negative_images, "");
    take(j, "exemplar_q", c.exemplar_q, "");
    take(j, "edpm_spring_scales", c.edpm_spring_scales, "");
    take(j, "nms_overlap", c.nms_overlap, "");
    take(j, "pca_dim", c.pca_dim, "");
    take(j, "threads", c.threads, "");
    if (j.contains("families")) {
      c.families.clear();
      for (const auto& f : j.at("families")) c.families.push_back(family_from_string(f.get<std::string>()));
      j.erase("families");
    }
    if (j.contains("train")) {
      json t = j.at("train");
      take(t, "C", c.train.C, "train.");
      take(t, "folds", c.train.folds, "train.");
      take(t, "neg_per_image_cap", c.train.neg_per_image_cap, "train.");
      take(t, "convergence_tol", c.train.convergence_tol, "train.");
      take(t, "max_epochs", c.train.max_epochs, "train.");
      take(t, "mining_rounds", c.train.mining_rounds, "train.");
      take(t, "min_pos", c.train.min_pos, "train.");
      take(t, "beta_min", c.train.beta_min, "train.");
      leftovers(t, "train.");
      j.erase("train");
    }
    if (j.contains("synth")) {
      json s = j.at("synth");
      SynthConfig& y = c.synth;
      take(s, "n_subcategories", y.n_subcategories, "synth.");
      take(s, "parts", y.parts, "synth.");
      take(s, "shape_tail_exponent", y.shape_tail_exponent, "synth.");
      take(s, "noise_level", y.noise_level, "synth.");
      take(s, "n_images", y.n_images, "synth.");
      take(s, "n_negative_images", y.n_negative_images, "synth.");
      take(s, "image_size", y.image_size, "synth.");
      take(s, "n_shapes", y.n_shapes, "synth.");
      take(s, "root_cells", y.root_cells, "synth.");
      take(s, "part_cells", y.part_cells, "synth.");
      take(s, "part_jitter", y.part_jitter, "synth.");
      take(s, "clutter", y.clutter, "synth.");
      take(s, "body_amplitude", y.body_amplitude, "synth.");
      take(s, "part_amplitude", y.part_amplitude, "synth.");
      take(s, "raster", y.raster, "synth.");
      take(s, "cell_size", y.cell_size, "synth.");
      leftovers(s, "synth.");
      j.erase("synth");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  leftovers(j, "");
  validate(c);
  return c;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::optional<fs::path>& out_dir,
                                bool resume) {
  validate(cfg);
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
  ExperimentResult result;
  const int R = cfg.synth.root_cells;

  // --- per-seed data ---------------------------------------------------
  std::vector<SeedData> data(cfg.seeds.size());
  for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
    const std::uint64_t s = cfg.seeds[si];
    SeedData& d = data[si];
    d.pool = generate(split_synth(cfg, s, Split::train));
    d.val = generate(split_synth(cfg, s, Split::validation));
    d.test = generate(split_synth(cfg, s, Split::test));
    d.windows = pool_windows(d.pool, R);
    d.negs = negative_grids(d.pool);
    d.cv_negs = sample_negative_windows(d.negs, R, 10, s + 17);
    d.tree = cluster_pool(cfg, d.windows, s);
    d.sizes = sample_sizes(cfg, d.windows.size());
    if (si == 0) {
      std::vector<Placement> zs;
      for (const auto& o : d.pool.objects) zs.push_back(o.placement);
      for (const auto& bin : shape_histogram(zs)) result.shape_counts.push_back(bin.count);
    }
  }
  {
    std::ostringstream note;
    note << "negatives per run: " << cfg.synth.n_negative_images << " images";
    result.notes.push_back(note.str());
  }

  // --- partitions and C per (seed, resample, level) ---------------------
  struct Sample {
    std::size_t seed_index;
    int resample;
    ConsistentSets sets;
    std::vector<double> C;  // per level
  };
  std::vector<Sample> samples;
  for (std::size_t si = 0; si < data.size(); ++si)
    for (int r = 0; r < cfg.resamples; ++r) {
      const auto fam = partitioned_sample(leaf_members(data[si].tree), data[si].sizes,
                                          partition_seed(cfg.seeds[si], r));
      samples.push_back({si, r, refine_consistency(data[si].tree, fam), {}});
    }
  const std::vector<double> grid =
      cfg.C_grid.empty() ? default_C_grid(std::size_t(R) * R * data[0].windows[0].dim) : cfg.C_grid;
  std::vector<std::pair<std::size_t, std::size_t>> cv_jobs;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    samples[k].C.assign(data[samples[k].seed_index].sizes.size(), cfg.train.C);
    if (cfg.cross_validate)
      for (std::size_t n = 0; n < samples[k].C.size(); ++n) cv_jobs.emplace_back(k, n);
  }
#pragma omp parallel for schedule(dynamic)
  for (std::size_t j = 0; j < cv_jobs.size(); ++j) {
    auto& smp = samples[cv_jobs[j].first];
    const std::size_t n = cv_jobs[j].second;
    const SeedData& d = data[smp.seed_index];
    std::vector<WindowDescriptor> pos;
    std::vector<int> ids;
    for (const auto& cl : smp.sets.at(0, n)) ids.insert(ids.end(), cl.begin(), cl.end());
    std::sort(ids.begin(), ids.end());
    for (int id : ids) pos.push_back(d.windows[id]);
    try {
      const auto cv = cross_validate_C(pos, d.cv_negs, grid, cfg.train.folds,
                                       cfg.seeds[smp.seed_index] + 31 * n + smp.resample, cfg.train);
      smp.C[n] = cv.best_C;
    } catch (const Error&) {
      // Too few positives to cross-validate; keep the configured C.
    }
  }

  // --- cells -------------------------------------------------------------
  struct Job {
    std::string key;
    std::size_t sample;
    std::size_t level;
    int K;  // 0: star families
  };
  std::vector<Job> jobs;
  const bool any_star = std::any_of(cfg.families.begin(), cfg.families.end(),
                                    [](Family f) { return f != Family::mixture; });
  const bool want_mixture = std::find(cfg.families.begin(), cfg.families.end(), Family::mixture) != cfg.families.end();
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto& smp = samples[k];
    const SeedData& d = data[smp.seed_index];
    for (std::size_t n = 0; n < d.sizes.size(); ++n) {
      const int N = static_cast<int>(d.sizes[n]);
      const std::uint64_t s = cfg.seeds[smp.seed_index];
      if (want_mixture)
        for (int K : cfg.K_list) jobs.push_back({cell_key("mixture", K, N, s, smp.resample), k, n, K});
      if (any_star) jobs.push_back({cell_key("star", 1, N, s, smp.resample), k, n, 0});
    }
  }

  std::map<std::string, std::vector<ExperimentRecord>> done;
  const fs::path manifest_path = out_dir ? *out_dir / "manifest.json" : fs::path();
  if (out_dir && resume && fs::exists(manifest_path)) {
    const json m = json::parse(read_file(manifest_path));
    for (const auto& key : m.at("completed")) {
      const fs::path p = *out_dir / "cells" / (key.get<std::string>() + ".json");
      if (!fs::exists(p)) continue;
      std::vector<ExperimentRecord> recs;
      const json cell = json::parse(read_file(p));
      for (const auto& r : cell.at("records")) recs.push_back(record_from(r));
      done.emplace(key.get<std::string>(), std::move(recs));
    }
    result.notes.push_back("resumed " + std::to_string(done.size()) + " completed cells");
  }

  std::mutex mu;
  // Cell files list the pool object ids the cell trained on, for audits.
  auto persist = [&](const std::string& key, const std::vector<ExperimentRecord>& recs,
                     const std::vector<int>& train_ids) {
    if (!out_dir) return;
    json arr = json::array();
    for (const auto& r : recs) arr.push_back(record_json(r));
    write_file_atomic(*out_dir / "cells" / (key + ".json"),
                      json{{"records", arr}, {"train_ids", train_ids}}.dump(1));
    json completed = json::array(), failed = json::array();
    for (const auto& [k, rs] : done) {
      const bool ok = std::all_of(rs.begin(), rs.end(), [](const ExperimentRecord& r) { return r.ok(); });
      (ok ? completed : failed).push_back(k);
    }
    json missing = json::array();
    for (const auto& j : jobs)
      if (!done.count(j.key)) missing.push_back(j.key);
    write_file_atomic(manifest_path, json{{"config", json::parse(config_to_json(cfg))},
                                          {"completed", completed},
                                          {"failed", failed},
                                          {"missing", missing}}
                                         .dump(1));
  };

  auto save_cell_model = [&](const AnyModel& model, const ExperimentRecord& r) {
    if (!out_dir) return;
    save_model(*out_dir / "models" / (cell_key(to_string(r.family), r.K, r.N, r.seed, r.resample) + ".json"),
               model, ModelMetadata{r.K, r.N, r.C, r.seed});
  };

#pragma omp parallel for schedule(dynamic)
  for (std::size_t ji = 0; ji < jobs.size(); ++ji) {
    const Job& job = jobs[ji];
    {
      std::lock_guard<std::mutex> lock(mu);
      if (done.count(job.key)) continue;
    }
    const Sample& smp = samples[job.sample];
    const SeedData& d = data[smp.seed_index];
    const std::uint64_t s = cfg.seeds[smp.seed_index];
    const int N = static_cast<int>(d.sizes[job.level]);
    const double C = smp.C[job.level];
    TrainConfig tc = cfg.train;
    tc.C = C;
    tc.seed = cell_train_seed(s, smp.resample);
    std::vector<ExperimentRecord> recs;
    std::vector<int> used;
    auto base = [&](Family f, int K) {
      ExperimentRecord r;
      r.family = f;
      r.K = K;
      r.N = N;
      r.seed = s;
      r.resample = smp.resample;
      r.C = C;
      return r;
    };

    if (job.K > 0) {
      ExperimentRecord r = base(Family::mixture, job.K);
      try {
        const auto t0 = Clock::now();
        std::vector<std::vector<WindowDescriptor>> clusters;
        for (const auto& cl : smp.sets.at(log2_exact(job.K), job.level)) {
          if (cl.empty()) continue;
          std::vector<int> ids(cl.begin(), cl.end());
          std::sort(ids.begin(), ids.end());
          clusters.emplace_back();
          for (int id : ids) clusters.back().push_back(d.windows[id]);
          used.insert(used.end(), ids.begin(), ids.end());
        }
        const auto mix = train_mixture(clusters, d.negs, tc);
        for (const auto& log : mix.logs)
          if (!log.objective_history.empty()) r.train_objective += log.objective_history.back();
        r.train_seconds = seconds_since(t0);
        const auto t1 = Clock::now();
        r.val_ap = detection_ap(mix.model, d.val, cfg.nms_overlap);
        r.ap = detection_ap(mix.model, d.test, cfg.nms_overlap);
        save_cell_model(mix.model, r);
        r.test_seconds = seconds_since(t1);
      } catch (const std::exception& e) {
        r.status = std::string("failed: ") + e.what();
      }
      recs.push_back(r);
    } else {
      std::vector<ExperimentRecord> star_recs;
      for (Family f : cfg.families)
        if (f != Family::mixture) star_recs.push_back(base(f, 1));
      try {
        const auto t0 = Clock::now();
        std::vector<AnnotatedExample> examples;
        std::vector<Placement> placements;
        std::vector<int> ids;
        for (const auto& cl : smp.sets.at(0, job.level)) ids.insert(ids.end(), cl.begin(), cl.end());
        std::sort(ids.begin(), ids.end());
        used = ids;
        for (int id : ids) {
          const auto& o = d.pool.objects[id];
          examples.push_back({o.image, o.placement});
          placements.push_back(o.placement);
        }
        const StarShape shape{R, R, cfg.synth.part_cells, cfg.synth.part_cells};
        const auto st = train_star_model(d.pool.grids, examples, d.negs, shape, C, tc);
        const double train_s = seconds_since(t0);
        for (auto& r : star_recs) {
          const auto t1 = Clock::now();
          StarModel m = st.model;
          if (r.family == Family::epm) m = build_epm(st.model, placements, cfg.exemplar_q);
          if (r.family == Family::edpm) {
            const StarModel e = build_edpm(st.model, placements, cfg.exemplar_q);
            r.val_ap = -1.0;
            for (double f : cfg.edpm_spring_scales) {
              StarModel cand = e;
              for (auto& part : cand.parts) {
                part.spring.bx *= f;
                part.spring.by *= f;
              }
              const double v = detection_ap(cand, d.val, cfg.nms_overlap);
              if (v > r.val_ap) {
                r.val_ap = v;
                r.spring_scale = f;
                m = std::move(cand);
              }
            }
          } else {
            r.val_ap = detection_ap(m, d.val, cfg.nms_overlap);
          }
          r.train_seconds = train_s + seconds_since(t1);
          r.train_objective = st.log.objective_history.empty() ? 0.0 : st.log.objective_history.back();
          const auto t2 = Clock::now();
          r.ap = detection_ap(m, d.test, cfg.nms_overlap);
          save_cell_model(m, r);
          r.test_seconds = seconds_since(t2);
        }
      } catch (const std::exception& e) {
        for (auto& r : star_recs) r.status = std::string("failed: ") + e.what();
      }
      recs = std::move(star_recs);
    }
    std::lock_guard<std::mutex> lock(mu);
    done[job.key] = recs;
    std::sort(used.begin(), used.end());
    persist(job.key, recs, used);
  }

  for (const auto& [k, recs] : done)
    for (const auto& r : recs) {
      result.records.push_back(r);
      if (!r.ok()) result.complete = false;
    }
  for (const auto& j : jobs)
    if (!done.count(j.key)) result.complete = false;
  std::sort(result.records.begin(), result.records.end(), record_less);
  mark_selected(result.records);
  return result;
}

SynthConfig split_synth(const ExperimentConfig& cfg, std::uint64_t seed, Split split) {
  switch (split) {
    case Split::train:
      return split_config(cfg.synth, seed, 0, cfg.synth.n_images, cfg.synth.n_negative_images);
    case Split::validation:
      return split_config(cfg.synth, seed, kValidationStream, cfg.validation_images,
                          std::max(1, cfg.validation_images / 2));
    case Split::test:
      break;
  }
  return split_config(cfg.synth, seed, kTestStream, cfg.test_images, cfg.test_negative_images);
}

std::vector<WindowDescriptor> pool_windows(const SynthDataset& pool, int root_cells) {
  std::vector<WindowDescriptor> out;
  for (const auto& o : pool.objects) out.push_back(root_window(pool, o, root_cells));
  return out;
}

ClusterTree cluster_pool(const ExperimentConfig& cfg, const std::vector<WindowDescriptor>& windows,
                         std::uint64_t seed) {
  if (windows.empty()) throw ValidationError("cluster_pool: no windows");
  std::vector<std::vector<double>> desc;
  for (const auto& w : windows) desc.push_back(to_double(w));
  const int dim = std::min<int>(cfg.pca_dim, static_cast<int>(desc.size()) - 1);
  const auto pca = pca_reduce(desc, std::max(dim, 1));
  return hierarchical_kmeans(pca.projected, log2_exact(*std::max_element(cfg.K_list.begin(), cfg.K_list.end())),
                             seed);
}

std::vector<std::size_t> sample_sizes(const ExperimentConfig& cfg, std::size_t n_max) {
  std::set<std::size_t, std::greater<>> sizes{n_max};
  for (int n : cfg.N_list)
    if (std::size_t(n) < n_max) sizes.insert(std::size_t(n));
  return {sizes.begin(), sizes.end()};
}

std::uint64_t partition_seed(std::uint64_t seed, int resample) {
  return seed * 1000003ULL + std::uint64_t(resample);
}

std::uint64_t cell_train_seed(std::uint64_t seed, int resample) {
  return seed * 7919 + std::uint64_t(resample);
}

double LogLinearFit::n_for_target(double target_ap) const {
  if (degenerate || !(slope > 0)) return std::numeric_limits<double>::infinity();
  return std::pow(10.0, (target_ap - intercept) / slope);
}

LogLinearFit fit_loglinear(const std::vector<std::pair<double, double>>& n_ap) {
  std::set<double> usable;
  for (const auto& [n, ap] : n_ap) {
    if (!(n > 0)) throw ValidationError("fit_loglinear: N must be positive");
    if (ap < 1.0) usable.insert(n);
  }
  if (usable.size() < 3)
    throw ValidationError("fit_loglinear: need at least 3 distinct N with AP < 1, got " +
                          std::to_string(usable.size()));
  // Sorted copy so the fit does not depend on input order.
  auto pts = n_ap;
  std::sort(pts.begin(), pts.end());
  const double m = static_cast<double>(pts.size());
  double sx = 0, sy = 0;
  for (const auto& [n, ap] : pts) {
    sx += std::log10(n);
    sy += ap;
  }
  const double mx = sx / m, my = sy / m;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [n, ap] : pts) {
    const double dx = std::log10(n) - mx, dy = ap - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  LogLinearFit fit;
  fit.points = pts.size();
  if (sxx == 0 || syy == 0) {
    fit.degenerate = true;
    fit.intercept = my;
    return fit;
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0;
  for (const auto& [n, ap] : pts) {
    const double e = ap - (fit.intercept + fit.slope * std::log10(n));
    rss += e * e;
  }
  fit.residual = std::sqrt(rss / m);
  return fit;
}

LogLinearFit fit_loglinear(const std::vector<ExperimentRecord>& records, Family family) {
  std::map<int, std::pair<double, int>> by_n;
  for (const auto& r : records)
    if (r.family == family && r.selected && r.ok()) {
      by_n[r.N].first += r.ap;
      by_n[r.N].second += 1;
    }
  std::vector<std::pair<double, double>> pts;
  for (const auto& [n, acc] : by_n) pts.emplace_back(n, acc.first / acc.second);
  return fit_loglinear(pts);
}

std::vector<TimingRow> benchmark_inference(const BenchmarkConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<float> uf(0.0f, 1.0f);
  auto filter = [&](int h, int w) {
    Filter f(h, w, cfg.dim);
    for (auto& v : f.weights) v = u(rng);
    return f;
  };
  StarModel base;
  base.root = filter(cfg.root_cells, cfg.root_cells);
  std::uniform_int_distribution<int> off(0, cfg.root_cells - cfg.part_cells);
  for (int j = 1; j < cfg.parts; ++j)
    base.parts.push_back({filter(cfg.part_cells, cfg.part_cells), {off(rng), off(rng)}, Spring{0.1, 0.1}});
  std::vector<FeatureGrid> grids;
  for (int g = 0; g < cfg.n_grids; ++g) {
    FeatureGrid grid(cfg.grid_size, cfg.grid_size, cfg.dim);
    for (auto& v : grid.values()) v = uf(rng);
    grids.push_back(std::move(grid));
  }
  int max_M = 1;
  for (int m : cfg.edpm_M) max_M = std::max(max_M, m);
  for (int m : cfg.naive_M) max_M = std::max(max_M, m);
  std::vector<AnchorSet> pool;
  for (int m = 0; m < max_M; ++m) {
    AnchorSet a;
    for (int j = 1; j < cfg.parts; ++j) a.push_back({off(rng), off(rng)});
    pool.push_back(std::move(a));
  }

  auto time_it = [&](auto&& pass) {
    pass();  // warm-up
    std::vector<double> t;
    for (int r = 0; r < std::max(cfg.repetitions, 1); ++r) {
      const auto t0 = Clock::now();
      pass();
      t.push_back(seconds_since(t0));
    }
    std::sort(t.begin(), t.end());
    return t[t.size() / 2];
  };

  std::vector<TimingRow> rows;
  volatile double sink = 0;
  {
    std::size_t dts = 0;
    const double t = time_it([&] {
      dts = 0;
      for (const auto& g : grids) {
        const auto map = score_dpm(base, g);
        dts += map.distance_transforms;
        sink = sink + map.score[0];
      }
    });
    rows.push_back({"dpm", 1, t, dts / grids.size()});
  }
  for (int M : cfg.edpm_M) {
    StarModel m = base;
    m.variant = ModelVariant::edpm;
    m.exemplars.assign(pool.begin(), pool.begin() + M);
    std::size_t dts = 0;
    const double t = time_it([&] {
      dts = 0;
      for (const auto& g : grids) {
        const auto map = score_edpm(m, g);
        dts += map.distance_transforms;
        sink = sink + map.score[0];
      }
    });
    rows.push_back({"edpm", M, t, dts / grids.size()});
  }
  for (int M : cfg.naive_M) {
    std::vector<StarModel> comps;
    for (int k = 0; k < M; ++k) {
      StarModel c = base;
      for (std::size_t j = 0; j < c.parts.size(); ++j) c.parts[j].anchor = pool[k][j];
      comps.push_back(std::move(c));
    }
    std::size_t dts = 0;
    const double t = time_it([&] {
      dts = 0;
      for (const auto& g : grids) {
        double best = kNegInf;
        for (const auto& c : comps) {
          const auto map = score_dpm(c, g);
          dts += map.distance_transforms;
          best = std::max(best, map.score[0]);
        }
        sink = sink + best;
      }
    });
    rows.push_back({"naive", M, t, dts / grids.size()});
  }
  return rows;
}

std::string records_to_csv(const std::vector<ExperimentRecord>& records) {
  std::string out =
      "family,K,N,seed,resample,C,spring_scale,AP,val_AP,train_objective,train_seconds,test_seconds,selected,status\n";
  auto sorted = records;
  std::stable_sort(sorted.begin(), sorted.end(), record_less);
  for (const auto& r : sorted) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out += to_string(r.family) + "," + std::to_string(r.K) + "," + std::to_string(r.N) + "," +
           std::to_string(r.seed) + "," + std::to_string(r.resample) + "," + fmt(r.C) + "," + fmt(r.spring_scale) + "," + fmt(r.ap) + "," +
           fmt(r.val_ap) + "," + fmt(r.train_objective) + "," + fmt(r.train_seconds) + "," +
           fmt(r.test_seconds) + "," + (r.selected ? "1" : "0") + "," + status + "\n";
  }
  return out;
}

std::vector<ExperimentRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line.rfind("family,K,N,", 0) != 0) throw ParseError("records csv: missing header");
  std::vector<ExperimentRecord> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 14) throw ParseError("records csv: line " + std::to_string(line_no) + " has " +
                                         std::to_string(f.size()) + " fields, expected 14");
    try {
      ExperimentRecord r;
      r.family = family_from_string(f[0]);
      r.K = std::stoi(f[1]);
      r.N = std::stoi(f[2]);
      r.seed = std::stoull(f[3]);
      r.resample = std::stoi(f[4]);
      r.C = std::stod(f[5]);
      r.spring_scale = std::stod(f[6]);
      r.ap = std::stod(f[7]);
      r.val_ap = std::stod(f[8]);
      r.train_objective = std::stod(f[9]);
      r.train_seconds = std::stod(f[10]);
      r.test_seconds = std::stod(f[11]);
      r.selected = f[12] == "1";
      r.status = f[13];
      out.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw ParseError("records csv: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void emit_outputs(const fs::path& dir, const ExperimentResult& result, const std::vector<TimingRow>& timing,
                  const std::optional<Family>& family_filter, double target_ap) {
  std::vector<ExperimentRecord> recs;
  for (const auto& r : result.records)
    if (!family_filter || r.family == *family_filter) recs.push_back(r);
  if (recs.empty())
    throw ValidationError("emit_outputs: no records" +
                          (family_filter ? " for family filter '" + to_string(*family_filter) + "'"
                                         : std::string()));
  write_file_atomic(dir / "ap_vs_n.csv", records_to_csv(recs));

  std::map<std::tuple<Family, int, int>, std::vector<double>> by_cell;
  std::set<Family> families;
  for (const auto& r : recs)
    if (r.ok()) {
      by_cell[{r.family, r.N, r.K}].push_back(r.ap);
      families.insert(r.family);
    }
  std::string k_csv = "family,N,K,mean_AP,std_AP,runs\n";
  for (const auto& [key, aps] : by_cell) {
    const double mean = std::accumulate(aps.begin(), aps.end(), 0.0) / aps.size();
    double var = 0;
    for (double a : aps) var += (a - mean) * (a - mean);
    const double sd = aps.size() > 1 ? std::sqrt(var / (aps.size() - 1)) : 0.0;
    k_csv += to_string(std::get<0>(key)) + "," + std::to_string(std::get<1>(key)) + "," +
             std::to_string(std::get<2>(key)) + "," + fmt(mean) + "," + fmt(sd) + "," +
             std::to_string(aps.size()) + "\n";
  }
  write_file_atomic(dir / "ap_vs_k.csv", k_csv);

  std::string ll = "family,slope,intercept,residual,target_AP,N_for_target,degenerate,note\n";
  for (Family f : families) {
    try {
      const auto fit = fit_loglinear(recs, f);
      ll += to_string(f) + "," + fmt(fit.slope) + "," + fmt(fit.intercept) + "," + fmt(fit.residual) + "," +
            fmt(target_ap) + "," + fmt(fit.n_for_target(target_ap)) + "," + (fit.degenerate ? "1" : "0") + ",\n";
    } catch (const ValidationError& e) {
      std::string why = e.what();
      std::replace(why.begin(), why.end(), ',', ';');
      ll += to_string(f) + ",,,,," + fmt(target_ap) + ",,1," + why + "\n";
    }
  }
  write_file_atomic(dir / "loglinear.csv", ll);

  std::string lt = "rank,count\n";
  for (std::size_t i = 0; i < result.shape_counts.size(); ++i)
    lt += std::to_string(i + 1) + "," + std::to_string(result.shape_counts[i]) + "\n";
  write_file_atomic(dir / "longtail.csv", lt);

  std::string tm = "model,M,median_seconds,dt_calls_per_image\n";
  for (const auto& t : timing)
    tm += t.model + "," + std::to_string(t.M) + "," + fmt(t.median_seconds) + "," +
          std::to_string(t.dt_calls_per_image) + "\n";
  write_file_atomic(dir / "timing.csv", tm);
}

RegularizationOutcome regularization_study(const RegularizationConfig& cfg, std::uint64_t seed) {
  const int R = cfg.synth.root_cells;
  const SynthDataset pool =
      generate(split_config(cfg.synth, seed, 0, cfg.n_clean + cfg.n_noisy, cfg.synth.n_negative_images));
  const SynthDataset test =
      generate(split_config(cfg.synth, seed, kTestStream, cfg.test_images, cfg.test_negative_images));
  const auto negs = negative_grids(pool);

  // Noisy positives: boxes displaced by two or three cells.
  std::mt19937_64 rng(seed * 31 + 7);
  std::uniform_int_distribution<int> mag(2, 3);
  std::bernoulli_distribution sign(0.5);
  std::vector<WindowDescriptor> base;
  for (int i = 0; i < cfg.n_clean + cfg.n_noisy; ++i) {
    const auto& o = pool.objects[i];
    if (i < cfg.n_clean) {
      base.push_back(root_window(pool, o, R));
      continue;
    }
    const FeatureGrid& g = pool.grids[o.image];
    Cell c = o.placement[0] + Cell{sign(rng) ? mag(rng) : -mag(rng), sign(rng) ? mag(rng) : -mag(rng)};
    c.x = std::clamp(c.x, 0, g.cols() - R);
    c.y = std::clamp(c.y, 0, g.rows() - R);
    base.push_back(extract_window(g, c, R, R));
  }
  std::vector<WindowDescriptor> doubled = base;
  doubled.insert(doubled.end(), base.begin(), base.end());

  TrainConfig tc = cfg.train;
  tc.seed = seed;
  RegularizationOutcome out;
  out.seed = seed;
  auto train_eval = [&](const std::vector<WindowDescriptor>& pos, double C, double* objective) {
    const auto t = train_template(pos, negs, C, tc);
    if (objective) *objective = t.log.objective_history.empty() ? 0.0 : t.log.objective_history.back();
    return detection_ap(MixtureModel{{t.model}}, test, 0.5);
  };
  out.ap_fixed_base = train_eval(base, cfg.fixed_C, nullptr);
  out.ap_fixed_doubled = train_eval(doubled, cfg.fixed_C, nullptr);

  // Base solution's objective on both positive sets, against a fixed sample
  // of negative windows.
  {
    const auto nw = sample_negative_windows(negs, R, 10, seed + 3);
    const LinearResult lin = train_linear(base, nw, cfg.fixed_C, tc);
    SvmData b, dd;
    for (const auto& w : base) b.add(to_double(w), 1);
    for (const auto& w : doubled) dd.add(to_double(w), 1);
    for (const auto& w : nw) {
      b.add(to_double(w), -1);
      dd.add(to_double(w), -1);
    }
    const double ob = hinge_objective(b, lin.model.filter.weights, lin.model.bias, cfg.fixed_C);
    const double od = hinge_objective(dd, lin.model.filter.weights, lin.model.bias, cfg.fixed_C);
    out.objective_ratio = od / ob;
  }

  const auto cv_negs = sample_negative_windows(negs, R, 10, seed + 17);
  std::vector<double> grid = cfg.C_grid;
  if (grid.empty()) {
    const double lo = default_C_grid(base.front().values.size()).front();
    for (int k = 0; k < 22; ++k) grid.push_back(std::ldexp(lo, k));
  }
  out.C_cv_base = cross_validate_C(base, cv_negs, grid, cfg.folds, seed, tc).best_C;
  out.C_cv_doubled = cross_validate_C(doubled, cv_negs, grid, cfg.folds, seed, tc).best_C;
  out.ap_cv_base = train_eval(base, out.C_cv_base, nullptr);
  out.ap_cv_doubled = train_eval(doubled, out.C_cv_doubled, nullptr);
  return out;
}

}  // namespace partmix
