#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "partmix/data_io.hpp"
#include "partmix/error.hpp"
#include "testing.hpp"

using namespace partmix;
using partmix::testing::Rng;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("partmix_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool contains(const std::string& s, const std::string& what) { return s.find(what) != std::string::npos; }

std::string error_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("pgm and ppm") {
  TempDir dir("img");
  Image img(5, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = float(i * 17 % 256);
  write_pgm(dir.path / "a.pgm", img);
  CHECK(read_image(dir.path / "a.pgm").pixels == img.pixels);

  write_file_atomic(dir.path / "b.pgm", "P2\n# comment\n2 2\n15\n0 15\n5 10\n");
  CHECK(read_image(dir.path / "b.pgm").pixels == std::vector<float>{0, 255, 85, 170});

  std::string ppm = "P6 1 1 255\n";
  ppm += std::string{char(200), char(100), char(50)};
  write_file_atomic(dir.path / "c.ppm", ppm);
  CHECK(read_image(dir.path / "c.ppm").pixels[0] ==
        doctest::Approx(0.299 * 200 + 0.587 * 100 + 0.114 * 50).epsilon(1e-6));

  write_file_atomic(dir.path / "d.pgm", "P5 4 4 255\nab");
  CHECK_THROWS_AS(read_image(dir.path / "d.pgm"), ParseError);
  write_file_atomic(dir.path / "e.pgm", "P5 1 1 65535\nab");
  CHECK_THROWS_AS(read_image(dir.path / "e.pgm"), ParseError);
  CHECK_THROWS_AS(read_image(dir.path / "missing.pgm"), IoError);
}

TEST_CASE("feature grid binary") {
  Rng rng(1);
  FeatureGrid g = testing::random_grid(rng, 4, 7, 3, false);
  const std::string bytes = encode_feature_grid(g);
  CHECK(bytes.size() == 16 + 4 * 4 * 7 * 3);
  CHECK(bytes[0] == 4);
  CHECK(bytes[4] == 7);
  CHECK(bytes[12] == 8);
  CHECK(decode_feature_grid(bytes) == g);
  CHECK_THROWS_AS(decode_feature_grid(bytes.substr(0, bytes.size() - 1)), ParseError);
  CHECK_THROWS_AS(decode_feature_grid("abc"), ParseError);
}

TEST_CASE("model json round trip") {
  Rng rng(6);
  MixtureModel mix;
  for (int k = 0; k < 3; ++k) {
    Template t;
    t.filter = testing::random_filter(rng, 3, 2, 4, false);
    t.bias = -0.123456789123 * k;
    t.mixture_id = k;
    if (k) t.platt = PlattParams{-1.7 - k, 0.3};
    mix.templates.push_back(t);
  }
  StarModel star = testing::random_star(rng, {3, 3, 2, 4, 3, false});
  star.variant = ModelVariant::edpm;
  star.exemplars = testing::random_exemplars(rng, 5, 3, 3);
  star.bias = 0.987654321987;
  star.platt = PlattParams{-2.5, 0.1};
  const ModelMetadata meta{4, 100, 0.02, 99};

  const auto m2 = model_from_json(model_to_json(mix, meta));
  const auto s2 = model_from_json(model_to_json(star, meta));
  CHECK(m2.metadata == meta);
  const auto& mix2 = std::get<MixtureModel>(m2.model);
  const auto& star2 = std::get<StarModel>(s2.model);
  CHECK(star2.exemplars == star.exemplars);
  CHECK(star2.variant == ModelVariant::edpm);
  for (int trial = 0; trial < 10; ++trial) {
    const FeatureGrid g = testing::random_grid(rng, 10, 11, 4, false);
    const auto a = score_model(star, g), b = score_model(star2, g);
    for (std::size_t k = 0; k < a.score.size(); ++k)
      if (std::isfinite(a.score[k])) CHECK(std::abs(a.score[k] + star.bias - b.score[k] - star2.bias) <= 1e-8);
    const auto w = extract_window(g, {trial % 5, 2}, 3, 2);
    CHECK(std::abs(mix.score(w) - mix2.score(w)) <= 1e-8);
  }

  TempDir dir("model");
  save_model(dir.path / "m.json", star, meta);
  CHECK(std::get<StarModel>(load_model(dir.path / "m.json").model).exemplars == star.exemplars);
  const std::string text = read_file(dir.path / "m.json");
  write_file_atomic(dir.path / "t.json", text.substr(0, text.size() / 2));
  CHECK_THROWS_AS(load_model(dir.path / "t.json"), ParseError);

  auto j = nlohmann::json::parse(text);
  j["type"] = "cascade";
  const std::string unknown = error_of([&] { model_from_json(j.dump()); });
  CHECK(contains(unknown, "mixture, dpm, epm, edpm"));
  j["type"] = "dpm";
  j["schema_version"] = 7;
  const std::string version = error_of([&] { model_from_json(j.dump()); });
  CHECK(contains(version, "7"));
  CHECK(contains(version, "1"));
}

TEST_CASE("synthetic dataset save and load") {
  SynthConfig cfg;
  cfg.n_images = 6;
  cfg.n_negative_images = 2;
  const auto ds = generate(cfg);
  TempDir dir("ds");
  const fs::path mp = write_synth_dataset(dir.path, ds, "train", false);
  const Dataset loaded = load_dataset(mp);
  REQUIRE(loaded.manifest.entries.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(loaded.is_grid(i));
    CHECK(loaded.grid(i) == ds.grids[i]);
  }
  REQUIRE(loaded.ground_truth.size() == ds.gt.size());
  for (std::size_t i = 0; i < ds.gt.size(); ++i) {
    CHECK(loaded.ground_truth[i].image_id == ds.gt[i].image_id);
    REQUIRE(loaded.ground_truth[i].boxes.size() == ds.gt[i].boxes.size());
    for (std::size_t b = 0; b < ds.gt[i].boxes.size(); ++b)
      CHECK(loaded.ground_truth[i].boxes[b].box == ds.gt[i].boxes[b].box);
  }
  CHECK(manifest_from_json(manifest_to_json(loaded.manifest)) == loaded.manifest);
  CHECK(nlohmann::json::parse(read_file(dir.path / "placements.json")).size() == 6);

  SUBCASE("raster") {
    SynthConfig rc = cfg;
    rc.raster = true;
    rc.image_size = 8;
    const auto rds = generate(rc);
    TempDir rdir("rds");
    const Dataset r = load_dataset(write_synth_dataset(rdir.path, rds, "test", true));
    CHECK(!r.is_grid(0));
    CHECK(r.image(3).width == 80);
  }
  SUBCASE("dangling annotation") {
    auto gt = ds.gt;
    gt[2].image_id = "ghost42";
    const std::string text = ground_truth_to_json(gt);
    write_file_atomic(dir.path / "gt.json", text);
    auto m = loaded.manifest;
    m.annotation_crc32 = crc32_of(text);
    write_file_atomic(mp, manifest_to_json(m));
    const std::string err = error_of([&] { load_dataset(mp); });
    CHECK(contains(err, "ghost42"));
  }
  SUBCASE("checksum mismatch and missing file") {
    write_feature_grid(dir.path / loaded.manifest.entries[1].path, FeatureGrid(1, 1, 1));
    fs::remove(dir.path / loaded.manifest.entries[4].path);
    const std::string err = error_of([&] { load_dataset(mp); });
    CHECK(contains(err, "checksum mismatch"));
    CHECK(contains(err, "missing file"));
  }
}

TEST_CASE("empty dataset") {
  TempDir dir("empty");
  write_file_atomic(dir.path / "manifest.json", manifest_to_json({}));
  const Dataset ds = load_dataset(dir.path / "manifest.json");
  CHECK(ds.manifest.entries.empty());
  CHECK(ds.ground_truth.empty());
}
