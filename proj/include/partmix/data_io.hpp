#pragma once

// Image and feature-grid files, model and annotation JSON, dataset
// manifests. Every writer goes through a temporary file and a rename.

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "partmix/eval.hpp"
#include "partmix/features.hpp"
#include "partmix/partmodel.hpp"
#include "partmix/synthdata.hpp"
#include "partmix/train.hpp"

namespace partmix {

namespace fs = std::filesystem;

inline constexpr int kSchemaVersion = 1;

// Replaces `path` with `bytes` atomically (IoError on failure).
void write_file_atomic(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);
std::uint32_t crc32_of(const std::string& bytes);

// Binary P5/P6 and ASCII P2/P3, maxval <= 255; colour is converted to luma.
Image read_image(const fs::path& path);
// 8-bit P5; intensities rounded and clamped to [0, 255].
void write_pgm(const fs::path& path, const Image& image);

// Header rows, cols, dim, cell_size as little-endian u32, then row-major
// float32 values.
std::string encode_feature_grid(const FeatureGrid& grid);
FeatureGrid decode_feature_grid(const std::string& bytes);
void write_feature_grid(const fs::path& path, const FeatureGrid& grid);
FeatureGrid read_feature_grid(const fs::path& path);

struct ModelMetadata {
  int K = 0;
  int N = 0;
  double C = 0.0;
  std::uint64_t seed = 0;
  bool operator==(const ModelMetadata&) const = default;
};

using AnyModel = std::variant<MixtureModel, StarModel>;

struct SavedModel {
  AnyModel model;
  ModelMetadata metadata;
};

// Reals are written with 9 significant digits.
std::string model_to_json(const AnyModel& model, const ModelMetadata& meta = {});
// ParseError on malformed JSON or a version / type tag this build does not know.
SavedModel model_from_json(const std::string& text);
void save_model(const fs::path& path, const AnyModel& model, const ModelMetadata& meta = {});
SavedModel load_model(const fs::path& path);

std::string ground_truth_to_json(const std::vector<GroundTruth>& gt);
std::vector<GroundTruth> ground_truth_from_json(const std::string& text);

std::string objects_to_json(const SynthDataset& ds);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest
  int width = 0;     // pixels for images, cells for feature grids
  int height = 0;
  std::string split;  // "train" or "test"
  std::uint32_t crc32 = 0;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string annotation_path;
  std::uint32_t annotation_crc32 = 0;
  bool operator==(const DatasetManifest&) const = default;
};

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

struct Dataset {
  fs::path root;
  DatasetManifest manifest;
  std::vector<GroundTruth> ground_truth;  // one entry per annotated image

  // Lazy loaders by entry index.
  Image image(std::size_t i) const;
  FeatureGrid grid(std::size_t i) const;
  bool is_grid(std::size_t i) const;
};

// Checks files, checksums, id uniqueness and annotation references; every
// problem found is listed in one ValidationError. Boxes are clipped to their
// image and must keep a positive area.
Dataset load_dataset(const fs::path& manifest_path);

// Writes images (PGM in raster mode, feature grids otherwise), gt.json,
// placements.json and manifest.json under `dir`. Returns the manifest path.
fs::path write_synth_dataset(const fs::path& dir, const SynthDataset& ds, const std::string& split,
                             bool raster);

}  // namespace partmix
