#include "partmix/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "partmix/error.hpp"

namespace partmix {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index, std::uint64_t tag) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index),
                    std::uint32_t(index >> 32), std::uint32_t(tag)};
  return std::mt19937_64(seq);
}

// Appearance shared by every split of one world.
struct World {
  ShapeLibrary library;
  std::vector<std::vector<float>> body;   // per subcategory: R*R*2 values
  std::vector<float> decoy;               // R*R*2
  std::vector<std::vector<float>> parts;  // per part: pc*pc values
};

World make_world(const SynthConfig& cfg) {
  World w;
  w.library = make_shape_library(cfg);
  auto rng = stream(cfg.world_seed, 0, 2);
  const int R = cfg.root_cells, pc = cfg.part_cells;
  std::bernoulli_distribution bit(0.5);
  w.decoy.assign(std::size_t(R) * R * 2, 0.0f);
  for (int s = 0; s < cfg.n_subcategories; ++s) {
    std::vector<float> b(std::size_t(R) * R * 2);
    for (auto& v : b) v = bit(rng) ? float(cfg.body_amplitude) : 0.0f;
    for (std::size_t k = 0; k < b.size(); ++k) w.decoy[k] += b[k] / float(cfg.n_subcategories);
    w.body.push_back(std::move(b));
  }
  std::uniform_real_distribution<double> level(0.5, 1.0);
  for (int j = 1; j < cfg.parts; ++j) {
    std::vector<float> p(std::size_t(pc) * pc);
    for (auto& v : p) v = float(cfg.part_amplitude * level(rng));
    w.parts.push_back(std::move(p));
  }
  return w;
}

struct Canvas {
  const SynthConfig& cfg;
  FeatureGrid grid;
  Image image;

  explicit Canvas(const SynthConfig& c) : cfg(c) {
    if (cfg.raster) {
      const int px = (cfg.image_size + 2) * cfg.cell_size;
      image = Image(px, px);
    } else {
      grid = FeatureGrid(cfg.image_size, cfg.image_size, cfg.dim(), cfg.cell_size);
    }
  }

  // Oriented bar through the centre of grid cell (r, c).
  void bar(int r, int c, double angle, double intensity) {
    const int cs = cfg.cell_size;
    const double cx = (c + 1.5) * cs, cy = (r + 1.5) * cs;
    const double dx = std::cos(angle), dy = std::sin(angle);
    for (int y = (r + 1) * cs; y < (r + 2) * cs; ++y)
      for (int x = (c + 1) * cs; x < (c + 2) * cs; ++x) {
        const double ox = x + 0.5 - cx, oy = y + 0.5 - cy;
        if (std::abs(-ox * dy + oy * dx) <= 1.0)
          image.at(x, y) = std::min(255.0f, image.at(x, y) + float(255.0 * intensity));
      }
  }

  double body_angle(int channel) const { return channel == 0 ? 0.0 : std::numbers::pi / 2; }
  double part_angle(int j) const { return std::numbers::pi / 4 + j * std::numbers::pi / (2 * cfg.parts); }

  // Body-channel block (2 channels) at root origin.
  void body(Cell o, const std::vector<float>& b) {
    const int R = cfg.root_cells;
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < R; ++c)
        for (int ch = 0; ch < 2; ++ch) {
          const float v = b[(std::size_t(r) * R + c) * 2 + ch];
          if (v == 0.0f) continue;
          if (cfg.raster) bar(o.y + r, o.x + c, body_angle(ch), v);
          else grid.at(o.y + r, o.x + c, ch) += v;
        }
  }

  void part(Cell o, int j, const std::vector<float>& p) {
    const int pc = cfg.part_cells;
    for (int r = 0; r < pc; ++r)
      for (int c = 0; c < pc; ++c) {
        const float v = p[std::size_t(r) * pc + c];
        if (cfg.raster) bar(o.y + r, o.x + c, part_angle(j), v);
        else grid.at(o.y + r, o.x + c, 2 + j) += v;
      }
  }

  void noise(std::mt19937_64& rng) {
    if (cfg.noise_level <= 0.0) return;
    std::uniform_real_distribution<float> u(0.0f, float(cfg.noise_level));
    if (cfg.raster)
      for (auto& v : image.pixels) v = std::min(255.0f, v + 255.0f * u(rng));
    else
      for (auto& v : grid.values()) v += u(rng);
  }
};

bool overlaps(Cell a, int ah, int aw, Cell b, int bh, int bw) {
  return a.x < b.x + bw && b.x < a.x + aw && a.y < b.y + bh && b.y < a.y + ah;
}

struct Rendered {
  FeatureGrid grid;
  Image image;
  std::optional<SynthObject> object;
};

Rendered render(const SynthConfig& cfg, const World& world, std::size_t index, bool positive) {
  auto rng = stream(cfg.seed, index, 1);
  Canvas canvas(cfg);
  const int R = cfg.root_cells, pc = cfg.part_cells, size = cfg.image_size;
  std::uniform_int_distribution<int> root_pos(0, size - R);
  Rendered out;

  Cell root{-1000, -1000};
  if (positive) {
    SynthObject obj;
    obj.shape = world.library.sample(rng);
    obj.subcategory = obj.shape % cfg.n_subcategories;
    root = {root_pos(rng), root_pos(rng)};
    obj.placement.push_back(root);
    std::bernoulli_distribution jitter(cfg.part_jitter), sign(0.5);
    for (int j = 0; j + 1 < cfg.parts; ++j) {
      const Cell anchor = world.library.shapes[obj.shape][j];
      Cell off = anchor;
      for (int attempt = 0; attempt < 10; ++attempt) {
        Cell d{0, 0};
        if (jitter(rng)) d.x = sign(rng) ? 1 : -1;
        if (jitter(rng)) d.y = sign(rng) ? 1 : -1;
        off = anchor + d;
        if (off.x >= 0 && off.y >= 0 && off.x + pc <= R && off.y + pc <= R) break;
        off = anchor;
      }
      obj.placement.push_back(root + off);
    }
    canvas.body(root, world.body[obj.subcategory]);
    for (int j = 0; j + 1 < cfg.parts; ++j) canvas.part(obj.placement[j + 1], j, world.parts[j]);
    const double cs = cfg.cell_size;
    obj.bbox = {(root.x + 1) * cs, (root.y + 1) * cs, R * cs, R * cs};
    out.object = std::move(obj);
  }

  // Clutter alternates lone parts and averaged bodies, kept off the object.
  std::uniform_int_distribution<int> part_pos(0, size - pc);
  for (int k = 0; k < cfg.clutter; ++k) {
    const bool decoy = k % 2 == 1;
    const int h = decoy ? R : pc;
    for (int attempt = 0; attempt < 20; ++attempt) {
      const Cell o = decoy ? Cell{root_pos(rng), root_pos(rng)} : Cell{part_pos(rng), part_pos(rng)};
      if (positive && overlaps(o, h, h, root, R, R)) continue;
      if (decoy) canvas.body(o, world.decoy);
      else if (cfg.parts > 1) {
        const int j = static_cast<int>(rng() % std::uint64_t(cfg.parts - 1));
        canvas.part(o, j, world.parts[j]);
      }
      break;
    }
  }
  canvas.noise(rng);
  if (cfg.raster) {
    out.grid = compute_features(canvas.image, cfg.cell_size);
    out.image = std::move(canvas.image);
  } else {
    out.grid = std::move(canvas.grid);
  }
  return out;
}

}  // namespace

void validate(const SynthConfig& cfg) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("SynthConfig: ") + what);
  };
  need(cfg.n_subcategories >= 1, "n_subcategories must be positive");
  need(cfg.parts >= 1, "parts must be positive");
  need(cfg.shape_tail_exponent > 1.0, "shape_tail_exponent must exceed 1");
  need(cfg.noise_level >= 0.0, "noise_level must be non-negative");
  need(cfg.n_images >= 0 && cfg.n_negative_images >= 0, "image counts must be non-negative");
  need(cfg.n_shapes >= 1, "n_shapes must be positive");
  need(cfg.root_cells >= 1 && cfg.part_cells >= 1, "cell sizes must be positive");
  need(cfg.part_cells <= cfg.root_cells, "part_cells must not exceed root_cells");
  need(cfg.image_size >= cfg.root_cells, "image_size must hold the root box");
  need(cfg.part_jitter >= 0.0 && cfg.part_jitter <= 1.0, "part_jitter must lie in [0, 1]");
  need(cfg.clutter >= 0, "clutter must be non-negative");
  need(cfg.cell_size >= 2, "cell_size must be at least 2");
  need(!cfg.raster || cfg.image_size + 2 >= 3, "raster images need at least 3 cells");
  const double positions = cfg.root_cells - cfg.part_cells + 1;
  need(std::pow(positions * positions, cfg.parts - 1) >= cfg.n_shapes,
       "n_shapes exceeds the number of distinct layouts");
}

int ShapeLibrary::sample(std::mt19937_64& rng) const {
  std::discrete_distribution<int> d(probabilities.begin(), probabilities.end());
  return d(rng);
}

ShapeLibrary make_shape_library(const SynthConfig& cfg) {
  validate(cfg);
  auto rng = stream(cfg.world_seed, 0, 3);
  const int span = cfg.root_cells - cfg.part_cells;
  std::uniform_int_distribution<int> off(0, span);
  ShapeLibrary lib;
  std::map<std::vector<int>, bool> seen;
  while (static_cast<int>(lib.shapes.size()) < cfg.n_shapes) {
    AnchorSet a;
    std::vector<int> key;
    for (int j = 1; j < cfg.parts; ++j) {
      a.push_back({off(rng), off(rng)});
      key.push_back(a.back().x);
      key.push_back(a.back().y);
    }
    if (seen.emplace(key, true).second) lib.shapes.push_back(std::move(a));
  }
  double total = 0.0;
  for (int k = 0; k < cfg.n_shapes; ++k) total += std::pow(k + 1.0, -cfg.shape_tail_exponent);
  for (int k = 0; k < cfg.n_shapes; ++k)
    lib.probabilities.push_back(std::pow(k + 1.0, -cfg.shape_tail_exponent) / total);
  return lib;
}

SynthDataset generate(const SynthConfig& cfg) {
  validate(cfg);
  const World world = make_world(cfg);
  const std::size_t n = std::size_t(cfg.n_images) + cfg.n_negative_images;
  std::vector<Rendered> rendered(n);
  std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) try {
    rendered[i] = render(cfg, world, i, i < std::size_t(cfg.n_images));
  } catch (const std::exception& e) {
    errors[i] = e.what();
  }
  for (const auto& e : errors)
    if (!e.empty()) throw ValidationError("generate: " + e);

  SynthDataset ds;
  ds.library = world.library;
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(id, sizeof id, "img%06zu", i);
    ds.ids.emplace_back(id);
    GroundTruth gt{id, {}};
    if (rendered[i].object) {
      SynthObject obj = std::move(*rendered[i].object);
      obj.image = i;
      gt.boxes.push_back({obj.bbox, false});
      ds.objects.push_back(std::move(obj));
    }
    ds.gt.push_back(std::move(gt));
    ds.grids.push_back(std::move(rendered[i].grid));
    if (cfg.raster) ds.images.push_back(std::move(rendered[i].image));
  }
  return ds;
}

std::vector<ShapeBin> shape_histogram(const std::vector<Placement>& placements, double q) {
  std::map<std::vector<int>, ShapeBin> bins;
  for (const auto& z : placements) {
    if (z.size() != placements.front().size())
      throw ValidationError("shape_histogram: placements disagree in part count");
    AnchorSet a = relative_shape(z, q);
    std::vector<int> key;
    for (const Cell& c : a) {
      key.push_back(c.x);
      key.push_back(c.y);
    }
    auto& bin = bins[key];
    if (bin.count == 0) bin.shape = std::move(a);
    ++bin.count;
  }
  std::vector<ShapeBin> out;
  for (auto& [k, b] : bins) out.push_back(std::move(b));
  std::stable_sort(out.begin(), out.end(), [](const ShapeBin& a, const ShapeBin& b) { return a.count > b.count; });
  return out;
}

}  // namespace partmix
