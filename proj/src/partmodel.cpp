#include "partmix/partmodel.hpp"

#include <algorithm>
#include <cmath>

#include "partmix/error.hpp"

namespace partmix {

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::dpm: return "dpm";
    case ModelVariant::epm: return "epm";
    case ModelVariant::edpm: return "edpm";
  }
  return "unknown";
}

double PlattParams::operator()(double score) const {
  const double t = a * score + b;
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(t));
}

AnchorSet StarModel::dpm_anchors() const {
  AnchorSet a;
  a.reserve(parts.size());
  for (const auto& p : parts) a.push_back(p.anchor);
  return a;
}

std::vector<AnchorSet> StarModel::anchor_sets() const {
  if (variant == ModelVariant::dpm) return {dpm_anchors()};
  return exemplars;
}

Placement PartScoreMap::placement_at(int y, int x) const {
  const std::size_t base = (std::size_t(y) * cols + x) * num_parts;
  return {placement.begin() + base, placement.begin() + base + num_parts};
}

namespace {

inline double quad(double beta, int d) { return beta * static_cast<double>(d * d); }

void check_structure(const StarModel& model) {
  const int dim = model.root.dim;
  if (model.root.height < 1 || model.root.width < 1)
    throw ValidationError("star model: empty root filter");
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    const auto& f = model.parts[j].filter;
    if (f.dim != dim) throw ValidationError("star model: part " + std::to_string(j + 1) + " dim mismatch");
    if (f.height < 1 || f.width < 1)
      throw ValidationError("star model: part " + std::to_string(j + 1) + " empty filter");
  }
  for (std::size_t m = 0; m < model.exemplars.size(); ++m)
    if (model.exemplars[m].size() != model.parts.size())
      throw ValidationError("star model: exemplar " + std::to_string(m) + " has " +
                            std::to_string(model.exemplars[m].size()) + " anchors, expected " +
                            std::to_string(model.parts.size()));
}

PartScoreMap empty_map(const Map2D& root, int num_parts) {
  PartScoreMap out;
  out.rows = root.rows;
  out.cols = root.cols;
  out.num_parts = num_parts;
  const std::size_t n = std::size_t(root.rows) * root.cols;
  out.score.assign(n, kNegInf);
  out.exemplar.assign(n, -1);
  out.placement.assign(n * num_parts, Cell{});
  return out;
}

// Sum of spring costs of z relative to one anchor set.
double deformation(const StarModel& model, const Placement& z, const AnchorSet& anchors) {
  double s = 0.0;
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    const Cell d = z[j + 1] - z[0] - anchors[j];
    const auto& sp = model.parts[j].spring;
    s += -quad(sp.bx, d.x) - quad(sp.by, d.y);
  }
  return s;
}

bool matches_shape(const Placement& z, const AnchorSet& anchors) {
  for (std::size_t j = 0; j < anchors.size(); ++j)
    if (z[j + 1] - z[0] != anchors[j]) return false;
  return true;
}

// Root x-range [lo, hi] for which every shifted lookup stays inside its map,
// or lo > hi. `maps` are indexed like parts.
struct Span1 {
  int lo;
  int hi;
};

Span1 admissible_x(const std::vector<const Map2D*>& maps, const AnchorSet& a, int root_cols) {
  int lo = 0;
  int hi = root_cols - 1;
  for (std::size_t j = 0; j < a.size(); ++j) {
    lo = std::max(lo, -a[j].x);
    hi = std::min(hi, maps[j]->cols - 1 - a[j].x);
  }
  return {lo, hi};
}

bool admissible_y(const std::vector<const Map2D*>& maps, const AnchorSet& a, int y) {
  for (std::size_t j = 0; j < a.size(); ++j) {
    const int py = y + a[j].y;
    if (py < 0 || py >= maps[j]->rows) return false;
  }
  return true;
}

// Max over anchor sets of root(z1) + sum_j maps_j(z1 + a^m_j) + offsets[m].
// Shared by the epm (maps = raw responses) and edpm (maps = messages) paths.
void accumulate_exemplars(const Map2D& root, const std::vector<const Map2D*>& maps,
                          const std::vector<AnchorSet>& sets, const std::vector<double>* offsets,
                          PartScoreMap& out, bool parallel) {
  const int rows = root.rows;
  const int cols = root.cols;
  const int n_sets = static_cast<int>(sets.size());
  std::vector<Span1> xr(n_sets);
  for (int m = 0; m < n_sets; ++m) xr[m] = admissible_x(maps, sets[m], cols);
  const std::size_t n_parts = maps.size();

#pragma omp parallel for schedule(static) if (parallel)
  for (int y = 0; y < rows; ++y) {
    double* best = &out.score[std::size_t(y) * cols];
    int* best_m = &out.exemplar[std::size_t(y) * cols];
    const double* root_row = &root.values[std::size_t(y) * cols];
    std::vector<const double*> rows_j(n_parts);
    for (int m = 0; m < n_sets; ++m) {
      if (xr[m].lo > xr[m].hi || !admissible_y(maps, sets[m], y)) continue;
      const AnchorSet& a = sets[m];
      for (std::size_t j = 0; j < n_parts; ++j)
        rows_j[j] = &maps[j]->values[std::size_t(y + a[j].y) * maps[j]->cols + a[j].x];
      const double off = offsets ? (*offsets)[m] : 0.0;
      for (int x = xr[m].lo; x <= xr[m].hi; ++x) {
        double acc = root_row[x];
        for (std::size_t j = 0; j < n_parts; ++j) acc += rows_j[j][x];
        if (offsets) acc += off;
        if (acc > best[x]) {
          best[x] = acc;
          best_m[x] = m;
        }
      }
    }
  }
}

PartScoreMap score_edpm_impl(const StarModel& model, const FeatureGrid& grid, bool parallel) {
  check_structure(model);
  if (model.exemplars.empty()) throw ValidationError("score_edpm: model has no exemplar anchor sets");
  const auto resp = parallel ? part_responses(model, grid)
                             : kernels::reference::part_responses(model, grid);
  const int np = model.num_parts();
  PartScoreMap out = empty_map(resp[0], np);

  // One message per part, independent of the number of exemplars.
  std::vector<DistanceTransform> msgs;
  msgs.reserve(model.parts.size());
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    const auto& sp = model.parts[j].spring;
    msgs.push_back(parallel ? kernels::dt_2d(resp[j + 1], sp.bx, sp.by)
                            : kernels::reference::dt_2d(resp[j + 1], sp.bx, sp.by));
    ++out.distance_transforms;
  }
  std::vector<const Map2D*> maps;
  for (const auto& m : msgs) maps.push_back(&m.values);
  accumulate_exemplars(resp[0], maps, model.exemplars, nullptr, out, parallel);

  for (int y = 0; y < out.rows; ++y)
    for (int x = 0; x < out.cols; ++x) {
      const std::size_t i = std::size_t(y) * out.cols + x;
      if (out.exemplar[i] < 0) continue;
      const AnchorSet& a = model.exemplars[out.exemplar[i]];
      Cell* z = &out.placement[i * np];
      z[0] = {x, y};
      for (std::size_t j = 0; j < a.size(); ++j) {
        const Cell p = Cell{x, y} + a[j];
        z[j + 1] = msgs[j].arg(p.y, p.x);
      }
    }
  return out;
}

}  // namespace

void validate(const StarModel& model, double beta_min) {
  check_structure(model);
  if (model.variant != ModelVariant::epm)
    for (std::size_t j = 0; j < model.parts.size(); ++j) {
      const auto& s = model.parts[j].spring;
      if (!(s.bx >= beta_min) || !(s.by >= beta_min))
        throw ValidationError("star model: spring of part " + std::to_string(j + 1) +
                              " below beta_min");
    }
  if (model.variant != ModelVariant::dpm && model.exemplars.empty())
    throw ValidationError("star model: " + to_string(model.variant) + " needs exemplar anchor sets");
  for (const auto& f : model.root.weights)
    if (!std::isfinite(f)) throw ValidationError("star model: non-finite root weight");
  for (const auto& p : model.parts)
    for (const auto& f : p.filter.weights)
      if (!std::isfinite(f)) throw ValidationError("star model: non-finite part weight");
}

BestConfiguration best_of(const PartScoreMap& map) {
  BestConfiguration best;
  for (int y = 0; y < map.rows; ++y)
    for (int x = 0; x < map.cols; ++x)
      if (map.at(y, x) > best.score) {
        best.score = map.at(y, x);
        best.exemplar = map.exemplar_at(y, x);
        best.placement = map.placement_at(y, x);
      }
  return best;
}

std::vector<Map2D> part_responses(const StarModel& model, const FeatureGrid& grid) {
  check_structure(model);
  std::vector<Map2D> out;
  out.reserve(model.parts.size() + 1);
  out.push_back(kernels::correlate(grid, model.root));
  for (const auto& p : model.parts) out.push_back(kernels::correlate(grid, p.filter));
  return out;
}

std::vector<Map2D> kernels::reference::part_responses(const StarModel& model,
                                                      const FeatureGrid& grid) {
  check_structure(model);
  std::vector<Map2D> out;
  out.reserve(model.parts.size() + 1);
  out.push_back(kernels::reference::correlate(grid, model.root));
  for (const auto& p : model.parts) out.push_back(kernels::reference::correlate(grid, p.filter));
  return out;
}

PartScoreMap score_dpm(const StarModel& model, const FeatureGrid& grid) {
  check_structure(model);
  const auto resp = part_responses(model, grid);
  const int np = model.num_parts();
  PartScoreMap out = empty_map(resp[0], np);
  std::vector<DistanceTransform> msgs;
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    const auto& sp = model.parts[j].spring;
    msgs.push_back(kernels::dt_2d(resp[j + 1], sp.bx, sp.by));
    ++out.distance_transforms;
  }
  for (int y = 0; y < out.rows; ++y)
    for (int x = 0; x < out.cols; ++x) {
      const Cell z1{x, y};
      double acc = resp[0].at(y, x);
      bool ok = true;
      for (std::size_t j = 0; j < model.parts.size() && ok; ++j) {
        const Cell p = z1 + model.parts[j].anchor;
        if (!msgs[j].values.contains(p)) ok = false;
        else acc += msgs[j].values.at(p.y, p.x);
      }
      if (!ok) continue;
      const std::size_t i = std::size_t(y) * out.cols + x;
      out.score[i] = acc;
      out.exemplar[i] = 0;
      Cell* z = &out.placement[i * np];
      z[0] = z1;
      for (std::size_t j = 0; j < model.parts.size(); ++j) {
        const Cell p = z1 + model.parts[j].anchor;
        z[j + 1] = msgs[j].arg(p.y, p.x);
      }
    }
  return out;
}

PartScoreMap score_epm(const StarModel& model, const FeatureGrid& grid) {
  check_structure(model);
  if (model.exemplars.empty()) throw ValidationError("score_epm: empty exemplar shape set");
  const auto resp = part_responses(model, grid);
  const int np = model.num_parts();
  PartScoreMap out = empty_map(resp[0], np);

  // Each exemplar shape is scored by the dpm springs around the dpm anchors.
  const AnchorSet dpm = model.dpm_anchors();
  std::vector<double> shape_bias;
  shape_bias.reserve(model.exemplars.size());
  for (const auto& a : model.exemplars) {
    Placement z{Cell{0, 0}};
    z.insert(z.end(), a.begin(), a.end());
    shape_bias.push_back(deformation(model, z, dpm));
  }
  std::vector<const Map2D*> maps;
  for (std::size_t j = 1; j < resp.size(); ++j) maps.push_back(&resp[j]);
  accumulate_exemplars(resp[0], maps, model.exemplars, &shape_bias, out, true);

  for (int y = 0; y < out.rows; ++y)
    for (int x = 0; x < out.cols; ++x) {
      const std::size_t i = std::size_t(y) * out.cols + x;
      if (out.exemplar[i] < 0) continue;
      const AnchorSet& a = model.exemplars[out.exemplar[i]];
      Cell* z = &out.placement[i * np];
      z[0] = {x, y};
      for (std::size_t j = 0; j < a.size(); ++j) z[j + 1] = Cell{x, y} + a[j];
    }
  return out;
}

PartScoreMap score_edpm(const StarModel& model, const FeatureGrid& grid) {
  return score_edpm_impl(model, grid, true);
}

PartScoreMap kernels::reference::score_edpm(const StarModel& model, const FeatureGrid& grid) {
  return score_edpm_impl(model, grid, false);
}

PartScoreMap score_model(const StarModel& model, const FeatureGrid& grid) {
  switch (model.variant) {
    case ModelVariant::dpm: return score_dpm(model, grid);
    case ModelVariant::epm: return score_epm(model, grid);
    case ModelVariant::edpm: return score_edpm(model, grid);
  }
  throw ValidationError("score_model: unknown variant");
}

double shape_score(const StarModel& model, const Placement& z) {
  if (static_cast<int>(z.size()) != model.num_parts())
    throw ValidationError("shape_score: placement has " + std::to_string(z.size()) +
                          " parts, model has " + std::to_string(model.num_parts()));
  switch (model.variant) {
    case ModelVariant::dpm: return deformation(model, z, model.dpm_anchors());
    case ModelVariant::edpm: {
      double best = kNegInf;
      for (const auto& a : model.exemplars) best = std::max(best, deformation(model, z, a));
      return best;
    }
    case ModelVariant::epm:
      for (const auto& a : model.exemplars)
        if (matches_shape(z, a)) return deformation(model, z, model.dpm_anchors());
      return kNegInf;
  }
  return kNegInf;
}

double configuration_score(const StarModel& model, const FeatureGrid& grid, const Placement& z) {
  check_structure(model);
  if (static_cast<int>(z.size()) != model.num_parts())
    throw ValidationError("configuration_score: placement arity mismatch");
  auto fits = [&](const Filter& f, Cell p) {
    return p.x >= 0 && p.y >= 0 && p.x + f.width <= grid.cols() && p.y + f.height <= grid.rows();
  };
  if (!fits(model.root, z[0])) return kNegInf;
  double s = window_dot(grid, model.root, z[0]);
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    if (!fits(model.parts[j].filter, z[j + 1])) return kNegInf;
    s += window_dot(grid, model.parts[j].filter, z[j + 1]);
  }
  return s + shape_score(model, z);
}

AnchorSet relative_shape(const Placement& z, double q) {
  if (z.empty()) throw ValidationError("relative_shape: empty placement");
  AnchorSet a;
  a.reserve(z.size() - 1);
  auto snap = [q](int v) {
    return q <= 1.0 ? v : static_cast<int>(std::lround(q * std::round(v / q)));
  };
  for (std::size_t j = 1; j < z.size(); ++j) {
    const Cell d = z[j] - z[0];
    a.push_back({snap(d.x), snap(d.y)});
  }
  return a;
}

SynthesizedTemplate synthesize_template(const StarModel& model, const Placement& z) {
  check_structure(model);
  if (static_cast<int>(z.size()) != model.num_parts())
    throw ValidationError("synthesize_template: placement arity mismatch");
  std::vector<const Filter*> filters{&model.root};
  for (const auto& p : model.parts) filters.push_back(&p.filter);

  Cell lo = z[0];
  Cell hi = z[0] + Cell{model.root.width, model.root.height};
  for (std::size_t i = 1; i < filters.size(); ++i) {
    lo = {std::min(lo.x, z[i].x), std::min(lo.y, z[i].y)};
    hi = {std::max(hi.x, z[i].x + filters[i]->width), std::max(hi.y, z[i].y + filters[i]->height)};
  }
  SynthesizedTemplate t;
  t.origin = lo;
  t.filter = Filter(hi.y - lo.y, hi.x - lo.x, model.root.dim);
  for (std::size_t i = 0; i < filters.size(); ++i) {
    const Filter& f = *filters[i];
    const Cell off = z[i] - lo;
    for (int r = 0; r < f.height; ++r)
      for (int c = 0; c < f.width; ++c)
        for (int d = 0; d < f.dim; ++d) t.filter.at(off.y + r, off.x + c, d) += f.at(r, c, d);
  }
  t.bias = shape_score(model, z);
  return t;
}

BestConfiguration score_bruteforce(const StarModel& model, const FeatureGrid& grid,
                                   double max_configurations) {
  check_structure(model);
  std::vector<const Filter*> filters{&model.root};
  for (const auto& p : model.parts) filters.push_back(&p.filter);
  std::vector<Cell> extent;  // number of valid origins per axis
  for (const Filter* f : filters) {
    if (f->height > grid.rows() || f->width > grid.cols() || f->dim != grid.dim())
      throw SizeError("score_bruteforce: filter does not fit grid");
    extent.push_back({grid.cols() - f->width + 1, grid.rows() - f->height + 1});
  }
  const std::vector<AnchorSet> sets = model.anchor_sets();
  if (sets.empty()) throw ValidationError("score_bruteforce: no anchor sets");
  double count = static_cast<double>(model.variant == ModelVariant::edpm ? sets.size() : 1);
  for (const Cell& e : extent) count *= static_cast<double>(e.x) * e.y;
  if (count > max_configurations)
    throw DomainError("score_bruteforce: " + std::to_string(count) +
                      " configurations exceed the oracle guard");

  // Appearance of every filter at every origin, computed window by window.
  std::vector<Map2D> app;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    Map2D m(extent[i].y, extent[i].x);
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) m.at(y, x) = window_dot(grid, *filters[i], {x, y});
    app.push_back(std::move(m));
  }
  const std::size_t np = filters.size();
  auto anchors_fit = [&](Cell z1, const AnchorSet& a) {
    for (std::size_t j = 0; j < a.size(); ++j)
      if (!app[j + 1].contains(z1 + a[j])) return false;
    return true;
  };

  BestConfiguration best;
  Placement z(np);
  // Odometer over part origins; part 1 most significant, each in raster order.
  auto for_each_parts = [&](auto&& visit) {
    std::vector<int> idx(np, 0);
    for (;;) {
      for (std::size_t j = 1; j < np; ++j) z[j] = {idx[j] % extent[j].x, idx[j] / extent[j].x};
      visit();
      std::size_t j = np - 1;
      while (j >= 1) {
        if (++idx[j] < extent[j].x * extent[j].y) break;
        idx[j] = 0;
        --j;
      }
      if (j == 0) return;
    }
  };

  for (int y1 = 0; y1 < extent[0].y; ++y1)
    for (int x1 = 0; x1 < extent[0].x; ++x1) {
      z[0] = {x1, y1};
      if (model.variant == ModelVariant::epm) {
        for_each_parts([&] {
          const double shape = shape_score(model, z);
          if (shape == kNegInf) return;
          double acc = app[0].at(y1, x1);
          for (std::size_t j = 1; j < np; ++j) acc += app[j].at(z[j].y, z[j].x);
          acc += shape;
          if (acc > best.score) {
            best.score = acc;
            best.placement = z;
            best.exemplar = -1;
            for (std::size_t m = 0; m < sets.size(); ++m)
              if (matches_shape(z, sets[m])) {
                best.exemplar = static_cast<int>(m);
                break;
              }
          }
        });
        continue;
      }
      for (std::size_t m = 0; m < sets.size(); ++m) {
        const AnchorSet& a = sets[m];
        if (!anchors_fit(z[0], a)) continue;
        for_each_parts([&] {
          double acc = app[0].at(y1, x1);
          for (std::size_t j = 1; j < np; ++j) {
            const Cell d = z[j] - (z[0] + a[j - 1]);
            const auto& sp = model.parts[j - 1].spring;
            acc += app[j].at(z[j].y, z[j].x) - quad(sp.bx, d.x) - quad(sp.by, d.y);
          }
          if (acc > best.score) {
            best.score = acc;
            best.placement = z;
            best.exemplar = static_cast<int>(m);
          }
        });
      }
    }
  return best;
}

}  // namespace partmix
