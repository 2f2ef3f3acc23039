#include "partmix/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "partmix/error.hpp"
#include "partmix/eval.hpp"

namespace partmix {

namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

// Best bias for fixed margins m_i = w.x_i. The weighted hinge sum is
// piecewise linear in b; returns the point of the optimal interval nearest
// to `hint`.
double optimal_bias(const std::vector<double>& m, const std::vector<int>& y, const std::vector<double>& wt,
                    double hint) {
  std::vector<std::pair<double, double>> kinks(m.size());
  double slope = 0.0;  // in units of C, left of every kink
  for (std::size_t i = 0; i < m.size(); ++i) {
    kinks[i] = {y[i] - m[i], wt[i]};
    if (y[i] > 0) slope -= wt[i];
  }
  std::sort(kinks.begin(), kinks.end());
  for (std::size_t k = 0; k < kinks.size(); ++k) {
    slope += kinks[k].second;
    if (slope >= 0) {
      const double lo = kinks[k].first;
      const double hi = slope == 0 && k + 1 < kinks.size() ? kinks[k + 1].first : lo;
      return std::clamp(hint, lo, hi);
    }
  }
  return hint;  // unreachable with both classes present
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw DataError(std::string(what) + ": non-finite feature value");
}

// Distinct random indices in [0, n), at most `count`, in draw order.
std::vector<std::size_t> sample_indices(std::mt19937_64& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  count = std::min(count, n);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

std::vector<double> window_features(const FeatureGrid& g, Cell o, int h, int w) {
  std::vector<double> out;
  out.reserve(std::size_t(h) * w * g.dim());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto cell = g.cell(o.y + r, o.x + c);
      out.insert(out.end(), cell.begin(), cell.end());
    }
  return out;
}

struct NegCandidate {
  long key = 0;
  double score = 0.0;
  std::vector<double> feature;
};

struct NegScan {
  std::vector<NegCandidate> top;  // margin violators, best first, at most cap
  double hinge_sum = 0.0;         // sum over every location of max(0, 1 + score)
};

// Keeps the `cap` highest-scoring violators, ties by smaller key.
struct TopK {
  std::size_t cap;
  std::vector<std::pair<double, long>> items;
  void offer(double score, long key) {
    if (score <= -1.0) return;
    items.emplace_back(score, key);
  }
  std::vector<std::pair<double, long>> take() {
    auto better = [](const auto& a, const auto& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    };
    if (items.size() > cap) {
      std::partial_sort(items.begin(), items.begin() + cap, items.end(), better);
      items.resize(cap);
    } else {
      std::sort(items.begin(), items.end(), better);
    }
    return items;
  }
};

using Scanner = std::function<NegScan(const std::vector<double>& w, double b, std::size_t image)>;
using Sampler =
    std::function<std::vector<NegCandidate>(std::size_t image, std::mt19937_64& rng, int count)>;
using Projector = std::function<int(std::vector<double>& w)>;

MinedTraining train_mined(const SvmData& pos, std::size_t n_images, const Scanner& scan,
                          const Sampler& sample, const Projector& project, double C,
                          const TrainConfig& cfg, int* projected) {
  if (pos.size() == 0) throw ValidationError("training: no positive examples");
  if (n_images == 0) throw ValidationError("training: no negative images");

  SvmData data = pos;
  data.weight.resize(data.size(), 1.0);
  std::map<std::pair<std::size_t, long>, std::size_t> cached;  // -> row in data
  auto put = [&](std::size_t image, const NegCandidate& c) {
    const auto key = std::make_pair(image, c.key);
    const auto it = cached.find(key);
    if (it != cached.end()) {
      std::copy(c.feature.begin(), c.feature.end(), data.x.begin() + it->second * data.dim);
      return false;
    }
    cached.emplace(key, data.size());
    data.add(c.feature, -1);
    return true;
  };

  std::mt19937_64 rng(cfg.seed);
  for (std::size_t i = 0; i < n_images; ++i)
    for (const auto& c : sample(i, rng, cfg.neg_per_image_cap)) put(i, c);

  MinedTraining out;
  SvmSolution sol, best;
  double best_f = std::numeric_limits<double>::infinity();
  const int rounds = std::max(cfg.mining_rounds, 1);
  for (int round = 0; round < rounds; ++round) {
    sol = solve_svm(data, C, cfg, round == 0 ? nullptr : &sol);
    const int clamped = project ? project(sol.w) : 0;

    double neg_hinge = 0.0;
    std::vector<NegScan> scans(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
      scans[i] = scan(sol.w, sol.b, i);
      neg_hinge += scans[i].hinge_sum;
    }
    double pos_hinge = 0.0;
    for (std::size_t i = 0; i < pos.size(); ++i)
      pos_hinge += data.weight[i] * std::max(0.0, 1.0 - (dot(sol.w.data(), pos.row(i), pos.dim) + sol.b));
    const double f = 0.5 * dot(sol.w.data(), sol.w.data(), sol.w.size()) + C * (pos_hinge + neg_hinge);

    if (f > best_f) {
      out.converged = true;  // the full objective stopped decreasing
      break;
    }
    best_f = f;
    best = sol;
    if (projected) *projected = clamped;
    out.objective_history.push_back(f);
    out.rounds = round + 1;

    bool added = false;
    for (std::size_t i = 0; i < n_images; ++i)
      for (const auto& c : scans[i].top) added = put(i, c) || added;
    if (!added) {
      out.converged = true;
      break;
    }
  }

  out.w = best.w;
  out.b = best.b;
  out.negatives_cached = cached.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    // Rows past the accepted round's data set still carry valid features.
    const double score = dot(out.w.data(), data.row(i), data.dim) + out.b;
    for (long k = std::lround(data.weight[i]); k > 0; --k) {
      out.train_scores.push_back(score);
      out.train_labels.push_back(data.y[i]);
    }
  }
  return out;
}

Filter filter_from(std::span<const double> w, int h, int wd, int dim) {
  Filter f(h, wd, dim);
  std::copy(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(f.size()), f.weights.begin());
  return f;
}

void check_shapes(std::span<const WindowDescriptor> ws, const WindowDescriptor& ref, const char* what) {
  for (const auto& w : ws)
    if (w.height != ref.height || w.width != ref.width || w.dim != ref.dim)
      throw ValidationError(std::string(what) + ": windows of different shapes");
}

Scanner rigid_scanner(std::span<const FeatureGrid> negs, int h, int wd, int dim, std::size_t cap) {
  return [=](const std::vector<double>& w, double b, std::size_t image) {
    const FeatureGrid& g = negs[image];
    NegScan out;
    if (g.rows() < h || g.cols() < wd) return out;
    const Map2D resp = kernels::correlate(g, filter_from(w, h, wd, dim));
    TopK top{cap, {}};
    for (int y = 0; y < resp.rows; ++y)
      for (int x = 0; x < resp.cols; ++x) {
        const double s = resp.at(y, x) + b;
        out.hinge_sum += std::max(0.0, 1.0 + s);
        top.offer(s, long(y) * resp.cols + x);
      }
    for (const auto& [s, key] : top.take())
      out.top.push_back({key, s, window_features(g, {int(key % resp.cols), int(key / resp.cols)}, h, wd)});
    return out;
  };
}

Sampler rigid_sampler(std::span<const FeatureGrid> negs, int h, int wd) {
  return [=](std::size_t image, std::mt19937_64& rng, int count) {
    const FeatureGrid& g = negs[image];
    std::vector<NegCandidate> out;
    if (g.rows() < h || g.cols() < wd) return out;
    const int cols = g.cols() - wd + 1;
    const std::size_t n = std::size_t(g.rows() - h + 1) * cols;
    for (std::size_t k : sample_indices(rng, n, std::size_t(std::max(count, 0))))
      out.push_back({long(k), 0.0, window_features(g, {int(k % cols), int(k / cols)}, h, wd)});
    return out;
  };
}

}  // namespace

double Template::raw_score(const WindowDescriptor& w) const {
  if (w.height != filter.height || w.width != filter.width || w.dim != filter.dim)
    throw SizeError("Template: window shape does not match the filter");
  double s = 0.0;
  for (std::size_t k = 0; k < w.values.size(); ++k) s += filter.weights[k] * w.values[k];
  return s + bias;
}

double Template::score(const WindowDescriptor& w) const { return calibrate(raw_score(w)); }

double MixtureModel::score(const WindowDescriptor& w) const {
  if (templates.empty()) throw ValidationError("MixtureModel: no templates");
  double best = kNegInf;
  for (const auto& t : templates) best = std::max(best, t.score(w));
  return best;
}

std::vector<double> default_C_grid(std::size_t feature_dim) {
  const double d = static_cast<double>(std::max<std::size_t>(feature_dim, 1));
  return {0.002 / d, 0.02 / d, 0.2 / d, 2.0 / d, 20.0 / d};
}

void SvmData::add(std::span<const double> v, int label, double w) {
  if (dim == 0 && x.empty()) dim = v.size();
  if (v.size() != dim) throw SizeError("SvmData: feature length mismatch");
  if (!(w > 0.0)) throw DomainError("SvmData: row weight must be positive");
  x.insert(x.end(), v.begin(), v.end());
  y.push_back(label);
  weight.resize(y.size() - 1, 1.0);
  weight.push_back(w);
}

double hinge_objective(const SvmData& data, std::span<const double> w, double b, double C) {
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    loss += (i < data.weight.size() ? data.weight[i] : 1.0) *
            std::max(0.0, 1.0 - data.y[i] * (dot(w.data(), data.row(i), data.dim) + b));
  return 0.5 * dot(w.data(), w.data(), w.size()) + C * loss;
}

SvmSolution solve_svm(const SvmData& data, double C, const TrainConfig& cfg, const SvmSolution* warm) {
  if (!(C > 0.0)) throw DomainError("solve_svm: C must be positive");
  const std::size_t n = data.size(), dim = data.dim;
  check_finite(data.x, "solve_svm");
  bool has_pos = false, has_neg = false;
  for (int yi : data.y) (yi > 0 ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) throw ValidationError("solve_svm: need both positive and negative examples");

  std::vector<double> wt(data.weight);
  wt.resize(n, 1.0);
  std::vector<double> upper(n);
  for (std::size_t i = 0; i < n; ++i) upper[i] = C * wt[i];
  std::vector<double> sq(n);
  double rho = 0.0;
  for (std::size_t i = 0; i < n; ++i) rho += sq[i] = dot(data.row(i), data.row(i), dim);
  rho = rho > 0.0 ? 0.1 * rho / static_cast<double>(n) : 1.0;

  SvmSolution sol;
  sol.alpha.assign(n, 0.0);
  sol.w.assign(dim, 0.0);
  double lambda = 0.0, s = 0.0;
  if (warm) {
    for (std::size_t i = 0; i < std::min(n, warm->alpha.size()); ++i)
      sol.alpha[i] = std::clamp(warm->alpha[i], 0.0, upper[i]);
    lambda = warm->b;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (sol.alpha[i] == 0.0) continue;
    const double a = sol.alpha[i] * data.y[i];
    const double* xi = data.row(i);
    for (std::size_t k = 0; k < dim; ++k) sol.w[k] += a * xi[k];
    s += a;
  }

  const double tol = cfg.convergence_tol;
  // One sweep per multiplier update, visiting examples in a seeded
  // permutation that is redrawn every epoch. Variables pinned at a bound
  // with a clearly outward gradient are shrunk away; convergence is only
  // accepted after a full pass.
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), 0);
  std::mt19937_64 perm_rng(0x5eed);
  double shrink_hi = std::numeric_limits<double>::infinity(), shrink_lo = -shrink_hi;
  while (sol.epochs < cfg.max_epochs) {
    ++sol.epochs;
    const bool full = active.size() == n;
    std::shuffle(active.begin(), active.end(), perm_rng);
    double violation = 0.0, pg_max = -std::numeric_limits<double>::infinity(), pg_min = -pg_max;
    std::size_t kept = 0;
    for (std::size_t oi = 0; oi < active.size(); ++oi) {
      const std::size_t i = active[oi];
      const double* xi = data.row(i);
      const int yi = data.y[i];
      const double g = yi * (dot(sol.w.data(), xi, dim) + lambda + rho * s) - 1.0;
      const double a = sol.alpha[i];
      double pg = g;
      if (a <= 0.0) {
        if (g > shrink_hi) continue;
        pg = std::min(g, 0.0);
      } else if (a >= upper[i]) {
        if (g < shrink_lo) continue;
        pg = std::max(g, 0.0);
      }
      active[kept++] = i;
      pg_max = std::max(pg_max, pg);
      pg_min = std::min(pg_min, pg);
      violation = std::max(violation, std::abs(pg));
      if (pg == 0.0) continue;
      const double na = std::clamp(a - g / (sq[i] + rho), 0.0, upper[i]);
      const double delta = (na - a) * yi;
      if (delta == 0.0) continue;
      sol.alpha[i] = na;
      for (std::size_t k = 0; k < dim; ++k) sol.w[k] += delta * xi[k];
      s += delta;
    }
    active.resize(kept);
    if (violation < tol && std::abs(rho * s) < tol) {
      if (full) {
        sol.converged = true;
        break;
      }
      active.resize(n);
      std::iota(active.begin(), active.end(), 0);
      shrink_hi = std::numeric_limits<double>::infinity();
      shrink_lo = -shrink_hi;
    } else {
      shrink_hi = pg_max > 0.0 ? pg_max : std::numeric_limits<double>::infinity();
      shrink_lo = pg_min < 0.0 ? pg_min : -std::numeric_limits<double>::infinity();
    }
    lambda += rho * s;
  }

  std::vector<double> margins(n);
  for (std::size_t i = 0; i < n; ++i) margins[i] = dot(sol.w.data(), data.row(i), dim);
  sol.b = optimal_bias(margins, data.y, wt, lambda);
  sol.objective = hinge_objective(data, sol.w, sol.b, C);
  return sol;
}

namespace {

// Adds windows as rows, identical windows merged into one weighted row.
void add_merged(SvmData& data, std::span<const WindowDescriptor> ws, int label) {
  std::map<std::vector<float>, std::size_t> rows;
  for (const auto& w : ws) {
    const auto [it, fresh] = rows.emplace(w.values, data.size());
    if (fresh) data.add(to_double(w), label);
    else data.weight[it->second] += 1.0;
  }
}

}  // namespace

LinearResult train_linear(std::span<const WindowDescriptor> pos,
                          std::span<const WindowDescriptor> neg, double C, const TrainConfig& cfg) {
  if (pos.empty() || neg.empty())
    throw ValidationError("train_linear: need at least one positive and one negative window");
  check_shapes(pos, pos.front(), "train_linear");
  check_shapes(neg, pos.front(), "train_linear");
  SvmData data;
  add_merged(data, pos, +1);
  add_merged(data, neg, -1);
  const SvmSolution sol = solve_svm(data, C, cfg);
  LinearResult out;
  out.model.filter = filter_from(sol.w, pos.front().height, pos.front().width, pos.front().dim);
  out.model.bias = sol.b;
  out.objective = sol.objective;
  out.converged = sol.converged;
  return out;
}

CvResult cross_validate_C(std::span<const WindowDescriptor> pos,
                          std::span<const WindowDescriptor> neg, std::span<const double> C_grid,
                          int folds, std::uint64_t seed, const TrainConfig& cfg) {
  if (C_grid.empty()) throw ValidationError("cross_validate_C: empty C grid");
  for (double c : C_grid)
    if (!(c > 0.0)) throw ValidationError("cross_validate_C: C values must be positive");
  if (folds < 2) throw ValidationError("cross_validate_C: need at least 2 folds");
  if (pos.size() < 2 || neg.size() < 2)
    throw ValidationError("cross_validate_C: need at least 2 positives and 2 negatives");

  CvResult res;
  // Identical windows form one group: they share a fold and count once when
  // held out, so duplication never leaks across a split or reweights a score.
  struct Groups {
    std::vector<std::size_t> of;  // per window
    std::vector<bool> first;      // first member of its group
    std::size_t count = 0;
  };
  auto group = [](std::span<const WindowDescriptor> ws) {
    std::map<std::vector<float>, std::size_t> index;
    Groups g;
    for (const auto& w : ws) {
      const auto [it, fresh] = index.emplace(w.values, index.size());
      g.of.push_back(it->second);
      g.first.push_back(fresh);
    }
    g.count = index.size();
    return g;
  };
  const Groups pos_groups = group(pos), neg_groups = group(neg);
  if (pos_groups.count < 2 || neg_groups.count < 2)
    throw ValidationError("cross_validate_C: need at least 2 distinct positives and 2 distinct negatives");
  const int usable = static_cast<int>(std::min({std::size_t(folds), pos_groups.count, neg_groups.count}));
  if (usable < folds)
    res.notes.push_back("cross_validate_C: reduced folds from " + std::to_string(folds) + " to " +
                        std::to_string(usable) + " so every fold holds a positive");
  folds = usable;
  res.folds_used = folds;

  std::mt19937_64 rng(seed);
  auto assign = [&](const Groups& g) {
    std::vector<std::size_t> order(g.count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> group_fold(g.count);
    for (std::size_t k = 0; k < g.count; ++k) group_fold[order[k]] = static_cast<int>(k % folds);
    std::vector<int> fold;
    for (std::size_t id : g.of) fold.push_back(group_fold[id]);
    return fold;
  };
  const auto pos_fold = assign(pos_groups);
  const auto neg_fold = assign(neg_groups);

  const std::size_t jobs = C_grid.size() * std::size_t(folds);
  std::vector<double> ap(jobs, 0.0);
  std::vector<std::string> errors(jobs);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t job = 0; job < jobs; ++job) try {
    const double C = C_grid[job / folds];
    const int f = static_cast<int>(job % folds);
    std::vector<WindowDescriptor> tp, tn;
    std::vector<const WindowDescriptor*> held;
    std::vector<int> held_label;
    // Negatives first so score ties rank pessimistically.
    for (std::size_t i = 0; i < neg.size(); ++i)
      if (neg_fold[i] != f) {
        tn.push_back(neg[i]);
      } else if (neg_groups.first[i]) {
        held.push_back(&neg[i]);
        held_label.push_back(-1);
      }
    for (std::size_t i = 0; i < pos.size(); ++i)
      if (pos_fold[i] != f) {
        tp.push_back(pos[i]);
      } else if (pos_groups.first[i]) {
        held.push_back(&pos[i]);
        held_label.push_back(+1);
      }
    const Template t = train_linear(tp, tn, C, cfg).model;
    std::vector<std::pair<double, int>> ranked;
    int n_pos = 0;
    for (std::size_t k = 0; k < held.size(); ++k) {
      ranked.emplace_back(t.raw_score(*held[k]), held_label[k]);
      n_pos += held_label[k] > 0;
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<MatchLabel> labels;
    for (const auto& [s, l] : ranked) labels.push_back(l > 0 ? MatchLabel::tp : MatchLabel::fp);
    ap[job] = average_precision(labels, n_pos);
  } catch (const std::exception& e) {
    errors[job] = e.what();
  }
  for (const auto& e : errors)
    if (!e.empty()) throw ValidationError("cross_validate_C: " + e);

  for (std::size_t c = 0; c < C_grid.size(); ++c) {
    CvRow row{C_grid[c], 0.0, {}};
    for (int f = 0; f < folds; ++f) row.fold_ap.push_back(ap[c * folds + f]);
    row.mean_ap = std::accumulate(row.fold_ap.begin(), row.fold_ap.end(), 0.0) / folds;
    res.table.push_back(std::move(row));
  }
  std::vector<std::size_t> order(C_grid.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return C_grid[a] < C_grid[b]; });
  double best_ap = -1.0;
  for (std::size_t k : order)
    if (res.table[k].mean_ap > best_ap) {
      best_ap = res.table[k].mean_ap;
      res.best_C = C_grid[k];
    }
  return res;
}

PlattFit platt_calibrate(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw SizeError("platt_calibrate: scores/labels length mismatch");
  double n_pos = 0, n_neg = 0;
  double min_pos = std::numeric_limits<double>::infinity(), max_neg = -min_pos;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 0) {
      ++n_pos;
      min_pos = std::min(min_pos, scores[i]);
    } else {
      ++n_neg;
      max_neg = std::max(max_neg, scores[i]);
    }
  }
  if (n_pos == 0 || n_neg == 0) throw ValidationError("platt_calibrate: both classes are required");

  const double hi = (n_pos + 1.0) / (n_pos + 2.0), lo = 1.0 / (n_neg + 2.0);
  std::vector<double> t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i] > 0 ? hi : lo;

  // Negative log-likelihood, written to avoid overflow in exp.
  auto nll = [&](double A, double B) {
    double f = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double z = A * scores[i] + B;
      f += z >= 0 ? t[i] * z + std::log1p(std::exp(-z)) : (t[i] - 1.0) * z + std::log1p(std::exp(z));
    }
    return f;
  };

  PlattFit fit;
  fit.separated = min_pos > max_neg;
  double A = 0.0, B = std::log((n_neg + 1.0) / (n_pos + 1.0));
  double f = nll(A, B);
  const double sigma = 1e-12;
  for (fit.iterations = 0; fit.iterations < 100; ++fit.iterations) {
    double h11 = sigma, h22 = sigma, h21 = 0.0, g1 = 0.0, g2 = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double z = A * scores[i] + B;
      // p = 1/(1+exp(z)), q = 1 - p
      const double p = z >= 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
      const double q = 1.0 - p;
      const double d2 = p * q;
      h11 += scores[i] * scores[i] * d2;
      h22 += d2;
      h21 += scores[i] * d2;
      const double d1 = t[i] - p;
      g1 += scores[i] * d1;
      g2 += d1;
    }
    if (std::abs(g1) < 1e-5 && std::abs(g2) < 1e-5) break;
    const double det = h11 * h22 - h21 * h21;
    const double dA = -(h22 * g1 - h21 * g2) / det;
    const double dB = -(-h21 * g1 + h11 * g2) / det;
    const double gd = g1 * dA + g2 * dB;
    double step = 1.0;
    while (step >= 1e-10) {
      const double nf = nll(A + step * dA, B + step * dB);
      if (nf < f + 1e-4 * step * gd) {
        A += step * dA;
        B += step * dB;
        f = nf;
        break;
      }
      step /= 2.0;
    }
    if (step < 1e-10) break;  // line search failed; keep the current iterate
  }
  constexpr double kLimit = 1e6;
  fit.params = {std::clamp(A, -kLimit, kLimit), std::clamp(B, -kLimit, kLimit)};
  return fit;
}

TemplateTraining train_template(std::span<const WindowDescriptor> pos,
                                std::span<const FeatureGrid> neg_images, double C,
                                const TrainConfig& cfg) {
  if (pos.empty()) throw ValidationError("train_template: no positive windows");
  check_shapes(pos, pos.front(), "train_template");
  const int h = pos.front().height, wd = pos.front().width, dim = pos.front().dim;
  for (const auto& g : neg_images)
    if (g.dim() != dim) throw ValidationError("train_template: negative grid dim mismatch");
  SvmData data;
  add_merged(data, pos, +1);
  const std::size_t cap = std::size_t(std::max(cfg.neg_per_image_cap, 1));
  TemplateTraining out;
  out.log = train_mined(data, neg_images.size(), rigid_scanner(neg_images, h, wd, dim, cap),
                        rigid_sampler(neg_images, h, wd), nullptr, C, cfg, nullptr);
  out.model.filter = filter_from(out.log.w, h, wd, dim);
  out.model.bias = out.log.b;
  return out;
}

MixtureTraining train_mixture(const std::vector<std::vector<WindowDescriptor>>& clusters,
                              std::span<const FeatureGrid> neg_images, const TrainConfig& cfg) {
  MixtureTraining out;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    if (static_cast<int>(clusters[c].size()) < std::max(cfg.min_pos, 1)) {
      out.skipped.push_back(static_cast<int>(c));
      out.notes.push_back("cluster " + std::to_string(c) + " skipped: " +
                          std::to_string(clusters[c].size()) + " positives < min_pos " +
                          std::to_string(cfg.min_pos));
      continue;
    }
    TrainConfig local = cfg;
    local.seed = cfg.seed + 1000003ULL * c;
    auto t = train_template(clusters[c], neg_images, cfg.C, local);
    const PlattFit fit = platt_calibrate(t.log.train_scores, t.log.train_labels);
    if (fit.separated)
      out.notes.push_back("cluster " + std::to_string(c) + ": training scores separable, Platt fit bounded");
    t.model.platt = fit.params;
    t.model.mixture_id = static_cast<int>(c);
    out.model.templates.push_back(std::move(t.model));
    out.logs.push_back(std::move(t.log));
  }
  if (out.model.templates.empty()) throw ValidationError("train_mixture: every cluster was skipped");
  return out;
}

std::vector<double> star_features(const StarModel& model, const FeatureGrid& grid, const Placement& z) {
  if (static_cast<int>(z.size()) != model.num_parts())
    throw ValidationError("star_features: placement arity does not match the model");
  std::vector<double> out = window_features(grid, z[0], model.root.height, model.root.width);
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    const auto& f = model.parts[j].filter;
    const auto w = window_features(grid, z[j + 1], f.height, f.width);
    out.insert(out.end(), w.begin(), w.end());
  }
  for (std::size_t j = 0; j < model.parts.size(); ++j) {
    const Cell d = z[j + 1] - z[0] - model.parts[j].anchor;
    out.push_back(-static_cast<double>(d.x * d.x));
    out.push_back(-static_cast<double>(d.y * d.y));
  }
  return out;
}

namespace {

// Unpacks [root | parts | springs] into `model` (anchors already set).
void unpack_star(std::span<const double> w, double b, StarModel& model) {
  std::size_t k = 0;
  auto fill = [&](Filter& f) {
    std::copy(w.begin() + k, w.begin() + k + f.size(), f.weights.begin());
    k += f.size();
  };
  fill(model.root);
  for (auto& p : model.parts) fill(p.filter);
  for (auto& p : model.parts) {
    p.spring.bx = w[k++];
    p.spring.by = w[k++];
  }
  model.bias = b;
}

}  // namespace

StarTraining train_star_model(std::span<const FeatureGrid> pos_grids,
                              std::span<const AnnotatedExample> examples,
                              std::span<const FeatureGrid> neg_images, const StarShape& shape,
                              double C, const TrainConfig& cfg) {
  if (examples.empty()) throw ValidationError("train_star_model: no annotated examples");
  if (shape.root_rows < 1 || shape.root_cols < 1)
    throw ValidationError("train_star_model: root shape must be positive");
  const std::size_t np = examples.front().placement.size();
  if (np < 1) throw ValidationError("train_star_model: empty placement");
  if (np > 1 && (shape.part_rows < 1 || shape.part_cols < 1))
    throw ValidationError("train_star_model: part shape must be positive");
  const int dim = pos_grids.empty() ? 0 : pos_grids.front().dim();

  std::vector<double> sum_x(np, 0.0), sum_y(np, 0.0);
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    const std::string where = "train_star_model: example " + std::to_string(e);
    if (ex.placement.size() != np) throw ValidationError(where + " has a different number of parts");
    if (ex.grid >= pos_grids.size()) throw ValidationError(where + " references a missing grid");
    const FeatureGrid& g = pos_grids[ex.grid];
    if (g.dim() != dim) throw ValidationError(where + " grid dim mismatch");
    const Cell r = ex.placement[0];
    if (r.x < 0 || r.y < 0 || r.x + shape.root_cols > g.cols() || r.y + shape.root_rows > g.rows())
      throw ValidationError(where + ": root window outside the grid");
    for (std::size_t j = 1; j < np; ++j) {
      const Cell p = ex.placement[j];
      if (p.x < r.x || p.y < r.y || p.x + shape.part_cols > r.x + shape.root_cols ||
          p.y + shape.part_rows > r.y + shape.root_rows)
        throw ValidationError(where + ": part " + std::to_string(j) + " annotation outside its box");
      sum_x[j] += p.x - r.x;
      sum_y[j] += p.y - r.y;
    }
  }

  StarModel model;
  model.variant = ModelVariant::dpm;
  model.root = Filter(shape.root_rows, shape.root_cols, dim);
  const double n = static_cast<double>(examples.size());
  for (std::size_t j = 1; j < np; ++j) {
    DeformablePart p;
    p.filter = Filter(shape.part_rows, shape.part_cols, dim);
    p.anchor = {static_cast<int>(std::lround(sum_x[j] / n)), static_cast<int>(std::lround(sum_y[j] / n))};
    model.parts.push_back(std::move(p));
  }

  SvmData pos;
  for (const auto& ex : examples) pos.add(star_features(model, pos_grids[ex.grid], ex.placement), +1);

  const std::size_t spring_offset = pos.dim - 2 * model.parts.size();
  const std::size_t cap = std::size_t(std::max(cfg.neg_per_image_cap, 1));
  // Root range where every part window at its anchor fits.
  auto root_range = [&](const FeatureGrid& g, int& x0, int& x1, int& y0, int& y1) {
    x0 = 0, y0 = 0, x1 = g.cols() - model.root.width, y1 = g.rows() - model.root.height;
    for (const auto& p : model.parts) {
      x0 = std::max(x0, -p.anchor.x);
      y0 = std::max(y0, -p.anchor.y);
      x1 = std::min(x1, g.cols() - p.filter.width - p.anchor.x);
      y1 = std::min(y1, g.rows() - p.filter.height - p.anchor.y);
    }
  };

  Scanner scan = [&](const std::vector<double>& w, double b, std::size_t image) {
    const FeatureGrid& g = neg_images[image];
    NegScan out;
    if (g.rows() < model.root.height || g.cols() < model.root.width) return out;
    StarModel m = model;
    unpack_star(w, b, m);
    const PartScoreMap map = score_dpm(m, g);
    TopK top{cap, {}};
    for (int y = 0; y < map.rows; ++y)
      for (int x = 0; x < map.cols; ++x) {
        if (map.at(y, x) == kNegInf) continue;
        const double s = map.at(y, x) + b;
        out.hinge_sum += std::max(0.0, 1.0 + s);
        top.offer(s, long(y) * map.cols + x);
      }
    for (const auto& [s, key] : top.take()) {
      const Placement z = map.placement_at(int(key / map.cols), int(key % map.cols));
      out.top.push_back({key, s, star_features(m, g, z)});
    }
    return out;
  };
  Sampler sample = [&](std::size_t image, std::mt19937_64& rng, int count) {
    const FeatureGrid& g = neg_images[image];
    std::vector<NegCandidate> out;
    int x0, x1, y0, y1;
    root_range(g, x0, x1, y0, y1);
    if (x1 < x0 || y1 < y0) return out;
    // Keys index the full root-response raster so they match the scanner's.
    const int map_cols = g.cols() - model.root.width + 1;
    const int cols = x1 - x0 + 1;
    const std::size_t total = std::size_t(y1 - y0 + 1) * cols;
    for (std::size_t k : sample_indices(rng, total, std::size_t(std::max(count, 0)))) {
      const Cell r{x0 + int(k % cols), y0 + int(k / cols)};
      Placement z{r};
      for (const auto& p : model.parts) z.push_back(r + p.anchor);
      out.push_back({long(r.y) * map_cols + r.x, 0.0, star_features(model, g, z)});
    }
    return out;
  };
  Projector project = [&](std::vector<double>& w) {
    int clamped = 0;
    for (std::size_t k = spring_offset; k < w.size(); ++k)
      if (w[k] < cfg.beta_min) {
        w[k] = cfg.beta_min;
        ++clamped;
      }
    return clamped;
  };

  StarTraining out;
  out.log = train_mined(pos, neg_images.size(), scan, sample, project, C, cfg, &out.projected_springs);
  unpack_star(out.log.w, out.log.b, model);
  out.model = std::move(model);
  return out;
}

namespace {

StarModel with_exemplars(const StarModel& star, std::span<const Placement> placements, double q,
                         ModelVariant variant) {
  if (placements.empty()) throw ValidationError("exemplar model: no training placements");
  StarModel out = star;
  out.variant = variant;
  out.exemplars.clear();
  std::map<std::vector<int>, bool> seen;
  for (const auto& z : placements) {
    if (static_cast<int>(z.size()) != star.num_parts())
      throw ValidationError("exemplar model: placement arity does not match the star");
    AnchorSet a = relative_shape(z, q);
    std::vector<int> key;
    for (const Cell& c : a) {
      key.push_back(c.x);
      key.push_back(c.y);
    }
    if (seen.emplace(key, true).second) out.exemplars.push_back(std::move(a));
  }
  return out;
}

}  // namespace

StarModel build_edpm(const StarModel& star, std::span<const Placement> placements, double q) {
  return with_exemplars(star, placements, q, ModelVariant::edpm);
}

StarModel build_epm(const StarModel& star, std::span<const Placement> placements, double q) {
  return with_exemplars(star, placements, q, ModelVariant::epm);
}

}  // namespace partmix
