#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "partmix/error.hpp"
#include "partmix/train.hpp"
#include "testing.hpp"

using namespace partmix;
using partmix::testing::Rng;

namespace {

// Deterministic 20-point, 3-feature problem; objectives frozen from an
// interior-point QP solve.
SvmData qp_problem() {
  SvmData d;
  for (int i = 0; i < 20; ++i) {
    const std::vector<double> x{((i * 37) % 17) / 8.0 - 1, ((i * 23) % 13) / 6.0 - 1,
                                ((i * 11) % 7) / 3.0 - 1};
    const double margin = x[0] + 0.5 * x[1] - 0.3 - (((i * 5) % 3) - 1) * 0.3;
    d.add(x, margin > 0 ? 1 : -1);
  }
  return d;
}

TrainConfig tight() {
  TrainConfig cfg;
  cfg.convergence_tol = 1e-10;
  cfg.max_epochs = 200000;
  return cfg;
}

WindowDescriptor planted(Rng& rng, int h, int w, int dim, double signal) {
  WindowDescriptor win{h, w, dim, {}};
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int k = 0; k < h * w * dim; ++k) {
    const bool on = (k * 7) % 5 == 0;
    win.values.push_back(static_cast<float>(u(rng) * (1.0 - signal) + (on ? signal : 0.0)));
  }
  return win;
}

std::vector<FeatureGrid> noise_grids(Rng& rng, int n, int rows, int cols, int dim) {
  std::vector<FeatureGrid> out;
  for (int i = 0; i < n; ++i) out.push_back(testing::random_grid(rng, rows, cols, dim, false));
  return out;
}

double platt_nll(std::span<const double> s, std::span<const int> y, double a, double b) {
  double np = 0, nn = 0;
  for (int v : y) (v > 0 ? np : nn) += 1;
  double f = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double t = y[i] > 0 ? (np + 1) / (np + 2) : 1 / (nn + 2);
    const double p = 1 / (1 + std::exp(a * s[i] + b));
    f -= t * std::log(p) + (1 - t) * std::log(1 - p);
  }
  return f;
}

// Coarse-to-fine grid search.
std::pair<double, double> platt_grid(std::span<const double> s, std::span<const int> y) {
  double a0 = 0, b0 = 0, span = 16;
  for (int level = 0; level < 40; ++level) {
    double best = std::numeric_limits<double>::infinity(), ba = a0, bb = b0;
    for (int i = -10; i <= 10; ++i)
      for (int j = -10; j <= 10; ++j) {
        const double a = a0 + span * i / 10, b = b0 + span * j / 10;
        const double f = platt_nll(s, y, a, b);
        if (f < best) best = f, ba = a, bb = b;
      }
    a0 = ba, b0 = bb, span /= 3;
  }
  return {a0, b0};
}

}  // namespace

TEST_CASE("solve_svm: one-dimensional symmetric problem") {
  SvmData d;
  d.add(std::vector<double>{1.0}, 1);
  d.add(std::vector<double>{-1.0}, -1);
  // Both points on the margin: w = 1, b = 0 once C >= 1/2.
  const auto sol = solve_svm(d, 10.0, tight());
  CHECK(sol.converged);
  CHECK(sol.w[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(sol.b) < 1e-9);
  CHECK(sol.objective == doctest::Approx(0.5).epsilon(1e-9));
  // Small C: w = 2C, hinge active on both.
  const auto soft = solve_svm(d, 0.1, tight());
  CHECK(soft.w[0] == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("solve_svm matches the QP optimum") {
  const SvmData d = qp_problem();
  const double frozen[2][2] = {{0.5, 3.8748652068797504}, {10.0, 30.08531746032787}};
  for (const auto& [C, value] : frozen) {
    const auto sol = solve_svm(d, C, tight());
    CHECK(sol.converged);
    CHECK(sol.objective == doctest::Approx(value).epsilon(1e-4));
    CHECK(sol.objective == doctest::Approx(hinge_objective(d, sol.w, sol.b, C)).epsilon(1e-14));
  }
  // A warm start reaches the same optimum.
  const auto cold = solve_svm(d, 0.5, tight());
  const auto warm = solve_svm(d, 0.5, tight(), &cold);
  CHECK(warm.objective == doctest::Approx(cold.objective).epsilon(1e-9));
}

TEST_CASE("solve_svm: duplicated data with half C gives the same w") {
  Rng rng(12);
  std::normal_distribution<double> n(0, 1);
  SvmData d, twice;
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2 ? 1 : -1;
    std::vector<double> x{n(rng) + y, n(rng), n(rng) - 0.5 * y, n(rng)};
    d.add(x, y);
  }
  twice = d;
  for (std::size_t i = 0; i < d.size(); ++i) twice.add({d.row(i), d.dim}, d.y[i]);
  const auto a = solve_svm(d, 0.3, tight());
  const auto b = solve_svm(twice, 0.15, tight());
  for (std::size_t k = 0; k < a.w.size(); ++k) CHECK(std::abs(a.w[k] - b.w[k]) < 1e-6);
  CHECK(a.objective == doctest::Approx(b.objective).epsilon(1e-8));
}

TEST_CASE("solve_svm input validation") {
  SvmData d;
  d.add(std::vector<double>{1.0}, 1);
  CHECK_THROWS_AS(solve_svm(d, 1.0), ValidationError);
  d.add(std::vector<double>{NAN}, -1);
  CHECK_THROWS_AS(solve_svm(d, 1.0), DataError);
  CHECK_THROWS_AS(solve_svm(d, 0.0), DomainError);
  CHECK_THROWS_AS(d.add(std::vector<double>{1.0, 2.0}, 1), SizeError);
  CHECK(default_C_grid(10) == std::vector<double>{0.0002, 0.002, 0.02, 0.2, 2.0});
}

TEST_CASE("cross_validate_C") {
  Rng rng(3);
  std::vector<WindowDescriptor> pos, neg;
  for (int i = 0; i < 20; ++i) pos.push_back(planted(rng, 2, 2, 3, 0.8));
  for (int i = 0; i < 40; ++i) neg.push_back(planted(rng, 2, 2, 3, 0.0));

  SUBCASE("single value") {
    const std::vector<double> grid{0.7};
    const auto r = cross_validate_C(pos, neg, grid, 5, 1);
    CHECK(r.best_C == 0.7);
    CHECK(r.table.size() == 1);
    CHECK(r.table[0].fold_ap.size() == 5);
  }
  SUBCASE("separable data: plateau resolves to the smallest C") {
    const std::vector<double> grid{10.0, 1.0, 0.1};
    const auto r = cross_validate_C(pos, neg, grid, 4, 1);
    for (const auto& row : r.table) CHECK(row.mean_ap == 1.0);
    CHECK(r.best_C == 0.1);
  }
  SUBCASE("label noise") {
    auto noisy_pos = pos, noisy_neg = neg;
    for (int i = 0; i < 6; ++i) std::swap(noisy_pos[i], noisy_neg[i]);
    const std::vector<double> grid{1e-4, 1e-2, 1.0, 100.0};
    const auto r = cross_validate_C(noisy_pos, noisy_neg, grid, 5, 9);
    double best = 0;
    for (const auto& row : r.table) {
      CHECK(row.mean_ap >= 0.0);
      CHECK(row.mean_ap <= 1.0);
      best = std::max(best, row.mean_ap);
    }
    const auto chosen = std::find_if(r.table.begin(), r.table.end(),
                                     [&](const CvRow& row) { return row.C == r.best_C; });
    CHECK(chosen->mean_ap == best);
    CHECK(best < 1.0);
    // Same seed, same answer.
    CHECK(cross_validate_C(noisy_pos, noisy_neg, grid, 5, 9).table[2].fold_ap == r.table[2].fold_ap);
  }
  SUBCASE("few positives shrink the folds") {
    const std::vector<WindowDescriptor> three(pos.begin(), pos.begin() + 3);
    const std::vector<double> grid{1.0};
    const auto r = cross_validate_C(three, neg, grid, 5, 1);
    CHECK(r.folds_used == 3);
    CHECK(r.notes.size() == 1);
    const std::vector<WindowDescriptor> one(pos.begin(), pos.begin() + 1);
    CHECK_THROWS_AS(cross_validate_C(one, neg, grid, 5, 1), ValidationError);
  }
}

TEST_CASE("platt_calibrate") {
  SUBCASE("symmetric scores give B = 0 and match a grid search") {
    std::vector<double> s{-2, -1, -0.5, 0.3, -0.3, 0.5, 1, 2};
    std::vector<int> y{-1, -1, -1, -1, 1, 1, 1, 1};
    const auto fit = platt_calibrate(s, y);
    CHECK(!fit.separated);
    CHECK(std::abs(fit.params.b) < 1e-8);
    CHECK(fit.params.a < 0);
    const auto [ga, gb] = platt_grid(s, y);
    CHECK(fit.params.a == doctest::Approx(ga).epsilon(1e-5));
    CHECK(platt_nll(s, y, fit.params.a, fit.params.b) <= platt_nll(s, y, ga, gb) + 1e-10);
  }
  SUBCASE("asymmetric scores match a grid search") {
    Rng rng(5);
    std::normal_distribution<double> n(0, 1);
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
      const int label = i % 3 == 0 ? 1 : -1;
      s.push_back(n(rng) + (label > 0 ? 1.5 : -0.3));
      y.push_back(label);
    }
    const auto fit = platt_calibrate(s, y);
    const auto [ga, gb] = platt_grid(s, y);
    CHECK(fit.params.a == doctest::Approx(ga).epsilon(1e-4));
    CHECK(fit.params.b == doctest::Approx(gb).epsilon(1e-4));
    // Monotone increasing in the score.
    for (double v = -3; v < 3; v += 0.25) CHECK(fit.params(v) < fit.params(v + 0.25));
  }
  SUBCASE("separated scores are flagged and bounded") {
    std::vector<double> s{-3, -2, 2, 3};
    std::vector<int> y{-1, -1, 1, 1};
    const auto fit = platt_calibrate(s, y);
    CHECK(fit.separated);
    CHECK(std::isfinite(fit.params.a));
    CHECK(fit.params(2.0) > 0.5);
  }
  std::vector<double> s{1, 2};
  CHECK_THROWS_AS(platt_calibrate(s, std::vector<int>{1, 1}), ValidationError);
  CHECK_THROWS_AS(platt_calibrate(s, std::vector<int>{1}), SizeError);
}

TEST_CASE("train_template mines hard negatives") {
  Rng rng(21);
  std::vector<WindowDescriptor> pos;
  for (int i = 0; i < 25; ++i) pos.push_back(planted(rng, 3, 3, 4, 0.6));
  const auto negs = noise_grids(rng, 6, 12, 12, 4);
  TrainConfig cfg;
  cfg.neg_per_image_cap = 5;
  cfg.mining_rounds = 6;
  const auto t = train_template(pos, negs, 0.05, cfg);
  const auto& h = t.log.objective_history;
  REQUIRE(!h.empty());
  for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i] <= h[i - 1]);
  CHECK(t.log.negatives_cached >= 6 * 5);
  CHECK(t.log.train_scores.size() == t.log.train_labels.size());
  // Planted windows outrank fresh noise windows.
  double pos_mean = 0, neg_mean = 0;
  for (int i = 0; i < 50; ++i) {
    pos_mean += t.model.raw_score(planted(rng, 3, 3, 4, 0.6)) / 50;
    neg_mean += t.model.raw_score(planted(rng, 3, 3, 4, 0.0)) / 50;
  }
  CHECK(pos_mean > neg_mean + 1.0);
  // Deterministic given the seed.
  CHECK(train_template(pos, negs, 0.05, cfg).model == t.model);
}

TEST_CASE("train_mixture") {
  Rng rng(8);
  std::vector<std::vector<WindowDescriptor>> clusters(3);
  for (int i = 0; i < 12; ++i) clusters[0].push_back(planted(rng, 3, 3, 4, 0.6));
  for (int i = 0; i < 12; ++i) clusters[1].push_back(planted(rng, 3, 3, 4, 0.3));
  clusters[2].push_back(planted(rng, 3, 3, 4, 0.6));
  const auto negs = noise_grids(rng, 4, 10, 10, 4);
  TrainConfig cfg;
  cfg.C = 0.05;
  cfg.neg_per_image_cap = 5;
  cfg.mining_rounds = 4;
  cfg.seed = 77;

  const auto mix = train_mixture(clusters, negs, cfg);
  CHECK(mix.model.K() == 2);
  CHECK(mix.skipped == std::vector<int>{2});
  for (const auto& t : mix.model.templates) CHECK(t.platt.has_value());
  for (int i = 0; i < 20; ++i) {
    const auto w = planted(rng, 3, 3, 4, 0.4);
    for (const auto& t : mix.model.templates) CHECK(mix.model.score(w) >= t.score(w));
  }

  SUBCASE("K = 1 is the single template") {
    const std::vector<std::vector<WindowDescriptor>> one{clusters[0]};
    const auto single = train_mixture(one, negs, cfg);
    const auto t = train_template(clusters[0], negs, cfg.C, cfg);
    CHECK(single.model.templates[0].filter == t.model.filter);
    CHECK(single.model.templates[0].bias == t.model.bias);
  }
  const std::vector<std::vector<WindowDescriptor>> tiny{{clusters[2]}};
  CHECK_THROWS_AS(train_mixture(tiny, negs, cfg), ValidationError);
}

TEST_CASE("train_star_model") {
  Rng rng(31);
  const int dim = 3;
  // Positive grids: 8x8 noise with a bright root window and two bright part
  // cells jittered by one cell around fixed offsets.
  std::vector<FeatureGrid> grids;
  std::vector<AnnotatedExample> examples;
  std::uniform_int_distribution<int> jit(-1, 1);
  for (int i = 0; i < 16; ++i) {
    FeatureGrid g = testing::random_grid(rng, 8, 8, dim, false);
    for (auto& v : g.values()) v *= 0.3f;
    const Cell root{1, 1};
    Placement z{root, root + Cell{1 + jit(rng), 1 + jit(rng)}, root + Cell{3 + jit(rng), 3 + jit(rng)}};
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c) g.at(root.y + r, root.x + c, 0) += 0.5f;
    for (std::size_t j = 1; j < z.size(); ++j) g.at(z[j].y, z[j].x, j) += 0.7f;
    grids.push_back(std::move(g));
    examples.push_back({grids.size() - 1, z});
  }
  const auto negs = noise_grids(rng, 4, 9, 9, dim);
  TrainConfig cfg;
  cfg.neg_per_image_cap = 4;
  cfg.mining_rounds = 5;
  const StarShape shape{5, 5, 1, 1};

  const auto st = train_star_model(grids, examples, negs, shape, 0.1, cfg);
  CHECK(st.model.num_parts() == 3);
  CHECK(st.model.parts[0].anchor == Cell{1, 1});
  CHECK(st.model.parts[1].anchor == Cell{3, 3});
  for (const auto& p : st.model.parts) {
    CHECK(p.spring.bx >= cfg.beta_min);
    CHECK(p.spring.by >= cfg.beta_min);
  }
  const auto& h = st.log.objective_history;
  for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i] <= h[i - 1]);
  // Model score of an annotated configuration equals w . features + b.
  const auto phi = star_features(st.model, grids[0], examples[0].placement);
  double lin = st.log.b;
  for (std::size_t k = 0; k < phi.size(); ++k) lin += st.log.w[k] * phi[k];
  CHECK(configuration_score(st.model, grids[0], examples[0].placement) + st.model.bias ==
        doctest::Approx(lin).epsilon(1e-9));

  SUBCASE("one part is the rigid template") {
    std::vector<AnnotatedExample> roots;
    std::vector<WindowDescriptor> windows;
    for (const auto& e : examples) {
      roots.push_back({e.grid, {e.placement[0]}});
      windows.push_back(extract_window(grids[e.grid], e.placement[0], 5, 5));
    }
    const auto star = train_star_model(grids, roots, negs, shape, 0.1, cfg);
    const auto rigid = train_template(windows, negs, 0.1, cfg);
    CHECK(star.model.root == rigid.model.filter);
    CHECK(star.model.bias == rigid.model.bias);
    CHECK(star.log.objective_history == rigid.log.objective_history);
  }
  SUBCASE("annotation errors") {
    auto bad = examples;
    bad[3].placement[1] = Cell{0, 0};
    CHECK_THROWS_AS(train_star_model(grids, bad, negs, shape, 0.1, cfg), ValidationError);
    bad = examples;
    bad[2].placement.pop_back();
    CHECK_THROWS_AS(train_star_model(grids, bad, negs, shape, 0.1, cfg), ValidationError);
  }
}

TEST_CASE("build_edpm and build_epm") {
  Rng rng(2);
  const StarModel star = testing::random_star(rng, {});
  const std::vector<Placement> zs{{{2, 2}, {3, 4}, {5, 2}},
                                  {{0, 0}, {1, 2}, {3, 0}},
                                  {{1, 1}, {1, 1}, {4, 4}}};
  const auto e = build_edpm(star, zs);
  CHECK(e.variant == ModelVariant::edpm);
  CHECK(e.exemplars == std::vector<AnchorSet>{{{1, 2}, {3, 0}}, {{0, 0}, {3, 3}}});
  CHECK(e.root == star.root);
  CHECK(build_epm(star, zs).exemplars == e.exemplars);
  CHECK(build_epm(star, zs).variant == ModelVariant::epm);

  const std::vector<Placement> one{zs[0]};
  CHECK(build_edpm(star, one).exemplars.size() == 1);
  // Coarse quantization collapses every shape.
  CHECK(build_edpm(star, zs, 100.0).exemplars == std::vector<AnchorSet>{{{0, 0}, {0, 0}}});
  CHECK_THROWS_AS(build_edpm(star, std::vector<Placement>{}), ValidationError);
  CHECK_THROWS_AS(build_edpm(star, std::vector<Placement>{{{0, 0}}}), ValidationError);
}
