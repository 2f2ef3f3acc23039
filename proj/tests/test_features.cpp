#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "doctest.h"
#include "partmix/error.hpp"
#include "partmix/features.hpp"

using namespace partmix;

namespace {

Image random_image(std::mt19937_64& rng, int w, int h) {
  Image img(w, h);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

Image crop(const Image& img, int x0, int y0, int w, int h) {
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

// Straightforward per-pixel descriptor in double precision.
std::vector<double> reference_hog(const Image& img, int cs, int& rows, int& cols) {
  const int cy = img.height / cs, cx = img.width / cs, bins = 9;
  std::vector<double> hist(std::size_t(cy) * cx * bins, 0.0);
  auto px = [&](int x, int y) {
    return double(img.at(std::clamp(x, 0, img.width - 1), std::clamp(y, 0, img.height - 1)));
  };
  for (int y = 0; y < cy * cs; ++y)
    for (int x = 0; x < cx * cs; ++x) {
      const double gx = px(x + 1, y) - px(x - 1, y);
      const double gy = px(x, y + 1) - px(x, y - 1);
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double deg = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
      if (deg < 0.0) deg += 180.0;
      const int b = std::min(int(deg / 20.0), 8);
      hist[(std::size_t(y / cs) * cx + x / cs) * bins + b] += mag;
    }
  rows = cy - 2;
  cols = cx - 2;
  std::vector<double> out;
  for (int r = 1; r <= rows; ++r)
    for (int c = 1; c <= cols; ++c)
      for (int by = r - 1; by <= r; ++by)
        for (int bx = c - 1; bx <= c; ++bx) {
          double e = 0.0;
          for (int yy = by; yy < by + 2; ++yy)
            for (int xx = bx; xx < bx + 2; ++xx)
              for (int b = 0; b < bins; ++b) {
                const double v = hist[(std::size_t(yy) * cx + xx) * bins + b];
                e += v * v;
              }
          for (int b = 0; b < bins; ++b)
            out.push_back(std::min(hist[(std::size_t(r) * cx + c) * bins + b] /
                                       std::sqrt(e + 1e-8),
                                   0.2));
        }
  return out;
}

}  // namespace

TEST_CASE("compute_features shape and constant images") {
  const FeatureGrid g = compute_features(Image(64, 48, 100.0f), 8);
  CHECK(g.rows() == 4);
  CHECK(g.cols() == 6);
  CHECK(g.dim() == 36);
  for (float v : g.values()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(compute_features(Image(23, 40), 8), SizeError);
  CHECK_NOTHROW(compute_features(Image(24, 24), 8));
}

TEST_CASE("compute_features matches a per-pixel reference") {
  std::mt19937_64 rng(1);
  for (int cs : {4, 6, 8}) {
    const Image img = random_image(rng, 7 * cs + 3, 5 * cs + 1);
    const FeatureGrid g = compute_features(img, cs);
    int rows = 0, cols = 0;
    const auto ref = reference_hog(img, cs, rows, cols);
    REQUIRE(g.rows() == rows);
    REQUIRE(g.cols() == cols);
    for (std::size_t i = 0; i < ref.size(); ++i)
      REQUIRE(g.values()[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    for (float v : g.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 0.2f);
    }
  }
}

TEST_CASE("oriented edges land in the expected bins") {
  // Dark-to-bright along x: gradient angle 0, bin 0 of every block.
  Image vertical(48, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 24; x < 48; ++x) vertical.at(x, y) = 200.0f;
  // Dark-to-bright along y: 90 degrees, bin 4.
  Image horizontal(48, 48);
  for (int y = 24; y < 48; ++y)
    for (int x = 0; x < 48; ++x) horizontal.at(x, y) = 200.0f;

  for (auto [img, bin] : {std::pair{&vertical, 0}, std::pair{&horizontal, 4}}) {
    const FeatureGrid g = compute_features(*img, 8);
    float total = 0.0f;
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c)
        for (int d = 0; d < g.dim(); ++d) {
          if (d % 9 != bin) CHECK(g.at(r, c, d) == 0.0f);
          total += g.at(r, c, d);
        }
    CHECK(total > 0.0f);
  }
}

TEST_CASE("shifting the image by one cell shifts the grid") {
  std::mt19937_64 rng(2);
  const Image big = random_image(rng, 96, 64);
  const FeatureGrid a = compute_features(crop(big, 0, 0, 88, 64), 8);
  const FeatureGrid b = compute_features(crop(big, 8, 0, 88, 64), 8);
  // Skip cells whose normalization touches a clamped border cell.
  for (int r = 1; r + 1 < a.rows(); ++r)
    for (int c = 1; c + 2 < b.cols(); ++c)
      for (int d = 0; d < 36; ++d) REQUIRE(b.at(r, c, d) == a.at(r, c + 1, d));
}

TEST_CASE("pyramid levels halve and truncate with a warning") {
  std::mt19937_64 rng(3);
  const Image img = random_image(rng, 128, 96);
  const FeaturePyramid p = build_pyramid(img, 8, 2.0, 3);
  REQUIRE(p.levels.size() == 3);
  CHECK(p.warnings.empty());
  CHECK(p.levels[0].rows() == 10);
  CHECK(p.levels[1].rows() == 4);
  CHECK(p.levels[1].cols() == 6);
  CHECK(p.levels[2].scale() == 0.25);

  const FeaturePyramid t = build_pyramid(img, 8, 2.0, 6);
  CHECK(t.levels.size() == 3);  // 16x12 px at level 3 is under 3 cells
  CHECK(t.warnings.size() == 1);
  CHECK_THROWS_AS(build_pyramid(img, 8, 1.0, 2), DomainError);
}

TEST_CASE("extract_window copies blocks and rejects overhangs") {
  FeatureGrid g(4, 5, 2);
  for (std::size_t i = 0; i < g.values().size(); ++i) g.values()[i] = float(i);
  const auto w = extract_window(g, {1, 2}, 2, 3);
  CHECK(w.size() == 12);
  CHECK(w.values.front() == g.at(2, 1, 0));
  CHECK(w.values.back() == g.at(3, 3, 1));
  CHECK_THROWS_AS(extract_window(g, {3, 0}, 1, 3), RangeError);
  CHECK_THROWS_AS(extract_window(g, {-1, 0}, 1, 1), RangeError);
}

TEST_CASE("warping a cell-aligned box is extraction") {
  std::mt19937_64 rng(4);
  const Image img = random_image(rng, 80, 80);
  const FeatureGrid g = compute_features(img, 8);
  // Feature cell (r, c) starts at pixel ((c + 1) * 8, (r + 1) * 8).
  const Rect box{3 * 8.0, 2 * 8.0, 3 * 8.0, 2 * 8.0};
  const auto warped = warp_to_canonical(img, box, 2, 3, 8);
  const auto direct = extract_window(g, {2, 1}, 2, 3);
  CHECK(warped.values == direct.values);
}

TEST_CASE("warp_to_canonical rescales and validates boxes") {
  std::mt19937_64 rng(5);
  const Image img = random_image(rng, 100, 90);
  const auto w = warp_to_canonical(img, {10.5, 20.0, 33.0, 41.0}, 4, 3, 8);
  CHECK(w.height == 4);
  CHECK(w.width == 3);
  CHECK(w.size() == 4u * 3u * 36u);
  CHECK_THROWS_AS(warp_to_canonical(img, {10, 10, 0, 5}, 2, 2), ValidationError);
  CHECK_THROWS_AS(warp_to_canonical(img, {90, 10, 20, 5}, 2, 2), ValidationError);
}

TEST_CASE("pca_reduce") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> z(0.0, 1.0);

  SUBCASE("reconstruction error is the discarded variance") {
    for (auto [n, d] : {std::pair{60, 8}, std::pair{7, 20}}) {
      std::vector<std::vector<double>> xs(n, std::vector<double>(d));
      for (auto& x : xs)
        for (int j = 0; j < d; ++j) x[j] = z(rng) * (j + 1);
      const int k = 3;
      const PcaResult p = pca_reduce(xs, k);
      REQUIRE(p.components.size() == std::size_t(k));
      REQUIRE(p.eigenvalues.size() == std::size_t(d));
      CHECK(std::is_sorted(p.eigenvalues.rbegin(), p.eigenvalues.rend()));
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
          const double dot = std::inner_product(p.components[a].begin(), p.components[a].end(),
                                                p.components[b].begin(), 0.0);
          CHECK(dot == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-9));
        }
      double err = 0.0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
          double rec = p.mean[j];
          for (int c = 0; c < k; ++c) rec += p.projected[i][c] * p.components[c][j];
          err += (xs[i][j] - rec) * (xs[i][j] - rec);
        }
      const double discarded = std::accumulate(p.eigenvalues.begin() + k, p.eigenvalues.end(), 0.0);
      CHECK(err / n == doctest::Approx(discarded).epsilon(1e-8));
      CHECK_FALSE(p.rank_deficient);
    }
  }
  SUBCASE("aspect ratio is appended") {
    std::vector<std::vector<double>> xs(10, std::vector<double>(4));
    std::vector<double> aspect(10);
    for (int i = 0; i < 10; ++i) {
      for (auto& v : xs[i]) v = z(rng);
      aspect[i] = 0.5 + i;
    }
    const PcaResult p = pca_reduce(xs, 2, aspect);
    for (int i = 0; i < 10; ++i) {
      REQUIRE(p.projected[i].size() == 3);
      CHECK(p.projected[i][2] == aspect[i]);
    }
  }
  SUBCASE("rank deficiency and size errors") {
    std::vector<std::vector<double>> line;
    for (int i = 0; i < 6; ++i) line.push_back({double(i), 2.0 * i, -double(i)});
    const PcaResult p = pca_reduce(line, 2);
    CHECK(p.rank_deficient);
    for (double v : p.components[1]) CHECK(v == 0.0);
    CHECK(p.components[0][1] > 0.0);
    CHECK_THROWS_AS(pca_reduce(line, 6), SizeError);
  }
}
