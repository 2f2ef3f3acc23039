#include "partmix/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "partmix/error.hpp"

namespace partmix {

Image::Image(int w, int h, float fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

FeatureGrid::FeatureGrid(int rows, int cols, int dim, int cell_size, double scale)
    : rows_(rows),
      cols_(cols),
      dim_(dim),
      cell_size_(cell_size),
      scale_(scale),
      values_(static_cast<std::size_t>(rows) * cols * dim, 0.0f) {
  if (rows < 0 || cols < 0 || dim < 0) throw SizeError("FeatureGrid: negative dimension");
}

namespace {

// Magnitude-weighted orientation histograms for a cells_y x cells_x grid whose
// first cell starts at pixel (offset, offset). Gradients are central
// differences, clamped at the raster border.
std::vector<float> cell_histograms(const Image& img, int cell_size, int offset, int cells_y,
                                   int cells_x, int bins) {
  std::vector<float> hist(static_cast<std::size_t>(cells_y) * cells_x * bins, 0.0f);
  const float bin_width = std::numbers::pi_v<float> / static_cast<float>(bins);
  for (int cy = 0; cy < cells_y; ++cy) {
    for (int cx = 0; cx < cells_x; ++cx) {
      float* h = &hist[(static_cast<std::size_t>(cy) * cells_x + cx) * bins];
      for (int py = 0; py < cell_size; ++py) {
        const int y = offset + cy * cell_size + py;
        const int ym = std::max(y - 1, 0);
        const int yp = std::min(y + 1, img.height - 1);
        for (int px = 0; px < cell_size; ++px) {
          const int x = offset + cx * cell_size + px;
          const int xm = std::max(x - 1, 0);
          const int xp = std::min(x + 1, img.width - 1);
          const float gx = img.at(xp, y) - img.at(xm, y);
          const float gy = img.at(x, yp) - img.at(x, ym);
          const float mag = std::sqrt(gx * gx + gy * gy);
          if (mag == 0.0f) continue;
          float angle = std::atan2(gy, gx);
          if (angle < 0.0f) angle += std::numbers::pi_v<float>;
          int bin = static_cast<int>(angle / bin_width);
          if (bin >= bins) bin = 0;  // angle == pi folds onto 0
          h[bin] += mag;
        }
      }
    }
  }
  return hist;
}

// Normalizes each interior cell by its four enclosing 2x2 blocks.
FeatureGrid normalize_blocks(const std::vector<float>& hist, int cells_y, int cells_x,
                             int cell_size, const HogConfig& cfg) {
  const int bins = cfg.orientations;
  auto cell = [&](int y, int x) { return &hist[(static_cast<std::size_t>(y) * cells_x + x) * bins]; };

  // Energy of block with top-left cell (y, x).
  std::vector<float> energy(static_cast<std::size_t>(cells_y - 1) * (cells_x - 1), 0.0f);
  for (int y = 0; y + 1 < cells_y; ++y) {
    for (int x = 0; x + 1 < cells_x; ++x) {
      float e = 0.0f;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const float* h = cell(y + dy, x + dx);
          for (int b = 0; b < bins; ++b) e += h[b] * h[b];
        }
      energy[static_cast<std::size_t>(y) * (cells_x - 1) + x] = e;
    }
  }

  FeatureGrid grid(cells_y - 2, cells_x - 2, cfg.dim(), cell_size);
  const float eps2 = cfg.epsilon * cfg.epsilon;
  for (int y = 1; y + 1 < cells_y; ++y) {
    for (int x = 1; x + 1 < cells_x; ++x) {
      const float* h = cell(y, x);
      int block = 0;
      for (int by = y - 1; by <= y; ++by) {
        for (int bx = x - 1; bx <= x; ++bx, ++block) {
          const float e = energy[static_cast<std::size_t>(by) * (cells_x - 1) + bx];
          const float inv = 1.0f / std::sqrt(e + eps2);
          for (int b = 0; b < bins; ++b)
            grid.at(y - 1, x - 1, block * bins + b) = std::min(h[b] * inv, cfg.clip);
        }
      }
    }
  }
  return grid;
}

float sample_bilinear(const Image& img, double sx, double sy) {
  sx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y0 = static_cast<int>(std::floor(sy));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = sx - x0;
  const double fy = sy - y0;
  const double top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
  const double bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bottom * fy);
}

}  // namespace

FeatureGrid compute_features(const Image& image, int cell_size, const HogConfig& cfg) {
  if (cell_size < 1) throw DomainError("compute_features: cell_size must be >= 1");
  const int cells_y = image.height / cell_size;
  const int cells_x = image.width / cell_size;
  if (cells_y < 3 || cells_x < 3)
    throw SizeError("compute_features: image " + std::to_string(image.width) + "x" +
                    std::to_string(image.height) + " holds fewer than 3 cells of " +
                    std::to_string(cell_size) + " px per axis");
  const auto hist = cell_histograms(image, cell_size, 0, cells_y, cells_x, cfg.orientations);
  return normalize_blocks(hist, cells_y, cells_x, cell_size, cfg);
}

Image resize_bilinear(const Image& image, int new_width, int new_height) {
  if (new_width < 1 || new_height < 1) throw SizeError("resize_bilinear: empty target");
  Image out(new_width, new_height);
  const double sx = static_cast<double>(image.width) / new_width;
  const double sy = static_cast<double>(image.height) / new_height;
  for (int y = 0; y < new_height; ++y)
    for (int x = 0; x < new_width; ++x)
      out.at(x, y) = sample_bilinear(image, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
  return out;
}

FeaturePyramid build_pyramid(const Image& image, int cell_size, double scale_step, int n_levels,
                             const HogConfig& cfg) {
  if (n_levels < 1) throw DomainError("build_pyramid: n_levels must be >= 1");
  if (!(scale_step > 1.0)) throw DomainError("build_pyramid: scale_step must be > 1");
  FeaturePyramid pyr;
  pyr.scale_step = scale_step;
  pyr.image_width = image.width;
  pyr.image_height = image.height;
  pyr.levels.push_back(compute_features(image, cell_size, cfg));
  for (int i = 1; i < n_levels; ++i) {
    const double s = std::pow(scale_step, -i);
    const int w = static_cast<int>(std::lround(image.width * s));
    const int h = static_cast<int>(std::lround(image.height * s));
    if (w / cell_size < 3 || h / cell_size < 3) {
      pyr.warnings.push_back("build_pyramid: truncated to " + std::to_string(i) + " of " +
                             std::to_string(n_levels) + " levels (image too small)");
      break;
    }
    FeatureGrid grid = compute_features(resize_bilinear(image, w, h), cell_size, cfg);
    grid.set_scale(s);
    pyr.levels.push_back(std::move(grid));
  }
  return pyr;
}

WindowDescriptor extract_window(const FeatureGrid& grid, Cell origin, int h, int w) {
  if (h < 1 || w < 1 || origin.x < 0 || origin.y < 0 || origin.y + h > grid.rows() ||
      origin.x + w > grid.cols())
    throw RangeError("extract_window: " + std::to_string(h) + "x" + std::to_string(w) +
                     " window at (" + std::to_string(origin.y) + "," + std::to_string(origin.x) +
                     ") outside " + std::to_string(grid.rows()) + "x" +
                     std::to_string(grid.cols()) + " grid");
  WindowDescriptor out{h, w, grid.dim(), {}};
  out.values.reserve(static_cast<std::size_t>(h) * w * grid.dim());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto cell = grid.cell(origin.y + r, origin.x + c);
      out.values.insert(out.values.end(), cell.begin(), cell.end());
    }
  return out;
}

WindowDescriptor warp_to_canonical(const Image& image, const Rect& bbox, int canonical_rows,
                                   int canonical_cols, int cell_size, const HogConfig& cfg) {
  if (!(bbox.w > 0.0) || !(bbox.h > 0.0))
    throw ValidationError("warp_to_canonical: degenerate bbox (zero width or height)");
  if (bbox.x < 0 || bbox.y < 0 || bbox.x + bbox.w > image.width || bbox.y + bbox.h > image.height)
    throw ValidationError("warp_to_canonical: bbox outside image");
  if (canonical_rows < 1 || canonical_cols < 1)
    throw DomainError("warp_to_canonical: canonical shape must be positive");

  // One context cell per side (consumed by block normalization) plus one
  // pixel so the outer cells see true gradients.
  const int cells_y = canonical_rows + 2;
  const int cells_x = canonical_cols + 2;
  const int margin = cell_size + 1;
  const int out_w = cells_x * cell_size + 2;
  const int out_h = cells_y * cell_size + 2;
  const double sx = bbox.w / (canonical_cols * cell_size);
  const double sy = bbox.h / (canonical_rows * cell_size);

  Image crop(out_w, out_h);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      crop.at(x, y) = sample_bilinear(image, bbox.x + (x - margin + 0.5) * sx - 0.5,
                                      bbox.y + (y - margin + 0.5) * sy - 0.5);

  const auto hist = cell_histograms(crop, cell_size, 1, cells_y, cells_x, cfg.orientations);
  const FeatureGrid grid = normalize_blocks(hist, cells_y, cells_x, cell_size, cfg);
  return extract_window(grid, {0, 0}, canonical_rows, canonical_cols);
}

std::vector<double> to_double(const WindowDescriptor& w) {
  return {w.values.begin(), w.values.end()};
}

PcaResult pca_reduce(std::span<const std::vector<double>> vectors, int out_dim,
                     std::span<const double> aspect_ratios) {
  const auto n = static_cast<Eigen::Index>(vectors.size());
  if (out_dim < 1) throw DomainError("pca_reduce: out_dim must be >= 1");
  if (n <= out_dim)
    throw SizeError("pca_reduce: need more than out_dim=" + std::to_string(out_dim) +
                    " vectors, got " + std::to_string(n));
  if (!aspect_ratios.empty() && static_cast<Eigen::Index>(aspect_ratios.size()) != n)
    throw ValidationError("pca_reduce: aspect_ratios size mismatch");
  const auto d = static_cast<Eigen::Index>(vectors.front().size());
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(vectors[i].size()) != d)
      throw ValidationError("pca_reduce: inconsistent vector lengths");
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = vectors[i][j];
  }
  const Eigen::VectorXd mean = X.colwise().mean();
  X.rowwise() -= mean.transpose();

  // Principal directions come from whichever of X^T X / n and X X^T / n is smaller.
  Eigen::MatrixXd dirs;  // d x r, columns in descending eigenvalue order
  Eigen::VectorXd evals;
  if (d <= n) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((X.transpose() * X) / static_cast<double>(n));
    evals = es.eigenvalues().reverse();
    dirs = es.eigenvectors().rowwise().reverse();
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((X * X.transpose()) / static_cast<double>(n));
    evals = es.eigenvalues().reverse();
    const Eigen::MatrixXd u = es.eigenvectors().rowwise().reverse();
    dirs = Eigen::MatrixXd::Zero(d, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      if (evals(k) <= 0.0) continue;
      Eigen::VectorXd v = X.transpose() * u.col(k);
      const double norm = v.norm();
      if (norm > 0.0) dirs.col(k) = v / norm;
    }
  }

  PcaResult res;
  res.mean.assign(mean.data(), mean.data() + d);
  double max_ev = evals.size() ? std::max(evals(0), 0.0) : 0.0;
  const double rank_tol = 1e-12 * std::max(max_ev, 1.0);
  for (Eigen::Index k = 0; k < evals.size(); ++k) res.eigenvalues.push_back(std::max(evals(k), 0.0));
  while (static_cast<Eigen::Index>(res.eigenvalues.size()) < d) res.eigenvalues.push_back(0.0);

  const int usable = static_cast<int>(std::min<Eigen::Index>(out_dim, dirs.cols()));
  res.components.assign(out_dim, std::vector<double>(d, 0.0));
  for (int k = 0; k < usable; ++k) {
    if (evals(k) <= rank_tol) {
      res.rank_deficient = true;
      continue;
    }
    Eigen::VectorXd v = dirs.col(k);
    // Sign convention: largest-magnitude coordinate positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (Eigen::Index j = 0; j < d; ++j) res.components[k][j] = v(j);
  }
  if (usable < out_dim) res.rank_deficient = true;

  res.projected.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& p = res.projected[i];
    p.assign(out_dim, 0.0);
    for (int k = 0; k < out_dim; ++k) {
      double s = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) s += X(i, j) * res.components[k][j];
      p[k] = s;
    }
    if (!aspect_ratios.empty()) p.push_back(aspect_ratios[i]);
  }
  return res;
}

}  // namespace partmix
