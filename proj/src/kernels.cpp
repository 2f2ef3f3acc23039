#include "partmix/kernels.hpp"

#include <cmath>
#include <string>

#include "partmix/error.hpp"

namespace partmix {

namespace {

void check_filter(const FeatureGrid& grid, const Filter& filter) {
  if (filter.dim != grid.dim())
    throw SizeError("correlate: filter dim " + std::to_string(filter.dim) + " != grid dim " +
                    std::to_string(grid.dim()));
  if (filter.height < 1 || filter.width < 1 || filter.height > grid.rows() ||
      filter.width > grid.cols())
    throw SizeError("correlate: " + std::to_string(filter.height) + "x" +
                    std::to_string(filter.width) + " filter does not fit " +
                    std::to_string(grid.rows()) + "x" + std::to_string(grid.cols()) + " grid");
}

inline double quad(double beta, int d) { return beta * static_cast<double>(d * d); }

void check_beta(double beta) {
  if (!(beta >= 0.0))
    throw DomainError("distance transform: beta must be >= 0, got " + std::to_string(beta));
}

struct EnvelopeWorkspace {
  std::vector<double> f;
  std::vector<double> z;
  std::vector<int> v;
};

// Transform of the line f_base[0], f_base[stride], ...; results are written
// with the same stride. beta must already be validated.
void gdt_line(const double* f_base, std::size_t stride, int n, double beta, double* out, int* arg,
              EnvelopeWorkspace& ws) {
  if (n == 0) return;
  ws.f.resize(n);
  for (int i = 0; i < n; ++i) ws.f[i] = f_base[i * stride];
  const double* f = ws.f.data();

  if (beta == 0.0) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (f[i] > f[best]) best = i;
    for (int i = 0; i < n; ++i) {
      out[i * stride] = f[best];
      arg[i * stride] = best;
    }
    return;
  }

  // Upper envelope of the parabolas f[q] - beta (x - q)^2. v holds the roots
  // in envelope order, z[k] the left end of v[k]'s interval.
  ws.v.resize(n);
  ws.z.resize(n + 1);
  int* v = ws.v.data();
  double* z = ws.z.data();
  constexpr double inf = std::numeric_limits<double>::infinity();
  auto intersect = [&](int p, int q) {
    return (f[p] - f[q] + beta * static_cast<double>(q * q - p * p)) /
           (2.0 * beta * static_cast<double>(q - p));
  };
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s = intersect(v[k], q);
    while (s <= z[k]) {
      --k;
      s = intersect(v[k], q);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  const int last = k;

  // Walk the envelope comparing values directly, so exact ties resolve to the
  // smaller root regardless of rounding in the breakpoints.
  k = 0;
  for (int x = 0; x < n; ++x) {
    double cur = f[v[k]] - quad(beta, x - v[k]);
    while (k < last) {
      const double next = f[v[k + 1]] - quad(beta, x - v[k + 1]);
      if (!(next > cur)) break;
      ++k;
      cur = next;
    }
    out[x * stride] = cur;
    arg[x * stride] = v[k];
  }
}

}  // namespace

double window_dot(const FeatureGrid& grid, const Filter& filter, Cell origin) {
  const std::size_t row_len = std::size_t(filter.width) * filter.dim;
  const auto values = grid.values();
  double acc = 0.0;
  for (int r = 0; r < filter.height; ++r) {
    const float* g = values.data() + (std::size_t(origin.y + r) * grid.cols() + origin.x) * grid.dim();
    const double* w = filter.weights.data() + r * row_len;
    for (std::size_t k = 0; k < row_len; ++k) acc += w[k] * static_cast<double>(g[k]);
  }
  return acc;
}

void gdt_1d(std::span<const double> f, double beta, std::span<double> out, std::span<int> arg) {
  check_beta(beta);
  if (out.size() != f.size() || arg.size() != f.size())
    throw SizeError("gdt_1d: output spans must match input length");
  EnvelopeWorkspace ws;
  gdt_line(f.data(), 1, static_cast<int>(f.size()), beta, out.data(), arg.data(), ws);
}

namespace kernels {

Map2D correlate(const FeatureGrid& grid, const Filter& filter) {
  check_filter(grid, filter);
  Map2D out(grid.rows() - filter.height + 1, grid.cols() - filter.width + 1);
  const int rows = out.rows;
  const int cols = out.cols;
#pragma omp parallel for schedule(static)
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) out.at(y, x) = window_dot(grid, filter, {x, y});
  return out;
}

DistanceTransform dt_2d(const Map2D& response, double beta_x, double beta_y) {
  check_beta(beta_x);
  check_beta(beta_y);
  const int rows = response.rows;
  const int cols = response.cols;
  DistanceTransform dt{Map2D(rows, cols), std::vector<int>(std::size_t(rows) * cols),
                       std::vector<int>(std::size_t(rows) * cols)};
  Map2D tmp(rows, cols);
  std::vector<int> row_arg(std::size_t(rows) * cols);

#pragma omp parallel
  {
    EnvelopeWorkspace ws;
#pragma omp for schedule(static)
    for (int y = 0; y < rows; ++y)
      gdt_line(&response.values[std::size_t(y) * cols], 1, cols, beta_x,
               &tmp.values[std::size_t(y) * cols], &row_arg[std::size_t(y) * cols], ws);
#pragma omp for schedule(static)
    for (int x = 0; x < cols; ++x)
      gdt_line(&tmp.values[x], cols, rows, beta_y, &dt.values.values[x], &dt.arg_y[x], ws);
  }
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) {
      const std::size_t i = std::size_t(y) * cols + x;
      dt.arg_x[i] = row_arg[std::size_t(dt.arg_y[i]) * cols + x];
    }
  return dt;
}

}  // namespace kernels

namespace kernels::reference {

Map2D correlate(const FeatureGrid& grid, const Filter& filter) {
  check_filter(grid, filter);
  Map2D out(grid.rows() - filter.height + 1, grid.cols() - filter.width + 1);
  for (int y = 0; y < out.rows; ++y)
    for (int x = 0; x < out.cols; ++x) out.at(y, x) = window_dot(grid, filter, {x, y});
  return out;
}

DistanceTransform dt_2d(const Map2D& response, double beta_x, double beta_y) {
  check_beta(beta_x);
  check_beta(beta_y);
  const int rows = response.rows;
  const int cols = response.cols;
  DistanceTransform dt{Map2D(rows, cols), std::vector<int>(std::size_t(rows) * cols),
                       std::vector<int>(std::size_t(rows) * cols)};
  Map2D tmp(rows, cols);
  std::vector<int> row_arg(std::size_t(rows) * cols);
  EnvelopeWorkspace ws;
  for (int y = 0; y < rows; ++y)
    gdt_line(&response.values[std::size_t(y) * cols], 1, cols, beta_x,
             &tmp.values[std::size_t(y) * cols], &row_arg[std::size_t(y) * cols], ws);
  for (int x = 0; x < cols; ++x)
    gdt_line(&tmp.values[x], cols, rows, beta_y, &dt.values.values[x], &dt.arg_y[x], ws);
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) {
      const std::size_t i = std::size_t(y) * cols + x;
      dt.arg_x[i] = row_arg[std::size_t(dt.arg_y[i]) * cols + x];
    }
  return dt;
}

}  // namespace kernels::reference

}  // namespace partmix
