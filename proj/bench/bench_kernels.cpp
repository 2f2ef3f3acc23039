// OpenMP kernels against their serial references, plus EDPM scoring cost as
// the exemplar count grows.

#include <random>

#include <benchmark/benchmark.h>

#include "partmix/kernels.hpp"
#include "partmix/partmodel.hpp"

using namespace partmix;

namespace {

FeatureGrid grid(int n, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  FeatureGrid g(n, n, dim);
  for (auto& v : g.values()) v = u(rng);
  return g;
}

Filter filter(int h, int dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Filter f(h, h, dim);
  for (auto& v : f.weights) v = u(rng);
  return f;
}

StarModel star(int parts, int dim, int exemplars, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> off(0, 3);
  StarModel m;
  m.root = filter(6, dim, rng);
  for (int j = 1; j < parts; ++j) m.parts.push_back({filter(3, dim, rng), {off(rng), off(rng)}, Spring{0.1, 0.1}});
  m.variant = ModelVariant::edpm;
  for (int e = 0; e < exemplars; ++e) {
    AnchorSet a;
    for (int j = 1; j < parts; ++j) a.push_back({off(rng), off(rng)});
    m.exemplars.push_back(std::move(a));
  }
  return m;
}

template <Map2D (*Fn)(const FeatureGrid&, const Filter&)>
void BM_correlate(benchmark::State& state) {
  const FeatureGrid g = grid(static_cast<int>(state.range(0)), 36, 1);
  std::mt19937_64 rng(2);
  const Filter f = filter(6, 36, rng);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(g, f));
}

template <DistanceTransform (*Fn)(const Map2D&, double, double)>
void BM_dt_2d(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Map2D m(n, n);
  for (auto& v : m.values) v = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(m, 0.1, 0.2));
}

template <std::vector<Map2D> (*Fn)(const StarModel&, const FeatureGrid&)>
void BM_part_responses(benchmark::State& state) {
  const FeatureGrid g = grid(static_cast<int>(state.range(0)), 36, 4);
  const StarModel m = star(6, 36, 1, 5);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(m, g));
}

template <PartScoreMap (*Fn)(const StarModel&, const FeatureGrid&)>
void BM_score_edpm(benchmark::State& state) {
  const FeatureGrid g = grid(40, 32, 6);
  const StarModel m = star(6, 32, static_cast<int>(state.range(0)), 7);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(m, g));
}

}  // namespace

BENCHMARK(BM_correlate<kernels::reference::correlate>)->Name("correlate/serial")->Arg(40)->Arg(120);
BENCHMARK(BM_correlate<kernels::correlate>)->Name("correlate/omp")->Arg(40)->Arg(120);
BENCHMARK(BM_dt_2d<kernels::reference::dt_2d>)->Name("dt_2d/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_dt_2d<kernels::dt_2d>)->Name("dt_2d/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_part_responses<kernels::reference::part_responses>)->Name("part_responses/serial")->Arg(40)->Arg(120);
BENCHMARK(BM_part_responses<part_responses>)->Name("part_responses/omp")->Arg(40)->Arg(120);
BENCHMARK(BM_score_edpm<kernels::reference::score_edpm>)->Name("score_edpm/serial")->Arg(6)->Arg(100)->Arg(1000);
BENCHMARK(BM_score_edpm<score_edpm>)->Name("score_edpm/omp")->Arg(6)->Arg(100)->Arg(1000);

BENCHMARK_MAIN();
