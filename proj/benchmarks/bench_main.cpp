#include <benchmark/benchmark.h>

#include "icegraph/graph.hpp"
#include "icegraph/mesh.hpp"

namespace {

using namespace icegraph;

void BM_generate_initial_mesh(benchmark::State& state) {
  const Rect domain{0, 0, 100e3, 100e3};
  const double m0 = 100e3 / static_cast<double>(state.range(0));
  for (auto _ : state) {
    TriMesh mesh = generate_initial_mesh(domain, m0, 7);
    benchmark::DoNotOptimize(mesh.nodes.data());
  }
}
BENCHMARK(BM_generate_initial_mesh)->Arg(10)->Arg(20)->Arg(40);

void BM_mesh_to_graph(benchmark::State& state) {
  const Rect domain{0, 0, 100e3, 100e3};
  const double m0 = 100e3 / static_cast<double>(state.range(0));
  const TriMesh mesh = generate_initial_mesh(domain, m0, 7);
  for (auto _ : state) {
    GraphTopology g = mesh_to_graph(mesh);
    benchmark::DoNotOptimize(g.src.data());
  }
}
BENCHMARK(BM_mesh_to_graph)->Arg(10)->Arg(20)->Arg(40);

}  // namespace

BENCHMARK_MAIN();
