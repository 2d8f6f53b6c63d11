#include "icegraph/graph.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "icegraph/errors.hpp"

namespace icegraph {

GraphTopology mesh_to_graph(const TriMesh& mesh) {
  const int n = mesh.num_nodes();
  const auto mesh_edges = mesh.edges();

  std::vector<std::vector<int>> nbrs(n);
  for (const auto& [a, b] : mesh_edges) {
    nbrs[a].push_back(b);
    nbrs[b].push_back(a);
  }

  GraphTopology g;
  g.num_nodes = n;
  g.offsets.resize(n + 1);
  g.dst.reserve(n + 2 * mesh_edges.size());
  g.src.reserve(g.dst.capacity());
  g.distance.reserve(g.dst.capacity());

  for (int i = 0; i < n; ++i) {
    g.offsets[i] = g.num_pairs();
    g.dst.push_back(i);
    g.src.push_back(i);
    g.distance.push_back(0.0);
    // Geometric sort key: (squared distance, dx, dy). Distinct mesh nodes
    // never tie on all three, so the order is total and label-free.
    auto key = [&](int j) {
      const double dx = mesh.nodes[j].x - mesh.nodes[i].x;
      const double dy = mesh.nodes[j].y - mesh.nodes[i].y;
      return std::tuple<double, double, double>(dx * dx + dy * dy, dx, dy);
    };
    std::sort(nbrs[i].begin(), nbrs[i].end(),
              [&](int a, int b) { return key(a) < key(b); });
    for (int j : nbrs[i]) {
      g.dst.push_back(i);
      g.src.push_back(j);
      g.distance.push_back(std::hypot(mesh.nodes[j].x - mesh.nodes[i].x,
                                      mesh.nodes[j].y - mesh.nodes[i].y));
    }
  }
  g.offsets[n] = g.num_pairs();
  return g;
}

GraphTopology permute_graph(const GraphTopology& g, std::span<const int> perm) {
  const int n = g.num_nodes;
  if (static_cast<int>(perm.size()) != n)
    throw validation_error("permute_graph: perm size != num_nodes");
  std::vector<int> inv(n, -1);
  for (int i = 0; i < n; ++i) {
    if (perm[i] < 0 || perm[i] >= n || inv[perm[i]] != -1)
      throw validation_error("permute_graph: perm is not a permutation");
    inv[perm[i]] = i;
  }

  GraphTopology out;
  out.num_nodes = n;
  out.offsets.resize(n + 1);
  for (int new_i = 0; new_i < n; ++new_i) {
    out.offsets[new_i] = out.num_pairs();
    const int old_i = inv[new_i];
    for (int k = g.offsets[old_i]; k < g.offsets[old_i + 1]; ++k) {
      out.dst.push_back(new_i);
      out.src.push_back(perm[g.src[k]]);
      out.distance.push_back(g.distance[k]);
    }
  }
  out.offsets[n] = out.num_pairs();
  return out;
}

}  // namespace icegraph
