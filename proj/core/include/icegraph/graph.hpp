#pragma once

#include <span>
#include <vector>

#include "icegraph/mesh.hpp"

namespace icegraph {

// Message-passing view of a mesh: every mesh edge becomes a directed pair in
// both directions, plus one self-pair per node. Pairs are grouped by
// destination (CSR layout).
//
// Within a destination's segment the self-pair comes first and neighbors
// follow in a purely geometric order (squared distance, then dx, then dy).
// Because the order never consults node labels, aggregation sums run in the
// same order under any node relabeling, which makes message passing
// bit-exactly permutation-equivariant.
struct GraphTopology {
  int num_nodes = 0;
  std::vector<int> dst;             // destination i, one entry per pair
  std::vector<int> src;             // source j
  std::vector<double> distance;     // |x_i - x_j| in meters (0 for self-pairs)
  std::vector<int> offsets;         // size num_nodes+1; segment i = [offsets[i], offsets[i+1])

  int num_pairs() const { return static_cast<int>(dst.size()); }
  int degree(int i) const { return offsets[i + 1] - offsets[i]; }  // includes self
};

GraphTopology mesh_to_graph(const TriMesh& mesh);

// Relabel nodes: new_id = perm[old_id]. Preserves the within-segment pair
// order, so aggregation results are bit-identical modulo row permutation.
GraphTopology permute_graph(const GraphTopology& g, std::span<const int> perm);

}  // namespace icegraph
