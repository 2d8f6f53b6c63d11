#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace icegraph {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

// Axis-aligned rectangular domain, coordinates in meters.
struct Rect {
  double x0 = 0.0, y0 = 0.0;
  double x1 = 0.0, y1 = 0.0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

// Unstructured triangle mesh. Triangles are counter-clockwise; node order is
// part of the mesh identity (field vectors are indexed by node).
struct TriMesh {
  std::vector<Point2> nodes;
  std::vector<std::array<int, 3>> triangles;
  std::vector<std::uint8_t> boundary;        // 1 if the node lies on the domain boundary
  std::vector<double> target_edge_length;    // refinement sizing, meters, per node

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  int num_triangles() const { return static_cast<int>(triangles.size()); }

  double signed_area(int t) const;
  Point2 centroid(int t) const;

  // Unique undirected edges (a < b), sorted lexicographically.
  std::vector<std::array<int, 2>> edges() const;

  // Throws validation_error on inverted/degenerate triangles, duplicate nodes
  // (closer than 1e-9 m), out-of-range indices, or edges shared by >2 triangles.
  void validate() const;
};

// Mesh generation ------------------------------------------------------------

// Structured triangulation of `domain` with spacing ~m0 and alternating cell
// diagonals; interior nodes are jittered by up to 10% of the spacing so the
// mesh is not axis-degenerate. Throws validation_error if either domain side
// is shorter than 4*m0.
TriMesh generate_initial_mesh(const Rect& domain, double m0, std::uint64_t seed);

// Delaunay-based adaptive refinement. Builds a sizing field from nodal speeds
// (fast regions get edges near min_len, slow regions near max_len) and
// retriangulates the domain to match it, followed by two Laplacian smoothing
// sweeps of interior nodes. The input mesh is not modified.
TriMesh refine_by_velocity(const TriMesh& mesh, std::span<const double> speed,
                           double min_len, double max_len);

// Sizing field used by refine_by_velocity, exposed for tests: monotone
// non-increasing in speed, clamped to [min_len, max_len].
std::vector<double> velocity_sizing(std::span<const double> speed,
                                    double min_len, double max_len);

// Interpolation --------------------------------------------------------------

// Piecewise-linear (barycentric) evaluation of a nodal field at arbitrary
// points. Queries outside the mesh yield nullopt.
std::vector<std::optional<double>> interpolate_node_field(
    const TriMesh& mesh, std::span<const double> field,
    std::span<const Point2> query);

// Interpolate a nodal field from `src` onto the nodes of `dst`. Points that
// fall outside `src` (boundary roundoff) take the value of the nearest src node.
std::vector<double> transfer_node_field(const TriMesh& src,
                                        std::span<const double> field,
                                        const TriMesh& dst);

// Point location accelerator: uniform bucket grid over triangle bounding
// boxes. Build once, then locate() many times.
class TriLocator {
 public:
  explicit TriLocator(const TriMesh& mesh);
  // Returns triangle index and barycentric weights, or -1 if outside.
  int locate(Point2 p, std::array<double, 3>& bary) const;

 private:
  const TriMesh& mesh_;
  double x0_, y0_, cell_;
  int nx_, ny_;
  std::vector<std::vector<int>> buckets_;
};

// Statistics & IO ------------------------------------------------------------

double mean_edge_length(const TriMesh& mesh);
double total_area(const TriMesh& mesh);

// Lumped nodal area: one third of the area of each incident triangle.
std::vector<double> node_areas(const TriMesh& mesh);

// Plain-text format that round-trips exactly (coordinates written with %.17g):
//   nodes <num_nodes> triangles <num_triangles>
//   <x> <y> <boundary_flag>     (num_nodes lines)
//   <i> <j> <k>                 (num_triangles lines)
void save_mesh(const TriMesh& mesh, const std::string& path);
TriMesh load_mesh(const std::string& path);

// Internal: Delaunay triangulation of a point set (Bowyer-Watson). Boundary
// flags and sizing are left to the caller. Exposed for tests.
TriMesh delaunay_triangulate(std::vector<Point2> points);

}  // namespace icegraph
