#include "icegraph/mesh.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <random>
#include <set>
#include <string>

#include "icegraph/errors.hpp"

namespace icegraph {

double TriMesh::signed_area(int t) const {
  const auto& tr = triangles[t];
  const Point2 &a = nodes[tr[0]], &b = nodes[tr[1]], &c = nodes[tr[2]];
  return 0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x));
}

Point2 TriMesh::centroid(int t) const {
  const auto& tr = triangles[t];
  return {(nodes[tr[0]].x + nodes[tr[1]].x + nodes[tr[2]].x) / 3.0,
          (nodes[tr[0]].y + nodes[tr[1]].y + nodes[tr[2]].y) / 3.0};
}

std::vector<std::array<int, 2>> TriMesh::edges() const {
  std::set<std::array<int, 2>> uniq;
  for (const auto& tr : triangles) {
    for (int e = 0; e < 3; ++e) {
      int a = tr[e], b = tr[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      uniq.insert({a, b});
    }
  }
  return {uniq.begin(), uniq.end()};
}

void TriMesh::validate() const {
  const int n = num_nodes();
  if (boundary.size() != nodes.size() || target_edge_length.size() != nodes.size())
    throw validation_error("mesh: per-node array sizes disagree");
  for (const auto& tr : triangles)
    for (int v : tr)
      if (v < 0 || v >= n) throw validation_error("mesh: triangle index out of range");
  for (int t = 0; t < num_triangles(); ++t)
    if (signed_area(t) <= 0.0)
      throw validation_error("mesh: non-positive triangle area at t=" + std::to_string(t));

  // Duplicate nodes: sort by coordinates, compare neighbors.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    return nodes[i].x != nodes[j].x ? nodes[i].x < nodes[j].x : nodes[i].y < nodes[j].y;
  });
  for (int k = 1; k < n; ++k) {
    const Point2 &u = nodes[order[k - 1]], &v = nodes[order[k]];
    if (std::abs(u.x - v.x) < 1e-9 && std::abs(u.y - v.y) < 1e-9)
      throw validation_error("mesh: duplicate nodes closer than 1e-9 m");
  }

  // Manifoldness: every edge belongs to one triangle (hull) or two (interior).
  std::map<std::array<int, 2>, int> count;
  for (const auto& tr : triangles) {
    for (int e = 0; e < 3; ++e) {
      int a = tr[e], b = tr[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      ++count[{a, b}];
    }
  }
  for (const auto& [edge, c] : count)
    if (c > 2)
      throw validation_error("mesh: edge shared by more than two triangles");
}

// Mesh generation ------------------------------------------------------------

TriMesh generate_initial_mesh(const Rect& domain, double m0, std::uint64_t seed) {
  if (!(m0 > 0.0)) throw validation_error("generate_initial_mesh: m0 must be positive");
  if (domain.width() < 4.0 * m0 || domain.height() < 4.0 * m0)
    throw validation_error("generate_initial_mesh: domain sides must be at least 4*m0");

  const int cx = static_cast<int>(std::lround(domain.width() / m0));
  const int cy = static_cast<int>(std::lround(domain.height() / m0));
  const double hx = domain.width() / cx;
  const double hy = domain.height() / cy;

  TriMesh mesh;
  mesh.nodes.reserve((cx + 1) * (cy + 1));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (int j = 0; j <= cy; ++j) {
    for (int i = 0; i <= cx; ++i) {
      Point2 p{domain.x0 + i * hx, domain.y0 + j * hy};
      const bool on_boundary = (i == 0 || i == cx || j == 0 || j == cy);
      if (!on_boundary) {
        // Jitter interior nodes so triangle shapes are not axis-degenerate.
        p.x += jitter(rng) * hx;
        p.y += jitter(rng) * hy;
      }
      mesh.nodes.push_back(p);
      mesh.boundary.push_back(on_boundary ? 1 : 0);
    }
  }
  auto id = [cx](int i, int j) { return j * (cx + 1) + i; };
  for (int j = 0; j < cy; ++j) {
    for (int i = 0; i < cx; ++i) {
      const int v00 = id(i, j), v10 = id(i + 1, j);
      const int v01 = id(i, j + 1), v11 = id(i + 1, j + 1);
      // Alternate the cell diagonal so the triangulation has no global grain.
      if ((i + j) % 2 == 0) {
        mesh.triangles.push_back({v00, v10, v11});
        mesh.triangles.push_back({v00, v11, v01});
      } else {
        mesh.triangles.push_back({v00, v10, v01});
        mesh.triangles.push_back({v10, v11, v01});
      }
    }
  }
  mesh.target_edge_length.assign(mesh.nodes.size(), m0);
  mesh.validate();
  return mesh;
}

std::vector<double> velocity_sizing(std::span<const double> speed,
                                    double min_len, double max_len) {
  if (!(min_len > 0.0) || !(max_len >= min_len))
    throw validation_error("velocity_sizing: need 0 < min_len <= max_len");
  for (double v : speed)
    if (!std::isfinite(v) || v < 0.0)
      throw validation_error("velocity_sizing: speeds must be finite and >= 0");

  // Reference speed: the median, floored so an all-slow or all-zero field maps
  // to max_len uniformly instead of collapsing to min_len.
  std::vector<double> sorted(speed.begin(), speed.end());
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
  const double vmax = sorted.empty() ? 0.0 : sorted.back();
  const double v_ref = std::max({median, 0.01 * vmax, 1e-12});

  std::vector<double> t(speed.size());
  for (size_t i = 0; i < speed.size(); ++i) {
    const double s = max_len * v_ref / std::max(speed[i], v_ref);
    t[i] = std::clamp(s, min_len, max_len);
  }
  return t;
}

namespace {

// Recover the rectangular hull from boundary nodes. Generation guarantees the
// domain is an axis-aligned rectangle.
Rect hull_rect(const TriMesh& mesh) {
  Rect r{1e300, 1e300, -1e300, -1e300};
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    if (!mesh.boundary[i]) continue;
    r.x0 = std::min(r.x0, mesh.nodes[i].x);
    r.y0 = std::min(r.y0, mesh.nodes[i].y);
    r.x1 = std::max(r.x1, mesh.nodes[i].x);
    r.y1 = std::max(r.y1, mesh.nodes[i].y);
  }
  return r;
}

bool on_same_side(const Rect& r, const Point2& a, const Point2& b) {
  constexpr double tol = 1e-6;
  return (std::abs(a.x - r.x0) < tol && std::abs(b.x - r.x0) < tol) ||
         (std::abs(a.x - r.x1) < tol && std::abs(b.x - r.x1) < tol) ||
         (std::abs(a.y - r.y0) < tol && std::abs(b.y - r.y0) < tol) ||
         (std::abs(a.y - r.y1) < tol && std::abs(b.y - r.y1) < tol);
}

struct SizedPoint {
  Point2 p;
  double t;       // local target edge length
  bool boundary;
};

}  // namespace

TriMesh refine_by_velocity(const TriMesh& mesh, std::span<const double> speed,
                           double min_len, double max_len) {
  if (static_cast<int>(speed.size()) != mesh.num_nodes())
    throw validation_error("refine_by_velocity: speed size != node count");
  const std::vector<double> sizing = velocity_sizing(speed, min_len, max_len);
  const Rect rect = hull_rect(mesh);

  std::vector<SizedPoint> pts;
  pts.reserve(mesh.nodes.size());
  for (int i = 0; i < mesh.num_nodes(); ++i)
    pts.push_back({mesh.nodes[i], sizing[i], mesh.boundary[i] != 0});

  auto rebuild = [&]() {
    std::vector<Point2> coords(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) coords[i] = pts[i].p;
    return delaunay_triangulate(std::move(coords));
  };

  // Insert midpoints of over-long edges until every edge respects the sizing
  // field, re-triangulating between rounds. Splitting only the longest edge of
  // each offending triangle keeps insertion counts modest per round.
  constexpr double kSplitFactor = 1.4;
  TriMesh work = rebuild();
  for (int round = 0; round < 24; ++round) {
    std::set<std::array<int, 2>> split;
    for (const auto& tr : work.triangles) {
      int la = -1, lb = -1;
      double longest = 0.0, target = 0.0;
      for (int e = 0; e < 3; ++e) {
        const int a = tr[e], b = tr[(e + 1) % 3];
        const double len = std::hypot(pts[a].p.x - pts[b].p.x, pts[a].p.y - pts[b].p.y);
        if (len > longest) {
          longest = len;
          la = a;
          lb = b;
          target = 0.5 * (pts[a].t + pts[b].t);
        }
      }
      if (longest > kSplitFactor * target) {
        if (la > lb) std::swap(la, lb);
        split.insert({la, lb});
      }
    }
    if (split.empty()) break;
    for (const auto& [a, b] : split) {
      SizedPoint mid;
      mid.p = {0.5 * (pts[a].p.x + pts[b].p.x), 0.5 * (pts[a].p.y + pts[b].p.y)};
      mid.t = 0.5 * (pts[a].t + pts[b].t);
      mid.boundary = pts[a].boundary && pts[b].boundary && on_same_side(rect, pts[a].p, pts[b].p);
      pts.push_back(mid);
    }
    work = rebuild();
    if (static_cast<int>(pts.size()) > 200000)
      throw numeric_error("refine_by_velocity: runaway refinement (>200k nodes)");
  }

  // Two Laplacian sweeps relax the midpoint-split pattern; boundary nodes stay
  // put so the hull is preserved exactly.
  for (int sweep = 0; sweep < 2; ++sweep) {
    std::vector<Point2> sum(pts.size(), {0.0, 0.0});
    std::vector<int> deg(pts.size(), 0);
    for (const auto& [a, b] : work.edges()) {
      sum[a].x += pts[b].p.x;
      sum[a].y += pts[b].p.y;
      sum[b].x += pts[a].p.x;
      sum[b].y += pts[a].p.y;
      ++deg[a];
      ++deg[b];
    }
    for (size_t i = 0; i < pts.size(); ++i) {
      if (pts[i].boundary || deg[i] == 0) continue;
      pts[i].p = {sum[i].x / deg[i], sum[i].y / deg[i]};
    }
    work = rebuild();
  }

  for (size_t i = 0; i < pts.size(); ++i) {
    work.boundary[i] = pts[i].boundary ? 1 : 0;
    work.target_edge_length[i] = pts[i].t;
  }
  work.validate();
  return work;
}

// Interpolation --------------------------------------------------------------

TriLocator::TriLocator(const TriMesh& mesh) : mesh_(mesh) {
  double xmin = 1e300, ymin = 1e300, xmax = -1e300, ymax = -1e300;
  for (const Point2& p : mesh.nodes) {
    xmin = std::min(xmin, p.x);
    ymin = std::min(ymin, p.y);
    xmax = std::max(xmax, p.x);
    ymax = std::max(ymax, p.y);
  }
  const int nt = mesh.num_triangles();
  // Aim for O(1) triangles per bucket.
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-30});
  const int grid = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(nt))));
  x0_ = xmin;
  y0_ = ymin;
  cell_ = span / grid;
  nx_ = std::max(1, static_cast<int>(std::ceil((xmax - xmin) / cell_)));
  ny_ = std::max(1, static_cast<int>(std::ceil((ymax - ymin) / cell_)));
  buckets_.assign(static_cast<size_t>(nx_) * ny_, {});
  for (int t = 0; t < nt; ++t) {
    const auto& tr = mesh.triangles[t];
    double txmin = 1e300, tymin = 1e300, txmax = -1e300, tymax = -1e300;
    for (int v : tr) {
      txmin = std::min(txmin, mesh.nodes[v].x);
      tymin = std::min(tymin, mesh.nodes[v].y);
      txmax = std::max(txmax, mesh.nodes[v].x);
      tymax = std::max(tymax, mesh.nodes[v].y);
    }
    const int i0 = std::clamp(static_cast<int>((txmin - x0_) / cell_), 0, nx_ - 1);
    const int i1 = std::clamp(static_cast<int>((txmax - x0_) / cell_), 0, nx_ - 1);
    const int j0 = std::clamp(static_cast<int>((tymin - y0_) / cell_), 0, ny_ - 1);
    const int j1 = std::clamp(static_cast<int>((tymax - y0_) / cell_), 0, ny_ - 1);
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i)
        buckets_[static_cast<size_t>(j) * nx_ + i].push_back(t);
  }
}

int TriLocator::locate(Point2 p, std::array<double, 3>& bary) const {
  const int i = std::clamp(static_cast<int>((p.x - x0_) / cell_), 0, nx_ - 1);
  const int j = std::clamp(static_cast<int>((p.y - y0_) / cell_), 0, ny_ - 1);
  constexpr double tol = -1e-10;
  for (const int t : buckets_[static_cast<size_t>(j) * nx_ + i]) {
    const auto& tr = mesh_.triangles[t];
    const Point2 &a = mesh_.nodes[tr[0]], &b = mesh_.nodes[tr[1]], &c = mesh_.nodes[tr[2]];
    const double det = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if (det <= 0.0) continue;
    const double w1 = ((b.x - p.x) * (c.y - p.y) - (b.y - p.y) * (c.x - p.x)) / det;
    const double w2 = ((c.x - p.x) * (a.y - p.y) - (c.y - p.y) * (a.x - p.x)) / det;
    const double w3 = 1.0 - w1 - w2;
    if (w1 >= tol && w2 >= tol && w3 >= tol) {
      bary = {w1, w2, w3};
      return t;
    }
  }
  return -1;
}

std::vector<std::optional<double>> interpolate_node_field(
    const TriMesh& mesh, std::span<const double> field,
    std::span<const Point2> query) {
  if (static_cast<int>(field.size()) != mesh.num_nodes())
    throw validation_error("interpolate_node_field: field size != node count");
  const TriLocator loc(mesh);
  std::vector<std::optional<double>> out(query.size());
  std::array<double, 3> w{};
  for (size_t q = 0; q < query.size(); ++q) {
    const int t = loc.locate(query[q], w);
    if (t < 0) continue;
    const auto& tr = mesh.triangles[t];
    out[q] = w[0] * field[tr[0]] + w[1] * field[tr[1]] + w[2] * field[tr[2]];
  }
  return out;
}

std::vector<double> transfer_node_field(const TriMesh& src,
                                        std::span<const double> field,
                                        const TriMesh& dst) {
  if (static_cast<int>(field.size()) != src.num_nodes())
    throw validation_error("transfer_node_field: field size != node count");
  const TriLocator loc(src);
  std::vector<double> out(dst.num_nodes());
  std::array<double, 3> w{};
  for (int q = 0; q < dst.num_nodes(); ++q) {
    const Point2 p = dst.nodes[q];
    const int t = loc.locate(p, w);
    if (t >= 0) {
      const auto& tr = src.triangles[t];
      out[q] = w[0] * field[tr[0]] + w[1] * field[tr[1]] + w[2] * field[tr[2]];
    } else {
      // Outside by roundoff near the hull: fall back to the nearest src node.
      double best = 1e300;
      int bi = 0;
      for (int i = 0; i < src.num_nodes(); ++i) {
        const double d = std::hypot(src.nodes[i].x - p.x, src.nodes[i].y - p.y);
        if (d < best) {
          best = d;
          bi = i;
        }
      }
      out[q] = field[bi];
    }
  }
  return out;
}

// Statistics & IO ------------------------------------------------------------

double mean_edge_length(const TriMesh& mesh) {
  const auto es = mesh.edges();
  if (es.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [a, b] : es)
    sum += std::hypot(mesh.nodes[a].x - mesh.nodes[b].x,
                      mesh.nodes[a].y - mesh.nodes[b].y);
  return sum / static_cast<double>(es.size());
}

double total_area(const TriMesh& mesh) {
  double sum = 0.0;
  for (int t = 0; t < mesh.num_triangles(); ++t) sum += mesh.signed_area(t);
  return sum;
}

std::vector<double> node_areas(const TriMesh& mesh) {
  std::vector<double> a(mesh.num_nodes(), 0.0);
  for (int t = 0; t < mesh.num_triangles(); ++t) {
    const double third = mesh.signed_area(t) / 3.0;
    for (int v : mesh.triangles[t]) a[v] += third;
  }
  return a;
}

void save_mesh(const TriMesh& mesh, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw io_error("save_mesh: cannot open " + path);
  std::fprintf(f, "nodes %d triangles %d\n", mesh.num_nodes(), mesh.num_triangles());
  for (int i = 0; i < mesh.num_nodes(); ++i)
    std::fprintf(f, "%.17g %.17g %d\n", mesh.nodes[i].x, mesh.nodes[i].y,
                 static_cast<int>(mesh.boundary[i]));
  for (const auto& tr : mesh.triangles)
    std::fprintf(f, "%d %d %d\n", tr[0], tr[1], tr[2]);
  if (std::fclose(f) != 0) throw io_error("save_mesh: write failed for " + path);
}

TriMesh load_mesh(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw io_error("load_mesh: cannot open " + path);
  char tag1[16], tag2[16];
  int n = 0, t = 0;
  if (std::fscanf(f, "%15s %d %15s %d", tag1, &n, tag2, &t) != 4 ||
      std::strcmp(tag1, "nodes") != 0 || std::strcmp(tag2, "triangles") != 0 ||
      n < 3 || t < 1) {
    std::fclose(f);
    throw io_error("load_mesh: bad header in " + path);
  }
  TriMesh mesh;
  mesh.nodes.resize(n);
  mesh.boundary.resize(n);
  for (int i = 0; i < n; ++i) {
    double x, y;
    int b;
    if (std::fscanf(f, "%lf %lf %d", &x, &y, &b) != 3) {
      std::fclose(f);
      throw io_error("load_mesh: truncated node section in " + path);
    }
    mesh.nodes[i] = {x, y};
    mesh.boundary[i] = static_cast<std::uint8_t>(b != 0);
  }
  mesh.triangles.resize(t);
  for (int k = 0; k < t; ++k) {
    int a, b, c;
    if (std::fscanf(f, "%d %d %d", &a, &b, &c) != 3) {
      std::fclose(f);
      throw io_error("load_mesh: truncated triangle section in " + path);
    }
    mesh.triangles[k] = {a, b, c};
  }
  std::fclose(f);

  // Sizing is not part of the format; reconstruct a usable per-node value.
  mesh.target_edge_length.assign(n, 0.0);
  std::vector<int> deg(n, 0);
  for (const auto& [a, b] : mesh.edges()) {
    const double len = std::hypot(mesh.nodes[a].x - mesh.nodes[b].x,
                                  mesh.nodes[a].y - mesh.nodes[b].y);
    mesh.target_edge_length[a] += len;
    mesh.target_edge_length[b] += len;
    ++deg[a];
    ++deg[b];
  }
  for (int i = 0; i < n; ++i)
    if (deg[i] > 0) mesh.target_edge_length[i] /= deg[i];
  mesh.validate();
  return mesh;
}

}  // namespace icegraph
