#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <utility>

#include "icegraph/errors.hpp"
#include "icegraph/mesh.hpp"

namespace icegraph {
namespace {

// Splitmix64-driven Fisher-Yates so insertion order does not depend on the
// standard library's shuffle implementation.
std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct Tri {
  int a, b, c;
  bool alive = true;
};

double orient(const Point2& a, const Point2& b, const Point2& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

// For counter-clockwise (a,b,c): positive when p is strictly inside the
// circumcircle. Points on the circle give ~0; we count those as inside so the
// cavity stays star-shaped when p lands exactly on an existing edge.
double incircle_det(const Point2& a, const Point2& b, const Point2& c,
                    const Point2& p) {
  const double ax = a.x - p.x, ay = a.y - p.y;
  const double bx = b.x - p.x, by = b.y - p.y;
  const double cx = c.x - p.x, cy = c.y - p.y;
  const double a2 = ax * ax + ay * ay;
  const double b2 = bx * bx + by * by;
  const double c2 = cx * cx + cy * cy;
  return ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) +
         a2 * (bx * cy - by * cx);
}

}  // namespace

TriMesh delaunay_triangulate(std::vector<Point2> points) {
  const int n = static_cast<int>(points.size());
  if (n < 3) throw validation_error("delaunay: need at least 3 points");

  // Reject duplicates early; they would create degenerate triangles.
  {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int i, int j) {
      return points[i].x != points[j].x ? points[i].x < points[j].x
                                        : points[i].y < points[j].y;
    });
    for (int k = 1; k < n; ++k) {
      const Point2& u = points[order[k - 1]];
      const Point2& v = points[order[k]];
      if (std::abs(u.x - v.x) < 1e-9 && std::abs(u.y - v.y) < 1e-9)
        throw validation_error("delaunay: duplicate points closer than 1e-9 m");
    }
  }

  // Normalize into the unit box for conditioning of the incircle determinant.
  double xmin = points[0].x, xmax = xmin, ymin = points[0].y, ymax = ymin;
  for (const Point2& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const double scale = std::max({xmax - xmin, ymax - ymin, 1e-30});
  std::vector<Point2> pt(n + 3);
  for (int i = 0; i < n; ++i)
    pt[i] = {(points[i].x - xmin) / scale, (points[i].y - ymin) / scale};
  // Super-triangle comfortably enclosing the unit box.
  pt[n + 0] = {-3.0, -3.0};
  pt[n + 1] = {7.0, -3.0};
  pt[n + 2] = {-3.0, 7.0};

  std::vector<Tri> tris;
  tris.push_back({n, n + 1, n + 2});

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::uint64_t rng = 0x1cebe6u ^ static_cast<std::uint64_t>(n);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(splitmix64(rng) % static_cast<std::uint64_t>(i + 1));
    std::swap(order[i], order[j]);
  }

  constexpr double kInsideEps = 1e-11;
  std::vector<int> bad;
  // Directed cavity edges keyed undirected; edges seen twice are interior.
  std::map<std::pair<int, int>, std::pair<int, int>> cavity;

  for (const int p : order) {
    bad.clear();
    cavity.clear();
    for (int t = 0; t < static_cast<int>(tris.size()); ++t) {
      if (!tris[t].alive) continue;
      if (incircle_det(pt[tris[t].a], pt[tris[t].b], pt[tris[t].c], pt[p]) >
          -kInsideEps)
        bad.push_back(t);
    }
    if (bad.empty())
      throw numeric_error("delaunay: no containing circumcircle (point outside hull?)");
    for (const int t : bad) {
      tris[t].alive = false;
      const int v[4] = {tris[t].a, tris[t].b, tris[t].c, tris[t].a};
      for (int e = 0; e < 3; ++e) {
        const auto key = std::minmax(v[e], v[e + 1]);
        auto it = cavity.find(key);
        if (it == cavity.end())
          cavity.emplace(key, std::make_pair(v[e], v[e + 1]));
        else
          cavity.erase(it);  // shared by two bad triangles -> interior
      }
    }
    for (const auto& [key, dir] : cavity) {
      // Bad triangles are CCW and lie left of (a,b), so (a,b,p) stays CCW.
      if (orient(pt[dir.first], pt[dir.second], pt[p]) <= 0.0)
        throw numeric_error("delaunay: degenerate cavity triangle");
      tris.push_back({dir.first, dir.second, p});
    }
  }

  TriMesh out;
  out.nodes = std::move(points);
  out.boundary.assign(out.nodes.size(), 0);
  out.target_edge_length.assign(out.nodes.size(), 0.0);
  for (const Tri& t : tris) {
    if (!t.alive || t.a >= n || t.b >= n || t.c >= n) continue;
    out.triangles.push_back({t.a, t.b, t.c});
  }
  // Deterministic triangle order independent of insertion history.
  std::sort(out.triangles.begin(), out.triangles.end(),
            [](const std::array<int, 3>& u, const std::array<int, 3>& v) {
              auto su = u, sv = v;
              std::sort(su.begin(), su.end());
              std::sort(sv.begin(), sv.end());
              return su < sv;
            });
  return out;
}

}  // namespace icegraph
