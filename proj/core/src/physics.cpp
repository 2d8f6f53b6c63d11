#include "icegraph/physics.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "icegraph/errors.hpp"

namespace icegraph {

void PhysicsParams::validate() const {
  const double fields[] = {rho_ice, rho_water, g,        glen_n,
                           glen_B,  eps_reg,   picard_tol};
  for (double f : fields)
    if (!(f > 0.0)) throw validation_error("PhysicsParams: fields must be positive");
  if (friction_coeff < 0.0)
    throw validation_error("PhysicsParams: friction_coeff must be >= 0");
  if (rho_water <= rho_ice)
    throw validation_error("PhysicsParams: rho_water must exceed rho_ice");
  if (max_picard < 1) throw validation_error("PhysicsParams: max_picard must be >= 1");
}

int ScenarioConfig::num_steps() const {
  if (!(dt_years > 0.0)) throw validation_error("ScenarioConfig: dt must be positive");
  if (!(duration_years > 0.0))
    throw validation_error("ScenarioConfig: duration must be positive");
  const double raw = duration_years / dt_years;
  const int steps = static_cast<int>(std::lround(raw));
  if (steps < 1 || std::abs(steps * dt_years - duration_years) > 1e-9 * duration_years)
    throw validation_error("ScenarioConfig: duration must be an integer multiple of dt");
  return steps;
}

namespace {

// Basis-function gradients and area of a linear triangle.
struct ElemGeom {
  double area;
  double bx[3], by[3];  // grad(phi_i) = (bx[i], by[i]), constant per element
};

ElemGeom elem_geom(const TriMesh& mesh, int t) {
  const auto& tr = mesh.triangles[t];
  const Point2 &a = mesh.nodes[tr[0]], &b = mesh.nodes[tr[1]], &c = mesh.nodes[tr[2]];
  const double det = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
  ElemGeom g;
  g.area = 0.5 * det;
  g.bx[0] = (b.y - c.y) / det;
  g.by[0] = (c.x - b.x) / det;
  g.bx[1] = (c.y - a.y) / det;
  g.by[1] = (a.x - c.x) / det;
  g.bx[2] = (a.y - b.y) / det;
  g.by[2] = (b.x - a.x) / det;
  return g;
}

Rect boundary_rect(const TriMesh& mesh) {
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

double min_edge_length(const TriMesh& mesh) {
  double best = 1e300;
  for (const auto& [a, b] : mesh.edges())
    best = std::min(best, std::hypot(mesh.nodes[a].x - mesh.nodes[b].x,
                                     mesh.nodes[a].y - mesh.nodes[b].y));
  return best;
}

void check_state_sizes(const GlacierState& state, const TriMesh& mesh,
                       const char* where) {
  const size_t n = static_cast<size_t>(mesh.num_nodes());
  if (state.H.size() != n || state.u.size() != n || state.v.size() != n ||
      state.s.size() != n || state.b.size() != n || state.floating.size() != n)
    throw validation_error(std::string(where) + ": state arrays do not match mesh");
}

}  // namespace

BoundaryMask classify_rect_boundary(const TriMesh& mesh) {
  const Rect r = boundary_rect(mesh);
  const double tol = 1e-6 * std::max(r.width(), r.height());
  const int n = mesh.num_nodes();

  BoundaryMask bc;
  bc.fix_u.assign(n, 0);
  bc.fix_v.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    if (!mesh.boundary[i]) continue;
    const Point2 p = mesh.nodes[i];
    if (std::abs(p.x - r.x0) < tol) {
      bc.fix_u[i] = 1;  // inland edge: no inflow
      bc.fix_v[i] = 1;
    } else if (std::abs(p.y - r.y0) < tol || std::abs(p.y - r.y1) < tol) {
      bc.fix_v[i] = 1;  // lateral free-slip: no normal flow
    }
    // max-x edge: calving front, fully free (Neumann below).
  }

  // Boundary sides: triangle edges used exactly once; keep those on max x.
  std::map<std::array<int, 2>, int> count;
  for (const auto& tr : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      int a = tr[e], b = tr[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      ++count[{a, b}];
    }
  }
  for (const auto& [edge, c] : count) {
    if (c != 1) continue;
    if (std::abs(mesh.nodes[edge[0]].x - r.x1) < tol &&
        std::abs(mesh.nodes[edge[1]].x - r.x1) < tol)
      bc.front_sides.push_back(edge);
  }
  return bc;
}

void update_flotation(GlacierState& state, const PhysicsParams& params) {
  const double ratio = params.rho_ice / params.rho_water;
  for (size_t i = 0; i < state.H.size(); ++i) {
    const bool afloat =
        params.rho_ice * state.H[i] < params.rho_water * (0.0 - state.b[i]);
    state.floating[i] = afloat ? 1 : 0;
    state.s[i] = afloat ? state.H[i] * (1.0 - ratio) : state.b[i] + state.H[i];
  }
}

std::vector<double> effective_viscosity(const GlacierState& state,
                                        const TriMesh& mesh,
                                        const PhysicsParams& params) {
  check_state_sizes(state, mesh, "effective_viscosity");
  for (size_t i = 0; i < state.u.size(); ++i)
    if (!std::isfinite(state.u[i]) || !std::isfinite(state.v[i]))
      throw validation_error("effective_viscosity: non-finite velocity");

  const double expo = (params.glen_n - 1.0) / params.glen_n;
  std::vector<double> mu(mesh.num_triangles());
  for (int t = 0; t < mesh.num_triangles(); ++t) {
    const auto& tr = mesh.triangles[t];
    const ElemGeom g = elem_geom(mesh, t);
    double ux = 0, uy = 0, vx = 0, vy = 0;
    for (int k = 0; k < 3; ++k) {
      ux += state.u[tr[k]] * g.bx[k];
      uy += state.u[tr[k]] * g.by[k];
      vx += state.v[tr[k]] * g.bx[k];
      vy += state.v[tr[k]] * g.by[k];
    }
    const double exy = 0.5 * (uy + vx);
    const double ee2 = ux * ux + vy * vy + ux * vy + exy * exy;
    const double ee = std::max(std::sqrt(std::max(ee2, 0.0)), params.eps_reg);
    mu[t] = params.glen_B / (2.0 * std::pow(ee, expo));
  }
  return mu;
}

StressSolveInfo solve_stress_balance(GlacierState& state, const TriMesh& mesh,
                                     const PhysicsParams& params,
                                     const BoundaryMask& bc) {
  params.validate();
  check_state_sizes(state, mesh, "solve_stress_balance");
  const int n = mesh.num_nodes();
  if (static_cast<int>(bc.fix_u.size()) != n || static_cast<int>(bc.fix_v.size()) != n)
    throw validation_error("solve_stress_balance: boundary mask does not match mesh");

  const std::vector<double> areas = node_areas(mesh);
  const double rho_g = params.rho_ice * params.g;

  StressSolveInfo info;
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::VectorXd rhs(2 * n), sol(2 * n);

  for (int it = 0; it < params.max_picard; ++it) {
    const std::vector<double> mu = effective_viscosity(state, mesh, params);
    trip.clear();
    rhs.setZero();

    for (int t = 0; t < mesh.num_triangles(); ++t) {
      const auto& tr = mesh.triangles[t];
      const ElemGeom g = elem_geom(mesh, t);
      const double Hbar = (state.H[tr[0]] + state.H[tr[1]] + state.H[tr[2]]) / 3.0;
      const double c = mu[t] * Hbar * g.area;
      double sx = 0, sy = 0;
      for (int k = 0; k < 3; ++k) {
        sx += state.s[tr[k]] * g.bx[k];
        sy += state.s[tr[k]] * g.by[k];
      }
      for (int i = 0; i < 3; ++i) {
        const int gi = tr[i];
        const bool rowu = !bc.fix_u[gi];
        const bool rowv = !bc.fix_v[gi];
        if (rowu) rhs[gi] -= rho_g * Hbar * sx * g.area / 3.0;
        if (rowv) rhs[n + gi] -= rho_g * Hbar * sy * g.area / 3.0;
        for (int j = 0; j < 3; ++j) {
          const int gj = tr[j];
          if (rowu) {
            trip.emplace_back(gi, gj, c * (4.0 * g.bx[i] * g.bx[j] + g.by[i] * g.by[j]));
            trip.emplace_back(gi, n + gj, c * (2.0 * g.bx[i] * g.by[j] + g.by[i] * g.bx[j]));
          }
          if (rowv) {
            trip.emplace_back(n + gi, n + gj, c * (4.0 * g.by[i] * g.by[j] + g.bx[i] * g.bx[j]));
            trip.emplace_back(n + gi, gj, c * (2.0 * g.by[i] * g.bx[j] + g.bx[i] * g.by[j]));
          }
        }
      }
    }

    // Linear basal drag on grounded nodes, lumped. Every node also gets a
    // vanishing damping term: where ice has left entirely (floating, H = 0 on
    // all incident elements) the viscous rows drop to zero and the system
    // would turn singular; the damping pins such nodes to u = v = 0 while
    // perturbing glaciated nodes at the 1e-7 relative level or below.
    constexpr double kIceFreeDamping = 1e-4;  // Pa·yr/m, vs friction ~1e3
    for (int i = 0; i < n; ++i) {
      const double beta_a =
          (state.floating[i] ? kIceFreeDamping : params.friction_coeff + kIceFreeDamping) *
          areas[i];
      if (!bc.fix_u[i]) trip.emplace_back(i, i, beta_a);
      if (!bc.fix_v[i]) trip.emplace_back(n + i, n + i, beta_a);
    }

    // Calving front: depth-integrated ice pressure minus ocean back-pressure,
    // outward normal +x on the max-x edge.
    for (const auto& side : bc.front_sides) {
      const int a = side[0], b = side[1];
      const double len = std::hypot(mesh.nodes[a].x - mesh.nodes[b].x,
                                    mesh.nodes[a].y - mesh.nodes[b].y);
      const double Hm = 0.5 * (state.H[a] + state.H[b]);
      const double sm = 0.5 * (state.s[a] + state.s[b]);
      const double draft = std::max(0.0, Hm - sm);  // submerged ice depth
      const double force =
          0.5 * params.g * (params.rho_ice * Hm * Hm - params.rho_water * draft * draft);
      if (!bc.fix_u[a]) rhs[a] += 0.5 * len * force;
      if (!bc.fix_u[b]) rhs[b] += 0.5 * len * force;
    }

    for (int i = 0; i < n; ++i) {
      if (bc.fix_u[i]) trip.emplace_back(i, i, 1.0);
      if (bc.fix_v[i]) trip.emplace_back(n + i, n + i, 1.0);
    }

    Eigen::SparseMatrix<double> K(2 * n, 2 * n);
    K.setFromTriplets(trip.begin(), trip.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(K);
    if (lu.info() != Eigen::Success)
      throw numeric_error("solve_stress_balance: sparse LU factorization failed at Picard iteration " +
                          std::to_string(it));
    sol = lu.solve(rhs);
    if (lu.info() != Eigen::Success)
      throw numeric_error("solve_stress_balance: sparse solve failed at Picard iteration " +
                          std::to_string(it));

    double scale = 1e-10, change = 0.0;
    for (int i = 0; i < 2 * n; ++i)
      if (!std::isfinite(sol[i]))
        throw numeric_error(
            "solve_stress_balance: non-finite velocity at Picard iteration " +
            std::to_string(it + 1));
    for (int i = 0; i < n; ++i) {
      scale = std::max({scale, std::abs(sol[i]), std::abs(sol[n + i])});
      change = std::max({change, std::abs(sol[i] - state.u[i]),
                         std::abs(sol[n + i] - state.v[i])});
    }
    for (int i = 0; i < n; ++i) {
      state.u[i] = sol[i];
      state.v[i] = sol[n + i];
    }
    const double rel = change / scale;
    info.history.push_back(rel);
    info.picard_iterations = it + 1;
    info.final_rel_change = rel;
    if (rel < params.picard_tol) return info;
  }

  std::string hist;
  for (size_t k = info.history.size() > 8 ? info.history.size() - 8 : 0;
       k < info.history.size(); ++k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), " %.3g", info.history[k]);
    hist += buf;
  }
  throw numeric_error("solve_stress_balance: Picard did not reach " +
                      std::to_string(params.picard_tol) + " in " +
                      std::to_string(params.max_picard) +
                      " iterations; trailing rel changes:" + hist);
}

void advance_thickness(GlacierState& state, const TriMesh& mesh,
                       const ScenarioConfig& scenario, const PhysicsParams& params,
                       const BoundaryMask& bc, double dt_years) {
  check_state_sizes(state, mesh, "advance_thickness");
  if (!(dt_years > 0.0)) throw validation_error("advance_thickness: dt must be positive");
  const int n = mesh.num_nodes();
  const std::vector<double> areas = node_areas(mesh);

  // CFL control: explicit transport must not cross an edge per sub-step.
  double vmax = 0.0;
  for (int i = 0; i < n; ++i)
    vmax = std::max(vmax, std::hypot(state.u[i], state.v[i]));
  const double h_min = min_edge_length(mesh);
  const double cfl = vmax * dt_years / h_min;
  // A CFL in the thousands means the stress balance has blown up, not that
  // transport needs finer slicing; refuse instead of sub-stepping forever.
  if (!(cfl < 1e4))
    throw numeric_error("advance_thickness: runaway velocities (CFL " +
                        std::to_string(cfl) + ")");
  int nsub = 1;
  if (cfl > 0.5) {
    nsub = static_cast<int>(std::ceil(cfl / 0.5));
    std::fprintf(stderr,
                 "advance_thickness: CFL %.2f exceeds 0.5, sub-stepping %d times\n",
                 cfl, nsub);
  }
  const double dt = dt_years / nsub;

  std::vector<double> flux(n);
  for (int sub = 0; sub < nsub; ++sub) {
    std::fill(flux.begin(), flux.end(), 0.0);

    for (int t = 0; t < mesh.num_triangles(); ++t) {
      const auto& tr = mesh.triangles[t];
      const ElemGeom g = elem_geom(mesh, t);
      double qx = 0, qy = 0, ub = 0, vb = 0, Hx = 0, Hy = 0;
      for (int k = 0; k < 3; ++k) {
        qx += state.H[tr[k]] * state.u[tr[k]];
        qy += state.H[tr[k]] * state.v[tr[k]];
        ub += state.u[tr[k]];
        vb += state.v[tr[k]];
        Hx += state.H[tr[k]] * g.bx[k];
        Hy += state.H[tr[k]] * g.by[k];
      }
      qx /= 3.0;
      qy /= 3.0;
      ub /= 3.0;
      vb /= 3.0;
      const double speed = std::hypot(ub, vb);
      // Streamline-upwind stabilization; vanishes in the element-sum, so it
      // never creates or destroys ice.
      const double tau = std::sqrt(2.0 * g.area) / (2.0 * speed + 1e-12);
      const double stream = tau * (ub * Hx + vb * Hy);
      for (int i = 0; i < 3; ++i)
        flux[tr[i]] += g.area * ((qx - stream * ub) * g.bx[i] + (qy - stream * vb) * g.by[i]);
    }

    // Ice leaving through the calving front.
    for (const auto& side : bc.front_sides) {
      const int a = side[0], b = side[1];
      const double len = std::hypot(mesh.nodes[a].x - mesh.nodes[b].x,
                                    mesh.nodes[a].y - mesh.nodes[b].y);
      const double qn = 0.5 * (state.H[a] * state.u[a] + state.H[b] * state.u[b]);
      flux[a] -= 0.5 * len * qn;
      flux[b] -= 0.5 * len * qn;
    }

    for (int i = 0; i < n; ++i) {
      const double source =
          scenario.smb - (state.floating[i] ? scenario.melt_rate : 0.0);
      const double next = state.H[i] + dt * (source + flux[i] / areas[i]);
      // Must test before the clamp: max(0, nan) silently yields 0.
      if (!std::isfinite(next))
        throw numeric_error("advance_thickness: non-finite thickness at node " +
                            std::to_string(i));
      state.H[i] = std::max(0.0, next);
    }
  }
  update_flotation(state, params);
  state.time += dt_years;
}

std::vector<GlacierState> run_transient(const ScenarioConfig& scenario,
                                        const GlacierState& initial,
                                        const TriMesh& mesh,
                                        const PhysicsParams& params) {
  const int steps = scenario.num_steps();
  check_state_sizes(initial, mesh, "run_transient");
  const BoundaryMask bc = classify_rect_boundary(mesh);

  GlacierState state = initial;
  update_flotation(state, params);
  std::vector<GlacierState> trajectory;
  trajectory.reserve(steps);
  try {
    // Diagnostic solve so the first transport step has consistent velocities.
    solve_stress_balance(state, mesh, params, bc);
    for (int k = 1; k <= steps; ++k) {
      advance_thickness(state, mesh, scenario, params, bc, scenario.dt_years);
      solve_stress_balance(state, mesh, params, bc);
      state.time = k * scenario.dt_years;
      trajectory.push_back(state);
    }
  } catch (const numeric_error& e) {
    throw numeric_error("run_transient: step " + std::to_string(trajectory.size() + 1) +
                        ": " + e.what());
  }
  return trajectory;
}

GlacierState synthesize_initial_glacier(const TriMesh& mesh,
                                        const GlacierProfile& profile,
                                        const PhysicsParams& params) {
  const Rect r = boundary_rect(mesh);
  const int n = mesh.num_nodes();
  GlacierState state;
  state.H.resize(n);
  state.b.resize(n);
  state.u.assign(n, 0.0);
  state.v.assign(n, 0.0);
  state.s.resize(n);
  state.floating.resize(n);
  const double pi = 3.14159265358979323846;
  // Build the geometry from a smooth surface ramp so the driving stress is
  // bounded everywhere. Thickness follows hydrostatics: a column is grounded
  // ice of thickness s - b where that ice is heavy enough to touch the bed,
  // and floating ice of thickness s/(1 - rho_i/rho_w) otherwise. Both branches
  // reproduce the same surface, so s stays shock-free across the grounding
  // line (a naive thickness ramp puts a surface cliff there, and the first
  // stress solve answers with runaway velocities).
  const double afloat = 1.0 - params.rho_ice / params.rho_water;
  const double s_inland = profile.bed_inland + profile.thick_inland;
  const double s_ocean = profile.thick_ocean * afloat;
  for (int i = 0; i < n; ++i) {
    const double tx = (mesh.nodes[i].x - r.x0) / r.width();
    const double ty = (mesh.nodes[i].y - r.y0) / r.height();
    state.b[i] = profile.bed_inland + (profile.bed_ocean - profile.bed_inland) * tx -
                 profile.channel_amp * std::sin(pi * ty) * tx * tx;
    const double s = s_inland + (s_ocean - s_inland) * tx;
    state.H[i] = std::max(0.0, std::min(s - state.b[i], s / afloat));
  }
  update_flotation(state, params);
  return state;
}

}  // namespace icegraph
