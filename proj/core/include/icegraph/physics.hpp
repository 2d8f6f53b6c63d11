#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "icegraph/mesh.hpp"

namespace icegraph {

// All physics runs in ice-sheet units: meters, years, Pa. Velocities m/yr,
// strain rates 1/yr, viscosity Pa·yr.
struct PhysicsParams {
  double rho_ice = 917.0;       // kg/m^3
  double rho_water = 1028.0;    // kg/m^3
  double g = 9.81;              // m/s^2
  double glen_n = 3.0;
  // Glen rate factor 1.6e8 Pa·s^(1/3) expressed in Pa·yr^(1/3).
  double glen_B = 1.6e8 / 316.00729;  // cbrt(31557600 s/yr)
  double friction_coeff = 1000.0;     // Pa·yr/m, linear law on grounded nodes
  double eps_reg = 1e-8;              // strain-rate floor, 1/yr
  double picard_tol = 1e-4;           // relative velocity change
  int max_picard = 50;

  void validate() const;
};

struct GlacierState {
  std::vector<double> H;             // thickness, m
  std::vector<double> u, v;          // velocity, m/yr
  std::vector<double> s;             // surface elevation, m
  std::vector<double> b;             // bed elevation, m (sea level = 0)
  std::vector<std::uint8_t> floating;
  double time = 0.0;                 // years
};

struct ScenarioConfig {
  double melt_rate = 0.0;       // r, m/yr removed from floating nodes
  double smb = 0.0;             // surface mass balance, m/yr, everywhere
  double duration_years = 20.0;
  double dt_years = 1.0 / 12.0;
  double m0 = 0.0;              // initial mesh size (plumbing for manifests)

  int num_steps() const;        // validates duration/dt divisibility
};

// Velocity boundary conditions for a rectangular marine glacier: ice flows in
// +x, the inland edge (min x) is clamped, the ocean edge (max x) is a calving
// front with depth-integrated water pressure, lateral edges are free-slip.
struct BoundaryMask {
  std::vector<std::uint8_t> fix_u, fix_v;      // Dirichlet u=0 / v=0 per node
  std::vector<std::array<int, 2>> front_sides; // boundary sides on the calving front
};

BoundaryMask classify_rect_boundary(const TriMesh& mesh);

// Hydrostatics: recompute `floating` and `s` from H and b.
// floating <=> rho_ice·H < rho_water·(-b); grounded s = b + H,
// floating s = H·(1 - rho_ice/rho_water).
void update_flotation(GlacierState& state, const PhysicsParams& params);

// Element-constant effective viscosity mu = B / (2·eps_e^((n-1)/n)) with
// eps_e = sqrt(exx^2 + eyy^2 + exx·eyy + exy^2) floored at eps_reg.
std::vector<double> effective_viscosity(const GlacierState& state,
                                        const TriMesh& mesh,
                                        const PhysicsParams& params);

struct StressSolveInfo {
  int picard_iterations = 0;
  double final_rel_change = 0.0;
  std::vector<double> history;  // rel change per iteration
};

// Nonlinear SSA stress balance: linear-triangle FEM with Picard iteration on
// the viscosity; writes the converged (u,v) into `state`.
StressSolveInfo solve_stress_balance(GlacierState& state, const TriMesh& mesh,
                                     const PhysicsParams& params,
                                     const BoundaryMask& bc);

// One explicit transport step of dt years:
//   dH/dt = smb - r·[floating] - div(H·(u,v))
// streamline-upwind stabilized, lumped mass, H clamped at 0; flotation and
// surface are recomputed afterwards. Sub-steps internally if the CFL number
// exceeds 0.5 (with a warning on stderr).
void advance_thickness(GlacierState& state, const TriMesh& mesh,
                       const ScenarioConfig& scenario, const PhysicsParams& params,
                       const BoundaryMask& bc, double dt_years);

// Full transient run: for each step, transport with the previous velocities,
// then re-solve the stress balance for the new geometry. Returns one state
// per step (time = (k+1)·dt); the initial state is not included.
std::vector<GlacierState> run_transient(const ScenarioConfig& scenario,
                                        const GlacierState& initial,
                                        const TriMesh& mesh,
                                        const PhysicsParams& params);

// Synthetic marine glacier -----------------------------------------------

struct GlacierProfile {
  double bed_inland = 300.0;     // m at min x
  double bed_ocean = -800.0;     // m at max x
  double thick_inland = 2500.0;  // m
  double thick_ocean = 300.0;    // m
  // Optional lateral bed channel: the bed is lowered by up to channel_amp at
  // mid-width, fading to zero at the lateral edges and (quadratically) toward
  // the inland side. This funnels a fast outlet stream down the centerline
  // while the inland reservoir stays grounded.
  double channel_amp = 0.0;
};

// Deterministic initial fields on the mesh: linear bed/thickness ramps from
// the inland to the ocean side, zero velocity, hydrostatic surface/flotation.
GlacierState synthesize_initial_glacier(const TriMesh& mesh,
                                        const GlacierProfile& profile,
                                        const PhysicsParams& params);

}  // namespace icegraph
