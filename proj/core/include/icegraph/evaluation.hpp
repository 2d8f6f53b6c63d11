#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icegraph/mesh.hpp"
#include "icegraph/model.hpp"
#include "icegraph/physics.hpp"

namespace icegraph {

// Fidelity metrics ------------------------------------------------------------

// Root-mean-square error over paired values. Throws validation_error on a
// length mismatch or empty input.
double rmse(std::span<const double> pred, std::span<const double> truth);

// Pearson correlation over paired values (lengths must match, >= 2 entries).
// Returns nullopt when either side has zero variance, where r is undefined.
std::optional<double> pearson_r(std::span<const double> pred,
                                std::span<const double> truth);

// Column extraction from stacked (u, v, H) node tensors.
std::vector<double> column_values(const DiffTensor& t, int col);
// Per-node speed magnitude sqrt(u² + v²) from columns 0 and 1.
std::vector<double> node_speeds(const DiffTensor& uvh);

// One metric cell; r is missing when undefined (constant truth).
struct VariableMetrics {
  double rmse = 0.0;
  std::optional<double> r;
};

// Pooled metrics over a list of aligned monthly predictions: thickness and
// speed are the primary variables, u/v components are secondary diagnostics.
// All node-month pairs pool into one number per variable.
struct FidelityReport {
  VariableMetrics thickness, speed, u, v;
};

FidelityReport evaluate_fidelity(const std::vector<DiffTensor>& pred,
                                 const std::vector<DiffTensor>& truth);

// Annual error series: pools each block of 12 consecutive months (all nodes)
// into one RMSE value. Month counts must match, be positive, and divide into
// whole years; per-month lengths must agree pairwise.
std::vector<double> per_year_rmse(const std::vector<std::vector<double>>& pred,
                                  const std::vector<std::vector<double>>& truth);

// Map rendering ----------------------------------------------------------------

struct GridSpec {
  int nx = 0, ny = 0;        // samples per row / number of rows
  double x0 = 0.0, y0 = 0.0; // position of sample (ix=0, iy=0)
  double dx = 0.0, dy = 0.0; // sample spacing
};

// Evenly covers the rectangle, endpoints included.
GridSpec grid_for_rect(const Rect& rect, int nx, int ny);

// Regular raster of a nodal field; values laid out row-major (iy·nx + ix).
// Cells outside the mesh hull carry NaN and a set missing flag.
struct GridMap {
  GridSpec spec;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;
};

GridMap render_map(const TriMesh& mesh, std::span<const double> node_field,
                   const GridSpec& spec);

// Per-node time mean over monthly (u, v, H) tensors: one column, or the speed
// magnitude (mean of monthly magnitudes).
std::vector<double> time_mean_column(const std::vector<DiffTensor>& months, int col);
std::vector<double> time_mean_speed(const std::vector<DiffTensor>& months);

// Plain-text dump: a `nx ny origin spacing` header line, then ny rows of nx
// values (%.17g, `nan` for missing cells).
void write_grid_map(const std::string& path, const GridMap& map);

// Melt-rate sensitivity ---------------------------------------------------------

// Aggregates of one predicted or simulated state.
double ice_volume_km3(const TriMesh& mesh, std::span<const double> H);
// Area-weighted mean of nodal speed, weights = lumped nodal areas.
double mean_ice_speed(const TriMesh& mesh, std::span<const double> u,
                      std::span<const double> v);

struct SweepCell {
  double rate = 0.0;
  int year = 0;
  double volume_km3 = 0.0;
  double mean_speed = 0.0;  // m/yr
};

struct SweepTable {
  std::vector<double> rates;
  std::vector<int> years;
  std::vector<SweepCell> cells;  // rate-major, year-minor
};

// Default grids: melt rates 0..70 step 2 and years {5, 10, 15, 20}.
std::vector<double> default_sweep_rates();
std::vector<int> default_sweep_years();

// One transient per rate (duration = last year), sampled at the listed years.
// Years must be ascending positive whole years.
SweepTable sweep_instructor(const TriMesh& mesh, const GlacierState& initial,
                            const PhysicsParams& params,
                            const ScenarioConfig& base,
                            std::span<const double> rates,
                            std::span<const int> years);

// One forward pass per (rate, year): the time feature for year y is month
// index 12·y − 1 (samples store the state reached after month+1 months).
SweepTable sweep_emulator(const EmulatorModel& model, const GraphContext& ctx,
                          std::span<const double> rates,
                          std::span<const int> years);

void write_sweep_table(const std::string& path, const SweepTable& table);

// Timing ------------------------------------------------------------------------

struct TimingStats {
  double median_s = 0.0;
  std::vector<double> reps_s;  // every timed repetition, in run order
};

// One discarded warm-up call, then at least three timed repetitions.
TimingStats time_operation(const std::function<void()>& op, int reps = 3);

// instructor_time / emulator_time.
double speedup(const TimingStats& instructor, const TimingStats& emulator);

// Reports ------------------------------------------------------------------------

// Space-delimited table: one header line with column names, one line per row.
// Row cells are pre-formatted strings; counts must match the header.
void write_report(const std::string& path, const std::vector<std::string>& columns,
                  const std::vector<std::vector<std::string>>& rows);

}  // namespace icegraph
