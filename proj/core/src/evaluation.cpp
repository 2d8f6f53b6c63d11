#include "icegraph/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "icegraph/errors.hpp"
#include "icegraph/kv.hpp"

namespace icegraph {

// Fidelity metrics ------------------------------------------------------------

double rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size())
    throw validation_error("rmse: length mismatch (" + std::to_string(pred.size()) +
                           " vs " + std::to_string(truth.size()) + ")");
  if (pred.empty()) throw validation_error("rmse: empty input");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

std::optional<double> pearson_r(std::span<const double> pred,
                                std::span<const double> truth) {
  if (pred.size() != truth.size())
    throw validation_error("pearson_r: length mismatch (" +
                           std::to_string(pred.size()) + " vs " +
                           std::to_string(truth.size()) + ")");
  if (pred.size() < 2) throw validation_error("pearson_r: need at least 2 pairs");
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, mt = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += truth[i];
  }
  mp /= n;
  mt /= n;
  double spt = 0.0, spp = 0.0, stt = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double dp = pred[i] - mp, dt = truth[i] - mt;
    spt += dp * dt;
    spp += dp * dp;
    stt += dt * dt;
  }
  if (spp == 0.0 || stt == 0.0) return std::nullopt;
  return spt / std::sqrt(spp * stt);
}

std::vector<double> column_values(const DiffTensor& t, int col) {
  if (col < 0 || col >= t.cols())
    throw validation_error("column_values: column " + std::to_string(col) +
                           " out of range");
  std::vector<double> out(static_cast<size_t>(t.rows()));
  for (int i = 0; i < t.rows(); ++i) out[static_cast<size_t>(i)] = t.at(i, col);
  return out;
}

std::vector<double> node_speeds(const DiffTensor& uvh) {
  if (uvh.cols() < 2)
    throw validation_error("node_speeds: need at least two columns");
  std::vector<double> out(static_cast<size_t>(uvh.rows()));
  for (int i = 0; i < uvh.rows(); ++i)
    out[static_cast<size_t>(i)] = std::hypot(uvh.at(i, 0), uvh.at(i, 1));
  return out;
}

namespace {

// Pools the per-month extractions of pred/truth and computes one metric cell.
VariableMetrics pooled_metrics(
    const std::vector<DiffTensor>& pred, const std::vector<DiffTensor>& truth,
    const std::function<std::vector<double>(const DiffTensor&)>& extract) {
  std::vector<double> p, t;
  for (size_t m = 0; m < pred.size(); ++m) {
    const std::vector<double> pm = extract(pred[m]);
    const std::vector<double> tm = extract(truth[m]);
    p.insert(p.end(), pm.begin(), pm.end());
    t.insert(t.end(), tm.begin(), tm.end());
  }
  VariableMetrics out;
  out.rmse = rmse(p, t);
  out.r = p.size() >= 2 ? pearson_r(p, t) : std::nullopt;
  return out;
}

}  // namespace

FidelityReport evaluate_fidelity(const std::vector<DiffTensor>& pred,
                                 const std::vector<DiffTensor>& truth) {
  if (pred.size() != truth.size())
    throw validation_error("evaluate_fidelity: month count mismatch");
  if (pred.empty()) throw validation_error("evaluate_fidelity: no months");
  for (size_t m = 0; m < pred.size(); ++m)
    if (pred[m].rows() != truth[m].rows() || pred[m].cols() != 3 ||
        truth[m].cols() != 3)
      throw validation_error("evaluate_fidelity: month " + std::to_string(m) +
                             " shapes do not pair up");
  FidelityReport rep;
  rep.thickness = pooled_metrics(pred, truth,
                                 [](const DiffTensor& t) { return column_values(t, 2); });
  rep.speed = pooled_metrics(pred, truth,
                             [](const DiffTensor& t) { return node_speeds(t); });
  rep.u = pooled_metrics(pred, truth,
                         [](const DiffTensor& t) { return column_values(t, 0); });
  rep.v = pooled_metrics(pred, truth,
                         [](const DiffTensor& t) { return column_values(t, 1); });
  return rep;
}

std::vector<double> per_year_rmse(const std::vector<std::vector<double>>& pred,
                                  const std::vector<std::vector<double>>& truth) {
  if (pred.size() != truth.size())
    throw validation_error("per_year_rmse: month count mismatch");
  if (pred.empty() || pred.size() % 12 != 0)
    throw validation_error("per_year_rmse: month count must be a positive multiple of 12");
  for (size_t m = 0; m < pred.size(); ++m)
    if (pred[m].size() != truth[m].size() || pred[m].empty())
      throw validation_error("per_year_rmse: month " + std::to_string(m) +
                             " lengths do not pair up");
  const size_t years = pred.size() / 12;
  std::vector<double> out(years);
  for (size_t y = 0; y < years; ++y) {
    double acc = 0.0;
    size_t count = 0;
    for (size_t m = 12 * y; m < 12 * (y + 1); ++m) {
      for (size_t i = 0; i < pred[m].size(); ++i) {
        const double d = pred[m][i] - truth[m][i];
        acc += d * d;
      }
      count += pred[m].size();
    }
    out[y] = std::sqrt(acc / static_cast<double>(count));
  }
  return out;
}

// Map rendering ----------------------------------------------------------------

GridSpec grid_for_rect(const Rect& rect, int nx, int ny) {
  if (nx < 2 || ny < 2)
    throw validation_error("grid_for_rect: need at least 2 samples per axis");
  GridSpec spec;
  spec.nx = nx;
  spec.ny = ny;
  spec.x0 = rect.x0;
  spec.y0 = rect.y0;
  spec.dx = rect.width() / (nx - 1);
  spec.dy = rect.height() / (ny - 1);
  return spec;
}

GridMap render_map(const TriMesh& mesh, std::span<const double> node_field,
                   const GridSpec& spec) {
  if (static_cast<int>(node_field.size()) != mesh.num_nodes())
    throw validation_error("render_map: field size does not match mesh");
  if (spec.nx < 1 || spec.ny < 1)
    throw validation_error("render_map: empty grid");
  std::vector<Point2> query;
  query.reserve(static_cast<size_t>(spec.nx) * spec.ny);
  for (int iy = 0; iy < spec.ny; ++iy)
    for (int ix = 0; ix < spec.nx; ++ix)
      query.push_back({spec.x0 + ix * spec.dx, spec.y0 + iy * spec.dy});
  const std::vector<std::optional<double>> sampled =
      interpolate_node_field(mesh, node_field, query);
  GridMap map;
  map.spec = spec;
  map.values.resize(sampled.size());
  map.missing.resize(sampled.size());
  for (size_t i = 0; i < sampled.size(); ++i) {
    map.missing[i] = sampled[i].has_value() ? 0 : 1;
    map.values[i] = sampled[i].value_or(std::numeric_limits<double>::quiet_NaN());
  }
  return map;
}

std::vector<double> time_mean_column(const std::vector<DiffTensor>& months, int col) {
  if (months.empty()) throw validation_error("time_mean_column: no months");
  std::vector<double> out(static_cast<size_t>(months[0].rows()), 0.0);
  for (const DiffTensor& m : months) {
    if (m.rows() != static_cast<int>(out.size()))
      throw validation_error("time_mean_column: inconsistent node counts");
    const std::vector<double> v = column_values(m, col);
    for (size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  for (double& v : out) v /= static_cast<double>(months.size());
  return out;
}

std::vector<double> time_mean_speed(const std::vector<DiffTensor>& months) {
  if (months.empty()) throw validation_error("time_mean_speed: no months");
  std::vector<double> out(static_cast<size_t>(months[0].rows()), 0.0);
  for (const DiffTensor& m : months) {
    if (m.rows() != static_cast<int>(out.size()))
      throw validation_error("time_mean_speed: inconsistent node counts");
    const std::vector<double> v = node_speeds(m);
    for (size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  for (double& v : out) v /= static_cast<double>(months.size());
  return out;
}

void write_grid_map(const std::string& path, const GridMap& map) {
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) throw io_error("cannot write " + path);
  out << "nx " << map.spec.nx << " ny " << map.spec.ny << " origin "
      << fmt_double(map.spec.x0) << ' ' << fmt_double(map.spec.y0) << " spacing "
      << fmt_double(map.spec.dx) << ' ' << fmt_double(map.spec.dy) << '\n';
  for (int iy = 0; iy < map.spec.ny; ++iy) {
    for (int ix = 0; ix < map.spec.nx; ++ix) {
      const size_t i = static_cast<size_t>(iy) * map.spec.nx + ix;
      if (ix) out << ' ';
      out << (map.missing[i] ? "nan" : fmt_double(map.values[i]));
    }
    out << '\n';
  }
  if (!out.good()) throw io_error("cannot write " + path);
}

// Melt-rate sensitivity ---------------------------------------------------------

double ice_volume_km3(const TriMesh& mesh, std::span<const double> H) {
  if (static_cast<int>(H.size()) != mesh.num_nodes())
    throw validation_error("ice_volume_km3: field size does not match mesh");
  double vol = 0.0;
  for (int t = 0; t < mesh.num_triangles(); ++t) {
    const auto& tr = mesh.triangles[t];
    const Point2& a = mesh.nodes[tr[0]];
    const Point2& b = mesh.nodes[tr[1]];
    const Point2& c = mesh.nodes[tr[2]];
    const double area =
        0.5 * std::abs((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
    const double mean_h = (H[tr[0]] + H[tr[1]] + H[tr[2]]) / 3.0;
    vol += area * mean_h;
  }
  return vol / 1e9;  // m³ → km³
}

double mean_ice_speed(const TriMesh& mesh, std::span<const double> u,
                      std::span<const double> v) {
  if (static_cast<int>(u.size()) != mesh.num_nodes() || u.size() != v.size())
    throw validation_error("mean_ice_speed: field sizes do not match mesh");
  const std::vector<double> w = node_areas(mesh);
  double acc = 0.0, wsum = 0.0;
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    acc += w[static_cast<size_t>(i)] * std::hypot(u[i], v[i]);
    wsum += w[static_cast<size_t>(i)];
  }
  return acc / wsum;
}

std::vector<double> default_sweep_rates() {
  std::vector<double> rates;
  for (int r = 0; r <= 70; r += 2) rates.push_back(r);
  return rates;
}

std::vector<int> default_sweep_years() { return {5, 10, 15, 20}; }

namespace {

void check_sweep_grid(std::span<const double> rates, std::span<const int> years) {
  if (rates.empty() || years.empty())
    throw validation_error("sensitivity sweep: empty rate or year list");
  for (size_t i = 0; i < years.size(); ++i) {
    if (years[i] < 1)
      throw validation_error("sensitivity sweep: years must be positive");
    if (i > 0 && years[i] <= years[i - 1])
      throw validation_error("sensitivity sweep: years must be ascending");
  }
}

}  // namespace

SweepTable sweep_instructor(const TriMesh& mesh, const GlacierState& initial,
                            const PhysicsParams& params,
                            const ScenarioConfig& base,
                            std::span<const double> rates,
                            std::span<const int> years) {
  check_sweep_grid(rates, years);
  ScenarioConfig scenario = base;
  scenario.duration_years = years.back();
  const int steps = scenario.num_steps();
  const int steps_per_year = steps / years.back();
  if (steps_per_year * years.back() != steps)
    throw validation_error("sweep_instructor: dt must divide a year exactly");

  SweepTable table;
  table.rates.assign(rates.begin(), rates.end());
  table.years.assign(years.begin(), years.end());
  for (double rate : rates) {
    scenario.melt_rate = rate;
    const std::vector<GlacierState> traj =
        run_transient(scenario, initial, mesh, params);
    for (int year : years) {
      const GlacierState& st = traj[static_cast<size_t>(year) * steps_per_year - 1];
      SweepCell cell;
      cell.rate = rate;
      cell.year = year;
      cell.volume_km3 = ice_volume_km3(mesh, st.H);
      cell.mean_speed = mean_ice_speed(mesh, st.u, st.v);
      table.cells.push_back(cell);
    }
  }
  return table;
}

SweepTable sweep_emulator(const EmulatorModel& model, const GraphContext& ctx,
                          std::span<const double> rates,
                          std::span<const int> years) {
  check_sweep_grid(rates, years);
  SweepTable table;
  table.rates.assign(rates.begin(), rates.end());
  table.years.assign(years.begin(), years.end());
  const int n = ctx.mesh.num_nodes();
  for (double rate : rates)
    for (int year : years) {
      GraphSample sample;
      sample.melt_rate = rate;
      sample.month = 12 * year - 1;
      sample.inputs = DiffTensor::zeros(n, 4);
      for (int i = 0; i < n; ++i) {
        sample.inputs.at(i, 0) = ctx.mesh.nodes[i].x;
        sample.inputs.at(i, 1) = ctx.mesh.nodes[i].y;
        sample.inputs.at(i, 2) = static_cast<double>(sample.month);
        sample.inputs.at(i, 3) = rate;
      }
      const DiffTensor pred = model.predict(ctx, sample);
      SweepCell cell;
      cell.rate = rate;
      cell.year = year;
      cell.volume_km3 = ice_volume_km3(ctx.mesh, column_values(pred, 2));
      cell.mean_speed =
          mean_ice_speed(ctx.mesh, column_values(pred, 0), column_values(pred, 1));
      table.cells.push_back(cell);
    }
  return table;
}

void write_sweep_table(const std::string& path, const SweepTable& table) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(table.cells.size());
  for (const SweepCell& c : table.cells)
    rows.push_back({fmt_double(c.rate), std::to_string(c.year),
                    fmt_double(c.volume_km3), fmt_double(c.mean_speed)});
  write_report(path, {"melt_rate", "year", "volume_km3", "mean_speed_m_yr"}, rows);
}

// Timing ------------------------------------------------------------------------

TimingStats time_operation(const std::function<void()>& op, int reps) {
  if (reps < 3) throw validation_error("time_operation: need at least 3 repetitions");
  op();  // warm-up, not recorded
  TimingStats stats;
  stats.reps_s.reserve(static_cast<size_t>(reps));
  for (int k = 0; k < reps; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    op();
    const auto t1 = std::chrono::steady_clock::now();
    stats.reps_s.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::vector<double> sorted = stats.reps_s;
  std::sort(sorted.begin(), sorted.end());
  const size_t mid = sorted.size() / 2;
  stats.median_s = sorted.size() % 2 == 1
                       ? sorted[mid]
                       : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return stats;
}

double speedup(const TimingStats& instructor, const TimingStats& emulator) {
  if (emulator.median_s <= 0.0)
    throw validation_error("speedup: emulator median must be positive");
  return instructor.median_s / emulator.median_s;
}

// Reports ------------------------------------------------------------------------

void write_report(const std::string& path, const std::vector<std::string>& columns,
                  const std::vector<std::vector<std::string>>& rows) {
  if (columns.empty()) throw validation_error("write_report: no columns");
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) throw io_error("cannot write " + path);
  for (size_t c = 0; c < columns.size(); ++c) {
    if (c) out << ' ';
    out << columns[c];
  }
  out << '\n';
  for (const std::vector<std::string>& row : rows) {
    if (row.size() != columns.size())
      throw validation_error("write_report: row width does not match header");
    for (size_t c = 0; c < row.size(); ++c) {
      if (c) out << ' ';
      out << row[c];
    }
    out << '\n';
  }
  if (!out.good()) throw io_error("cannot write " + path);
}

}  // namespace icegraph
