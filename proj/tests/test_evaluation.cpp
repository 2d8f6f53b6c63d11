#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "icegraph/errors.hpp"
#include "icegraph/evaluation.hpp"
#include "icegraph/physics.hpp"

using namespace icegraph;

namespace {

const Rect kDomain{0.0, 0.0, 100e3, 100e3};

std::vector<double> random_vec(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-5.0, 5.0);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = dist(rng);
  return v;
}

// Raw-moment correlation formula, algebraically equal to the centered
// two-pass form but computed along a completely different path.
double pearson_raw_moments(const std::vector<double>& x,
                           const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
  }
  return (n * sxy - sx * sy) /
         std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

double rmse_long_double(const std::vector<double>& p,
                        const std::vector<double>& t) {
  long double acc = 0.0L;
  for (size_t i = 0; i < p.size(); ++i) {
    const long double d = static_cast<long double>(p[i]) - t[i];
    acc += d * d;
  }
  return static_cast<double>(
      std::sqrt(acc / static_cast<long double>(p.size())));
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("rmse and pearson_r have the standard fixed points") {
  const std::vector<double> t{1.0, 2.5, -3.0, 4.0, 0.5};
  CHECK(rmse(t, t) == 0.0);
  CHECK(pearson_r(t, t).value() == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<double> shifted = t;
  for (double& x : shifted) x += 7.25;
  CHECK(rmse(shifted, t) == doctest::Approx(7.25).epsilon(1e-15));
  CHECK(pearson_r(shifted, t).value() == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> negated = t;
  for (double& x : negated) x = -x;
  CHECK(pearson_r(negated, t).value() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("metrics match independent formula evaluation on random vectors") {
  std::mt19937_64 rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<double> p = random_vec(10, rng);
    const std::vector<double> t = random_vec(10, rng);
    CHECK(rmse(p, t) == doctest::Approx(rmse_long_double(p, t)).epsilon(1e-12));
    CHECK(pearson_r(p, t).value() ==
          doctest::Approx(pearson_raw_moments(p, t)).epsilon(1e-12));
  }
}

TEST_CASE("degenerate metric inputs are rejected or reported missing") {
  const std::vector<double> a{1.0, 2.0, 3.0};
  const std::vector<double> b{1.0, 2.0};
  CHECK_THROWS_AS((void)rmse(a, b), validation_error);
  CHECK_THROWS_AS((void)rmse(std::vector<double>{}, std::vector<double>{}),
                  validation_error);
  CHECK_THROWS_AS((void)pearson_r(std::vector<double>{1.0}, std::vector<double>{2.0}),
                  validation_error);

  const std::vector<double> flat{4.0, 4.0, 4.0};
  CHECK(!pearson_r(a, flat).has_value());
  CHECK(!pearson_r(flat, a).has_value());
}

TEST_CASE("fidelity reports pool thickness, speed, and components") {
  std::mt19937_64 rng(11);
  std::vector<DiffTensor> truth, pred;
  for (int m = 0; m < 3; ++m) {
    DiffTensor t = DiffTensor::zeros(6, 3);
    DiffTensor p = DiffTensor::zeros(6, 3);
    for (int i = 0; i < 6; ++i)
      for (int c = 0; c < 3; ++c) {
        t.at(i, c) = std::uniform_real_distribution<double>(-2, 2)(rng);
        p.at(i, c) = t.at(i, c) + std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
      }
    truth.push_back(t);
    pred.push_back(p);
  }
  const FidelityReport rep = evaluate_fidelity(pred, truth);
  CHECK(rep.thickness.rmse > 0.0);
  CHECK(rep.speed.rmse > 0.0);
  CHECK(rep.thickness.r.has_value());

  // Pooling by hand over all node-month pairs reproduces the thickness cell.
  std::vector<double> pt, tt;
  for (int m = 0; m < 3; ++m)
    for (int i = 0; i < 6; ++i) {
      pt.push_back(pred[static_cast<size_t>(m)].at(i, 2));
      tt.push_back(truth[static_cast<size_t>(m)].at(i, 2));
    }
  CHECK(rep.thickness.rmse == rmse(pt, tt));
  CHECK(rep.thickness.r.value() == pearson_r(pt, tt).value());

  const FidelityReport perfect = evaluate_fidelity(truth, truth);
  CHECK(perfect.thickness.rmse == 0.0);
  CHECK(perfect.speed.rmse == 0.0);
}

TEST_CASE("per-year rmse pools whole years and satisfies the pooling identity") {
  const int nodes = 7, months = 36;
  std::mt19937_64 rng(21);
  std::vector<std::vector<double>> truth(months), pred(months);
  for (int m = 0; m < months; ++m) {
    truth[static_cast<size_t>(m)] = random_vec(nodes, rng);
    pred[static_cast<size_t>(m)] = truth[static_cast<size_t>(m)];
  }

  CHECK(per_year_rmse(pred, truth) == std::vector<double>{0.0, 0.0, 0.0});

  // Perturb only months 12..23: the error must land in year index 1 alone.
  for (int m = 12; m < 24; ++m)
    for (double& x : pred[static_cast<size_t>(m)]) x += 0.5;
  std::vector<double> series = per_year_rmse(pred, truth);
  CHECK(series[0] == 0.0);
  CHECK(series[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(series[2] == 0.0);

  // Equal-weight years: the all-months pooled RMSE is the RMS of the series.
  for (int m = 0; m < months; ++m)
    pred[static_cast<size_t>(m)] = random_vec(nodes, rng);
  series = per_year_rmse(pred, truth);
  std::vector<double> pall, tall;
  for (int m = 0; m < months; ++m) {
    pall.insert(pall.end(), pred[static_cast<size_t>(m)].begin(),
                pred[static_cast<size_t>(m)].end());
    tall.insert(tall.end(), truth[static_cast<size_t>(m)].begin(),
                truth[static_cast<size_t>(m)].end());
  }
  double ms = 0.0;
  for (double r : series) ms += r * r;
  CHECK(std::sqrt(ms / static_cast<double>(series.size())) ==
        doctest::Approx(rmse(pall, tall)).epsilon(1e-12));

  pred.pop_back();
  CHECK_THROWS_AS((void)per_year_rmse(pred, truth), validation_error);
  pred.assign(18, std::vector<double>(nodes, 0.0));
  truth.assign(18, std::vector<double>(nodes, 0.0));
  CHECK_THROWS_AS((void)per_year_rmse(pred, truth), validation_error);
}

TEST_CASE("rendered maps reproduce constant fields and node values") {
  const TriMesh mesh = generate_initial_mesh(kDomain, 25e3, 7);
  const std::vector<double> constant(static_cast<size_t>(mesh.num_nodes()), 3.5);

  const GridSpec spec = grid_for_rect(kDomain, 21, 17);
  const GridMap map = render_map(mesh, constant, spec);
  REQUIRE(map.values.size() == 21u * 17u);
  int inside = 0;
  for (size_t i = 0; i < map.values.size(); ++i) {
    if (map.missing[i]) {
      CHECK(std::isnan(map.values[i]));
    } else {
      CHECK(map.values[i] == doctest::Approx(3.5).epsilon(1e-12));
      ++inside;
    }
  }
  CHECK(inside > static_cast<int>(map.values.size()) / 2);

  // The domain mesh carries its rectangle corners as nodes, so a 2×2 grid over
  // the rectangle queries exact node positions.
  std::vector<double> field(static_cast<size_t>(mesh.num_nodes()));
  for (int i = 0; i < mesh.num_nodes(); ++i)
    field[static_cast<size_t>(i)] =
        1e-3 * mesh.nodes[i].x - 2e-3 * mesh.nodes[i].y + 4.0;
  const GridMap corners = render_map(mesh, field, grid_for_rect(kDomain, 2, 2));
  for (size_t i = 0; i < corners.values.size(); ++i) {
    REQUIRE(!corners.missing[i]);
  }
  CHECK(corners.values[0] == doctest::Approx(4.0).epsilon(1e-9));                  // (0, 0)
  CHECK(corners.values[1] == doctest::Approx(104.0).epsilon(1e-9));                // (100km, 0)
  CHECK(corners.values[2] == doctest::Approx(-196.0).epsilon(1e-9));               // (0, 100km)
  CHECK(corners.values[3] == doctest::Approx(-96.0).epsilon(1e-9));                // (100km, 100km)

  // A zero difference field renders as zeros everywhere inside the hull.
  const std::vector<double> zeros(static_cast<size_t>(mesh.num_nodes()), 0.0);
  const GridMap diff = render_map(mesh, zeros, spec);
  for (size_t i = 0; i < diff.values.size(); ++i)
    if (!diff.missing[i]) CHECK(diff.values[i] == 0.0);
}

TEST_CASE("time means average monthly node fields") {
  DiffTensor m1 = DiffTensor::zeros(2, 3);
  DiffTensor m2 = DiffTensor::zeros(2, 3);
  m1.at(0, 0) = 3.0;  // u
  m1.at(0, 1) = 4.0;  // v → speed 5
  m2.at(0, 0) = 0.0;
  m2.at(0, 1) = 1.0;  // speed 1
  m1.at(1, 2) = 10.0;
  m2.at(1, 2) = 20.0;
  const std::vector<DiffTensor> months{m1, m2};
  CHECK(time_mean_speed(months)[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(time_mean_column(months, 2)[1] == doctest::Approx(15.0).epsilon(1e-15));
}

TEST_CASE("ice volume matches area times thickness and is refinement consistent") {
  const TriMesh coarse = generate_initial_mesh(kDomain, 25e3, 7);
  const std::vector<double> uniform(static_cast<size_t>(coarse.num_nodes()), 1000.0);
  CHECK(ice_volume_km3(coarse, uniform) == doctest::Approx(10000.0).epsilon(1e-9));

  // A smooth analytic thickness sampled on two resolutions: the element-mean
  // quadrature must agree across the refinement to well under half a percent.
  auto analytic = [](const Point2& p) {
    return 800.0 + 300.0 * std::sin(p.x / 30e3) * std::cos(p.y / 45e3);
  };
  const TriMesh fine = generate_initial_mesh(kDomain, 10e3, 7);
  std::vector<double> hc, hf;
  for (const Point2& p : coarse.nodes) hc.push_back(analytic(p));
  for (const Point2& p : fine.nodes) hf.push_back(analytic(p));
  const double vc = ice_volume_km3(coarse, hc);
  const double vf = ice_volume_km3(fine, hf);
  CHECK(std::abs(vc - vf) / vf < 0.005);
}

TEST_CASE("mean ice speed weights nodes by lumped area") {
  const TriMesh mesh = generate_initial_mesh(kDomain, 25e3, 7);
  const int n = mesh.num_nodes();
  std::vector<double> u(static_cast<size_t>(n), 3.0), v(static_cast<size_t>(n), 4.0);
  CHECK(mean_ice_speed(mesh, u, v) == doctest::Approx(5.0).epsilon(1e-12));

  // Hand-rolled weighting over the same nodal areas.
  std::mt19937_64 rng(5);
  for (int i = 0; i < n; ++i) {
    u[static_cast<size_t>(i)] = std::uniform_real_distribution<double>(-9, 9)(rng);
    v[static_cast<size_t>(i)] = std::uniform_real_distribution<double>(-9, 9)(rng);
  }
  const std::vector<double> w = node_areas(mesh);
  double acc = 0.0, wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += w[static_cast<size_t>(i)] *
           std::hypot(u[static_cast<size_t>(i)], v[static_cast<size_t>(i)]);
    wsum += w[static_cast<size_t>(i)];
  }
  CHECK(mean_ice_speed(mesh, u, v) == doctest::Approx(acc / wsum).epsilon(1e-12));
}

TEST_CASE("instructor sweeps lose volume and gain speed with stronger melt") {
  const TriMesh mesh = generate_initial_mesh(kDomain, 25e3, 7);
  PhysicsParams params;
  GlacierProfile profile;
  const GlacierState initial = synthesize_initial_glacier(mesh, profile, params);
  ScenarioConfig base;

  const std::vector<double> rates{0.0, 60.0};
  const std::vector<int> years{2, 5};
  const SweepTable table = sweep_instructor(mesh, initial, params, base, rates, years);

  REQUIRE(table.cells.size() == 4);
  CHECK(table.cells[0].rate == 0.0);
  CHECK(table.cells[0].year == 2);
  CHECK(table.cells[1].year == 5);
  CHECK(table.cells[2].rate == 60.0);

  auto cell = [&](double r, int y) {
    for (const SweepCell& c : table.cells)
      if (c.rate == r && c.year == y) return c;
    REQUIRE(false);
    return SweepCell{};
  };
  // Stronger shelf melt removes ice (volume down) and thins the shelf, which
  // weakens back-stress and lets the front speed up.
  CHECK(cell(60.0, 5).volume_km3 < cell(0.0, 5).volume_km3);
  CHECK(cell(60.0, 5).mean_speed >= cell(0.0, 5).mean_speed);
  CHECK(cell(60.0, 2).volume_km3 < cell(0.0, 2).volume_km3);
  // Melting monotonically drains the same run over time.
  CHECK(cell(60.0, 5).volume_km3 < cell(60.0, 2).volume_km3);

  CHECK_THROWS_AS((void)sweep_instructor(mesh, initial, params, base, rates,
                                         std::vector<int>{5, 2}),
                  validation_error);
  CHECK_THROWS_AS((void)sweep_instructor(mesh, initial, params, base,
                                         std::vector<double>{}, years),
                  validation_error);
}

TEST_CASE("emulator sweeps evaluate one forward pass per rate and year") {
  GraphContext ctx = make_graph_context(generate_initial_mesh(kDomain, 25e3, 7));
  EmulatorModel model = build_model(Arch::gcn, 3);
  // Plausible bounds so the untrained network still denormalizes sanely.
  model.norm.input_min = {0.0, 0.0, 0.0, 0.0};
  model.norm.input_max = {100e3, 100e3, 240.0, 70.0};
  model.norm.target_min = {-500.0, -500.0, 0.0};
  model.norm.target_max = {500.0, 500.0, 1500.0};

  const std::vector<double> rates{0.0, 20.0, 40.0};
  const std::vector<int> years = default_sweep_years();
  const SweepTable table = sweep_emulator(model, ctx, rates, years);
  REQUIRE(table.cells.size() == rates.size() * years.size());
  for (const SweepCell& c : table.cells) {
    CHECK(std::isfinite(c.volume_km3));
    CHECK(c.volume_km3 >= 0.0);  // thickness is clamped non-negative
    CHECK(std::isfinite(c.mean_speed));
    CHECK(c.mean_speed >= 0.0);
  }

  // Deterministic: the same model and grid reproduce the table bitwise.
  const SweepTable again = sweep_emulator(model, ctx, rates, years);
  for (size_t i = 0; i < table.cells.size(); ++i) {
    CHECK(table.cells[i].volume_km3 == again.cells[i].volume_km3);
    CHECK(table.cells[i].mean_speed == again.cells[i].mean_speed);
  }

  CHECK(default_sweep_rates().size() == 36);
  CHECK(default_sweep_rates().front() == 0.0);
  CHECK(default_sweep_rates().back() == 70.0);
}

TEST_CASE("operation timing discards a warm-up and reports the median") {
  int calls = 0;
  const TimingStats stats = time_operation([&] { ++calls; }, 5);
  CHECK(calls == 6);  // one warm-up plus five timed repetitions
  REQUIRE(stats.reps_s.size() == 5);
  double lo = stats.reps_s[0], hi = stats.reps_s[0];
  for (double s : stats.reps_s) {
    CHECK(s >= 0.0);
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  CHECK(stats.median_s >= lo);
  CHECK(stats.median_s <= hi);
  CHECK_THROWS_AS((void)time_operation([] {}, 2), validation_error);

  TimingStats fast, slow;
  fast.median_s = 0.5;
  slow.median_s = 5.0;
  CHECK(speedup(slow, fast) == doctest::Approx(10.0));
}

TEST_CASE("report and map files round-trip through plain text") {
  const std::string dir = "eval_report_tmp";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  const std::string report = dir + "/table.txt";
  write_report(report, {"arch", "rmse", "r"},
               {{"gcn", "12.5", "0.998"}, {"mlp", "30.1", "0.97"}});
  std::vector<std::string> lines = read_lines(report);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "arch rmse r");
  CHECK(lines[1] == "gcn 12.5 0.998");
  CHECK_THROWS_AS(write_report(report, {"a", "b"}, {{"only"}}), validation_error);

  const TriMesh mesh = generate_initial_mesh(kDomain, 25e3, 7);
  const std::vector<double> field(static_cast<size_t>(mesh.num_nodes()), 2.0);
  const GridMap map = render_map(mesh, field, grid_for_rect(kDomain, 5, 4));
  const std::string grid_file = dir + "/map.txt";
  write_grid_map(grid_file, map);
  lines = read_lines(grid_file);
  REQUIRE(lines.size() == 5);  // header plus ny rows
  std::istringstream head(lines[0]);
  std::string k1, k3, k5;
  int nx = 0, ny = 0;
  double ox = 0, oy = 0, sx = 0, sy = 0;
  head >> k1 >> nx >> k3 >> ny >> k5 >> ox >> oy >> k5 >> sx >> sy;
  CHECK(k1 == "nx");
  CHECK(nx == 5);
  CHECK(ny == 4);
  CHECK(sx == doctest::Approx(25e3));

  SweepTable table;
  table.rates = {0.0};
  table.years = {5};
  table.cells.push_back({0.0, 5, 123.5, 77.25});
  const std::string sweep_file = dir + "/sweep.txt";
  write_sweep_table(sweep_file, table);
  lines = read_lines(sweep_file);
  REQUIRE(lines.size() == 2);
  CHECK(lines[0] == "melt_rate year volume_km3 mean_speed_m_yr");
  CHECK(lines[1] == "0 5 123.5 77.25");

  std::filesystem::remove_all(dir);
}
