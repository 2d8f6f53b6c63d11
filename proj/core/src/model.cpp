#include "icegraph/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "icegraph/errors.hpp"
#include "icegraph/kv.hpp"

namespace icegraph {

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::gcn: return "gcn";
    case Arch::gat: return "gat";
    case Arch::egcn: return "egcn";
    case Arch::mlp: return "mlp";
    case Arch::fcn: return "fcn";
  }
  return "?";
}

Arch arch_from_string(const std::string& s) {
  if (s == "gcn") return Arch::gcn;
  if (s == "gat") return Arch::gat;
  if (s == "egcn") return Arch::egcn;
  if (s == "mlp") return Arch::mlp;
  if (s == "fcn") return Arch::fcn;
  throw validation_error("unknown architecture '" + s +
                         "' (expected gcn|gat|egcn|mlp|fcn)");
}

void NormalizationSpec::validate() const {
  if (input_min.size() != 4 || input_max.size() != 4 || target_min.size() != 3 ||
      target_max.size() != 3)
    throw validation_error("normalization bounds missing or wrong arity");
  for (size_t i = 0; i < 4; ++i)
    if (!(input_max[i] > input_min[i]))
      throw validation_error("input bound " + std::to_string(i) + ": max must exceed min");
  for (size_t i = 0; i < 3; ++i)
    if (!(target_max[i] > target_min[i]))
      throw validation_error("target bound " + std::to_string(i) + ": max must exceed min");
}

DiffTensor normalize(const DiffTensor& raw, const std::vector<double>& mins,
                     const std::vector<double>& maxs) {
  if (size_t(raw.cols()) != mins.size() || mins.size() != maxs.size())
    throw validation_error("normalize: bounds arity does not match features");
  DiffTensor out = DiffTensor::zeros(raw.rows(), raw.cols());
  long outside = 0;
  for (int c = 0; c < raw.cols(); ++c) {
    const double mid = 0.5 * (maxs[c] + mins[c]);
    const double half = 0.5 * (maxs[c] - mins[c]);
    for (int r = 0; r < raw.rows(); ++r) {
      const double v = raw.at(r, c);
      if (v < mins[c] || v > maxs[c]) ++outside;
      out.at(r, c) = (v - mid) / half;
    }
  }
  if (outside > 0)
    std::fprintf(stderr, "normalize: %ld values outside nominal bounds\n", outside);
  return out;
}

DiffTensor denormalize(const DiffTensor& scaled, const std::vector<double>& mins,
                       const std::vector<double>& maxs) {
  if (size_t(scaled.cols()) != mins.size() || mins.size() != maxs.size())
    throw validation_error("denormalize: bounds arity does not match features");
  DiffTensor out = DiffTensor::zeros(scaled.rows(), scaled.cols());
  for (int c = 0; c < scaled.cols(); ++c) {
    const double mid = 0.5 * (maxs[c] + mins[c]);
    const double half = 0.5 * (maxs[c] - mins[c]);
    for (int r = 0; r < scaled.rows(); ++r)
      out.at(r, c) = scaled.at(r, c) * half + mid;
  }
  return out;
}

GraphContext make_graph_context(TriMesh mesh) {
  GraphContext ctx;
  ctx.topology = mesh_to_graph(mesh);
  ctx.tensors = build_graph_tensors(ctx.topology, mean_edge_length(mesh));
  double x0 = std::numeric_limits<double>::max(), y0 = x0;
  double x1 = std::numeric_limits<double>::lowest(), y1 = x1;
  for (const Point2& p : mesh.nodes) {
    x0 = std::min(x0, p.x);
    y0 = std::min(y0, p.y);
    x1 = std::max(x1, p.x);
    y1 = std::max(y1, p.y);
  }
  ctx.domain = Rect{x0, y0, x1, y1};
  ctx.mesh = std::move(mesh);
  return ctx;
}

SplitIndices split_dataset(const std::vector<GraphSample>& samples) {
  const double val_rates[] = {10, 30, 50, 70};
  const double test_rates[] = {0, 20, 40, 60};
  SplitIndices out;
  for (size_t i = 0; i < samples.size(); ++i) {
    const double r = samples[i].melt_rate;
    if (std::find(std::begin(val_rates), std::end(val_rates), r) != std::end(val_rates))
      out.val.push_back(int(i));
    else if (std::find(std::begin(test_rates), std::end(test_rates), r) !=
             std::end(test_rates))
      out.test.push_back(int(i));
    else
      out.train.push_back(int(i));
  }
  return out;
}

NormalizationSpec compute_normalization(const std::vector<GraphContext>& contexts,
                                        const std::vector<GraphSample>& samples,
                                        int months_total) {
  if (contexts.empty() || samples.empty())
    throw validation_error("compute_normalization: empty corpus");
  double x0 = std::numeric_limits<double>::max(), y0 = x0;
  double x1 = std::numeric_limits<double>::lowest(), y1 = x1;
  for (const GraphContext& c : contexts) {
    x0 = std::min(x0, c.domain.x0);
    y0 = std::min(y0, c.domain.y0);
    x1 = std::max(x1, c.domain.x1);
    y1 = std::max(y1, c.domain.y1);
  }
  double vmax = 0.0, hmax = 0.0;
  for (const GraphSample& s : samples)
    for (int i = 0; i < s.targets.rows(); ++i) {
      vmax = std::max({vmax, std::abs(s.targets.at(i, 0)), std::abs(s.targets.at(i, 1))});
      hmax = std::max(hmax, s.targets.at(i, 2));
    }
  const double vcap = std::max(1.25 * vmax, 1e-6);
  const double hcap = std::max(1.25 * hmax, 1e-6);
  NormalizationSpec spec;
  spec.input_min = {x0, y0, 0.0, 0.0};
  spec.input_max = {x1, y1, double(months_total), 70.0};
  spec.target_min = {-vcap, -vcap, 0.0};
  spec.target_max = {vcap, vcap, hcap};
  spec.validate();
  return spec;
}

EmulatorModel build_model(Arch arch, std::uint64_t seed) {
  EmulatorModel m;
  m.arch = arch;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  const int H = EmulatorModel::kHidden;
  const int L = EmulatorModel::kHiddenLayers;
  auto in_of = [&](int l) { return l == 0 ? EmulatorModel::kInputs : H; };
  switch (arch) {
    case Arch::mlp:
      for (int l = 0; l < L; ++l) m.dense_layers.emplace_back(in_of(l), H, rng);
      break;
    case Arch::gcn:
      for (int l = 0; l < L; ++l) m.gcn_layers.emplace_back(in_of(l), H, rng);
      break;
    case Arch::gat:
      for (int l = 0; l < L; ++l) {
        const int heads = l == L - 1 ? EmulatorModel::kFinalAttentionHeads : 1;
        m.gat_layers.emplace_back(in_of(l), H, heads, rng);
      }
      break;
    case Arch::egcn:
      for (int l = 0; l < L; ++l) m.egcn_layers.emplace_back(in_of(l), H, H, rng);
      break;
    case Arch::fcn:
      for (int l = 0; l < L; ++l) m.conv_layers.emplace_back(in_of(l), H, rng);
      m.conv_output = ConvLayer(H, EmulatorModel::kOutputs, rng, /*activate=*/false);
      break;
  }
  if (arch != Arch::fcn)
    m.output = DenseLayer(H, EmulatorModel::kOutputs, rng, /*activate=*/false);
  return m;
}

void set_grid_for_domain(EmulatorModel& model, const Rect& domain, int cells) {
  if (cells < 2) throw validation_error("set_grid_for_domain: need >= 2 cells");
  // Square cells at extent/cells resolution along the longer side.
  const double res = std::max(domain.width(), domain.height()) / cells;
  model.grid_nx = int(std::lround(domain.width() / res)) + 1;
  model.grid_ny = int(std::lround(domain.height() / res)) + 1;
}

NamedParams EmulatorModel::parameters() {
  NamedParams out;
  auto layer_prefix = [](int l) { return "h" + std::to_string(l) + "."; };
  for (size_t l = 0; l < dense_layers.size(); ++l)
    dense_layers[l].collect_params(layer_prefix(int(l)), out);
  for (size_t l = 0; l < gcn_layers.size(); ++l)
    gcn_layers[l].collect_params(layer_prefix(int(l)), out);
  for (size_t l = 0; l < gat_layers.size(); ++l)
    gat_layers[l].collect_params(layer_prefix(int(l)), out);
  for (size_t l = 0; l < egcn_layers.size(); ++l)
    egcn_layers[l].collect_params(layer_prefix(int(l)), out);
  for (size_t l = 0; l < conv_layers.size(); ++l)
    conv_layers[l].collect_params(layer_prefix(int(l)), out);
  if (arch == Arch::fcn)
    conv_output.collect_params("out.", out);
  else
    output.collect_params("out.", out);
  return out;
}

std::int64_t EmulatorModel::parameter_count() {
  std::int64_t n = 0;
  for (auto& [name, p] : parameters()) n += p.size();
  return n;
}

DiffTensor EmulatorModel::forward_nodes(Tape* tape, const GraphContext& ctx,
                                        const DiffTensor& inputs_norm,
                                        const DiffTensor& coords_norm) const {
  if (inputs_norm.cols() != kInputs)
    throw validation_error("forward_nodes: expected 4 input features");
  switch (arch) {
    case Arch::mlp: {
      DiffTensor h = inputs_norm;
      for (const DenseLayer& l : dense_layers) h = l.forward(tape, h);
      return output.forward(tape, h);
    }
    case Arch::gcn: {
      DiffTensor h = inputs_norm;
      for (const GCNLayer& l : gcn_layers) h = l.forward(tape, ctx.tensors, h);
      return output.forward(tape, h);
    }
    case Arch::gat: {
      DiffTensor h = inputs_norm;
      for (const GATLayer& l : gat_layers) h = l.forward(tape, ctx.tensors, h);
      return output.forward(tape, h);
    }
    case Arch::egcn: {
      if (coords_norm.rows() != inputs_norm.rows() || coords_norm.cols() != 2)
        throw validation_error("forward_nodes: egcn needs N x 2 coordinates");
      DiffTensor h = inputs_norm, x = coords_norm;
      for (const EGCNLayer& l : egcn_layers) {
        EGCNLayer::Streams s = l.forward(tape, ctx.tensors, h, x);
        h = s.h;
        x = s.x;
      }
      return output.forward(tape, h);
    }
    case Arch::fcn:
      throw validation_error("forward_nodes: fcn operates on grids");
  }
  throw validation_error("forward_nodes: bad architecture");
}

DiffTensor EmulatorModel::forward_grid(Tape* tape,
                                       const DiffTensor& grid_inputs_norm) const {
  if (arch != Arch::fcn)
    throw validation_error("forward_grid: only fcn operates on grids");
  if (grid_ny < 2 || grid_nx < 2)
    throw validation_error("forward_grid: grid not configured");
  if (grid_inputs_norm.rows() != grid_ny * grid_nx)
    throw validation_error("forward_grid: input rows do not match the grid");
  DiffTensor h = grid_inputs_norm;
  for (const ConvLayer& l : conv_layers) h = l.forward(tape, grid_ny, grid_nx, h);
  return conv_output.forward(tape, grid_ny, grid_nx, h);
}

DiffTensor rasterize_to_grid(const TriMesh& mesh, const DiffTensor& node_values,
                             int ny, int nx, const Rect& rect) {
  if (node_values.rows() != mesh.num_nodes())
    throw validation_error("rasterize_to_grid: rows must match mesh nodes");
  if (ny < 2 || nx < 2) throw validation_error("rasterize_to_grid: grid too small");
  TriLocator locator(mesh);
  const double dx = rect.width() / (nx - 1), dy = rect.height() / (ny - 1);
  DiffTensor out = DiffTensor::zeros(ny * nx, node_values.cols());
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const Point2 p{rect.x0 + ix * dx, rect.y0 + iy * dy};
      std::array<double, 3> bary{};
      const int tri = locator.locate(p, bary);
      const int row = iy * nx + ix;
      if (tri >= 0) {
        const auto& tv = mesh.triangles[tri];
        for (int c = 0; c < node_values.cols(); ++c)
          out.at(row, c) = bary[0] * node_values.at(tv[0], c) +
                           bary[1] * node_values.at(tv[1], c) +
                           bary[2] * node_values.at(tv[2], c);
      } else {
        int best = 0;
        double best_d = std::numeric_limits<double>::max();
        for (int i = 0; i < mesh.num_nodes(); ++i) {
          const double d = std::hypot(mesh.nodes[i].x - p.x, mesh.nodes[i].y - p.y);
          if (d < best_d) {
            best_d = d;
            best = i;
          }
        }
        for (int c = 0; c < node_values.cols(); ++c)
          out.at(row, c) = node_values.at(best, c);
      }
    }
  return out;
}

DiffTensor sample_from_grid(const DiffTensor& grid_values, int ny, int nx,
                            const Rect& rect, const std::vector<Point2>& points) {
  if (grid_values.rows() != ny * nx)
    throw validation_error("sample_from_grid: rows must match the grid");
  const double dx = rect.width() / (nx - 1), dy = rect.height() / (ny - 1);
  DiffTensor out = DiffTensor::zeros(int(points.size()), grid_values.cols());
  for (size_t k = 0; k < points.size(); ++k) {
    const double fx = std::clamp((points[k].x - rect.x0) / dx, 0.0, double(nx - 1));
    const double fy = std::clamp((points[k].y - rect.y0) / dy, 0.0, double(ny - 1));
    const int ix = std::min(int(fx), nx - 2), iy = std::min(int(fy), ny - 2);
    const double wx = fx - ix, wy = fy - iy;
    const int r00 = iy * nx + ix;
    for (int c = 0; c < grid_values.cols(); ++c)
      out.at(int(k), c) = (1 - wy) * ((1 - wx) * grid_values.at(r00, c) +
                                      wx * grid_values.at(r00 + 1, c)) +
                          wy * ((1 - wx) * grid_values.at(r00 + nx, c) +
                                wx * grid_values.at(r00 + nx + 1, c));
  }
  return out;
}

namespace {

DiffTensor slice_coords(const DiffTensor& inputs_norm) {
  DiffTensor x = DiffTensor::zeros(inputs_norm.rows(), 2);
  for (int i = 0; i < inputs_norm.rows(); ++i) {
    x.at(i, 0) = inputs_norm.at(i, 0);
    x.at(i, 1) = inputs_norm.at(i, 1);
  }
  return x;
}

}  // namespace

DiffTensor EmulatorModel::predict(const GraphContext& ctx,
                                  const GraphSample& sample) const {
  norm.validate();
  const DiffTensor xn = normalize(sample.inputs, norm.input_min, norm.input_max);
  DiffTensor pred_norm;
  if (arch == Arch::fcn) {
    const DiffTensor grid_in =
        rasterize_to_grid(ctx.mesh, xn, grid_ny, grid_nx, ctx.domain);
    const DiffTensor grid_out = forward_grid(nullptr, grid_in);
    pred_norm = sample_from_grid(grid_out, grid_ny, grid_nx, ctx.domain,
                                 ctx.mesh.nodes);
  } else {
    pred_norm = forward_nodes(nullptr, ctx, xn, slice_coords(xn));
  }
  DiffTensor raw = denormalize(pred_norm, norm.target_min, norm.target_max);
  for (int i = 0; i < raw.rows(); ++i)
    if (raw.at(i, 2) < 0.0) raw.at(i, 2) = 0.0;  // thickness cannot go negative
  return raw;
}

TrainResult train_model(EmulatorModel& model,
                        const std::vector<GraphContext>& contexts,
                        const std::vector<GraphSample>& samples,
                        const SplitIndices& split, const TrainConfig& cfg) {
  model.norm.validate();
  if (split.train.empty()) throw validation_error("train_model: empty training set");
  if (cfg.epochs < 1) throw validation_error("train_model: epochs must be >= 1");

  NamedParams named = model.parameters();
  std::vector<DiffTensor> params;
  params.reserve(named.size());
  for (auto& [name, p] : named) params.push_back(p);

  // Normalized leaves, built once (raw samples stay untouched).
  const bool on_grid = model.arch == Arch::fcn;
  std::vector<DiffTensor> xs(samples.size()), ts(samples.size()), cs(samples.size());
  auto prepare = [&](int i) {
    const GraphSample& s = samples[i];
    DiffTensor xn = normalize(s.inputs, model.norm.input_min, model.norm.input_max);
    DiffTensor tn = normalize(s.targets, model.norm.target_min, model.norm.target_max);
    if (on_grid) {
      const GraphContext& ctx = contexts.at(s.context_id);
      xs[i] = rasterize_to_grid(ctx.mesh, xn, model.grid_ny, model.grid_nx, ctx.domain);
      ts[i] = rasterize_to_grid(ctx.mesh, tn, model.grid_ny, model.grid_nx, ctx.domain);
    } else {
      xs[i] = xn;
      ts[i] = tn;
      cs[i] = slice_coords(xn);
    }
  };
  for (int i : split.train) prepare(i);
  for (int i : split.val) prepare(i);

  auto forward = [&](Tape* tape, int i) {
    return on_grid ? model.forward_grid(tape, xs[i])
                   : model.forward_nodes(tape, contexts.at(samples[i].context_id),
                                         xs[i], cs[i]);
  };

  AdamState adam;
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order = split.train;

  TrainResult result;
  result.best_val = std::numeric_limits<double>::max();
  std::vector<std::vector<double>> best_params(params.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng() % i]);
    double train_sum = 0.0;
    for (int i : order) {
      try {
        Tape tape;
        // Per-op finite scans are off in the hot loop; a poisoned value
        // reaches the scalar loss through the mean, so one check suffices.
        tape.finite_checks = false;
        DiffTensor loss = ops::mse_loss(&tape, forward(&tape, i), ts[i]);
        if (!std::isfinite(loss.at(0, 0)))
          throw numeric_error("non-finite training loss");
        train_sum += loss.at(0, 0);
        tape.backward(loss);
        adam_step(params, adam, adam_cfg, /*clear_grads=*/true);
      } catch (const numeric_error& e) {
        throw numeric_error("training diverged at epoch " + std::to_string(epoch) +
                            ", sample " + std::to_string(i) + " (m0=" +
                            fmt_double(samples[i].m0) + ", r=" +
                            fmt_double(samples[i].melt_rate) + ", month=" +
                            std::to_string(samples[i].month) + "): " + e.what());
      }
    }
    result.train_mse.push_back(train_sum / double(order.size()));

    double val_sum = 0.0;
    for (int i : split.val)
      val_sum += ops::mse_loss(nullptr, forward(nullptr, i), ts[i]).at(0, 0);
    const double val =
        split.val.empty() ? result.train_mse.back() : val_sum / double(split.val.size());
    result.val_mse.push_back(val);

    if (val < result.best_val) {
      result.best_val = val;
      result.best_epoch = epoch;
      for (size_t p = 0; p < params.size(); ++p) {
        auto v = params[p].values();
        best_params[p].assign(v.begin(), v.end());
      }
    }
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %3d  train mse %.6e  val mse %.6e\n", epoch,
                   result.train_mse.back(), val);
  }

  // Leave the model at its best-validation parameters.
  for (size_t p = 0; p < params.size(); ++p) {
    auto v = params[p].values();
    std::copy(best_params[p].begin(), best_params[p].end(), v.begin());
  }
  return result;
}

void save_model(const std::string& dir, EmulatorModel& model,
                const std::vector<std::pair<std::string, std::string>>& extras) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir + "/checkpoint.bin", model.parameters());
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ' ';
      s += fmt_double(v[i]);
    }
    return s;
  };
  KvPairs kv{{"arch", arch_name(model.arch)},
             {"seed", std::to_string(model.seed)},
             {"grid_ny", std::to_string(model.grid_ny)},
             {"grid_nx", std::to_string(model.grid_nx)},
             {"input_min", join(model.norm.input_min)},
             {"input_max", join(model.norm.input_max)},
             {"target_min", join(model.norm.target_min)},
             {"target_max", join(model.norm.target_max)}};
  for (const auto& e : extras) kv.push_back(e);
  write_kv_file(dir + "/manifest.txt", kv);
}

EmulatorModel load_model(const std::string& dir) {
  const KvPairs kv = read_kv_file(dir + "/manifest.txt");
  EmulatorModel model = build_model(arch_from_string(kv_require(kv, "arch")),
                                    std::uint64_t(parse_int(kv_require(kv, "seed"))));
  model.grid_ny = int(parse_int(kv_require(kv, "grid_ny")));
  model.grid_nx = int(parse_int(kv_require(kv, "grid_nx")));
  auto split_doubles = [](const std::string& s) {
    std::vector<double> v;
    std::istringstream in(s);
    std::string tok;
    while (in >> tok) v.push_back(parse_double(tok));
    return v;
  };
  model.norm.input_min = split_doubles(kv_require(kv, "input_min"));
  model.norm.input_max = split_doubles(kv_require(kv, "input_max"));
  model.norm.target_min = split_doubles(kv_require(kv, "target_min"));
  model.norm.target_max = split_doubles(kv_require(kv, "target_max"));
  model.norm.validate();

  std::map<std::string, DiffTensor> stored;
  for (auto& [name, t] : load_checkpoint(dir + "/checkpoint.bin")) stored[name] = t;
  for (auto& [name, p] : model.parameters()) {
    auto it = stored.find(name);
    if (it == stored.end())
      throw io_error("checkpoint missing parameter '" + name + "'");
    if (it->second.rows() != p.rows() || it->second.cols() != p.cols())
      throw io_error("checkpoint shape mismatch for '" + name + "'");
    auto src = it->second.values();
    auto dst = p.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

}  // namespace icegraph
