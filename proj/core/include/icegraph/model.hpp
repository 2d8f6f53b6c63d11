#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icegraph/autodiff.hpp"
#include "icegraph/graph.hpp"
#include "icegraph/layers.hpp"
#include "icegraph/mesh.hpp"

namespace icegraph {

enum class Arch { gcn, gat, egcn, mlp, fcn };

std::string arch_name(Arch a);
Arch arch_from_string(const std::string& s);  // throws validation_error

// Linear per-feature maps onto [-1, 1]: min → -1, max → +1. Values outside
// the nominal bounds are allowed (they map beyond ±1) but counted and
// reported on stderr by normalize().
struct NormalizationSpec {
  std::vector<double> input_min, input_max;    // 4 features: x, y, t, r
  std::vector<double> target_min, target_max;  // 3 targets: u, v, H

  void validate() const;  // bounds present, max > min
};

DiffTensor normalize(const DiffTensor& raw, const std::vector<double>& mins,
                     const std::vector<double>& maxs);
DiffTensor denormalize(const DiffTensor& scaled, const std::vector<double>& mins,
                       const std::vector<double>& maxs);

// Shared per-mesh state: one instance serves every monthly sample drawn from
// the same simulation mesh.
struct GraphContext {
  TriMesh mesh;
  GraphTopology topology;
  GraphTensors tensors;
  Rect domain;
};

GraphContext make_graph_context(TriMesh mesh);

// One training example: node features (x m, y m, t months, r m/yr) and node
// targets (u m/yr, v m/yr, H m), both stored raw (normalized only at use).
struct GraphSample {
  int context_id = 0;
  double m0 = 0.0;
  double melt_rate = 0.0;
  int month = 0;
  DiffTensor inputs;   // N×4
  DiffTensor targets;  // N×3
};

// Melt-rate-based partition: validation {10,30,50,70}, test {0,20,40,60},
// everything else trains.
struct SplitIndices {
  std::vector<int> train, val, test;
};
SplitIndices split_dataset(const std::vector<GraphSample>& samples);

// Nominal bounds: positions from the domain box, t from [0, months_total],
// r from [0, 70], velocities symmetric at 1.25× the largest magnitude seen
// in the corpus, thickness [0, 1.25× max].
NormalizationSpec compute_normalization(const std::vector<GraphContext>& contexts,
                                        const std::vector<GraphSample>& samples,
                                        int months_total);

struct EmulatorModel {
  Arch arch = Arch::mlp;
  std::uint64_t seed = 0;
  NormalizationSpec norm;

  static constexpr int kInputs = 4;
  static constexpr int kOutputs = 3;
  static constexpr int kHidden = 128;
  static constexpr int kHiddenLayers = 5;
  static constexpr int kFinalAttentionHeads = 3;

  std::vector<DenseLayer> dense_layers;  // mlp
  std::vector<GCNLayer> gcn_layers;
  std::vector<GATLayer> gat_layers;
  std::vector<EGCNLayer> egcn_layers;
  std::vector<ConvLayer> conv_layers;    // fcn hidden
  DenseLayer output;                     // linear 128→3 readout (all but fcn)
  ConvLayer conv_output;                 // linear 3×3 conv readout (fcn)

  // fcn raster geometry; set from the training domain before use.
  int grid_ny = 0, grid_nx = 0;

  NamedParams parameters();
  std::int64_t parameter_count();

  // Mesh architectures (everything except fcn): normalized inputs → N×3
  // normalized outputs. coords = normalized (x, y), consumed by egcn only.
  DiffTensor forward_nodes(Tape* tape, const GraphContext& ctx,
                           const DiffTensor& inputs_norm,
                           const DiffTensor& coords_norm) const;
  // fcn: (ny·nx)×4 normalized grid → (ny·nx)×3 normalized grid.
  DiffTensor forward_grid(Tape* tape, const DiffTensor& grid_inputs_norm) const;

  // Raw sample → raw N×3 prediction (denormalized, thickness clamped ≥ 0).
  DiffTensor predict(const GraphContext& ctx, const GraphSample& sample) const;
};

EmulatorModel build_model(Arch arch, std::uint64_t seed);
void set_grid_for_domain(EmulatorModel& model, const Rect& domain, int cells = 128);

// Regular-grid transfer used by the fcn path: grid rows ordered (iy·nx + ix),
// cell (0,0) at (x0, y0). Nodes outside the hull take the nearest node value.
DiffTensor rasterize_to_grid(const TriMesh& mesh, const DiffTensor& node_values,
                             int ny, int nx, const Rect& rect);
DiffTensor sample_from_grid(const DiffTensor& grid_values, int ny, int nx,
                            const Rect& rect, const std::vector<Point2>& points);

struct TrainConfig {
  int epochs = 200;
  double lr = 0.01;
  std::uint64_t seed = 1;
  bool verbose = false;  // per-epoch stderr progress
};

struct TrainResult {
  std::vector<double> train_mse, val_mse;  // one entry per epoch
  int best_epoch = -1;
  double best_val = 0.0;
};

// Per-sample Adam over shuffled training samples; keeps the parameters of
// the best-validation epoch. Deterministic for a fixed seed.
TrainResult train_model(EmulatorModel& model,
                        const std::vector<GraphContext>& contexts,
                        const std::vector<GraphSample>& samples,
                        const SplitIndices& split, const TrainConfig& cfg);

// Model directory: checkpoint.bin (parameters) + manifest.txt (arch, seed,
// normalization bounds, training record, free-form extras).
void save_model(const std::string& dir, EmulatorModel& model,
                const std::vector<std::pair<std::string, std::string>>& extras = {});
EmulatorModel load_model(const std::string& dir);

}  // namespace icegraph
