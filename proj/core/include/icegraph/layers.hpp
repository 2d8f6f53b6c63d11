#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "icegraph/autodiff.hpp"
#include "icegraph/graph.hpp"

namespace icegraph {

enum class LayerKind { dense, gcn, gat, egcn };

// Declarative description of one layer in an emulator stack.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int in_features = 0;
  int out_features = 0;
  int heads = 1;                  // attention layers only
  double activation_slope = 0.01;
  bool activate = true;           // false → linear output (regression head)

  void validate() const;  // throws validation_error
};

using NamedParams = std::vector<std::pair<std::string, DiffTensor>>;

// Constant per-graph tensors shared by every layer pass over one topology.
// Built once per mesh; the tensors are leaves that never receive updates.
struct GraphTensors {
  int num_nodes = 0;
  std::vector<int> src, dst;     // one entry per directed pair (self included)
  std::vector<int> offsets;      // per-destination CSR segments
  DiffTensor conv_coeff;         // P×1: exp(-1/dist)/sqrt(deg_i·deg_j), self = 1/deg
  // Neighbor-only view (self-pairs dropped, order otherwise unchanged) for
  // layers whose messages exclude the node itself.
  std::vector<int> nsrc, ndst;   // one entry per neighbor pair
  std::vector<int> noffsets;     // per-destination segments into nsrc/ndst
  DiffTensor edge_attr;          // Pn×1: neighbor distance (scaled by 1/attr_scale)
  DiffTensor neighbor_scale;     // N×1: 1/|neighbors(i)| excluding self (0 if none)
};

// attr_scale divides the raw pair distances stored in edge_attr so callers
// can feed length-normalized edge attributes to the equivariant layer.
GraphTensors build_graph_tensors(const GraphTopology& g, double attr_scale = 1.0);

// Affine map per node followed by LeakyReLU (no neighbor exchange).
struct DenseLayer {
  DiffTensor W;  // out×in
  DiffTensor b;  // 1×out
  double slope = 0.01;
  bool activate = true;

  DenseLayer() = default;
  DenseLayer(int in, int out, std::mt19937_64& rng, bool activate = true,
             double slope = 0.01);
  DiffTensor forward(Tape* tape, const DiffTensor& h) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;
};

// Distance-kernel graph convolution:
//   h_i' = σ( Σ_{j∈N(i)} exp(-1/dist_ij)/sqrt(deg_i·deg_j) · W h_j ),
// with the self-pair entering the sum at kernel weight 1 (the dist → ∞ limit
// of the kernel, i.e. the strongest possible link).
struct GCNLayer {
  DiffTensor W;  // out×in
  double slope = 0.01;
  bool activate = true;

  GCNLayer() = default;
  GCNLayer(int in, int out, std::mt19937_64& rng, bool activate = true,
           double slope = 0.01);
  DiffTensor forward(Tape* tape, const GraphTensors& gt, const DiffTensor& h) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;
};

// Graph attention: per head k,
//   logit_ij = LeakyReLU_0.2( a_dstᵀ W h_i + a_srcᵀ W h_j ),
//   α_ij     = softmax over the in-neighborhood of i (self-pair included),
//   agg_i    = Σ_j α_ij W h_j,
// heads averaged, then the layer activation.
struct GATLayer {
  struct Head {
    DiffTensor W;      // out×in
    DiffTensor a_dst;  // 1×out, attention applied to the receiving node
    DiffTensor a_src;  // 1×out, attention applied to the sending node
  };
  std::vector<Head> heads;
  double slope = 0.01;
  bool activate = true;
  static constexpr double kAttentionSlope = 0.2;

  GATLayer() = default;
  GATLayer(int in, int out, int num_heads, std::mt19937_64& rng,
           bool activate = true, double slope = 0.01);
  // Attention weights of one head (P×1); exposed for direct verification.
  DiffTensor head_attention(Tape* tape, const GraphTensors& gt,
                            const DiffTensor& h, int head) const;
  DiffTensor forward(Tape* tape, const GraphTensors& gt, const DiffTensor& h) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;
};

// E(2)-equivariant graph layer with a feature stream h and a coordinate
// stream x:
//   m_ij = φ_e(h_i, h_j, |x_i-x_j|², a_ij)
//   x_i' = x_i + mean_{j≠i} (x_i - x_j)·φ_x(m_ij)
//   h_i' = φ_h(h_i, mean_{j≠i} m_ij)
// Features depend on coordinates only through distances, so rotating,
// translating, or reflecting x leaves h' unchanged and maps x' the same way.
struct EGCNLayer {
  DenseLayer phi_e0, phi_e1;  // (2F+2)→width→width, both activated
  DenseLayer phi_x0, phi_x1;  // width→width→1, linear output (signed weights)
  DenseLayer phi_h0, phi_h1;  // (F+width)→width→out
  int message_width = 0;

  EGCNLayer() = default;
  EGCNLayer(int in, int out, int width, std::mt19937_64& rng,
            bool activate = true, double slope = 0.01);
  struct Streams {
    DiffTensor h;  // N×out
    DiffTensor x;  // N×2
  };
  Streams forward(Tape* tape, const GraphTensors& gt, const DiffTensor& h,
                  const DiffTensor& x) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;
};

// 3×3 stride-1 zero-padded 2-D convolution over a regular grid stored as
// (ny·nx)×channels with rows ordered by (iy·nx + ix). Implemented as patch
// gathering (out-of-grid taps contribute zero) followed by one matmul.
struct ConvLayer {
  static constexpr int kKernel = 3;
  DiffTensor W;  // out_ch × (9·in_ch)
  DiffTensor b;  // 1 × out_ch
  int in_ch = 0, out_ch = 0;
  double slope = 0.01;
  bool activate = true;

  ConvLayer() = default;
  ConvLayer(int in_ch, int out_ch, std::mt19937_64& rng, bool activate = true,
            double slope = 0.01);
  DiffTensor forward(Tape* tape, int ny, int nx, const DiffTensor& x) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;
};

}  // namespace icegraph
