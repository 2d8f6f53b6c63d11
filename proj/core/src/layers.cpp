#include "icegraph/layers.hpp"

#include <cmath>

#include "icegraph/errors.hpp"

namespace icegraph {

void LayerSpec::validate() const {
  if (in_features < 1 || out_features < 1)
    throw validation_error("LayerSpec: feature counts must be >= 1");
  if (heads < 1) throw validation_error("LayerSpec: heads must be >= 1");
  if (heads > 1 && kind != LayerKind::gat)
    throw validation_error("LayerSpec: only attention layers take multiple heads");
}

GraphTensors build_graph_tensors(const GraphTopology& g, double attr_scale) {
  if (attr_scale <= 0.0)
    throw validation_error("build_graph_tensors: attr_scale must be positive");
  GraphTensors gt;
  gt.num_nodes = g.num_nodes;
  gt.src = g.src;
  gt.dst = g.dst;
  gt.offsets = g.offsets;

  const int P = g.num_pairs();
  std::vector<double> coeff(P);
  for (int p = 0; p < P; ++p) {
    const bool self = g.src[p] == g.dst[p];
    const double kernel = self ? 1.0 : std::exp(-1.0 / g.distance[p]);
    const double norm =
        std::sqrt(double(g.degree(g.dst[p]))) * std::sqrt(double(g.degree(g.src[p])));
    coeff[p] = kernel / norm;
  }
  gt.conv_coeff = DiffTensor::from_values(P, 1, std::move(coeff));

  std::vector<double> attr;
  attr.reserve(P);
  gt.noffsets.assign(1, 0);
  for (int v = 0; v < g.num_nodes; ++v) {
    for (int p = g.offsets[v]; p < g.offsets[v + 1]; ++p) {
      if (g.src[p] == g.dst[p]) continue;
      gt.nsrc.push_back(g.src[p]);
      gt.ndst.push_back(g.dst[p]);
      attr.push_back(g.distance[p] / attr_scale);
    }
    gt.noffsets.push_back(static_cast<int>(gt.nsrc.size()));
  }
  const int pn = static_cast<int>(attr.size());
  if (pn > 0) gt.edge_attr = DiffTensor::from_values(pn, 1, std::move(attr));

  std::vector<double> scale(g.num_nodes);
  for (int i = 0; i < g.num_nodes; ++i) {
    const int nn = g.degree(i) - 1;  // self-pair excluded
    scale[i] = nn > 0 ? 1.0 / double(nn) : 0.0;
  }
  gt.neighbor_scale = DiffTensor::from_values(g.num_nodes, 1, std::move(scale));
  return gt;
}

// Dense --------------------------------------------------------------------

DenseLayer::DenseLayer(int in, int out, std::mt19937_64& rng, bool activate,
                       double slope)
    : W(glorot_uniform(out, in, in, out, rng)),
      b(DiffTensor::zeros(1, out)),
      slope(slope),
      activate(activate) {}

DiffTensor DenseLayer::forward(Tape* tape, const DiffTensor& h) const {
  return ops::affine(tape, h, W, b, activate, slope);
}

void DenseLayer::collect_params(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + "W", W);
  out.emplace_back(prefix + "b", b);
}

// GCN ----------------------------------------------------------------------

GCNLayer::GCNLayer(int in, int out, std::mt19937_64& rng, bool activate,
                   double slope)
    : W(glorot_uniform(out, in, in, out, rng)), slope(slope), activate(activate) {}

DiffTensor GCNLayer::forward(Tape* tape, const GraphTensors& gt,
                             const DiffTensor& h) const {
  DiffTensor hw = ops::matmul_nt(tape, h, W);
  DiffTensor msg = ops::mul_colvec(tape, ops::gather_rows(tape, hw, gt.src),
                                   gt.conv_coeff);
  DiffTensor agg = ops::sum_segmented(tape, msg, gt.offsets);
  return activate ? ops::leaky_relu(tape, agg, slope) : agg;
}

void GCNLayer::collect_params(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + "W", W);
}

// GAT ----------------------------------------------------------------------

GATLayer::GATLayer(int in, int out, int num_heads, std::mt19937_64& rng,
                   bool activate, double slope)
    : slope(slope), activate(activate) {
  heads.reserve(num_heads);
  for (int k = 0; k < num_heads; ++k) {
    Head hd;
    hd.W = glorot_uniform(out, in, in, out, rng);
    hd.a_dst = glorot_uniform(1, out, 2 * out, 1, rng);
    hd.a_src = glorot_uniform(1, out, 2 * out, 1, rng);
    heads.push_back(std::move(hd));
  }
}

DiffTensor GATLayer::head_attention(Tape* tape, const GraphTensors& gt,
                                    const DiffTensor& h, int head) const {
  const Head& hd = heads.at(head);
  DiffTensor hw = ops::matmul_nt(tape, h, hd.W);
  DiffTensor score_dst = ops::matmul_nt(tape, hw, hd.a_dst);  // N×1
  DiffTensor score_src = ops::matmul_nt(tape, hw, hd.a_src);  // N×1
  DiffTensor logits = ops::leaky_relu(
      tape,
      ops::add(tape, ops::gather_rows(tape, score_dst, gt.dst),
               ops::gather_rows(tape, score_src, gt.src)),
      kAttentionSlope);
  return ops::softmax_segmented(tape, logits, gt.offsets);
}

DiffTensor GATLayer::forward(Tape* tape, const GraphTensors& gt,
                             const DiffTensor& h) const {
  DiffTensor acc;
  for (size_t k = 0; k < heads.size(); ++k) {
    DiffTensor hw = ops::matmul_nt(tape, h, heads[k].W);
    DiffTensor alpha = head_attention(tape, gt, h, int(k));
    DiffTensor msg =
        ops::mul_colvec(tape, ops::gather_rows(tape, hw, gt.src), alpha);
    DiffTensor agg = ops::sum_segmented(tape, msg, gt.offsets);
    acc = k == 0 ? agg : ops::add(tape, acc, agg);
  }
  if (heads.size() > 1) acc = ops::scale(tape, acc, 1.0 / double(heads.size()));
  return activate ? ops::leaky_relu(tape, acc, slope) : acc;
}

void GATLayer::collect_params(const std::string& prefix, NamedParams& out) const {
  for (size_t k = 0; k < heads.size(); ++k) {
    const std::string hp = prefix + "h" + std::to_string(k) + ".";
    out.emplace_back(hp + "W", heads[k].W);
    out.emplace_back(hp + "a_dst", heads[k].a_dst);
    out.emplace_back(hp + "a_src", heads[k].a_src);
  }
}

// EGCN ---------------------------------------------------------------------

EGCNLayer::EGCNLayer(int in, int out, int width, std::mt19937_64& rng,
                     bool activate, double slope)
    : phi_e0(2 * in + 2, width, rng, true, slope),
      phi_e1(width, width, rng, true, slope),
      phi_x0(width, width, rng, true, slope),
      phi_x1(width, 1, rng, false, slope),
      phi_h0(in + width, width, rng, true, slope),
      phi_h1(width, out, rng, activate, slope),
      message_width(width) {}

EGCNLayer::Streams EGCNLayer::forward(Tape* tape, const GraphTensors& gt,
                                      const DiffTensor& h,
                                      const DiffTensor& x) const {
  if (gt.nsrc.empty())
    throw validation_error("EGCNLayer: graph has no neighbor pairs");
  // Messages run over the neighbor-only pair list; self-pairs carry xd = 0
  // and are excluded from both neighbor means, so they would only add work.
  DiffTensor hi = ops::gather_rows(tape, h, gt.ndst);
  DiffTensor hj = ops::gather_rows(tape, h, gt.nsrc);
  DiffTensor xd = ops::sub(tape, ops::gather_rows(tape, x, gt.ndst),
                           ops::gather_rows(tape, x, gt.nsrc));
  DiffTensor d2 = ops::row_sum(tape, ops::mul(tape, xd, xd));  // Pn×1

  DiffTensor m = phi_e1.forward(
      tape, phi_e0.forward(tape, ops::concat_cols(tape, {hi, hj, d2, gt.edge_attr})));

  // Coordinate stream.
  DiffTensor xw = ops::mul_colvec(tape, xd, phi_x1.forward(tape, phi_x0.forward(tape, m)));
  DiffTensor xsum = ops::sum_segmented(tape, xw, gt.noffsets);
  DiffTensor x2 = ops::add(tape, x, ops::mul_colvec(tape, xsum, gt.neighbor_scale));

  // Feature stream.
  DiffTensor msum = ops::sum_segmented(tape, m, gt.noffsets);
  DiffTensor mi = ops::mul_colvec(tape, msum, gt.neighbor_scale);
  DiffTensor h2 = phi_h1.forward(
      tape, phi_h0.forward(tape, ops::concat_cols(tape, {h, mi})));
  return Streams{h2, x2};
}

void EGCNLayer::collect_params(const std::string& prefix, NamedParams& out) const {
  phi_e0.collect_params(prefix + "phi_e0.", out);
  phi_e1.collect_params(prefix + "phi_e1.", out);
  phi_x0.collect_params(prefix + "phi_x0.", out);
  phi_x1.collect_params(prefix + "phi_x1.", out);
  phi_h0.collect_params(prefix + "phi_h0.", out);
  phi_h1.collect_params(prefix + "phi_h1.", out);
}

// Conv ----------------------------------------------------------------------

ConvLayer::ConvLayer(int in_ch, int out_ch, std::mt19937_64& rng, bool activate,
                     double slope)
    : W(glorot_uniform(out_ch, kKernel * kKernel * in_ch,
                       kKernel * kKernel * in_ch, out_ch, rng)),
      b(DiffTensor::zeros(1, out_ch)),
      in_ch(in_ch),
      out_ch(out_ch),
      slope(slope),
      activate(activate) {}

DiffTensor ConvLayer::forward(Tape* tape, int ny, int nx, const DiffTensor& x) const {
  if (x.rows() != ny * nx || x.cols() != in_ch)
    throw validation_error("ConvLayer: input must be (ny*nx) x in_ch");
  std::vector<int> idx;
  idx.reserve(size_t(9) * ny * nx);
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int jy = iy + dy, jx = ix + dx;
          const bool in = jy >= 0 && jy < ny && jx >= 0 && jx < nx;
          idx.push_back(in ? jy * nx + jx : -1);
        }
  DiffTensor patches =
      ops::reshape(tape, ops::gather_rows(tape, x, idx), ny * nx, 9 * in_ch);
  return ops::affine(tape, patches, W, b, activate, slope);
}

void ConvLayer::collect_params(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + "W", W);
  out.emplace_back(prefix + "b", b);
}

}  // namespace icegraph
