#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "icegraph/errors.hpp"
#include "icegraph/graph.hpp"
#include "icegraph/layers.hpp"
#include "icegraph/mesh.hpp"

using namespace icegraph;

namespace {

GraphTopology single_node_graph() {
  GraphTopology g;
  g.num_nodes = 1;
  g.dst = {0};
  g.src = {0};
  g.distance = {0.0};
  g.offsets = {0, 1};
  return g;
}

GraphTopology two_node_graph(double dist) {
  GraphTopology g;
  g.num_nodes = 2;
  g.dst = {0, 0, 1, 1};
  g.src = {0, 1, 1, 0};
  g.distance = {0.0, dist, 0.0, dist};
  g.offsets = {0, 2, 4};
  return g;
}

// Two triangles on a unit-ish square with exactly representable coordinates.
TriMesh quad_mesh() {
  TriMesh m;
  m.nodes = {{0, 0}, {2, 0}, {0, 2}, {2, 2}};
  m.triangles = {{0, 1, 2}, {1, 3, 2}};
  m.boundary = {1, 1, 1, 1};
  m.target_edge_length = {2, 2, 2, 2};
  return m;
}

std::vector<int> random_perm(int n, unsigned seed) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    const int j = int(rng() % uint64_t(i + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

DiffTensor permute_rows(const DiffTensor& t, const std::vector<int>& perm) {
  DiffTensor out = DiffTensor::zeros(t.rows(), t.cols());
  for (int i = 0; i < t.rows(); ++i)
    for (int c = 0; c < t.cols(); ++c) out.at(perm[i], c) = t.at(i, c);
  return out;
}

DiffTensor node_coords(const TriMesh& mesh) {
  DiffTensor x = DiffTensor::zeros(mesh.num_nodes(), 2);
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    x.at(i, 0) = mesh.nodes[i].x;
    x.at(i, 1) = mesh.nodes[i].y;
  }
  return x;
}

}  // namespace

TEST_CASE("layer spec validation") {
  LayerSpec ok{LayerKind::gat, 4, 8, 3};
  ok.validate();
  LayerSpec bad_feat{LayerKind::dense, 0, 8};
  CHECK_THROWS_AS(bad_feat.validate(), validation_error);
  LayerSpec bad_heads{LayerKind::gat, 4, 8, 0};
  CHECK_THROWS_AS(bad_heads.validate(), validation_error);
  LayerSpec heads_on_dense{LayerKind::dense, 4, 8, 2};
  CHECK_THROWS_AS(heads_on_dense.validate(), validation_error);
}

TEST_CASE("graph conv on an isolated node reduces to sigma(W h)") {
  const GraphTensors gt = build_graph_tensors(single_node_graph());
  GCNLayer layer;
  layer.W = DiffTensor::from_values(2, 2, {1, 2, 3, 4});
  DiffTensor h = DiffTensor::from_values(1, 2, {0.5, -1.0});
  DiffTensor out = layer.forward(nullptr, gt, h);
  // W h = (0.5 - 2, 1.5 - 4) = (-1.5, -2.5); LeakyReLU(0.01) scales negatives.
  CHECK(out.at(0, 0) == doctest::Approx(-0.015).epsilon(1e-12));
  CHECK(out.at(0, 1) == doctest::Approx(-0.025).epsilon(1e-12));
}

TEST_CASE("graph conv neighbor weight at 1 m equals exp(-1)/2") {
  const GraphTensors gt = build_graph_tensors(two_node_graph(1.0));
  GCNLayer layer;
  layer.W = DiffTensor::from_values(2, 2, {1, 0, 0, 1});
  layer.activate = false;  // read the raw weighted sum
  DiffTensor h = DiffTensor::from_values(2, 2, {0, 0, 3, -2});
  DiffTensor out = layer.forward(nullptr, gt, h);
  const double w = std::exp(-1.0) / 2.0;  // ≈ 0.18394
  CHECK(w == doctest::Approx(0.18394).epsilon(1e-4));
  CHECK(out.at(0, 0) == doctest::Approx(w * 3.0).epsilon(1e-12));
  CHECK(out.at(0, 1) == doctest::Approx(w * -2.0).epsilon(1e-12));
  // The self-pair enters at kernel weight 1, normalized by the degrees.
  CHECK(out.at(1, 0) == doctest::Approx(0.5 * 3.0).epsilon(1e-12));
  CHECK(out.at(1, 1) == doctest::Approx(0.5 * -2.0).epsilon(1e-12));
}

TEST_CASE("graph conv edge weights are symmetric") {
  const TriMesh mesh = generate_initial_mesh(Rect{0, 0, 100e3, 100e3}, 20e3, 3);
  const GraphTopology g = mesh_to_graph(mesh);
  const GraphTensors gt = build_graph_tensors(g);
  int checked = 0;
  for (int p = 0; p < g.num_pairs(); ++p) {
    if (g.src[p] == g.dst[p]) continue;
    for (int q = 0; q < g.num_pairs(); ++q) {
      if (g.src[q] == g.dst[p] && g.dst[q] == g.src[p]) {
        CHECK(gt.conv_coeff.at(p, 0) == gt.conv_coeff.at(q, 0));
        ++checked;
        break;
      }
    }
  }
  CHECK(checked == g.num_pairs() - g.num_nodes);
}

TEST_CASE("attention of a single-pair segment is exactly 1") {
  const GraphTensors gt = build_graph_tensors(single_node_graph());
  std::mt19937_64 rng(11);
  GATLayer layer(3, 4, 1, rng);
  DiffTensor h = gradcheck::random_tensor(1, 3, rng);
  DiffTensor alpha = layer.head_attention(nullptr, gt, h, 0);
  CHECK(alpha.at(0, 0) == 1.0);
}

TEST_CASE("zero attention vectors give uniform attention") {
  const GraphTensors gt = build_graph_tensors(two_node_graph(1.0));
  std::mt19937_64 rng(12);
  GATLayer layer(3, 4, 1, rng);
  for (double& v : layer.heads[0].a_dst.values()) v = 0.0;
  for (double& v : layer.heads[0].a_src.values()) v = 0.0;
  DiffTensor h = gradcheck::random_tensor(2, 3, rng);
  DiffTensor alpha = layer.head_attention(nullptr, gt, h, 0);
  for (int p = 0; p < 4; ++p) CHECK(alpha.at(p, 0) == 0.5);
}

TEST_CASE("attention weights sum to 1 over every neighborhood") {
  const TriMesh mesh = generate_initial_mesh(Rect{0, 0, 100e3, 100e3}, 20e3, 5);
  const GraphTopology g = mesh_to_graph(mesh);
  const GraphTensors gt = build_graph_tensors(g);
  std::mt19937_64 rng(13);
  GATLayer layer(5, 7, 2, rng);
  DiffTensor h = gradcheck::random_tensor(g.num_nodes, 5, rng, -2.0, 2.0);
  for (int k = 0; k < 2; ++k) {
    DiffTensor alpha = layer.head_attention(nullptr, gt, h, k);
    for (int i = 0; i < g.num_nodes; ++i) {
      double sum = 0.0;
      for (int p = gt.offsets[i]; p < gt.offsets[i + 1]; ++p) sum += alpha.at(p, 0);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("averaging identical attention heads changes nothing") {
  const TriMesh mesh = generate_initial_mesh(Rect{0, 0, 100e3, 100e3}, 20e3, 5);
  const GraphTensors gt = build_graph_tensors(mesh_to_graph(mesh));
  std::mt19937_64 rng(14);
  GATLayer three(4, 6, 3, rng);
  three.heads[1] = three.heads[0];
  three.heads[2] = three.heads[0];
  GATLayer one(4, 6, 1, rng);
  one.heads[0] = three.heads[0];
  DiffTensor h = gradcheck::random_tensor(gt.num_nodes, 4, rng);
  DiffTensor out3 = three.forward(nullptr, gt, h);
  DiffTensor out1 = one.forward(nullptr, gt, h);
  for (int i = 0; i < out1.rows(); ++i)
    for (int c = 0; c < out1.cols(); ++c)
      CHECK(out3.at(i, c) == doctest::Approx(out1.at(i, c)).epsilon(1e-12));
}

TEST_CASE("dense layer with identity weights passes non-negative input through") {
  DenseLayer layer;
  layer.W = DiffTensor::from_values(2, 2, {1, 0, 0, 1});
  layer.b = DiffTensor::zeros(1, 2);
  DiffTensor h = DiffTensor::from_values(3, 2, {0.1, 0.2, 0.0, 1.5, 2.0, 0.3});
  DiffTensor out = layer.forward(nullptr, h);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 2; ++c) CHECK(out.at(i, c) == h.at(i, c));

  DiffTensor zero = DiffTensor::zeros(3, 2);
  layer.b = DiffTensor::from_values(1, 2, {0.5, -0.4});
  DiffTensor out2 = layer.forward(nullptr, zero);
  for (int i = 0; i < 3; ++i) {
    CHECK(out2.at(i, 0) == doctest::Approx(0.5));
    CHECK(out2.at(i, 1) == doctest::Approx(-0.004));  // LeakyReLU(0.01) of -0.4
  }
}

TEST_CASE("all layer kinds are permutation-equivariant bit-for-bit") {
  const TriMesh mesh = generate_initial_mesh(Rect{0, 0, 100e3, 100e3}, 20e3, 9);
  const GraphTopology g = mesh_to_graph(mesh);
  const int n = g.num_nodes;
  const std::vector<int> perm = random_perm(n, 77);
  const GraphTopology gp = permute_graph(g, perm);
  const GraphTensors gt = build_graph_tensors(g, 20e3);
  const GraphTensors gtp = build_graph_tensors(gp, 20e3);

  std::mt19937_64 rng(15);
  DiffTensor h = gradcheck::random_tensor(n, 4, rng);
  DiffTensor x = node_coords(mesh);
  DiffTensor hp = permute_rows(h, perm);
  DiffTensor xp = permute_rows(x, perm);

  SUBCASE("gcn") {
    GCNLayer layer(4, 6, rng);
    DiffTensor a = permute_rows(layer.forward(nullptr, gt, h), perm);
    DiffTensor b = layer.forward(nullptr, gtp, hp);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 6; ++c) CHECK(a.at(i, c) == b.at(i, c));
  }
  SUBCASE("gat") {
    GATLayer layer(4, 6, 2, rng);
    DiffTensor a = permute_rows(layer.forward(nullptr, gt, h), perm);
    DiffTensor b = layer.forward(nullptr, gtp, hp);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 6; ++c) CHECK(a.at(i, c) == b.at(i, c));
  }
  SUBCASE("egcn") {
    EGCNLayer layer(4, 6, 8, rng);
    auto base = layer.forward(nullptr, gt, h, x);
    auto permuted = layer.forward(nullptr, gtp, hp, xp);
    DiffTensor ah = permute_rows(base.h, perm);
    DiffTensor ax = permute_rows(base.x, perm);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < 6; ++c) CHECK(ah.at(i, c) == permuted.h.at(i, c));
      for (int c = 0; c < 2; ++c) CHECK(ax.at(i, c) == permuted.x.at(i, c));
    }
  }
  SUBCASE("dense") {
    DenseLayer layer(4, 6, rng);
    DiffTensor a = permute_rows(layer.forward(nullptr, h), perm);
    DiffTensor b = layer.forward(nullptr, hp);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 6; ++c) CHECK(a.at(i, c) == b.at(i, c));
  }
}

TEST_CASE("equivariant layer: translation leaves features bit-identical") {
  const TriMesh mesh = quad_mesh();
  const GraphTensors gt = build_graph_tensors(mesh_to_graph(mesh));
  std::mt19937_64 rng(16);
  EGCNLayer layer(3, 4, 8, rng);
  DiffTensor h = gradcheck::random_tensor(4, 3, rng);
  DiffTensor x = node_coords(mesh);
  DiffTensor xt = x.clone();
  for (int i = 0; i < 4; ++i) {
    xt.at(i, 0) += 7.0;  // exactly representable shifts of exactly
    xt.at(i, 1) += 3.0;  // representable coordinates: no rounding
  }
  auto base = layer.forward(nullptr, gt, h, x);
  auto moved = layer.forward(nullptr, gt, h, xt);
  for (int i = 0; i < 4; ++i) {
    for (int c = 0; c < 4; ++c) CHECK(base.h.at(i, c) == moved.h.at(i, c));
    CHECK(moved.x.at(i, 0) == doctest::Approx(base.x.at(i, 0) + 7.0).epsilon(1e-12));
    CHECK(moved.x.at(i, 1) == doctest::Approx(base.x.at(i, 1) + 3.0).epsilon(1e-12));
  }
}

TEST_CASE("equivariant layer: rotation and reflection commute with the forward pass") {
  const TriMesh mesh = quad_mesh();
  const GraphTensors gt = build_graph_tensors(mesh_to_graph(mesh));
  std::mt19937_64 rng(17);
  EGCNLayer layer(3, 4, 8, rng);
  DiffTensor h = gradcheck::random_tensor(4, 3, rng);
  DiffTensor x = node_coords(mesh);

  auto apply = [&](double r00, double r01, double r10, double r11) {
    DiffTensor xr = DiffTensor::zeros(4, 2);
    for (int i = 0; i < 4; ++i) {
      xr.at(i, 0) = r00 * x.at(i, 0) + r01 * x.at(i, 1);
      xr.at(i, 1) = r10 * x.at(i, 0) + r11 * x.at(i, 1);
    }
    auto base = layer.forward(nullptr, gt, h, x);
    auto turned = layer.forward(nullptr, gt, h, xr);
    for (int i = 0; i < 4; ++i) {
      for (int c = 0; c < 4; ++c)
        CHECK(std::abs(base.h.at(i, c) - turned.h.at(i, c)) <= 1e-9);
      const double ex = r00 * base.x.at(i, 0) + r01 * base.x.at(i, 1);
      const double ey = r10 * base.x.at(i, 0) + r11 * base.x.at(i, 1);
      CHECK(std::abs(turned.x.at(i, 0) - ex) <= 1e-9);
      CHECK(std::abs(turned.x.at(i, 1) - ey) <= 1e-9);
    }
  };
  const double c = std::cos(0.7), s = std::sin(0.7);
  apply(c, -s, s, c);   // rotation by 0.7 rad
  apply(1, 0, 0, -1);   // reflection across the x-axis
}

TEST_CASE("coincident nodes produce finite outputs and no coordinate drift") {
  GraphTopology g = two_node_graph(0.0);  // distinct nodes, zero separation
  const GraphTensors gt = build_graph_tensors(g);
  std::mt19937_64 rng(18);
  EGCNLayer layer(3, 4, 8, rng);
  DiffTensor h = gradcheck::random_tensor(2, 3, rng);
  DiffTensor x = DiffTensor::from_values(2, 2, {5.0, 1.0, 5.0, 1.0});
  auto out = layer.forward(nullptr, gt, h, x);
  for (double v : out.h.values()) CHECK(std::isfinite(v));
  for (int i = 0; i < 2; ++i) {
    CHECK(out.x.at(i, 0) == 5.0);
    CHECK(out.x.at(i, 1) == 1.0);
  }
}

TEST_CASE("convolution matches hand-evaluated 3x3 sums with zero padding") {
  ConvLayer layer;
  layer.in_ch = 1;
  layer.out_ch = 1;
  layer.W = DiffTensor::full(1, 9, 1.0);  // all-ones kernel: box sum
  layer.b = DiffTensor::zeros(1, 1);
  layer.activate = false;
  // 3×3 grid holding 1..9 row by row.
  DiffTensor x = DiffTensor::from_values(9, 1, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  DiffTensor out = layer.forward(nullptr, 3, 3, x);
  CHECK(out.at(4, 0) == 45.0);               // center: all nine cells
  CHECK(out.at(0, 0) == 1 + 2 + 4 + 5);      // corner: the 2×2 in-grid taps
  CHECK(out.at(1, 0) == 1 + 2 + 3 + 4 + 5 + 6);  // edge: the 2×3 block

  // Identity kernel (center tap only) passes any field through.
  layer.W = DiffTensor::zeros(1, 9);
  layer.W.at(0, 4) = 1.0;
  DiffTensor same = layer.forward(nullptr, 3, 3, x);
  for (int i = 0; i < 9; ++i) CHECK(same.at(i, 0) == x.at(i, 0));
}

TEST_CASE("conv parameter tensors cover a 3x3 spatial kernel") {
  std::mt19937_64 rng(20);
  ConvLayer layer(4, 128, rng);
  CHECK(layer.W.rows() == 128);
  CHECK(layer.W.cols() == 3 * 3 * 4);
  CHECK(layer.b.cols() == 128);
  ConvLayer bad(2, 3, rng);
  DiffTensor x = DiffTensor::zeros(10, 3);  // wrong channel count
  CHECK_THROWS_AS(bad.forward(nullptr, 5, 2, x), validation_error);
}

TEST_CASE("layer gradients match finite differences") {
  std::mt19937_64 rng(19);

  SUBCASE("dense") {
    DenseLayer layer(2, 3, rng);
    DiffTensor h = gradcheck::random_tensor(3, 2, rng);
    auto fn = [&](Tape* t) { return ops::sum_all(t, layer.forward(t, h)); };
    CHECK(gradcheck::max_rel_error(fn, {h, layer.W, layer.b}) < 1e-6);
  }
  SUBCASE("gcn") {
    const GraphTensors gt = build_graph_tensors(two_node_graph(1.5));
    GCNLayer layer(3, 2, rng);
    DiffTensor h = gradcheck::random_tensor(2, 3, rng);
    auto fn = [&](Tape* t) { return ops::sum_all(t, layer.forward(t, gt, h)); };
    CHECK(gradcheck::max_rel_error(fn, {h, layer.W}) < 1e-6);
  }
  SUBCASE("gat") {
    const GraphTensors gt = build_graph_tensors(mesh_to_graph(quad_mesh()));
    GATLayer layer(3, 2, 2, rng);
    DiffTensor h = gradcheck::random_tensor(4, 3, rng);
    auto fn = [&](Tape* t) { return ops::sum_all(t, layer.forward(t, gt, h)); };
    NamedParams named;
    layer.collect_params("", named);
    std::vector<DiffTensor> inputs{h};
    for (auto& [name, p] : named) inputs.push_back(p);
    CHECK(gradcheck::max_rel_error(fn, inputs) < 1e-6);
  }
  SUBCASE("conv") {
    ConvLayer layer(2, 3, rng);
    DiffTensor x = gradcheck::random_tensor(12, 2, rng);  // 4×3 grid
    auto fn = [&](Tape* t) { return ops::sum_all(t, layer.forward(t, 4, 3, x)); };
    CHECK(gradcheck::max_rel_error(fn, {x, layer.W, layer.b}) < 1e-6);
  }
  SUBCASE("egcn") {
    const GraphTensors gt = build_graph_tensors(mesh_to_graph(quad_mesh()), 2.0);
    // Seed chosen so no pre-activation sits within the probe step of a
    // LeakyReLU kink (central differences are meaningless astride a kink).
    std::mt19937_64 erng(57);
    EGCNLayer layer(3, 2, 4, erng);
    DiffTensor h = gradcheck::random_tensor(4, 3, erng);
    DiffTensor x = gradcheck::random_tensor(4, 2, erng);
    auto fn = [&](Tape* t) {
      auto out = layer.forward(t, gt, h, x);
      return ops::add(t, ops::sum_all(t, out.h), ops::sum_all(t, out.x));
    };
    NamedParams named;
    layer.collect_params("", named);
    std::vector<DiffTensor> inputs{h, x};
    for (auto& [name, p] : named) inputs.push_back(p);
    CHECK(gradcheck::max_rel_error(fn, inputs) < 1e-6);
  }
}
