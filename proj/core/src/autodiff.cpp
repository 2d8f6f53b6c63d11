#include "icegraph/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "icegraph/errors.hpp"

namespace icegraph {

// DiffTensor -----------------------------------------------------------------

DiffTensor DiffTensor::zeros(int rows, int cols) {
  return full(rows, cols, 0.0);
}

DiffTensor DiffTensor::full(int rows, int cols, double fill) {
  if (rows <= 0 || cols <= 0)
    throw validation_error("DiffTensor: non-positive shape");
  DiffTensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->rows = rows;
  t.d_->cols = cols;
  t.d_->v.assign(static_cast<size_t>(rows) * cols, fill);
  return t;
}

DiffTensor DiffTensor::from_values(int rows, int cols, std::vector<double> values) {
  if (static_cast<size_t>(rows) * cols != values.size())
    throw validation_error("DiffTensor: value count does not match shape");
  DiffTensor t = zeros(rows, cols);
  t.d_->v = std::move(values);
  return t;
}

std::span<double> DiffTensor::values() { return {d_->v.data(), d_->v.size()}; }
std::span<const double> DiffTensor::values() const { return {d_->v.data(), d_->v.size()}; }

double DiffTensor::at(int r, int c) const { return d_->v[static_cast<size_t>(r) * d_->cols + c]; }
double& DiffTensor::at(int r, int c) { return d_->v[static_cast<size_t>(r) * d_->cols + c]; }

void DiffTensor::ensure_grad() {
  if (d_->g.empty()) d_->g.assign(d_->v.size(), 0.0);
}

void DiffTensor::zero_grad() {
  std::fill(d_->g.begin(), d_->g.end(), 0.0);
}

std::span<double> DiffTensor::grad() {
  ensure_grad();
  return {d_->g.data(), d_->g.size()};
}

std::span<const double> DiffTensor::grad() const {
  if (d_->g.empty())
    throw validation_error("DiffTensor: gradient not populated");
  return {d_->g.data(), d_->g.size()};
}

double DiffTensor::grad_at(int r, int c) const {
  if (d_->g.empty())
    throw validation_error("DiffTensor: gradient not populated");
  return d_->g[static_cast<size_t>(r) * d_->cols + c];
}

DiffTensor DiffTensor::clone() const {
  DiffTensor t = zeros(rows(), cols());
  t.d_->v = d_->v;
  return t;
}

void require_finite(const DiffTensor& t, const std::string& label) {
  for (double x : t.values())
    if (!std::isfinite(x))
      throw numeric_error("non-finite value in " + label);
}

// Op plumbing ----------------------------------------------------------------

struct OpAccess {
  using Data = DiffTensor::Data;
  using DataPtr = std::shared_ptr<Data>;

  static DataPtr data(const DiffTensor& t) { return t.d_; }

  static DiffTensor output(Tape* tape, int rows, int cols) {
    DiffTensor t = DiffTensor::zeros(rows, cols);
    if (tape) t.d_->producer = tape;
    return t;
  }

  static void finish(Tape* tape, const DiffTensor& out, const char* op,
                     std::function<void()> backward) {
    if (!tape) return;
    if (tape->finite_checks) {
      for (double x : out.values())
        if (!std::isfinite(x))
          throw numeric_error(std::string("non-finite output of op ") + op);
    }
    tape->records_.push_back(std::move(backward));
  }

  static void ensure_grad(Data& d) {
    if (d.g.empty()) d.g.assign(d.v.size(), 0.0);
  }
};

void Tape::backward(const DiffTensor& loss) {
  if (consumed_)
    throw validation_error("tape: backward already ran; build a fresh tape");
  if (loss.size() != 1)
    throw validation_error("tape: loss must be a 1x1 scalar, got (" +
                           std::to_string(loss.rows()) + "x" +
                           std::to_string(loss.cols()) + ")");
  if (loss.producer() != this)
    throw validation_error("tape: loss was not produced on this tape");
  consumed_ = true;
  auto d = OpAccess::data(loss);
  d->g.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

namespace ops {

namespace {

using Data = OpAccess::Data;
using DataPtr = OpAccess::DataPtr;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

CMatMap vmap(const DataPtr& d) { return {d->v.data(), d->rows, d->cols}; }
MatMap wmap(const DataPtr& d) { return {d->v.data(), d->rows, d->cols}; }
MatMap gmap(const DataPtr& d) { return {d->g.data(), d->rows, d->cols}; }

std::string shape_str(const DiffTensor& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

[[noreturn]] void shape_fail(const char* op, const DiffTensor& a, const DiffTensor& b) {
  throw validation_error(std::string(op) + ": incompatible shapes " + shape_str(a) +
                         " and " + shape_str(b));
}

void check_offsets(const char* op, const std::vector<int>& offsets, int total_rows) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != total_rows)
    throw validation_error(std::string(op) + ": offsets must run 0..num_rows");
  for (size_t k = 1; k < offsets.size(); ++k)
    if (offsets[k] < offsets[k - 1])
      throw validation_error(std::string(op) + ": offsets must be non-decreasing");
}

}  // namespace

// Tail path of ordered_gemm: rows [i_begin,i_end) x columns [j_begin,n),
// one fma chain per output entry, strictly ordered in k.
static void gemm_rows(const double* a, const double* b, double* c, int i_begin,
                      int i_end, int j_begin, int k, int n) {
  const int nw = n - j_begin;
  if (nw <= 0) return;
  std::vector<double> acc(nw);
  for (int i = i_begin; i < i_end; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const double* ai = a + size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + size_t(p) * n + j_begin;
      for (int j = 0; j < nw; ++j) acc[j] = std::fma(av, bp[j], acc[j]);
    }
    std::memcpy(c + size_t(i) * n + j_begin, acc.data(), sizeof(double) * nw);
  }
}

// Register tiles for the main body of ordered_gemm. Both variants accumulate
// each output entry as a single fma chain in ascending k order, exactly like
// gemm_rows, so tile boundaries never change an entry's bits.
#if defined(__AVX512F__)

// Broadcast-oriented tile: the accumulators are the outputs themselves
// (MR rows x 8*NV columns), so no horizontal reduction is ever needed.
template <int MR, int NV>
[[gnu::always_inline]] static inline void gemm_tile(const double* a,
                                                    const double* b, double* c,
                                                    int i0, int j0, int k,
                                                    int n) {
  __m512d acc[MR][NV];
  for (int i = 0; i < MR; ++i)
    for (int v = 0; v < NV; ++v) acc[i][v] = _mm512_setzero_pd();
  const double* bp = b + j0;
  for (int p = 0; p < k; ++p, bp += n) {
    __m512d bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = _mm512_loadu_pd(bp + v * 8);
    for (int i = 0; i < MR; ++i) {
      const __m512d av = _mm512_set1_pd(a[size_t(i0 + i) * k + p]);
      for (int v = 0; v < NV; ++v) acc[i][v] = _mm512_fmadd_pd(av, bv[v], acc[i][v]);
    }
  }
  for (int i = 0; i < MR; ++i)
    for (int v = 0; v < NV; ++v)
      _mm512_storeu_pd(c + size_t(i0 + i) * n + j0 + v * 8, acc[i][v]);
}

template <int MR>
static void gemm_row_block(const double* a, const double* b, double* c, int i0,
                           int k, int n) {
  int j0 = 0;
  for (; j0 + 16 <= n; j0 += 16) gemm_tile<MR, 2>(a, b, c, i0, j0, k, n);
  if (j0 + 8 <= n) {
    gemm_tile<MR, 1>(a, b, c, i0, j0, k, n);
    j0 += 8;
  }
  if (j0 < n) gemm_rows(a, b, c, i0, i0 + MR, j0, k, n);
}

static void gemm_body(const double* a, const double* b, double* c, int m,
                      int k, int n) {
  int i0 = 0;
  for (; i0 + 8 <= m; i0 += 8) gemm_row_block<8>(a, b, c, i0, k, n);
  if (i0 + 4 <= m) {
    gemm_row_block<4>(a, b, c, i0, k, n);
    i0 += 4;
  }
  if (i0 + 2 <= m) {
    gemm_row_block<2>(a, b, c, i0, k, n);
    i0 += 2;
  }
  if (i0 < m) gemm_row_block<1>(a, b, c, i0, k, n);
}

#else  // portable tile, bit-identical results

static void gemm_body(const double* a, const double* b, double* c, int m,
                      int k, int n) {
  constexpr int MR = 4, NR = 8;
  int i0 = 0;
  for (; i0 + MR <= m; i0 += MR) {
    int j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
      double acc[MR][NR] = {};
      const double* bp = b + j0;
      for (int p = 0; p < k; ++p, bp += n) {
        double bv[NR];
        for (int j = 0; j < NR; ++j) bv[j] = bp[j];
        for (int i = 0; i < MR; ++i) {
          const double av = a[size_t(i0 + i) * k + p];
          for (int j = 0; j < NR; ++j) acc[i][j] = std::fma(av, bv[j], acc[i][j]);
        }
      }
      for (int i = 0; i < MR; ++i)
        std::memcpy(c + size_t(i0 + i) * n + j0, acc[i], sizeof(double) * NR);
    }
    if (j0 < n) gemm_rows(a, b, c, i0, i0 + MR, j0, k, n);
  }
  if (i0 < m) gemm_rows(a, b, c, i0, m, 0, k, n);
}

#endif

// C (m×n) = A (m×k)·B (k×n), all row-major, with every output entry
// accumulated as a single fma chain in a fixed k order, independent of the
// entry's position in the matrix. BLAS-style kernels round full and tail row
// panels differently, so the same input row can produce last-ulp-different
// outputs at different row positions; here every tile path performs the
// identical per-entry operation sequence, which is what makes graph layers
// bitwise permutation-equivariant, and the register tiles keep this within a
// small factor of a tuned GEMM at the sizes used here.
static void ordered_gemm(const double* a, const double* b, double* c, int m,
                         int k, int n) {
  gemm_body(a, b, c, m, k, n);
}

DiffTensor matmul(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), b.cols());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  ordered_gemm(da->v.data(), db->v.data(), dout->v.data(), a.rows(), a.cols(),
               b.cols());
  OpAccess::finish(tape, out, "matmul", [da, db, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    gmap(da).noalias() += gmap(dout) * vmap(db).transpose();
    gmap(db).noalias() += vmap(da).transpose() * gmap(dout);
  });
  return out;
}

DiffTensor matmul_nt(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (a.cols() != b.cols()) shape_fail("matmul_nt", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), b.rows());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  // Transpose b once so the ordered kernel sees k-major data.
  std::vector<double> bt(db->v.size());
  for (int r = 0; r < b.rows(); ++r)
    for (int c = 0; c < b.cols(); ++c)
      bt[size_t(c) * b.rows() + r] = db->v[size_t(r) * b.cols() + c];
  ordered_gemm(da->v.data(), bt.data(), dout->v.data(), a.rows(), a.cols(),
               b.rows());
  OpAccess::finish(tape, out, "matmul_nt", [da, db, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    gmap(da).noalias() += gmap(dout) * vmap(db);
    gmap(db).noalias() += gmap(dout).transpose() * vmap(da);
  });
  return out;
}

DiffTensor affine(Tape* tape, const DiffTensor& x, const DiffTensor& W,
                  const DiffTensor& b, bool activate, double slope) {
  if (x.cols() != W.cols()) shape_fail("affine", x, W);
  if (b.rows() != 1 || b.cols() != W.rows()) shape_fail("affine", W, b);
  if (activate && slope <= 0.0)
    throw validation_error("affine: activation slope must be positive");
  const int m = x.rows(), k = x.cols(), n = W.rows();
  DiffTensor out = OpAccess::output(tape, m, n);
  auto dx = OpAccess::data(x), dw = OpAccess::data(W), db = OpAccess::data(b),
       dout = OpAccess::data(out);
  // Same k-major transpose + ordered kernel as matmul_nt, then one pass for
  // the bias and activation; the entry values match the composed ops exactly.
  std::vector<double> wt(dw->v.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < k; ++c) wt[size_t(c) * n + r] = dw->v[size_t(r) * k + c];
  ordered_gemm(dx->v.data(), wt.data(), dout->v.data(), m, k, n);
  for (int r = 0; r < m; ++r) {
    double* row = dout->v.data() + size_t(r) * n;
    for (int c = 0; c < n; ++c) {
      const double z = row[c] + db->v[c];
      row[c] = !activate || z >= 0.0 ? z : slope * z;
    }
  }
  OpAccess::finish(tape, out, "affine", [dx, dw, db, dout, activate, slope, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*dx);
    OpAccess::ensure_grad(*dw);
    OpAccess::ensure_grad(*db);
    // Every consumer of `out` has already run (closures replay in reverse),
    // so its gradient buffer can be rescaled in place into the pre-activation
    // gradient; slope > 0 keeps sign(out) == sign(pre-activation).
    if (activate)
      for (size_t i = 0; i < dout->g.size(); ++i)
        if (dout->v[i] < 0.0) dout->g[i] *= slope;
    for (size_t i = 0; i < dout->g.size(); ++i) db->g[i % n] += dout->g[i];
    gmap(dx).noalias() += gmap(dout) * vmap(dw);
    gmap(dw).noalias() += gmap(dout).transpose() * vmap(dx);
  });
  return out;
}

DiffTensor add(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("add", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  for (size_t i = 0; i < da->v.size(); ++i) dout->v[i] = da->v[i] + db->v[i];
  OpAccess::finish(tape, out, "add", [da, db, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    for (size_t i = 0; i < dout->g.size(); ++i) {
      da->g[i] += dout->g[i];
      db->g[i] += dout->g[i];
    }
  });
  return out;
}

DiffTensor add_rowvec(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (b.rows() != 1 || a.cols() != b.cols()) shape_fail("add_rowvec", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  const int n = a.cols();
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < n; ++c)
      dout->v[static_cast<size_t>(r) * n + c] = da->v[static_cast<size_t>(r) * n + c] + db->v[c];
  OpAccess::finish(tape, out, "add_rowvec", [da, db, dout, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    for (size_t i = 0; i < dout->g.size(); ++i) {
      da->g[i] += dout->g[i];
      db->g[i % n] += dout->g[i];
    }
  });
  return out;
}

DiffTensor sub(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("sub", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  for (size_t i = 0; i < da->v.size(); ++i) dout->v[i] = da->v[i] - db->v[i];
  OpAccess::finish(tape, out, "sub", [da, db, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    for (size_t i = 0; i < dout->g.size(); ++i) {
      da->g[i] += dout->g[i];
      db->g[i] -= dout->g[i];
    }
  });
  return out;
}

DiffTensor mul(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("mul", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  for (size_t i = 0; i < da->v.size(); ++i) dout->v[i] = da->v[i] * db->v[i];
  OpAccess::finish(tape, out, "mul", [da, db, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    for (size_t i = 0; i < dout->g.size(); ++i) {
      da->g[i] += dout->g[i] * db->v[i];
      db->g[i] += dout->g[i] * da->v[i];
    }
  });
  return out;
}

DiffTensor mul_colvec(Tape* tape, const DiffTensor& a, const DiffTensor& b) {
  if (b.cols() != 1 || a.rows() != b.rows()) shape_fail("mul_colvec", a, b);
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), db = OpAccess::data(b), dout = OpAccess::data(out);
  const int n = a.cols();
  for (int r = 0; r < a.rows(); ++r) {
    const double s = db->v[r];
    for (int c = 0; c < n; ++c)
      dout->v[static_cast<size_t>(r) * n + c] = da->v[static_cast<size_t>(r) * n + c] * s;
  }
  OpAccess::finish(tape, out, "mul_colvec", [da, db, dout, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    OpAccess::ensure_grad(*db);
    for (int r = 0; r < dout->rows; ++r) {
      const double s = db->v[r];
      double acc = 0.0;
      for (int c = 0; c < n; ++c) {
        const size_t i = static_cast<size_t>(r) * n + c;
        da->g[i] += dout->g[i] * s;
        acc += dout->g[i] * da->v[i];
      }
      db->g[r] += acc;
    }
  });
  return out;
}

DiffTensor scale(Tape* tape, const DiffTensor& a, double c) {
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  for (size_t i = 0; i < da->v.size(); ++i) dout->v[i] = da->v[i] * c;
  OpAccess::finish(tape, out, "scale", [da, dout, c]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t i = 0; i < dout->g.size(); ++i) da->g[i] += dout->g[i] * c;
  });
  return out;
}

DiffTensor concat_cols(Tape* tape, const std::vector<DiffTensor>& parts) {
  if (parts.empty()) throw validation_error("concat_cols: no inputs");
  const int rows = parts[0].rows();
  int cols = 0;
  for (const DiffTensor& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", parts[0], p);
    cols += p.cols();
  }
  DiffTensor out = OpAccess::output(tape, rows, cols);
  auto dout = OpAccess::data(out);
  std::vector<DataPtr> dp;
  dp.reserve(parts.size());
  for (const DiffTensor& p : parts) dp.push_back(OpAccess::data(p));
  int col0 = 0;
  for (const auto& p : dp) {
    for (int r = 0; r < rows; ++r)
      std::copy_n(p->v.data() + static_cast<size_t>(r) * p->cols, p->cols,
                  dout->v.data() + static_cast<size_t>(r) * cols + col0);
    col0 += p->cols;
  }
  OpAccess::finish(tape, out, "concat_cols", [dp, dout, rows, cols]() {
    if (dout->g.empty()) return;
    int c0 = 0;
    for (const auto& p : dp) {
      OpAccess::ensure_grad(*p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < p->cols; ++c)
          p->g[static_cast<size_t>(r) * p->cols + c] +=
              dout->g[static_cast<size_t>(r) * cols + c0 + c];
      c0 += p->cols;
    }
  });
  return out;
}

DiffTensor row_sum(Tape* tape, const DiffTensor& a) {
  DiffTensor out = OpAccess::output(tape, a.rows(), 1);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  const int n = a.cols();
  for (int r = 0; r < a.rows(); ++r) {
    double acc = 0.0;
    for (int c = 0; c < n; ++c) acc += da->v[static_cast<size_t>(r) * n + c];
    dout->v[r] = acc;
  }
  OpAccess::finish(tape, out, "row_sum", [da, dout, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (int r = 0; r < dout->rows; ++r)
      for (int c = 0; c < n; ++c) da->g[static_cast<size_t>(r) * n + c] += dout->g[r];
  });
  return out;
}

DiffTensor sum_all(Tape* tape, const DiffTensor& a) {
  DiffTensor out = OpAccess::output(tape, 1, 1);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  double acc = 0.0;
  for (double x : da->v) acc += x;
  dout->v[0] = acc;
  OpAccess::finish(tape, out, "sum_all", [da, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (double& g : da->g) g += dout->g[0];
  });
  return out;
}

DiffTensor leaky_relu(Tape* tape, const DiffTensor& a, double slope) {
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  for (size_t i = 0; i < da->v.size(); ++i)
    dout->v[i] = da->v[i] >= 0.0 ? da->v[i] : slope * da->v[i];
  OpAccess::finish(tape, out, "leaky_relu", [da, dout, slope]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t i = 0; i < dout->g.size(); ++i)
      da->g[i] += dout->g[i] * (da->v[i] >= 0.0 ? 1.0 : slope);
  });
  return out;
}

DiffTensor exp(Tape* tape, const DiffTensor& a) {
  DiffTensor out = OpAccess::output(tape, a.rows(), a.cols());
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  for (size_t i = 0; i < da->v.size(); ++i) dout->v[i] = std::exp(da->v[i]);
  OpAccess::finish(tape, out, "exp", [da, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t i = 0; i < dout->g.size(); ++i) da->g[i] += dout->g[i] * dout->v[i];
  });
  return out;
}

DiffTensor softmax_segmented(Tape* tape, const DiffTensor& a,
                             const std::vector<int>& offsets) {
  if (a.cols() != 1)
    throw validation_error("softmax_segmented: expects a column, got " + shape_str(a));
  check_offsets("softmax_segmented", offsets, a.rows());
  DiffTensor out = OpAccess::output(tape, a.rows(), 1);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  const int segs = static_cast<int>(offsets.size()) - 1;
  for (int s = 0; s < segs; ++s) {
    const int lo = offsets[s], hi = offsets[s + 1];
    if (lo == hi) continue;
    double m = da->v[lo];
    for (int k = lo + 1; k < hi; ++k) m = std::max(m, da->v[k]);
    double sum = 0.0;
    for (int k = lo; k < hi; ++k) {
      dout->v[k] = std::exp(da->v[k] - m);
      sum += dout->v[k];
    }
    for (int k = lo; k < hi; ++k) dout->v[k] /= sum;
  }
  OpAccess::finish(tape, out, "softmax_segmented", [da, dout, offsets]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t s = 0; s + 1 < offsets.size(); ++s) {
      const int lo = offsets[s], hi = offsets[s + 1];
      double dot = 0.0;
      for (int k = lo; k < hi; ++k) dot += dout->v[k] * dout->g[k];
      for (int k = lo; k < hi; ++k)
        da->g[k] += dout->v[k] * (dout->g[k] - dot);
    }
  });
  return out;
}

DiffTensor sum_segmented(Tape* tape, const DiffTensor& a,
                         const std::vector<int>& offsets) {
  check_offsets("sum_segmented", offsets, a.rows());
  const int segs = static_cast<int>(offsets.size()) - 1;
  const int n = a.cols();
  DiffTensor out = OpAccess::output(tape, segs, n);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  for (int s = 0; s < segs; ++s)
    for (int k = offsets[s]; k < offsets[s + 1]; ++k)
      for (int c = 0; c < n; ++c)
        dout->v[static_cast<size_t>(s) * n + c] += da->v[static_cast<size_t>(k) * n + c];
  OpAccess::finish(tape, out, "sum_segmented", [da, dout, offsets, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t s = 0; s + 1 < offsets.size(); ++s)
      for (int k = offsets[s]; k < offsets[s + 1]; ++k)
        for (int c = 0; c < n; ++c)
          da->g[static_cast<size_t>(k) * n + c] += dout->g[static_cast<size_t>(s) * n + c];
  });
  return out;
}

DiffTensor gather_rows(Tape* tape, const DiffTensor& a, const std::vector<int>& idx) {
  const int n = a.cols();
  for (int i : idx)
    if (i < -1 || i >= a.rows())
      throw validation_error("gather_rows: index out of range");
  DiffTensor out = OpAccess::output(tape, static_cast<int>(idx.size()), n);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0) continue;  // zero row (padding)
    std::copy_n(da->v.data() + static_cast<size_t>(idx[k]) * n, n,
                dout->v.data() + k * n);
  }
  OpAccess::finish(tape, out, "gather_rows", [da, dout, idx, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] < 0) continue;
      for (int c = 0; c < n; ++c)
        da->g[static_cast<size_t>(idx[k]) * n + c] += dout->g[k * n + c];
    }
  });
  return out;
}

DiffTensor scatter_add_rows(Tape* tape, const DiffTensor& a,
                            const std::vector<int>& idx, int out_rows) {
  if (static_cast<int>(idx.size()) != a.rows())
    throw validation_error("scatter_add_rows: index count != row count");
  for (int i : idx)
    if (i < -1 || i >= out_rows)
      throw validation_error("scatter_add_rows: index out of range");
  const int n = a.cols();
  DiffTensor out = OpAccess::output(tape, out_rows, n);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0) continue;
    for (int c = 0; c < n; ++c)
      dout->v[static_cast<size_t>(idx[k]) * n + c] += da->v[k * n + c];
  }
  OpAccess::finish(tape, out, "scatter_add_rows", [da, dout, idx, n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] < 0) continue;
      for (int c = 0; c < n; ++c)
        da->g[k * n + c] += dout->g[static_cast<size_t>(idx[k]) * n + c];
    }
  });
  return out;
}

DiffTensor reshape(Tape* tape, const DiffTensor& a, int rows, int cols) {
  if (rows * cols != a.size())
    throw validation_error("reshape: element count mismatch for " + shape_str(a) +
                           " -> (" + std::to_string(rows) + "x" + std::to_string(cols) + ")");
  DiffTensor out = OpAccess::output(tape, rows, cols);
  auto da = OpAccess::data(a), dout = OpAccess::data(out);
  dout->v = da->v;
  OpAccess::finish(tape, out, "reshape", [da, dout]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*da);
    for (size_t i = 0; i < dout->g.size(); ++i) da->g[i] += dout->g[i];
  });
  return out;
}

DiffTensor mse_loss(Tape* tape, const DiffTensor& pred, const DiffTensor& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    shape_fail("mse_loss", pred, target);
  DiffTensor out = OpAccess::output(tape, 1, 1);
  auto dp = OpAccess::data(pred), dt = OpAccess::data(target), dout = OpAccess::data(out);
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  double acc = 0.0;
  for (size_t i = 0; i < dp->v.size(); ++i) {
    const double e = dp->v[i] - dt->v[i];
    acc += e * e;
  }
  dout->v[0] = acc * inv_n;
  OpAccess::finish(tape, out, "mse_loss", [dp, dt, dout, inv_n]() {
    if (dout->g.empty()) return;
    OpAccess::ensure_grad(*dp);
    OpAccess::ensure_grad(*dt);
    const double c = 2.0 * inv_n * dout->g[0];
    for (size_t i = 0; i < dp->v.size(); ++i) {
      const double e = c * (dp->v[i] - dt->v[i]);
      dp->g[i] += e;
      dt->g[i] -= e;
    }
  });
  return out;
}

}  // namespace ops

// Initialization & optimizer ---------------------------------------------

DiffTensor glorot_uniform(int rows, int cols, int fan_in, int fan_out,
                          std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DiffTensor t = DiffTensor::zeros(rows, cols);
  for (double& x : t.values()) x = dist(rng);
  return t;
}

void adam_step(std::span<DiffTensor> params, AdamState& state, const AdamConfig& cfg,
               bool clear_grads) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(params[p].size(), 0.0);
      state.v[p].assign(params[p].size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw validation_error("adam_step: state/parameter count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t p = 0; p < params.size(); ++p) {
    if (state.m[p].size() != static_cast<size_t>(params[p].size()))
      throw validation_error("adam_step: state shape mismatch at parameter " +
                             std::to_string(p));
    auto g = params[p].grad();
    auto w = params[p].values();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (size_t i = 0; i < m.size(); ++i) {
      const double gi = g[i];
      if (clear_grads) g[i] = 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void zero_grads(std::span<DiffTensor> params) {
  for (DiffTensor& p : params) {
    p.ensure_grad();
    p.zero_grad();
  }
}

// Checkpoints -----------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'I', 'C', 'G', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, DiffTensor>>& tensors) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw io_error("save_checkpoint: cannot open " + path);
  std::fwrite(kCheckpointMagic, 1, 8, f);
  const std::uint64_t count = tensors.size();
  std::fwrite(&count, sizeof(count), 1, f);
  for (const auto& [name, t] : tensors) {
    const std::uint64_t len = name.size();
    const std::uint32_t rows = static_cast<std::uint32_t>(t.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(t.cols());
    std::fwrite(&len, sizeof(len), 1, f);
    std::fwrite(name.data(), 1, name.size(), f);
    std::fwrite(&rows, sizeof(rows), 1, f);
    std::fwrite(&cols, sizeof(cols), 1, f);
    const auto vals = t.values();
    if (std::fwrite(vals.data(), sizeof(double), vals.size(), f) != vals.size()) {
      std::fclose(f);
      throw io_error("save_checkpoint: short write to " + path);
    }
  }
  if (std::fclose(f) != 0) throw io_error("save_checkpoint: write failed for " + path);
}

std::vector<std::pair<std::string, DiffTensor>> load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw io_error("load_checkpoint: cannot open " + path);
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    std::fclose(f);
    throw io_error("load_checkpoint: bad magic in " + path);
  }
  std::uint64_t count = 0;
  if (std::fread(&count, sizeof(count), 1, f) != 1 || count > 1u << 20) {
    std::fclose(f);
    throw io_error("load_checkpoint: bad tensor count in " + path);
  }
  std::vector<std::pair<std::string, DiffTensor>> out;
  out.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::uint64_t len = 0;
    if (std::fread(&len, sizeof(len), 1, f) != 1 || len > 4096) {
      std::fclose(f);
      throw io_error("load_checkpoint: bad name length in " + path);
    }
    std::string name(len, '\0');
    std::uint32_t rows = 0, cols = 0;
    if (std::fread(name.data(), 1, len, f) != len ||
        std::fread(&rows, sizeof(rows), 1, f) != 1 ||
        std::fread(&cols, sizeof(cols), 1, f) != 1 || rows == 0 || cols == 0) {
      std::fclose(f);
      throw io_error("load_checkpoint: truncated header in " + path);
    }
    DiffTensor t = DiffTensor::zeros(static_cast<int>(rows), static_cast<int>(cols));
    auto vals = t.values();
    if (std::fread(vals.data(), sizeof(double), vals.size(), f) != vals.size()) {
      std::fclose(f);
      throw io_error("load_checkpoint: truncated values in " + path);
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  std::fclose(f);
  return out;
}

}  // namespace icegraph
