#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace icegraph {

class Tape;

// Dense row-major 2D tensor with a gradient accumulator. Copies are shallow
// (shared storage), which is what parameter tensors need: the optimizer and
// the layers see the same values and gradients.
class DiffTensor {
 public:
  DiffTensor() = default;

  static DiffTensor zeros(int rows, int cols);
  static DiffTensor full(int rows, int cols, double fill);
  static DiffTensor from_values(int rows, int cols, std::vector<double> values);

  int rows() const { return d_ ? d_->rows : 0; }
  int cols() const { return d_ ? d_->cols : 0; }
  int size() const { return rows() * cols(); }
  bool defined() const { return static_cast<bool>(d_); }

  std::span<double> values();
  std::span<const double> values() const;
  double at(int r, int c) const;
  double& at(int r, int c);

  // Gradient storage is lazy; ensure_grad() zero-fills on first use.
  bool has_grad() const { return d_ && !d_->g.empty(); }
  void ensure_grad();
  void zero_grad();
  std::span<double> grad();
  std::span<const double> grad() const;
  double grad_at(int r, int c) const;

  // Deep copy (fresh storage, no grad, no provenance).
  DiffTensor clone() const;

  // Tape bookkeeping: which tape produced this value (null for leaves).
  const Tape* producer() const { return d_ ? d_->producer : nullptr; }

 private:
  struct Data {
    int rows = 0, cols = 0;
    std::vector<double> v;
    std::vector<double> g;
    const Tape* producer = nullptr;
  };
  std::shared_ptr<Data> d_;

  friend class Tape;
  friend struct OpAccess;
};

// Records one backward closure per op, replayed in reverse. Ops executed with
// a null tape skip recording entirely (fast inference path).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // NaN/Inf detection on every recorded op's output (throws numeric_error).
  bool finite_checks = true;

  void backward(const DiffTensor& loss);
  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;

  friend struct OpAccess;
};

namespace ops {

// All ops: forward on call; backward recorded on `tape` unless it is null.
// Shape mismatches throw validation_error naming the op and both shapes.

DiffTensor matmul(Tape* tape, const DiffTensor& a, const DiffTensor& b);
// a (m×k) times b^T where b is (n×k); the natural layout for weight matrices
// stored (out_features × in_features).
DiffTensor matmul_nt(Tape* tape, const DiffTensor& a, const DiffTensor& b);
// Fused dense step: x·Wᵀ + b broadcast over rows, optionally followed by
// leaky_relu. Matches the matmul_nt/add_rowvec/leaky_relu composition bit for
// bit while recording one op and one backward pass. Requires slope > 0 when
// activate is set, so the backward can read the pre-activation sign off the
// stored output.
DiffTensor affine(Tape* tape, const DiffTensor& x, const DiffTensor& W,
                  const DiffTensor& b, bool activate, double slope);
DiffTensor add(Tape* tape, const DiffTensor& a, const DiffTensor& b);
// (m×n) + (1×n), broadcast over rows (bias add).
DiffTensor add_rowvec(Tape* tape, const DiffTensor& a, const DiffTensor& b);
DiffTensor sub(Tape* tape, const DiffTensor& a, const DiffTensor& b);
DiffTensor mul(Tape* tape, const DiffTensor& a, const DiffTensor& b);
// (m×n) ∘ (m×1), column broadcast.
DiffTensor mul_colvec(Tape* tape, const DiffTensor& a, const DiffTensor& b);
DiffTensor scale(Tape* tape, const DiffTensor& a, double c);
DiffTensor concat_cols(Tape* tape, const std::vector<DiffTensor>& parts);
DiffTensor row_sum(Tape* tape, const DiffTensor& a);
DiffTensor sum_all(Tape* tape, const DiffTensor& a);
DiffTensor leaky_relu(Tape* tape, const DiffTensor& a, double slope);
DiffTensor exp(Tape* tape, const DiffTensor& a);

// Segment k = rows [offsets[k], offsets[k+1]) of an (E×1) column; softmax is
// computed independently (and max-stabilized) within each segment.
DiffTensor softmax_segmented(Tape* tape, const DiffTensor& a,
                             const std::vector<int>& offsets);
// (E×F) -> (S×F): row s = sum of rows in segment s.
DiffTensor sum_segmented(Tape* tape, const DiffTensor& a,
                         const std::vector<int>& offsets);

// (N×F), idx of length L -> (L×F); idx[k] == -1 yields a zero row (used for
// zero-padded convolution patches).
DiffTensor gather_rows(Tape* tape, const DiffTensor& a,
                       const std::vector<int>& idx);
// (L×F), idx of length L -> (out_rows×F); row idx[k] accumulates row k.
DiffTensor scatter_add_rows(Tape* tape, const DiffTensor& a,
                            const std::vector<int>& idx, int out_rows);
DiffTensor reshape(Tape* tape, const DiffTensor& a, int rows, int cols);
// Mean squared error over every entry; returns a 1×1 tensor.
DiffTensor mse_loss(Tape* tape, const DiffTensor& pred, const DiffTensor& target);

}  // namespace ops

// Throws numeric_error mentioning `label` if any entry is NaN/Inf.
void require_finite(const DiffTensor& t, const std::string& label);

// Seeded uniform Glorot initialization: bounds ±sqrt(6/(fan_in+fan_out)).
DiffTensor glorot_uniform(int rows, int cols, int fan_in, int fan_out,
                          std::mt19937_64& rng);

// Adam ------------------------------------------------------------------

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v;  // first/second moments per parameter
};

// One update from the gradients currently held in params[i].grad(). State is
// sized on first call and must keep matching afterwards. With clear_grads the
// gradients are zeroed as they are consumed, folding the zero_grads sweep into
// the update pass.
void adam_step(std::span<DiffTensor> params, AdamState& state, const AdamConfig& cfg,
               bool clear_grads = false);

void zero_grads(std::span<DiffTensor> params);

// Checkpoints -----------------------------------------------------------

// Binary named-tensor container; exact (bit-level) round-trip.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, DiffTensor>>& tensors);
std::vector<std::pair<std::string, DiffTensor>> load_checkpoint(const std::string& path);

}  // namespace icegraph
