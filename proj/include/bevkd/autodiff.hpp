#pragma once

// Tape-based reverse-mode differentiation over small dense double tensors.
//
// A Tape records every operation of one forward pass. Values flagged as
// requiring gradients propagate that flag to everything computed from them;
// constants (teacher outputs, targets) never receive gradients. A Tape and
// the Vars pointing into it must stay on one thread.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bevkd {

class BevGrid;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  std::size_t rank() const { return shape.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor&) const = default;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t numel() const;
  /// Value of a single-element Var.
  double item() const;
  bool requires_grad() const;
  /// Accumulated gradient; empty until Tape::backward has run.
  const std::vector<double>& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::move(value), true, {}); }
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Records a derived value. `backward` reads the output gradient through
  /// grad_of(out) and accumulates into its inputs with grad_ref().
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and runs all recorded backward functions.
  void backward(const Var& loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<double>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer, allocated on first use. Only valid during or
  /// after backward.
  std::vector<double>& grad_ref(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward);

  // deque: references to earlier values stay valid while new nodes are pushed
  std::deque<Node> nodes_;
};

namespace ad {

// Elementwise (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
/// log(max(a, eps)); zero gradient where the floor is active.
Var log_clamped(const Var& a, double eps);
Var abs(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
/// Multiplies by a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& c);
/// Adds a constant tensor of the same shape.
Var add_const(const Var& a, const Tensor& c);

// Reductions to a single-element Var.
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);
/// Sum of a list of single-element Vars (empty list -> constant 0 on `tape`).
Var sum_scalars(Tape& tape, std::span<const Var> terms);

// Matrix ops on rank-2 values.
Var matmul(const Var& a, const Var& b);
/// a[n x m] + bias[m] broadcast over rows.
Var add_row_bias(const Var& a, const Var& bias);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Per-row Euclidean norm, [n x m] -> [n]; subgradient 0 at a zero row.
Var row_l2_norm(const Var& a);
/// Rows scaled to unit length; an all-zero row maps to the first basis vector.
Var normalize_rows(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
/// Element (row, col) of a rank-2 value as a single-element Var.
Var element(const Var& a, std::size_t row, std::size_t col);
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);

/// Same-padded 2D convolution on HWC maps with a [k, k, Cin, Cout] kernel.
Var conv2d(const Var& input, const Var& weight, const Var& bias, std::size_t dilation = 1);

/// Bilinear interpolation of an [H, W, C] map at world points; coordinates
/// outside the grid clamp to the border cells. Gradient flows to the map only.
Var bilinear_sample(const Var& map, const BevGrid& grid,
                    std::span<const std::pair<double, double>> points);

/// Per-anchor contrastive terms from an [n x n] logit matrix:
///   out[i] = -s[i][i] + log(sum_{j != i} exp(s[i][j]) + [include_positive] exp(s[i][i]))
Var contrastive_rows(const Var& logits, bool include_positive);

/// Penalty-reduced pixel focal loss on objectness logits against a heatmap
/// target in [0, 1] of the same size. Cells with target exactly 1 are
/// positives; the sum is divided by max(1, number of positives).
Var focal_heatmap_loss(const Var& logits, const Tensor& target, double alpha = 2.0, double beta = 4.0);

}  // namespace ad

/// Dot product and norm helpers used by gradient checks.
double l2_norm(std::span<const double> v);

}  // namespace bevkd
