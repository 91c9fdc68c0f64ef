// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense double-precision tensors with tape-based reverse-mode autodiff.
//
// A Tensor is a cheap handle to an immutable node. Leaves that need
// gradients are created through Tape::variable; every primitive whose inputs
// include such a tensor records itself on that tape. Tape::backward walks the
// records in reverse creation order, which is a valid topological order.
//
// Non-finite values are rejected at the primitive that produced them. The one
// exception is -infinity from log(0), which may flow through add/sub and is
// consumed by the softmax primitives (exp(-inf) = 0).
//
// Kinks (relu at 0, floor, clamp bounds, row_max ties) take the left
// derivative / lowest-index convention.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gtrelax/matrix.hpp"

namespace gtrelax::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

class Tape;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from_matrix(const Matrix& m);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const {
    return node_->value[i * node_->shape.back() + j];
  }
  /// Value of a single-element tensor.
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }
  Tape* tape() const { return node_->tape; }
  const Node* id() const { return node_.get(); }

  Matrix to_matrix() const;

  /// Extension point for primitives defined outside this file.
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Gradients of one backward pass, keyed by leaf tensor.
class GradientMap {
 public:
  /// Gradient for a leaf; zeros of matching shape when the leaf was not
  /// reachable from the loss or not on the tape.
  std::vector<double> operator[](const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;

 private:
  friend class Tape;
  struct Slot {
    std::shared_ptr<Node> keep;
    std::vector<double> grad;
  };
  std::unordered_map<const Node*, Slot> slots_;
};

using BackwardFn =
    std::function<void(const Node& out, std::span<Node* const> inputs)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  Tensor variable(Shape shape, std::vector<double> values);
  Tensor variable(const Tensor& like);

  /// Reverse pass from a single-element loss.
  GradientMap backward(const Tensor& loss);

  /// Drops every record. Tensors created on this tape become constants.
  void clear();
  std::size_t size() const { return entries_.size(); }

  // Used by record(); not part of the user-facing surface.
  void push(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> in,
            BackwardFn fn);

 private:
  struct Entry {
    std::shared_ptr<Node> out;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
  };
  std::vector<std::shared_ptr<Node>> leaves_;
  std::vector<Entry> entries_;
};

/// Creates the output of a primitive and records it when any input needs a
/// gradient. `name` is used in error messages.
Tensor record(const char* name, Shape shape, std::vector<double> value,
              std::initializer_list<Tensor> inputs, BackwardFn fn,
              bool allow_neg_inf = false);
Tensor record(const char* name, Shape shape, std::vector<double> value,
              const std::vector<Tensor>& inputs, BackwardFn fn,
              bool allow_neg_inf = false);

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b);

// ---- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul: [b, m, k] x [b, k, n] -> [b, m, n].
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// [b, m, n] -> [b, n, m]
Tensor batch_transpose(const Tensor& a);

// ---- elementwise binary ---------------------------------------------------
// Shapes must match, or `b` may hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

/// a[..., m] + v[m]
Tensor add_row(const Tensor& a, const Tensor& v);
/// a[..., m] * v[m]
Tensor mul_row(const Tensor& a, const Tensor& v);
/// a[r, ...] * v[r]: scales each leading slice.
Tensor mul_col(const Tensor& a, const Tensor& v);
/// out[i, j, :] = a[i, :] + b[j, :] for a [n, h], b [m, h].
Tensor outer_add(const Tensor& a, const Tensor& b);

// ---- scalar ---------------------------------------------------------------
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
/// s - a
Tensor rsub_scalar(double s, const Tensor& a);

// ---- elementwise unary ----------------------------------------------------
Tensor exp(const Tensor& a);
/// log(0) = -inf is permitted; negative input is an error.
Tensor log(const Tensor& a);
Tensor log1p(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
/// 1/a; zero input is an error.
Tensor reciprocal(const Tensor& a);
/// 1/a for a != 0, and 0 (with zero gradient) where a == 0.
Tensor reciprocal_or_zero(const Tensor& a);
/// a^(-1/2) for a > 0, and 0 (with zero gradient) where a == 0.
Tensor rsqrt_or_zero(const Tensor& a);
Tensor floor(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- normalisation --------------------------------------------------------
/// Softmax over the last dimension. Entries may be -inf; a row must keep at
/// least one finite entry.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// out_ij = q_ij e^{w_ij} / sum_k q_ik e^{w_ik} over the last dimension, the
/// exact rewrite of softmax(w + log q). `q` is either the same shape as `w`
/// or a vector matching the last dimension (shared by every row). Rows whose
/// weights are all zero produce zeros.
Tensor weighted_softmax_rows(const Tensor& w, const Tensor& q);

// ---- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum over the last dimension.
Tensor sum_last(const Tensor& a);
/// Column sums of a 2-D tensor.
Tensor sum_first(const Tensor& a);
/// Max over the last dimension; gradient goes to the first maximiser.
Tensor row_max(const Tensor& a);
/// Product over the last dimension.
Tensor prod_last(const Tensor& a);

// ---- structure ------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenate 2-D tensors along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Concatenate 2-D tensors along rows.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Rows of a 2-D tensor (repeats allowed).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
/// Flat elements.
Tensor gather(const Tensor& a, std::span<const std::size_t> flat);
/// out = zeros(shape); out[positions[k]] += values[k].
Tensor index_put(const Tensor& values, std::span<const std::size_t> positions,
                 Shape shape);
/// Entries where mask != 0 become `value` and receive no gradient.
Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask,
                   double value);
Tensor diag(const Tensor& a);
Tensor diag_embed(const Tensor& v);
/// Same values, not recorded: gradient flow stops here.
Tensor detach(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace gtrelax::ad
