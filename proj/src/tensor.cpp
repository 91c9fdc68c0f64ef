// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "gtrelax/kernels.hpp"

namespace gtrelax::ad {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double* grad_of(Node* n) {
  return n->requires_grad ? n->grad.data() : nullptr;
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return n;
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got shape " +
                                shape_str(a.shape()));
  }
}

std::size_t last_dim(const Tensor& a) {
  return a.rank() == 0 ? 1 : a.shape().back();
}

template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df,
             bool allow_neg_inf = false) {
  std::vector<double> out(a.size());
  const auto x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return record(
      name, a.shape(), std::move(out), {a},
      [df](const Node& o, std::span<Node* const> in) {
        double* ga = grad_of(in[0]);
        if (!ga) return;
        for (std::size_t i = 0; i < o.value.size(); ++i) {
          ga[i] += df(in[0]->value[i], o.value[i], o.grad[i]);
        }
      },
      allow_neg_inf);
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
  const bool bcast = b.size() == 1 && a.shape() != b.shape();
  if (!bcast && a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  const auto x = a.values();
  const auto y = b.values();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double yv = bcast ? y[0] : y[i];
    switch (op) {
      case BinOp::add: out[i] = x[i] + yv; break;
      case BinOp::sub: out[i] = x[i] - yv; break;
      case BinOp::mul: out[i] = x[i] * yv; break;
      case BinOp::div: out[i] = x[i] / yv; break;
    }
  }
  const bool neg_inf_ok = op == BinOp::add || op == BinOp::sub;
  return record(
      name, a.shape(), std::move(out), {a, b},
      [op, bcast](const Node& o, std::span<Node* const> in) {
        double* ga = grad_of(in[0]);
        double* gb = grad_of(in[1]);
        const auto& x = in[0]->value;
        const auto& y = in[1]->value;
        for (std::size_t i = 0; i < o.value.size(); ++i) {
          const double g = o.grad[i];
          const std::size_t j = bcast ? 0 : i;
          switch (op) {
            case BinOp::add:
              if (ga) ga[i] += g;
              if (gb) gb[j] += g;
              break;
            case BinOp::sub:
              if (ga) ga[i] += g;
              if (gb) gb[j] -= g;
              break;
            case BinOp::mul:
              if (ga) ga[i] += g * y[j];
              if (gb) gb[j] += g * x[i];
              break;
            case BinOp::div:
              if (ga) ga[i] += g / y[j];
              if (gb) gb[j] -= g * x[i] / (y[j] * y[j]);
              break;
          }
        }
      },
      neg_inf_ok);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " vs " + shape_str(b));
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
  const auto n = shape_size(shape);
  return constant(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::from_matrix(const Matrix& m) {
  return constant({m.rows, m.cols}, m.data);
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) +
                                " is not a scalar");
  }
  return node_->value[0];
}

Matrix Tensor::to_matrix() const {
  if (rank() != 2) {
    throw std::invalid_argument("to_matrix: shape " + shape_str(shape()));
  }
  return Matrix(dim(0), dim(1), node_->value);
}

// ---- GradientMap ----------------------------------------------------------

std::vector<double> GradientMap::operator[](const Tensor& leaf) const {
  auto it = slots_.find(leaf.id());
  if (it == slots_.end()) return std::vector<double>(leaf.size(), 0.0);
  return it->second.grad;
}

bool GradientMap::contains(const Tensor& leaf) const {
  return slots_.count(leaf.id()) != 0;
}

// ---- Tape -----------------------------------------------------------------

Tape::~Tape() { clear(); }

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  auto n = make_node(std::move(shape), std::move(values));
  for (double v : n->value) {
    if (!std::isfinite(v)) throw std::domain_error("variable: non-finite value");
  }
  n->requires_grad = true;
  n->tape = this;
  leaves_.push_back(n);
  return Tensor(n);
}

Tensor Tape::variable(const Tensor& like) {
  return variable(like.shape(),
                  std::vector<double>(like.values().begin(), like.values().end()));
}

void Tape::push(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> in,
                BackwardFn fn) {
  entries_.push_back({std::move(out), std::move(in), std::move(fn)});
}

GradientMap Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument(
        "backward: loss must be a scalar, got shape " +
        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (loss.tape() != this) {
    throw std::invalid_argument(
        "backward: loss does not depend on any variable of this tape");
  }
  for (auto& l : leaves_) l->grad.assign(l->value.size(), 0.0);
  for (auto& e : entries_) e.out->grad.assign(e.out->value.size(), 0.0);
  loss.node()->grad[0] = 1.0;

  std::vector<Node*> inputs;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& g = it->out->grad;
    if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) {
      continue;
    }
    inputs.clear();
    for (auto& in : it->inputs) inputs.push_back(in.get());
    it->backward(*it->out, inputs);
  }

  GradientMap map;
  for (auto& l : leaves_) map.slots_[l.get()] = {l, l->grad};
  return map;
}

void Tape::clear() {
  for (auto& l : leaves_) {
    l->requires_grad = false;
    l->tape = nullptr;
    l->grad.clear();
  }
  for (auto& e : entries_) {
    e.out->requires_grad = false;
    e.out->tape = nullptr;
    e.out->grad.clear();
  }
  leaves_.clear();
  entries_.clear();
}

// ---- record ---------------------------------------------------------------

Tensor record(const char* name, Shape shape, std::vector<double> value,
              const std::vector<Tensor>& inputs, BackwardFn fn,
              bool allow_neg_inf) {
  for (double v : value) {
    if (!std::isfinite(v) && !(allow_neg_inf && v == kNegInf)) {
      throw std::domain_error(std::string(name) + ": non-finite output " +
                              std::to_string(v));
    }
  }
  auto node = make_node(std::move(shape), std::move(value));
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.defined() || !in.requires_grad()) continue;
    if (tape && tape != in.tape()) {
      throw std::invalid_argument(std::string(name) +
                                  ": inputs recorded on different tapes");
    }
    tape = in.tape();
  }
  if (tape) {
    node->requires_grad = true;
    node->tape = tape;
    std::vector<std::shared_ptr<Node>> ins;
    ins.reserve(inputs.size());
    for (const auto& in : inputs) ins.push_back(in.node());
    tape->push(node, std::move(ins), std::move(fn));
  }
  return Tensor(node);
}

Tensor record(const char* name, Shape shape, std::vector<double> value,
              std::initializer_list<Tensor> inputs, BackwardFn fn,
              bool allow_neg_inf) {
  return record(name, std::move(shape), std::move(value),
                std::vector<Tensor>(inputs), std::move(fn), allow_neg_inf);
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, m, n, k,
                a.values().data(), b.values().data(), out.data());
  return record("matmul", {m, n}, std::move(out), {a, b},
                [m, k, n](const Node& o, std::span<Node* const> in) {
                  using kernels::Trans;
                  if (double* ga = grad_of(in[0])) {
                    kernels::gemm(Trans::no, Trans::yes, m, k, n, o.grad.data(),
                                  in[1]->value.data(), ga);
                  }
                  if (double* gb = grad_of(in[1])) {
                    kernels::gemm(Trans::yes, Trans::no, k, n, m,
                                  in[0]->value.data(), o.grad.data(), gb);
                  }
                });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    shape_error("bmm", a.shape(), b.shape());
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t t = 0; t < bs; ++t) {
    kernels::gemm(kernels::Trans::no, kernels::Trans::no, m, n, k,
                  a.values().data() + t * m * k, b.values().data() + t * k * n,
                  out.data() + t * m * n);
  }
  return record("bmm", {bs, m, n}, std::move(out), {a, b},
                [bs, m, k, n](const Node& o, std::span<Node* const> in) {
                  using kernels::Trans;
                  double* ga = grad_of(in[0]);
                  double* gb = grad_of(in[1]);
                  for (std::size_t t = 0; t < bs; ++t) {
                    const double* go = o.grad.data() + t * m * n;
                    if (ga) {
                      kernels::gemm(Trans::no, Trans::yes, m, k, n, go,
                                    in[1]->value.data() + t * k * n,
                                    ga + t * m * k);
                    }
                    if (gb) {
                      kernels::gemm(Trans::yes, Trans::no, k, n, m,
                                    in[0]->value.data() + t * m * k, go,
                                    gb + t * k * n);
                    }
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return record("transpose", {n, m}, std::move(out), {a},
                [m, n](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      ga[i * n + j] += o.grad[j * m + i];
                });
}

Tensor batch_transpose(const Tensor& a) {
  require_rank("batch_transpose", a, 3);
  const std::size_t b = a.dim(0), m = a.dim(1), n = a.dim(2);
  std::vector<double> out(b * m * n);
  const auto x = a.values();
  for (std::size_t t = 0; t < b; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[(t * n + j) * m + i] = x[(t * m + i) * n + j];
  return record("batch_transpose", {b, n, m}, std::move(out), {a},
                [b, m, n](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t t = 0; t < b; ++t)
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        ga[(t * m + i) * n + j] += o.grad[(t * n + j) * m + i];
                });
}

// ---- elementwise binary ---------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::div, a, b); }

Tensor add_row(const Tensor& a, const Tensor& v) {
  const std::size_t m = last_dim(a);
  if (v.size() != m) shape_error("add_row", a.shape(), v.shape());
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto y = v.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i % m];
  return record(
      "add_row", a.shape(), std::move(out), {a, v},
      [m](const Node& o, std::span<Node* const> in) {
        double* ga = grad_of(in[0]);
        double* gv = grad_of(in[1]);
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          if (ga) ga[i] += o.grad[i];
          if (gv) gv[i % m] += o.grad[i];
        }
      },
      true);
}

Tensor mul_row(const Tensor& a, const Tensor& v) {
  const std::size_t m = last_dim(a);
  if (v.size() != m) shape_error("mul_row", a.shape(), v.shape());
  std::vector<double> out(a.size());
  const auto x = a.values();
  const auto y = v.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i % m];
  return record("mul_row", a.shape(), std::move(out), {a, v},
                [m](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  double* gv = grad_of(in[1]);
                  const auto& x = in[0]->value;
                  const auto& y = in[1]->value;
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (ga) ga[i] += o.grad[i] * y[i % m];
                    if (gv) gv[i % m] += o.grad[i] * x[i];
                  }
                });
}

Tensor mul_col(const Tensor& a, const Tensor& v) {
  if (a.rank() == 0 || v.size() != a.dim(0)) {
    shape_error("mul_col", a.shape(), v.shape());
  }
  const std::size_t stride = a.size() / a.dim(0);
  std::vector<double> out(a.size());
  const auto x = a.values();
  const auto y = v.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i / stride];
  return record("mul_col", a.shape(), std::move(out), {a, v},
                [stride](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  double* gv = grad_of(in[1]);
                  const auto& x = in[0]->value;
                  const auto& y = in[1]->value;
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (ga) ga[i] += o.grad[i] * y[i / stride];
                    if (gv) gv[i / stride] += o.grad[i] * x[i];
                  }
                });
}

Tensor outer_add(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_error("outer_add", a.shape(), b.shape());
  }
  const std::size_t n = a.dim(0), m = b.dim(0), h = a.dim(1);
  std::vector<double> out(n * m * h);
  const auto x = a.values();
  const auto y = b.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t c = 0; c < h; ++c)
        out[(i * m + j) * h + c] = x[i * h + c] + y[j * h + c];
  return record("outer_add", {n, m, h}, std::move(out), {a, b},
                [n, m, h](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  double* gb = grad_of(in[1]);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                      for (std::size_t c = 0; c < h; ++c) {
                        const double g = o.grad[(i * m + j) * h + c];
                        if (ga) ga[i * h + c] += g;
                        if (gb) gb[j * h + c] += g;
                      }
                });
}

// ---- scalar ---------------------------------------------------------------

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; },
               [s](double, double, double g) { return s * g; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; },
               [](double, double, double g) { return g; }, true);
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor rsub_scalar(double s, const Tensor& a) {
  return unary("rsub_scalar", a, [s](double x) { return s - x; },
               [](double, double, double g) { return -g; });
}

// ---- elementwise unary ----------------------------------------------------

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (v < 0.0 || std::isnan(v)) {
      throw std::domain_error("log: negative input " + std::to_string(v));
    }
  }
  return unary(
      "log", a,
      [](double x) { return x == 0.0 ? kNegInf : std::log(x); },
      [](double x, double, double g) {
        if (x == 0.0) {
          if (g == 0.0) return 0.0;
          throw std::domain_error("log: infinite gradient at 0");
        }
        return g / x;
      },
      true);
}

Tensor log1p(const Tensor& a) {
  return unary("log1p", a, [](double x) { return std::log1p(x); },
               [](double x, double, double g) { return g / (1.0 + x); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y, double g) { return g * (1.0 - y * y); });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a,
      [](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      },
      [](double x, double, double g) {
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
        return g * s;
      });
}

Tensor reciprocal(const Tensor& a) {
  for (double v : a.values()) {
    if (v == 0.0) throw std::domain_error("reciprocal: zero input");
  }
  return unary("reciprocal", a, [](double x) { return 1.0 / x; },
               [](double, double y, double g) { return -g * y * y; });
}

Tensor reciprocal_or_zero(const Tensor& a) {
  return unary("reciprocal_or_zero", a,
               [](double x) { return x == 0.0 ? 0.0 : 1.0 / x; },
               [](double, double y, double g) { return -g * y * y; });
}

Tensor rsqrt_or_zero(const Tensor& a) {
  for (double v : a.values()) {
    if (v < 0.0) throw std::domain_error("rsqrt_or_zero: negative input");
  }
  return unary(
      "rsqrt_or_zero", a,
      [](double x) { return x == 0.0 ? 0.0 : 1.0 / std::sqrt(x); },
      [](double x, double y, double g) {
        return x == 0.0 ? 0.0 : -0.5 * g * y / x;
      });
}

Tensor floor(const Tensor& a) {
  return unary("floor", a, [](double x) { return std::floor(x); },
               [](double, double, double) { return 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double, double g) {
        return (x > lo && x <= hi) ? g : 0.0;
      });
}

// ---- normalisation --------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = last_dim(a);
  const std::size_t rows = a.size() / std::max<std::size_t>(m, 1);
  const auto x = a.values();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    double* yr = out.data() + r * m;
    const double mx = *std::max_element(xr, xr + m);
    if (mx == kNegInf) {
      throw std::domain_error("softmax_rows: row without finite entries");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < m; ++j) yr[j] /= s;
  }
  return record("softmax_rows", a.shape(), std::move(out), {a},
                [m, rows](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = o.value.data() + r * m;
                    const double* g = o.grad.data() + r * m;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
                    for (std::size_t j = 0; j < m; ++j)
                      ga[r * m + j] += y[j] * (g[j] - dot);
                  }
                });
}

Tensor log_softmax_rows(const Tensor& a) {
  const std::size_t m = last_dim(a);
  const std::size_t rows = a.size() / std::max<std::size_t>(m, 1);
  const auto x = a.values();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    const double mx = *std::max_element(xr, xr + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = xr[j] - lse;
  }
  return record("log_softmax_rows", a.shape(), std::move(out), {a},
                [m, rows](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = o.value.data() + r * m;
                    const double* g = o.grad.data() + r * m;
                    double gs = 0.0;
                    for (std::size_t j = 0; j < m; ++j) gs += g[j];
                    for (std::size_t j = 0; j < m; ++j)
                      ga[r * m + j] += g[j] - std::exp(y[j]) * gs;
                  }
                });
}

Tensor weighted_softmax_rows(const Tensor& w, const Tensor& q) {
  const std::size_t m = last_dim(w);
  const std::size_t rows = w.size() / std::max<std::size_t>(m, 1);
  const bool shared = q.rank() == 1 && q.size() == m && q.shape() != w.shape();
  if (!shared && q.shape() != w.shape()) {
    shape_error("weighted_softmax_rows", w.shape(), q.shape());
  }
  const auto x = w.values();
  const auto qv = q.values();
  for (double v : qv) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::domain_error("weighted_softmax_rows: weights must be >= 0");
    }
  }
  // Per-row shift and normaliser are kept for the backward pass.
  auto shift = std::make_shared<std::vector<double>>(rows, 0.0);
  auto norm = std::make_shared<std::vector<double>>(rows, 0.0);
  std::vector<double> out(w.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    const double* qr = qv.data() + (shared ? 0 : r * m);
    double mx = kNegInf;
    for (std::size_t j = 0; j < m; ++j)
      if (qr[j] > 0.0 && xr[j] > mx) mx = xr[j];
    if (mx == kNegInf) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = qr[j] > 0.0 ? qr[j] * std::exp(xr[j] - mx) : 0.0;
      out[r * m + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= s;
    (*shift)[r] = mx;
    (*norm)[r] = s;
  }
  return record(
      "weighted_softmax_rows", w.shape(), std::move(out), {w, q},
      [m, rows, shared, shift, norm](const Node& o, std::span<Node* const> in) {
        double* gw = grad_of(in[0]);
        double* gq = grad_of(in[1]);
        for (std::size_t r = 0; r < rows; ++r) {
          const double z = (*norm)[r];
          if (z == 0.0) continue;
          const double* y = o.value.data() + r * m;
          const double* g = o.grad.data() + r * m;
          double dot = 0.0;
          for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
          for (std::size_t j = 0; j < m; ++j) {
            if (gw) gw[r * m + j] += y[j] * (g[j] - dot);
            if (gq) {
              const double u = std::exp(in[0]->value[r * m + j] - (*shift)[r]);
              gq[(shared ? 0 : r * m) + j] += u * (g[j] - dot) / z;
            }
          }
        }
      });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return record("sum", {1}, {s}, {a},
                [](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < in[0]->value.size(); ++i)
                    ga[i] += o.grad[0];
                });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_last(const Tensor& a) {
  const std::size_t m = last_dim(a);
  const std::size_t rows = a.size() / std::max<std::size_t>(m, 1);
  Shape shape(a.shape().begin(), a.shape().end() - (a.rank() ? 1 : 0));
  if (shape.empty()) shape = {1};
  std::vector<double> out(rows, 0.0);
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r] += x[r * m + j];
  return record("sum_last", std::move(shape), std::move(out), {a},
                [m, rows](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += o.grad[r];
                });
}

Tensor sum_first(const Tensor& a) {
  require_rank("sum_first", a, 2);
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(m, 0.0);
  const auto x = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += x[i * m + j];
  return record("sum_first", {m}, std::move(out), {a},
                [n, m](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += o.grad[j];
                });
}

Tensor row_max(const Tensor& a) {
  const std::size_t m = last_dim(a);
  if (m == 0) throw std::invalid_argument("row_max: empty rows");
  const std::size_t rows = a.size() / m;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  std::vector<double> out(rows);
  auto arg = std::make_shared<std::vector<std::size_t>>(rows);
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    const auto it = std::max_element(xr, xr + m);
    out[r] = *it;
    (*arg)[r] = static_cast<std::size_t>(it - xr);
  }
  return record("row_max", std::move(shape), std::move(out), {a},
                [m, arg](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t r = 0; r < arg->size(); ++r)
                    ga[r * m + (*arg)[r]] += o.grad[r];
                },
                true);
}

Tensor prod_last(const Tensor& a) {
  const std::size_t m = last_dim(a);
  const std::size_t rows = a.size() / std::max<std::size_t>(m, 1);
  Shape shape(a.shape().begin(), a.shape().end() - (a.rank() ? 1 : 0));
  if (shape.empty()) shape = {1};
  std::vector<double> out(rows, 1.0);
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r] *= x[r * m + j];
  return record("prod_last", std::move(shape), std::move(out), {a},
                [m, rows](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  std::vector<double> suffix(m + 1);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = in[0]->value.data() + r * m;
                    suffix[m] = 1.0;
                    for (std::size_t j = m; j-- > 0;) suffix[j] = suffix[j + 1] * xr[j];
                    double prefix = 1.0;
                    for (std::size_t j = 0; j < m; ++j) {
                      ga[r * m + j] += o.grad[r] * prefix * suffix[j + 1];
                      prefix *= xr[j];
                    }
                  }
                });
}

// ---- structure ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  return record("reshape", std::move(shape),
                std::vector<double>(a.values().begin(), a.values().end()), {a},
                [](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
                },
                true);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::vector<std::size_t> offs;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) {
      shape_error("concat_cols", parts[0].shape(), p.shape());
    }
    offs.push_back(total);
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t c = parts[k].dim(1);
    const auto x = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(x.data() + i * c, c, out.data() + i * total + offs[k]);
  }
  return record("concat_cols", {r, total}, std::move(out), parts,
                [r, total, offs](const Node& o, std::span<Node* const> in) {
                  for (std::size_t k = 0; k < in.size(); ++k) {
                    double* g = grad_of(in[k]);
                    if (!g) continue;
                    const std::size_t c = in[k]->shape[1];
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j)
                        g[i * c + j] += o.grad[i * total + offs[k] + j];
                  }
                });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c) {
      shape_error("concat_rows", parts[0].shape(), p.shape());
    }
    total += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return record("concat_rows", {total, c}, std::move(out), parts,
                [](const Node& o, std::span<Node* const> in) {
                  std::size_t off = 0;
                  for (auto* n : in) {
                    double* g = grad_of(n);
                    const std::size_t len = n->value.size();
                    if (g)
                      for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
                    off += len;
                  }
                });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", a, 2);
  if (begin > end || end > a.dim(1)) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) +
                                ", " + std::to_string(end) + ") outside " +
                                shape_str(a.shape()));
  }
  const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<double> out(r * w);
  const auto x = a.values();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data() + i * c + begin, w, out.data() + i * w);
  return record("slice_cols", {r, w}, std::move(out), {a},
                [r, c, w, begin](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                      ga[i * c + begin + j] += o.grad[i * w + j];
                });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank("slice_rows", a, 2);
  if (begin > end || end > a.dim(0)) {
    throw std::invalid_argument("slice_rows: range outside " + shape_str(a.shape()));
  }
  const std::size_t c = a.dim(1);
  std::vector<double> out(a.values().begin() + begin * c, a.values().begin() + end * c);
  return record("slice_rows", {end - begin, c}, std::move(out), {a},
                [begin, c](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                    ga[begin * c + i] += o.grad[i];
                });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank("gather_rows", a, 2);
  const std::size_t c = a.dim(1);
  std::vector<double> out(rows.size() * c);
  const auto x = a.values();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= a.dim(0)) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[k]) +
                              " outside " + shape_str(a.shape()));
    }
    std::copy_n(x.data() + rows[k] * c, c, out.data() + k * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record("gather_rows", {rows.size(), c}, std::move(out), {a},
                [idx = std::move(idx), c](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t k = 0; k < idx.size(); ++k)
                    for (std::size_t j = 0; j < c; ++j)
                      ga[idx[k] * c + j] += o.grad[k * c + j];
                });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> flat) {
  std::vector<double> out(flat.size());
  const auto x = a.values();
  for (std::size_t k = 0; k < flat.size(); ++k) {
    if (flat[k] >= a.size()) throw std::out_of_range("gather: index out of range");
    out[k] = x[flat[k]];
  }
  std::vector<std::size_t> idx(flat.begin(), flat.end());
  return record("gather", {flat.size()}, std::move(out), {a},
                [idx = std::move(idx)](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t k = 0; k < idx.size(); ++k) ga[idx[k]] += o.grad[k];
                },
                true);
}

Tensor index_put(const Tensor& values, std::span<const std::size_t> positions,
                 Shape shape) {
  if (values.size() != positions.size()) {
    throw std::invalid_argument("index_put: " + std::to_string(values.size()) +
                                " values for " + std::to_string(positions.size()) +
                                " positions");
  }
  const std::size_t total = shape_size(shape);
  std::vector<double> out(total, 0.0);
  const auto v = values.values();
  for (std::size_t k = 0; k < positions.size(); ++k) {
    if (positions[k] >= total) throw std::out_of_range("index_put: position out of range");
    out[positions[k]] += v[k];
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return record("index_put", std::move(shape), std::move(out), {values},
                [pos = std::move(pos)](const Node& o, std::span<Node* const> in) {
                  double* gv = grad_of(in[0]);
                  if (!gv) return;
                  for (std::size_t k = 0; k < pos.size(); ++k) gv[k] += o.grad[pos[k]];
                });
}

Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask,
                   double value) {
  if (mask.size() != a.size()) {
    throw std::invalid_argument("masked_fill: mask of " + std::to_string(mask.size()) +
                                " entries for " + shape_str(a.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return record("masked_fill", a.shape(), std::move(out), {a},
                [m = std::move(m)](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                    if (!m[i]) ga[i] += o.grad[i];
                },
                value == kNegInf);
}

Tensor diag(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw std::invalid_argument("diag: expected a square matrix, got " +
                                shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i * n + i];
  return record("diag", {n}, std::move(out), {a},
                [n](const Node& o, std::span<Node* const> in) {
                  double* ga = grad_of(in[0]);
                  if (!ga) return;
                  for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += o.grad[i];
                });
}

Tensor diag_embed(const Tensor& v) {
  const std::size_t n = v.size();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = v.values()[i];
  return record("diag_embed", {n, n}, std::move(out), {v},
                [n](const Node& o, std::span<Node* const> in) {
                  double* gv = grad_of(in[0]);
                  if (!gv) return;
                  for (std::size_t i = 0; i < n; ++i) gv[i] += o.grad[i * n + i];
                });
}

Tensor detach(const Tensor& a) {
  return Tensor::constant(a.shape(),
                          std::vector<double>(a.values().begin(), a.values().end()));
}

}  // namespace gtrelax::ad
