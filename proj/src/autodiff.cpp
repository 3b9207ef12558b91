#include "bevkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "bevkd/grid.hpp"

namespace bevkd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw std::invalid_argument("Tensor: " + std::to_string(data.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }
const Shape& Var::shape() const { return value().shape; }
std::size_t Var::numel() const { return value().numel(); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
const std::vector<double>& Var::grad() const { return tape_->grad_of(id_); }

double Var::item() const {
  const auto& v = value();
  if (v.numel() != 1) {
    throw std::logic_error("Var::item on value of shape " + shape_str(v.shape));
  }
  return v.data[0];
}

Var Tape::push(Tensor value, bool requires_grad, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw std::logic_error("Tape::record: input from another tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
}

std::vector<double>& Tape::grad_ref(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.numel(), 0.0);
  return node.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be a single element, got " +
                                shape_str(loss.shape()));
  }
  for (auto& node : nodes_) node.grad.clear();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_ref(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this);
  }
}

namespace ad {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
  }
}

// Accumulates g_out * local(i) into the gradient of `in` when it needs one.
template <typename Local>
void accumulate_unary(Tape& t, const Var& in, std::size_t out, Local local) {
  if (!t.requires_grad(in.id())) return;
  const auto& go = t.grad_of(out);
  auto& gi = t.grad_ref(in.id());
  for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * local(i);
}

template <typename F, typename Local>
Var unary(const Var& a, F f, Local local) {
  Tape& t = a.tape();
  Tensor out(a.shape());
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = f(av[i]);
  std::size_t out_id = t.size();
  return t.record(std::move(out), {a}, [a, out_id, local](Tape& tp) {
    const auto& x = a.value().data;
    const auto& y = tp.value(out_id).data;
    accumulate_unary(tp, a, out_id, [&](std::size_t i) { return local(x[i], y[i]); });
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tape& t = a.tape();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  std::size_t id = t.size();
  return t.record(std::move(out), {a, b}, [a, b, id](Tape& tp) {
    accumulate_unary(tp, a, id, [](std::size_t) { return 1.0; });
    accumulate_unary(tp, b, id, [](std::size_t) { return 1.0; });
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tape& t = a.tape();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  std::size_t id = t.size();
  return t.record(std::move(out), {a, b}, [a, b, id](Tape& tp) {
    accumulate_unary(tp, a, id, [](std::size_t) { return 1.0; });
    accumulate_unary(tp, b, id, [](std::size_t) { return -1.0; });
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tape& t = a.tape();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  std::size_t id = t.size();
  return t.record(std::move(out), {a, b}, [a, b, id](Tape& tp) {
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    accumulate_unary(tp, a, id, [&](std::size_t i) { return bv[i]; });
    accumulate_unary(tp, b, id, [&](std::size_t i) { return av[i]; });
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var log_clamped(const Var& a, double eps) {
  return unary(
      a, [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (c.shape != a.shape()) throw std::invalid_argument("mul_const: shape mismatch");
  Tape& t = a.tape();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * c.data[i];
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, factors = c.data](Tape& tp) {
    accumulate_unary(tp, a, id, [&](std::size_t i) { return factors[i]; });
  });
}

Var add_const(const Var& a, const Tensor& c) {
  if (c.shape != a.shape()) throw std::invalid_argument("add_const: shape mismatch");
  Tape& t = a.tape();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + c.data[i];
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id](Tape& tp) {
    accumulate_unary(tp, a, id, [](std::size_t) { return 1.0; });
  });
}

Var sum(const Var& a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double x : a.value().data) s += x;
  std::size_t id = t.size();
  return t.record(Tensor::scalar(s), {a}, [a, id](Tape& tp) {
    double g = tp.grad_of(id)[0];
    auto& ga = tp.grad_ref(a.id());
    for (auto& v : ga) v += g;
  });
}

Var mean(const Var& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "dot");
  Tape& t = a.tape();
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.value().data[i] * b.value().data[i];
  std::size_t id = t.size();
  return t.record(Tensor::scalar(s), {a, b}, [a, b, id](Tape& tp) {
    double g = tp.grad_of(id)[0];
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    if (tp.requires_grad(a.id())) {
      auto& ga = tp.grad_ref(a.id());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bv[i];
    }
    if (tp.requires_grad(b.id())) {
      auto& gb = tp.grad_ref(b.id());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * av[i];
    }
  });
}

Var sum_scalars(Tape& tape, std::span<const Var> terms) {
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  double s = 0.0;
  bool needs = false;
  for (const auto& v : terms) {
    if (v.numel() != 1) throw std::invalid_argument("sum_scalars: non-scalar term");
    s += v.item();
    needs = needs || v.requires_grad();
  }
  if (!needs) return tape.constant(Tensor::scalar(s));
  std::vector<Var> copy;
  for (const auto& v : terms)
    if (v.requires_grad()) copy.push_back(v);
  std::size_t id = tape.size();
  // record() takes an initializer list; route through one grad-carrying term
  // and capture the rest.
  return tape.record(Tensor::scalar(s), {copy.front()}, [copy, id](Tape& tp) {
    double g = tp.grad_of(id)[0];
    for (const auto& v : copy) {
      if (tp.requires_grad(v.id())) tp.grad_ref(v.id())[0] += g;
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Tape& t = a.tape();
  Tensor out({n, m});
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out.data[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {a, b}, [a, b, id, n, k, m](Tape& tp) {
    const auto& go = tp.grad_of(id);
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    if (tp.requires_grad(a.id())) {
      auto& ga = tp.grad_ref(a.id());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += go[i * m + j] * bv[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (tp.requires_grad(b.id())) {
      auto& gb = tp.grad_ref(b.id());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * go[i * m + j];
        }
    }
  });
}

Var add_row_bias(const Var& a, const Var& bias) {
  require_rank(a, 2, "add_row_bias");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (bias.numel() != m) throw std::invalid_argument("add_row_bias: bias length mismatch");
  Tape& t = a.tape();
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] += bias.value().data[j];
  std::size_t id = t.size();
  return t.record(std::move(out), {a, bias}, [a, bias, id, n, m](Tape& tp) {
    accumulate_unary(tp, a, id, [](std::size_t) { return 1.0; });
    if (tp.requires_grad(bias.id())) {
      const auto& go = tp.grad_of(id);
      auto& gb = tp.grad_ref(bias.id());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
    }
  });
}

Var softmax_rows(const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tape& t = a.tape();
  Tensor out({n, m});
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, av[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out.data[i * m + j] = std::exp(av[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] /= z;
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, n, m](Tape& tp) {
    const auto& y = tp.value(id).data;
    const auto& go = tp.grad_of(id);
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += go[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += y[i * m + j] * (go[i * m + j] - s);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  require_rank(a, 2, "log_softmax_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tape& t = a.tape();
  Tensor out({n, m});
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, av[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(av[i * m + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = av[i * m + j] - lse;
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, n, m](Tape& tp) {
    const auto& y = tp.value(id).data;
    const auto& go = tp.grad_of(id);
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += go[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += go[i * m + j] - std::exp(y[i * m + j]) * s;
    }
  });
}

Var row_l2_norm(const Var& a) {
  require_rank(a, 2, "row_l2_norm");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tape& t = a.tape();
  Tensor out({n});
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += av[i * m + j] * av[i * m + j];
    out.data[i] = std::sqrt(s);
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, n, m](Tape& tp) {
    const auto& y = tp.value(id).data;
    const auto& go = tp.grad_of(id);
    const auto& av = a.value().data;
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] == 0.0 || go[i] == 0.0) continue;
      const double f = go[i] / y[i];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += f * av[i * m + j];
    }
  });
}

Var normalize_rows(const Var& a) {
  require_rank(a, 2, "normalize_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (m == 0) throw std::invalid_argument("normalize_rows: zero-width rows");
  Tape& t = a.tape();
  Tensor out({n, m});
  std::vector<double> norms(n);
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += av[i * m + j] * av[i * m + j];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) {
      out.data[i * m] = 1.0;
    } else {
      for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = av[i * m + j] / norms[i];
    }
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, n, m, norms](Tape& tp) {
    const auto& y = tp.value(id).data;
    const auto& go = tp.grad_of(id);
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] == 0.0) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += go[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        ga[i * m + j] += (go[i * m + j] - y[i * m + j] * s) / norms[i];
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  const std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != n) throw std::invalid_argument("concat_cols: row count mismatch");
  Tape& t = a.tape();
  Tensor out({n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&a.value().data[i * p], p, &out.data[i * (p + q)]);
    std::copy_n(&b.value().data[i * q], q, &out.data[i * (p + q) + p]);
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {a, b}, [a, b, id, n, p, q](Tape& tp) {
    const auto& go = tp.grad_of(id);
    if (tp.requires_grad(a.id())) {
      auto& ga = tp.grad_ref(a.id());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += go[i * (p + q) + j];
    }
    if (tp.requires_grad(b.id())) {
      auto& gb = tp.grad_ref(b.id());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += go[i * (p + q) + p + j];
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (begin > end || end > m) throw std::invalid_argument("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tape& t = a.tape();
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = a.value().data[i * m + begin + j];
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, n, m, w, begin](Tape& tp) {
    const auto& go = tp.grad_of(id);
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * m + begin + j] += go[i * w + j];
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "gather_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (auto r : idx)
    if (r >= n) throw std::out_of_range("gather_rows: row index out of range");
  Tape& t = a.tape();
  Tensor out({idx.size(), m});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(&a.value().data[idx[i] * m], m, &out.data[i * m]);
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, m, idx](Tape& tp) {
    const auto& go = tp.grad_of(id);
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) ga[idx[i] * m + j] += go[i * m + j];
  });
}

Var element(const Var& a, std::size_t row, std::size_t col) {
  require_rank(a, 2, "element");
  const std::size_t m = a.shape()[1];
  if (row >= a.shape()[0] || col >= m) throw std::out_of_range("element: index out of range");
  const std::size_t flat = row * m + col;
  Tape& t = a.tape();
  std::size_t id = t.size();
  return t.record(Tensor::scalar(a.value().data[flat]), {a}, [a, id, flat](Tape& tp) {
    tp.grad_ref(a.id())[flat] += tp.grad_of(id)[0];
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tape& t = a.tape();
  Tensor out(std::move(shape), a.value().data);
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id](Tape& tp) {
    accumulate_unary(tp, a, id, [](std::size_t) { return 1.0; });
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tape& t = a.tape();
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[j * n + i] = a.value().data[i * m + j];
  std::size_t id = t.size();
  return t.record(std::move(out), {a}, [a, id, n, m](Tape& tp) {
    const auto& go = tp.grad_of(id);
    auto& ga = tp.grad_ref(a.id());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += go[j * n + i];
  });
}

Var conv2d(const Var& input, const Var& weight, const Var& bias, std::size_t dilation) {
  require_rank(input, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const std::size_t H = input.shape()[0], W = input.shape()[1], Cin = input.shape()[2];
  const std::size_t K = weight.shape()[0], Cout = weight.shape()[3];
  if (weight.shape()[1] != K || K % 2 == 0 || weight.shape()[2] != Cin) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(weight.shape()) +
                                " incompatible with input " + shape_str(input.shape()));
  }
  if (bias.numel() != Cout) throw std::invalid_argument("conv2d: bias length mismatch");
  const long half = static_cast<long>(K / 2) * static_cast<long>(dilation);
  Tape& t = input.tape();
  Tensor out({H, W, Cout});
  const auto& x = input.value().data;
  const auto& w = weight.value().data;
  const auto& b = bias.value().data;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t xx = 0; xx < W; ++xx) {
      double* o = &out.data[(y * W + xx) * Cout];
      for (std::size_t c = 0; c < Cout; ++c) o[c] = b[c];
      for (std::size_t ky = 0; ky < K; ++ky) {
        const long sy = static_cast<long>(y) + static_cast<long>(ky * dilation) - half;
        if (sy < 0 || sy >= static_cast<long>(H)) continue;
        for (std::size_t kx = 0; kx < K; ++kx) {
          const long sx = static_cast<long>(xx) + static_cast<long>(kx * dilation) - half;
          if (sx < 0 || sx >= static_cast<long>(W)) continue;
          const double* in = &x[(static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)) * Cin];
          const double* wk = &w[(ky * K + kx) * Cin * Cout];
          for (std::size_t i = 0; i < Cin; ++i) {
            const double v = in[i];
            if (v == 0.0) continue;
            const double* wr = wk + i * Cout;
            for (std::size_t c = 0; c < Cout; ++c) o[c] += v * wr[c];
          }
        }
      }
    }
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {input, weight, bias},
                  [input, weight, bias, id, H, W, Cin, Cout, K, dilation, half](Tape& tp) {
    const auto& go = tp.grad_of(id);
    const auto& x = input.value().data;
    const auto& w = weight.value().data;
    const bool need_in = tp.requires_grad(input.id());
    const bool need_w = tp.requires_grad(weight.id());
    double* gi = need_in ? tp.grad_ref(input.id()).data() : nullptr;
    double* gw = need_w ? tp.grad_ref(weight.id()).data() : nullptr;
    if (tp.requires_grad(bias.id())) {
      auto& gb = tp.grad_ref(bias.id());
      for (std::size_t p = 0; p < H * W; ++p)
        for (std::size_t c = 0; c < Cout; ++c) gb[c] += go[p * Cout + c];
    }
    if (!need_in && !need_w) return;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double* g = &go[(y * W + xx) * Cout];
        for (std::size_t ky = 0; ky < K; ++ky) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky * dilation) - half;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const long sx = static_cast<long>(xx) + static_cast<long>(kx * dilation) - half;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            const std::size_t q = (static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)) * Cin;
            const std::size_t wo = (ky * K + kx) * Cin * Cout;
            for (std::size_t i = 0; i < Cin; ++i) {
              const double* wr = &w[wo + i * Cout];
              if (need_in) {
                double s = 0.0;
                for (std::size_t c = 0; c < Cout; ++c) s += g[c] * wr[c];
                gi[q + i] += s;
              }
              if (need_w) {
                const double v = x[q + i];
                if (v == 0.0) continue;
                double* gwr = gw + wo + i * Cout;
                for (std::size_t c = 0; c < Cout; ++c) gwr[c] += v * g[c];
              }
            }
          }
        }
      }
    }
  });
}

namespace {

struct BilinearTap {
  std::size_t idx[4];
  double weight[4];
};

BilinearTap bilinear_tap(const BevGrid& grid, double x, double y) {
  const double H = static_cast<double>(grid.height_cells());
  const double W = static_cast<double>(grid.width_cells());
  CellCoord cc = grid.world_to_cell(x, y);
  const double r = std::clamp(cc.row, 0.0, H - 1.0);
  const double c = std::clamp(cc.col, 0.0, W - 1.0);
  const auto r0 = static_cast<std::size_t>(std::floor(r));
  const auto c0 = static_cast<std::size_t>(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, grid.height_cells() - 1);
  const std::size_t c1 = std::min(c0 + 1, grid.width_cells() - 1);
  const double fr = r - static_cast<double>(r0);
  const double fc = c - static_cast<double>(c0);
  return BilinearTap{{grid.index(r0, c0), grid.index(r0, c1), grid.index(r1, c0), grid.index(r1, c1)},
                     {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc}};
}

}  // namespace

Var bilinear_sample(const Var& map, const BevGrid& grid,
                    std::span<const std::pair<double, double>> points) {
  require_rank(map, 3, "bilinear_sample");
  if (map.shape()[0] != grid.height_cells() || map.shape()[1] != grid.width_cells()) {
    throw std::invalid_argument("bilinear_sample: map " + shape_str(map.shape()) +
                                " does not match grid");
  }
  const std::size_t C = map.shape()[2];
  std::vector<BilinearTap> taps;
  taps.reserve(points.size());
  for (const auto& [px, py] : points) taps.push_back(bilinear_tap(grid, px, py));
  Tape& t = map.tape();
  Tensor out({points.size(), C});
  const auto& mv = map.value().data;
  for (std::size_t p = 0; p < taps.size(); ++p)
    for (int k = 0; k < 4; ++k) {
      const double wgt = taps[p].weight[k];
      if (wgt == 0.0) continue;
      const double* src = &mv[taps[p].idx[k] * C];
      for (std::size_t c = 0; c < C; ++c) out.data[p * C + c] += wgt * src[c];
    }
  std::size_t id = t.size();
  return t.record(std::move(out), {map}, [map, id, C, taps](Tape& tp) {
    const auto& go = tp.grad_of(id);
    auto& gm = tp.grad_ref(map.id());
    for (std::size_t p = 0; p < taps.size(); ++p)
      for (int k = 0; k < 4; ++k) {
        const double wgt = taps[p].weight[k];
        if (wgt == 0.0) continue;
        for (std::size_t c = 0; c < C; ++c) gm[taps[p].idx[k] * C + c] += wgt * go[p * C + c];
      }
  });
}

Var contrastive_rows(const Var& logits, bool include_positive) {
  require_rank(logits, 2, "contrastive_rows");
  const std::size_t n = logits.shape()[0];
  if (logits.shape()[1] != n) throw std::invalid_argument("contrastive_rows: logits must be square");
  if (n < 2) throw std::invalid_argument("contrastive_rows: need at least two pairs");
  Tape& t = logits.tape();
  const auto& s = logits.value().data;
  Tensor out({n});
  // softmax weights over each row's denominator set, kept for backward
  std::vector<double> probs(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i || include_positive) mx = std::max(mx, s[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i || include_positive) z += (probs[i * n + j] = std::exp(s[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    out.data[i] = -s[i * n + i] + mx + std::log(z);
  }
  std::size_t id = t.size();
  return t.record(std::move(out), {logits}, [logits, id, n, probs](Tape& tp) {
    const auto& go = tp.grad_of(id);
    auto& gl = tp.grad_ref(logits.id());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += go[i] * probs[i * n + j];
      gl[i * n + i] -= go[i];
    }
  });
}

Var focal_heatmap_loss(const Var& logits, const Tensor& target, double alpha, double beta) {
  if (target.numel() != logits.numel()) throw std::invalid_argument("focal_heatmap_loss: target size mismatch");
  Tape& t = logits.tape();
  const auto& x = logits.value().data;
  const std::size_t n = x.size();
  std::size_t positives = 0;
  for (double y : target.data) {
    if (!(y >= 0.0 && y <= 1.0)) throw std::invalid_argument("focal_heatmap_loss: target outside [0, 1]");
    positives += y == 1.0;
  }
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, positives));
  // log p = -softplus(-x), log(1 - p) = -softplus(x)
  auto softplus = [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
  std::vector<double> dx(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double log_p = -softplus(-x[i]);
    const double log_q = -softplus(x[i]);
    const double p = std::exp(log_p), q = std::exp(log_q);
    const double y = target.data[i];
    if (y == 1.0) {
      total -= std::pow(q, alpha) * log_p;
      dx[i] = alpha * std::pow(q, alpha) * p * log_p - std::pow(q, alpha + 1.0);
    } else {
      const double wn = std::pow(1.0 - y, beta);
      total -= wn * std::pow(p, alpha) * log_q;
      dx[i] = -wn * (alpha * std::pow(p, alpha) * q * log_q - std::pow(p, alpha + 1.0));
    }
    dx[i] *= norm;
  }
  std::size_t id = t.size();
  return t.record(Tensor::scalar(total * norm), {logits}, [logits, id, dx = std::move(dx)](Tape& tp) {
    const double g = tp.grad_of(id)[0];
    auto& gl = tp.grad_ref(logits.id());
    for (std::size_t i = 0; i < dx.size(); ++i) gl[i] += g * dx[i];
  });
}

}  // namespace ad
}  // namespace bevkd
