#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "memt/rng.hpp"

// Minimal dense-tensor library with reverse-mode automatic differentiation.
// Tensors are value-semantic handles to shared nodes; operations executed
// while a Tape is active record backward rules on that tape. Templated on the
// scalar type: float for training, double for gradient checking.

namespace memt {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  Tape<T>* owner = nullptr;  // tape that recorded this node; null for leaves
  std::function<void()> backward;
  std::vector<std::shared_ptr<Node<T>>> parents;
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<std::size_t>(shape_numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  // Xavier-uniform init for weight matrices, normal/zeros elsewhere.
  static Tensor xavier(Shape shape, Rng& rng) {
    int fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : shape.back();
    int fan_out = shape.back();
    double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    Tensor t = zeros(std::move(shape), true);
    for (auto& v : t.node()->value) v = static_cast<T>(rng.uniform(-limit, limit));
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node()->value) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int numel() const { return static_cast<int>(n_->value.size()); }
  bool requires_grad() const { return n_->requires_grad; }

  std::span<const T> data() const { return n_->value; }
  // Direct mutation is for initialization and optimizer updates only; tensors
  // that already participate in a recorded graph must not be mutated.
  std::span<T> raw() { return n_->value; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(n_->shape));
    return n_->value[0];
  }

  T at(std::initializer_list<int> idx) const {
    int flat = 0;
    auto it = idx.begin();
    for (std::size_t i = 0; i < n_->shape.size(); ++i, ++it) flat = flat * n_->shape[i] + *it;
    return n_->value[static_cast<std::size_t>(flat)];
  }

  std::shared_ptr<Node> node() const { return n_; }

  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node> n_;
};

// Records operations in execution order; backward() replays them in reverse.
// One backward pass per tape. Gradients of interior nodes live on the nodes;
// gradients of leaves (parameters, inputs) are collected in a per-tape map so
// several tapes can differentiate w.r.t. the same shared parameters.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  // RAII activation.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }

   private:
    Tape* prev_;
  };

  void record(std::shared_ptr<detail::Node<T>> n) {
    n->owner = this;
    nodes_.push_back(std::move(n));
  }

  void accumulate(const std::shared_ptr<detail::Node<T>>& n, const T* delta, std::size_t len) {
    std::vector<T>* g;
    if (n->owner == this) {
      g = &n->grad;
    } else {
      g = &leaf_grads_[n.get()];
    }
    if (g->empty()) g->assign(n->value.size(), T(0));
    for (std::size_t i = 0; i < len; ++i) (*g)[i] += delta[i];
  }

  std::vector<T>* grad_of(const std::shared_ptr<detail::Node<T>>& n) {
    if (n->owner == this) return n->grad.empty() ? nullptr : &n->grad;
    auto it = leaf_grads_.find(n.get());
    return it == leaf_grads_.end() ? nullptr : &it->second;
  }

  void backward(const Tensor<T>& loss) {
    if (used_) throw std::logic_error("tape already consumed by a backward pass");
    used_ = true;
    if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
    auto ln = loss.node();
    if (ln->owner != this) throw std::invalid_argument("loss was not recorded on this tape");
    ln->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& n = *it;
      if (n->backward && !n->grad.empty()) n->backward();
    }
  }

  // Gradient of a leaf tensor (zeros if the loss did not depend on it).
  std::vector<T> leaf_grad(const Tensor<T>& t) const {
    auto it = leaf_grads_.find(t.node().get());
    if (it == leaf_grads_.end()) return std::vector<T>(t.node()->value.size(), T(0));
    return it->second;
  }

  const std::unordered_map<const detail::Node<T>*, std::vector<T>>& leaf_grads() const {
    return leaf_grads_;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  std::unordered_map<const detail::Node<T>*, std::vector<T>> leaf_grads_;
  bool used_ = false;
};

namespace detail {

template <class T>
std::shared_ptr<Node<T>> make_result(Shape shape, std::vector<T> value,
                                     std::initializer_list<Tensor<T>> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  Tape<T>* tape = Tape<T>::current();
  n->requires_grad = rg && tape != nullptr;
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.node());
    tape->record(n);
  }
  return n;
}

// gemm wrappers
inline void gemm(bool ta, bool tb, int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, const double* a, int lda, const double* b,
                 int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, 1.0, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail

// ---- shape checks ----

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// ---- elementwise ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> v(a.data().begin(), a.data().end());
  for (int i = 0; i < b.numel(); ++i) v[i] += b.data()[i];
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      tape->accumulate(an, res->grad.data(), res->grad.size());
      tape->accumulate(bn, res->grad.data(), res->grad.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> v(a.data().begin(), a.data().end());
  for (int i = 0; i < b.numel(); ++i) v[i] -= b.data()[i];
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      tape->accumulate(an, res->grad.data(), res->grad.size());
      std::vector<T> neg(res->grad.size());
      for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -res->grad[i];
      tape->accumulate(bn, neg.data(), neg.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> v(static_cast<std::size_t>(a.numel()));
  for (int i = 0; i < a.numel(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = res->grad[i] * bn->value[i];
      tape->accumulate(an, d.data(), d.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = res->grad[i] * an->value[i];
      tape->accumulate(bn, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  std::vector<T> v(static_cast<std::size_t>(a.numel()));
  for (int i = 0; i < a.numel(); ++i) v[i] = static_cast<T>(a.data()[i] * c);
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(res->grad[i] * c);
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// Broadcast-add a scalar tensor (shape [1]) to every element.
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw std::invalid_argument("add_scalar: s must have one element");
  std::vector<T> v(a.data().begin(), a.data().end());
  for (auto& x : v) x += s.data()[0];
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a, s});
  if (n->requires_grad) {
    auto an = a.node(), sn = s.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      tape->accumulate(an, res->grad.data(), res->grad.size());
      T tot = 0;
      for (T g : res->grad) tot += g;
      tape->accumulate(sn, &tot, 1);
    };
  }
  return Tensor<T>(n);
}

// Multiply every element by a scalar tensor (shape [1]).
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw std::invalid_argument("mul_scalar: s must have one element");
  T sv = s.data()[0];
  std::vector<T> v(a.data().begin(), a.data().end());
  for (auto& x : v) x *= sv;
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a, s});
  if (n->requires_grad) {
    auto an = a.node(), sn = s.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = res->grad[i] * sv;
      tape->accumulate(an, d.data(), d.size());
      T tot = 0;
      for (std::size_t i = 0; i < res->grad.size(); ++i) tot += res->grad[i] * an->value[i];
      tape->accumulate(sn, &tot, 1);
    };
  }
  return Tensor<T>(n);
}

// Divide every element by a scalar tensor (shape [1]).
template <class T>
Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw std::invalid_argument("div_scalar: s must have one element");
  T sv = s.data()[0];
  std::vector<T> v(a.data().begin(), a.data().end());
  for (auto& x : v) x /= sv;
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a, s});
  if (n->requires_grad) {
    auto an = a.node(), sn = s.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = res->grad[i] / sv;
      tape->accumulate(an, d.data(), d.size());
      T tot = 0;
      for (std::size_t i = 0; i < d.size(); ++i) tot += -res->grad[i] * res->value[i] / sv;
      tape->accumulate(sn, &tot, 1);
    };
  }
  return Tensor<T>(n);
}

template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF df) {
  std::vector<T> v(static_cast<std::size_t>(a.numel()));
  for (int i = 0; i < a.numel(); ++i) v[i] = f(a.data()[i]);
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = res->grad[i] * df(an->value[i], res->value[i]);
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a,
      [](T x) {
        return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh_t(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

// log with a floor to keep 0-probability entries finite.
template <class T>
Tensor<T> log_t(const Tensor<T>& a, T floor = T(1e-12)) {
  return unary_op(
      a, [floor](T x) { return std::log(std::max(x, floor)); },
      [floor](T x, T) { return T(1) / std::max(x, floor); });
}

// ---- reductions ----

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T tot = 0;
  for (T x : a.data()) tot += x;
  auto n = detail::make_result<T>({1}, {tot}, {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(an->value.size(), res->grad[0]);
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), 1.0 / a.numel());
}

template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  return sum(mul(a, b));
}

// Sum of elements at the given flat indices (duplicates allowed).
template <class T>
Tensor<T> gather_sum(const Tensor<T>& a, std::vector<int> idx) {
  T tot = 0;
  for (int i : idx) {
    if (i < 0 || i >= a.numel())
      throw std::out_of_range("gather_sum: index " + std::to_string(i) + " out of range");
    tot += a.data()[i];
  }
  auto n = detail::make_result<T>({1}, {tot}, {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=, idx = std::move(idx)]() {
      std::vector<T> d(an->value.size(), T(0));
      for (int i : idx) d[static_cast<std::size_t>(i)] += res->grad[0];
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// ---- matrix ops ----

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  std::vector<T> v(static_cast<std::size_t>(m) * nn, T(0));
  detail::gemm(false, false, m, nn, k, a.data().data(), k, b.data().data(), nn, T(0), v.data(), nn);
  auto n = detail::make_result<T>({m, nn}, std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      // dA = dC * B^T ; dB = A^T * dC
      std::vector<T> da(static_cast<std::size_t>(m) * k, T(0));
      detail::gemm(false, true, m, k, nn, res->grad.data(), nn, bn->value.data(), nn, T(0),
                   da.data(), k);
      tape->accumulate(an, da.data(), da.size());
      std::vector<T> db(static_cast<std::size_t>(k) * nn, T(0));
      detail::gemm(true, false, k, nn, m, an->value.data(), k, res->grad.data(), nn, T(0),
                   db.data(), nn);
      tape->accumulate(bn, db.data(), db.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
  int r = a.dim(0), c = a.dim(1);
  std::vector<T> v(static_cast<std::size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(j) * r + i] = a.data()[i * c + j];
  auto n = detail::make_result<T>({c, r}, std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(static_cast<std::size_t>(r) * c);
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < r; ++j) d[static_cast<std::size_t>(j) * c + i] = res->grad[i * r + j];
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(a.shape()) + " -> " +
                                shape_str(shape));
  std::vector<T> v(a.data().begin(), a.data().end());
  auto n = detail::make_result<T>(std::move(shape), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() { tape->accumulate(an, res->grad.data(), res->grad.size()); };
  }
  return Tensor<T>(n);
}

// Add a [c] bias vector to every row of an [r, c] matrix.
template <class T>
Tensor<T> add_bias(const Tensor<T>& m, const Tensor<T>& bias) {
  if (m.rank() != 2 || bias.numel() != m.dim(1))
    throw std::invalid_argument("add_bias: " + shape_str(m.shape()) + " + " +
                                shape_str(bias.shape()));
  int r = m.dim(0), c = m.dim(1);
  std::vector<T> v(m.data().begin(), m.data().end());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] += bias.data()[j];
  auto n = detail::make_result<T>(m.shape(), std::move(v), {m, bias});
  if (n->requires_grad) {
    auto mn = m.node(), bn = bias.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      tape->accumulate(mn, res->grad.data(), res->grad.size());
      std::vector<T> db(static_cast<std::size_t>(c), T(0));
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) db[static_cast<std::size_t>(j)] += res->grad[i * c + j];
      tape->accumulate(bn, db.data(), db.size());
    };
  }
  return Tensor<T>(n);
}

// Multiply row i of an [r, c] matrix by s[i] (s has shape [r] or [r,1]).
template <class T>
Tensor<T> scale_rows(const Tensor<T>& m, const Tensor<T>& s) {
  if (m.rank() != 2 || s.numel() != m.dim(0))
    throw std::invalid_argument("scale_rows: " + shape_str(m.shape()) + " * " +
                                shape_str(s.shape()));
  int r = m.dim(0), c = m.dim(1);
  std::vector<T> v(m.data().begin(), m.data().end());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] *= s.data()[i];
  auto n = detail::make_result<T>(m.shape(), std::move(v), {m, s});
  if (n->requires_grad) {
    auto mn = m.node(), sn = s.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> dm(res->grad.size());
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          dm[static_cast<std::size_t>(i) * c + j] = res->grad[i * c + j] * sn->value[i];
      tape->accumulate(mn, dm.data(), dm.size());
      std::vector<T> ds(static_cast<std::size_t>(r), T(0));
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          ds[static_cast<std::size_t>(i)] += res->grad[i * c + j] * mn->value[i * c + j];
      tape->accumulate(sn, ds.data(), ds.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& m, int r0, int r1) {
  if (m.rank() != 2 || r0 < 0 || r1 > m.dim(0) || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  int c = m.dim(1);
  std::vector<T> v(m.data().begin() + static_cast<std::ptrdiff_t>(r0) * c,
                   m.data().begin() + static_cast<std::ptrdiff_t>(r1) * c);
  auto n = detail::make_result<T>({r1 - r0, c}, std::move(v), {m});
  if (n->requires_grad) {
    auto mn = m.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(mn->value.size(), T(0));
      std::copy(res->grad.begin(), res->grad.end(), d.begin() + static_cast<std::ptrdiff_t>(r0) * c);
      tape->accumulate(mn, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& m, int c0, int c1) {
  if (m.rank() != 2 || c0 < 0 || c1 > m.dim(1) || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  int r = m.dim(0), c = m.dim(1), w = c1 - c0;
  std::vector<T> v(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) v[static_cast<std::size_t>(i) * w + j] = m.data()[i * c + c0 + j];
  auto n = detail::make_result<T>({r, w}, std::move(v), {m});
  if (n->requires_grad) {
    auto mn = m.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(mn->value.size(), T(0));
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          d[static_cast<std::size_t>(i) * c + c0 + j] = res->grad[i * w + j];
      tape->accumulate(mn, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: " + shape_str(a.shape()) + " | " +
                                shape_str(b.shape()));
  int r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<T> v(static_cast<std::size_t>(r) * (ca + cb));
  for (int i = 0; i < r; ++i) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i) * ca, ca,
                v.begin() + static_cast<std::ptrdiff_t>(i) * (ca + cb));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(i) * cb, cb,
                v.begin() + static_cast<std::ptrdiff_t>(i) * (ca + cb) + ca);
  }
  auto n = detail::make_result<T>({r, ca + cb}, std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> da(an->value.size()), db(bn->value.size());
      for (int i = 0; i < r; ++i) {
        std::copy_n(res->grad.begin() + static_cast<std::ptrdiff_t>(i) * (ca + cb), ca,
                    da.begin() + static_cast<std::ptrdiff_t>(i) * ca);
        std::copy_n(res->grad.begin() + static_cast<std::ptrdiff_t>(i) * (ca + cb) + ca, cb,
                    db.begin() + static_cast<std::ptrdiff_t>(i) * cb);
      }
      tape->accumulate(an, da.data(), da.size());
      tape->accumulate(bn, db.data(), db.size());
    };
  }
  return Tensor<T>(n);
}

// Stack rank-2 blocks vertically.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  int c = parts[0].dim(1), rtot = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c) throw std::invalid_argument("concat_rows: column mismatch");
    rtot += p.dim(0);
  }
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(rtot) * c);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = {rtot, c};
  n->value = std::move(v);
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  Tape<T>* tape = Tape<T>::current();
  n->requires_grad = rg && tape != nullptr;
  if (n->requires_grad) {
    for (const auto& p : parts) n->parents.push_back(p.node());
    tape->record(n);
    auto res = n.get();
    std::vector<std::shared_ptr<detail::Node<T>>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    n->backward = [=]() {
      std::size_t off = 0;
      for (const auto& pn : pnodes) {
        tape->accumulate(pn, res->grad.data() + off, pn->value.size());
        off += pn->value.size();
      }
    };
  }
  return Tensor<T>(n);
}

// ---- softmax family ----

// Row-wise softmax of an [r, c] matrix (or a rank-1 vector).
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  int r = a.rank() == 2 ? a.dim(0) : 1;
  int c = a.rank() == 2 ? a.dim(1) : a.dim(0);
  if (c < 1) throw std::invalid_argument("softmax: empty axis");
  std::vector<T> v(static_cast<std::size_t>(r) * c);
  for (int i = 0; i < r; ++i) {
    const T* row = a.data().data() + static_cast<std::ptrdiff_t>(i) * c;
    T mx = *std::max_element(row, row + c);
    T tot = 0;
    for (int j = 0; j < c; ++j) {
      T e = std::exp(row[j] - mx);
      v[static_cast<std::size_t>(i) * c + j] = e;
      tot += e;
    }
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] /= tot;
  }
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (int i = 0; i < r; ++i) {
        const T* y = res->value.data() + static_cast<std::ptrdiff_t>(i) * c;
        const T* g = res->grad.data() + static_cast<std::ptrdiff_t>(i) * c;
        T inner = 0;
        for (int j = 0; j < c; ++j) inner += y[j] * g[j];
        for (int j = 0; j < c; ++j) d[static_cast<std::size_t>(i) * c + j] = y[j] * (g[j] - inner);
      }
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// softmax along an axis of a rank-1 or rank-2 tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  if (a.rank() == 1) return softmax_rows(a);
  if (a.rank() != 2) throw std::invalid_argument("softmax: rank-1/2 only");
  int ax = axis < 0 ? axis + 2 : axis;
  if (ax == 1) return softmax_rows(a);
  if (ax == 0) return transpose(softmax_rows(transpose(a)));
  throw std::invalid_argument("softmax: bad axis");
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  int r = a.rank() == 2 ? a.dim(0) : 1;
  int c = a.rank() == 2 ? a.dim(1) : a.dim(0);
  std::vector<T> v(static_cast<std::size_t>(r) * c);
  for (int i = 0; i < r; ++i) {
    const T* row = a.data().data() + static_cast<std::ptrdiff_t>(i) * c;
    T mx = *std::max_element(row, row + c);
    T tot = 0;
    for (int j = 0; j < c; ++j) tot += std::exp(row[j] - mx);
    T lse = mx + std::log(tot);
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] = row[j] - lse;
  }
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() {
      std::vector<T> d(res->grad.size());
      for (int i = 0; i < r; ++i) {
        const T* y = res->value.data() + static_cast<std::ptrdiff_t>(i) * c;
        const T* g = res->grad.data() + static_cast<std::ptrdiff_t>(i) * c;
        T gsum = 0;
        for (int j = 0; j < c; ++j) gsum += g[j];
        for (int j = 0; j < c; ++j)
          d[static_cast<std::size_t>(i) * c + j] = g[j] - std::exp(y[j]) * gsum;
      }
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// ---- layer norm ----

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.rank() != 2 || gain.numel() != x.dim(1) || bias.numel() != x.dim(1))
    throw std::invalid_argument("layer_norm: shape mismatch");
  int r = x.dim(0), c = x.dim(1);
  std::vector<T> v(static_cast<std::size_t>(r) * c);
  std::vector<T> xhat(static_cast<std::size_t>(r) * c);
  std::vector<T> inv_std(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const T* row = x.data().data() + static_cast<std::ptrdiff_t>(i) * c;
    T m = 0;
    for (int j = 0; j < c; ++j) m += row[j];
    m /= c;
    T var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= c;
    T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      T xh = (row[j] - m) * is;
      xhat[static_cast<std::size_t>(i) * c + j] = xh;
      v[static_cast<std::size_t>(i) * c + j] = xh * gain.data()[j] + bias.data()[j];
    }
  }
  auto n = detail::make_result<T>(x.shape(), std::move(v), {x, gain, bias});
  if (n->requires_grad) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      std::vector<T> dx(res->grad.size()), dg(static_cast<std::size_t>(c), T(0)),
          db(static_cast<std::size_t>(c), T(0));
      for (int i = 0; i < r; ++i) {
        const T* g = res->grad.data() + static_cast<std::ptrdiff_t>(i) * c;
        const T* xh = xhat.data() + static_cast<std::ptrdiff_t>(i) * c;
        T sum_dxh = 0, sum_dxh_xh = 0;
        for (int j = 0; j < c; ++j) {
          T dxh = g[j] * gn->value[static_cast<std::size_t>(j)];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[j];
          dg[static_cast<std::size_t>(j)] += g[j] * xh[j];
          db[static_cast<std::size_t>(j)] += g[j];
        }
        for (int j = 0; j < c; ++j) {
          T dxh = g[j] * gn->value[static_cast<std::size_t>(j)];
          dx[static_cast<std::size_t>(i) * c + j] =
              inv_std[static_cast<std::size_t>(i)] *
              (dxh - sum_dxh / c - xh[j] * sum_dxh_xh / c);
        }
      }
      tape->accumulate(xn, dx.data(), dx.size());
      tape->accumulate(gn, dg.data(), dg.size());
      tape->accumulate(bn, db.data(), db.size());
    };
  }
  return Tensor<T>(n);
}

// ---- embedding / dropout ----

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [V, d]");
  int v = table.dim(0), d = table.dim(1);
  int l = static_cast<int>(ids.size());
  std::vector<T> out(static_cast<std::size_t>(l) * d);
  for (int i = 0; i < l; ++i) {
    if (ids[static_cast<std::size_t>(i)] < 0 || ids[static_cast<std::size_t>(i)] >= v)
      throw std::out_of_range("embedding: token id " + std::to_string(ids[static_cast<std::size_t>(i)]) +
                              " outside vocabulary of size " + std::to_string(v));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(i)]) * d,
                d, out.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  auto n = detail::make_result<T>({l, d}, std::move(out), {table});
  if (n->requires_grad) {
    auto tn = table.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=, ids = ids]() {
      std::vector<T> dt(tn->value.size(), T(0));
      for (int i = 0; i < l; ++i)
        for (int j = 0; j < d; ++j)
          dt[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d + j] +=
              res->grad[static_cast<std::size_t>(i) * d + j];
      tape->accumulate(tn, dt.data(), dt.size());
    };
  }
  return Tensor<T>(n);
}

// Inverted dropout. Identity when training is false or rate is 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& a, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  T keep_inv = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(static_cast<std::size_t>(a.numel()));
  for (auto& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_inv;
  std::vector<T> v(static_cast<std::size_t>(a.numel()));
  for (int i = 0; i < a.numel(); ++i) v[i] = a.data()[i] * mask[static_cast<std::size_t>(i)];
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=, mask = std::move(mask)]() {
      std::vector<T> d(res->grad.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = res->grad[i] * mask[i];
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// ---- losses ----

// Label-smoothed NLL over an already-normalized probability matrix [t, v]:
// loss = mean_t [ -sum_w q_w log p_tw ],  q = (1-eps) one_hot(y_t) + eps/v.
template <class T>
Tensor<T> smoothed_nll(const Tensor<T>& probs, const std::vector<int>& targets, double eps) {
  if (probs.rank() != 2 || static_cast<int>(targets.size()) != probs.dim(0))
    throw std::invalid_argument("smoothed_nll: shape mismatch");
  int t = probs.dim(0), v = probs.dim(1);
  const T floor = T(1e-12);
  T uni = static_cast<T>(eps / v);
  T loss = 0;
  for (int i = 0; i < t; ++i) {
    const T* row = probs.data().data() + static_cast<std::ptrdiff_t>(i) * v;
    for (int j = 0; j < v; ++j) {
      T q = uni + (j == targets[static_cast<std::size_t>(i)] ? static_cast<T>(1.0 - eps) : T(0));
      if (q > 0) loss -= q * std::log(std::max(row[j], floor));
    }
  }
  loss /= t;
  auto n = detail::make_result<T>({1}, {loss}, {probs});
  if (n->requires_grad) {
    auto pn = probs.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=, targets = targets]() {
      std::vector<T> d(pn->value.size());
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < v; ++j) {
          T q = uni + (j == targets[static_cast<std::size_t>(i)] ? static_cast<T>(1.0 - eps) : T(0));
          T p = std::max(pn->value[static_cast<std::size_t>(i) * v + j], floor);
          d[static_cast<std::size_t>(i) * v + j] = res->grad[0] * (-q / p) / t;
        }
      }
      tape->accumulate(pn, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// Copy-distribution scatter: given attention weights [t, k] over k memory
// token positions with vocabulary ids pos_ids, produce [t, v] where column w
// collects the attention mass of every position holding token w.
template <class T>
Tensor<T> scatter_copy(const Tensor<T>& attn, const std::vector<int>& pos_ids, int vocab) {
  if (attn.rank() != 2 || static_cast<int>(pos_ids.size()) != attn.dim(1))
    throw std::invalid_argument("scatter_copy: shape mismatch");
  int t = attn.dim(0), k = attn.dim(1);
  for (int id : pos_ids)
    if (id < 0 || id >= vocab) throw std::out_of_range("scatter_copy: token id out of vocab");
  std::vector<T> v(static_cast<std::size_t>(t) * vocab, T(0));
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < k; ++j)
      v[static_cast<std::size_t>(i) * vocab + pos_ids[static_cast<std::size_t>(j)]] +=
          attn.data()[i * k + j];
  auto n = detail::make_result<T>({t, vocab}, std::move(v), {attn});
  if (n->requires_grad) {
    auto an = attn.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=, pos_ids = pos_ids]() {
      std::vector<T> d(an->value.size());
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < k; ++j)
          d[static_cast<std::size_t>(i) * k + j] =
              res->grad[static_cast<std::size_t>(i) * vocab + pos_ids[static_cast<std::size_t>(j)]];
      tape->accumulate(an, d.data(), d.size());
    };
  }
  return Tensor<T>(n);
}

// Add a constant (non-differentiable) matrix, e.g. a causal attention mask.
template <class T>
Tensor<T> add_const(const Tensor<T>& a, const std::vector<T>& c) {
  if (static_cast<int>(c.size()) != a.numel()) throw std::invalid_argument("add_const: size");
  std::vector<T> v(a.data().begin(), a.data().end());
  for (int i = 0; i < a.numel(); ++i) v[i] += c[static_cast<std::size_t>(i)];
  auto n = detail::make_result<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    auto res = n.get();
    Tape<T>* tape = Tape<T>::current();
    n->backward = [=]() { tape->accumulate(an, res->grad.data(), res->grad.size()); };
  }
  return Tensor<T>(n);
}

}  // namespace memt
