// Dense row-major tensor with reverse-mode autodiff.
//
// Tensors are shared handles to immutable-by-convention value buffers; ops
// build a DAG of nodes whose backprop closures accumulate into parent grads.
// Scalar type is a template parameter: float for runs, double for the
// finite-difference gradient-check suites.

#ifndef BATRFST_TENSOR_HPP_
#define BATRFST_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "batrfst/error.hpp"
#include "batrfst/rng.hpp"

namespace batr {

namespace detail {

inline bool& grad_mode_flag() {
  static thread_local bool enabled = true;
  return enabled;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

template <typename S>
struct tensor_node {
  std::vector<std::size_t> shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<tensor_node>> parents;
  std::function<void(tensor_node&)> backprop;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), S(0));
  }
};

// C[m x n] = A[m x k] * B[k x n]
template <typename S>
void mm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, S(0));
  for (std::size_t i = 0; i < m; ++i) {
    S* ci = c + i * n;
    const S* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      S aip = ai[p];
      const S* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m x n] = A[m x k] * B[n x k]^T
template <typename S>
void mm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const S* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(ai[p]) * bj[p];
      c[i * n + j] = static_cast<S>(acc);
    }
  }
}

// C[m x n] = A[k x m]^T * B[k x n]
template <typename S>
void mm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, S(0));
  for (std::size_t p = 0; p < k; ++p) {
    const S* ap = a + p * m;
    const S* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      S api = ap[i];
      S* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

// Accumulating variants used by backprop (no zero-fill).
template <typename S>
void mm_nn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    S* ci = c + i * n;
    const S* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      S aip = ai[p];
      const S* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const S* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(ai[p]) * bj[p];
      c[i * n + j] += static_cast<S>(acc);
    }
  }
}

template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const S* ap = a + p * m;
    const S* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      S api = ap[i];
      S* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace detail

inline bool grad_mode() { return detail::grad_mode_flag(); }

// RAII: disables tape recording in scope (inference, finite differences).
struct no_grad_guard {
  bool prev;
  no_grad_guard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~no_grad_guard() { detail::grad_mode_flag() = prev; }
  no_grad_guard(const no_grad_guard&) = delete;
  no_grad_guard& operator=(const no_grad_guard&) = delete;
};

template <typename S>
class tensor {
 public:
  using node_t = detail::tensor_node<S>;

  tensor() = default;

  static tensor zeros(std::vector<std::size_t> shape) {
    return from_values(std::move(shape), {}, S(0));
  }

  static tensor full(std::vector<std::size_t> shape, S v) {
    return from_values(std::move(shape), {}, v);
  }

  static tensor from(std::vector<std::size_t> shape, std::vector<S> data) {
    std::size_t n = detail::shape_numel(shape);
    if (n != data.size())
      throw dimension_error("tensor: shape " + detail::shape_str(shape) + " wants " +
                            std::to_string(n) + " values, got " + std::to_string(data.size()));
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v)))
        throw parameter_error("tensor: non-finite value rejected");
    auto n_ = std::make_shared<node_t>();
    n_->shape = std::move(shape);
    n_->values = std::move(data);
    tensor t;
    t.n_ = std::move(n_);
    return t;
  }

  static tensor scalar(S v) { return from({1}, {v}); }

  static tensor randn(std::vector<std::size_t> shape, rng_stream& rng, S stddev = S(1),
                      S mean = S(0)) {
    std::size_t n = detail::shape_numel(shape);
    std::vector<S> data(n);
    for (std::size_t i = 0; i < n; ++i)
      data[i] = static_cast<S>(rng.normal(static_cast<double>(mean), static_cast<double>(stddev)));
    return from(std::move(shape), std::move(data));
  }

  static tensor rand_uniform(std::vector<std::size_t> shape, rng_stream& rng, S lo, S hi) {
    std::size_t n = detail::shape_numel(shape);
    std::vector<S> data(n);
    for (std::size_t i = 0; i < n; ++i)
      data[i] = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return from(std::move(shape), std::move(data));
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().values.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : numel(); }
  std::size_t cols() const { return rank() == 2 ? dim(1) : 1; }

  const std::vector<S>& values() const { return node().values; }
  S value() const {
    if (numel() != 1) throw usage_error("tensor::value: tensor is not scalar");
    return node().values[0];
  }
  S at(std::size_t i) const { return node().values.at(i); }
  S at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw usage_error("tensor::at(i,j): rank-2 tensor required");
    return node().values.at(i * dim(1) + j);
  }

  // Direct buffer access for leaves (parameter updates, data loading).
  std::vector<S>& mutable_values() {
    if (!node().leaf) throw usage_error("mutable_values: only leaf tensors may be mutated");
    return node().values;
  }

  bool requires_grad() const { return node().requires_grad; }
  tensor& set_requires_grad(bool b) {
    if (!node().leaf) throw usage_error("set_requires_grad: only valid on leaf tensors");
    node().requires_grad = b;
    return *this;
  }

  bool has_grad() const { return defined() && !node().grad.empty(); }
  const std::vector<S>& grad() const {
    if (node().grad.empty()) throw usage_error("tensor::grad: gradient not populated");
    return node().grad;
  }
  void zero_grad() { node().grad.clear(); }

  // Value copy detached from any graph.
  tensor detach() const {
    auto n = std::make_shared<node_t>();
    n->shape = node().shape;
    n->values = node().values;
    tensor t;
    t.n_ = std::move(n);
    return t;
  }

  node_t& node() const {
    if (!n_) throw usage_error("tensor: undefined handle");
    return *n_;
  }
  const std::shared_ptr<node_t>& handle() const { return n_; }

  // Library hook for ops with analytic backward rules. `parents` are the
  // differentiable inputs; `backprop` reads self.grad and accumulates into
  // each parent's grad buffer.
  static tensor make_op(std::vector<std::size_t> shape, std::vector<S> values,
                        std::vector<tensor> parents,
                        std::function<void(node_t&)> backprop) {
    auto n = std::make_shared<node_t>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool track = detail::grad_mode_flag();
    bool any = false;
    if (track) {
      for (const tensor& p : parents) any = any || p.node().requires_grad;
    }
    if (track && any) {
      n->requires_grad = true;
      n->leaf = false;
      n->parents.reserve(parents.size());
      for (const tensor& p : parents) n->parents.push_back(p.n_);
      n->backprop = std::move(backprop);
    }
    tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  static tensor from_values(std::vector<std::size_t> shape, std::vector<S> data, S fill) {
    std::size_t n = detail::shape_numel(shape);
    data.assign(n, fill);
    auto n_ = std::make_shared<node_t>();
    n_->shape = std::move(shape);
    n_->values = std::move(data);
    tensor t;
    t.n_ = std::move(n_);
    return t;
  }

  std::shared_ptr<node_t> n_;
};

namespace detail {

template <typename S>
void require_finite(const tensor<S>& t, const char* op) {
  for (S v : t.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw parameter_error(std::string(op) + ": non-finite input rejected");
}

template <typename S>
void require_matrix(const tensor<S>& t, const char* op) {
  if (t.rank() != 2) throw dimension_error(std::string(op) + ": rank-2 tensor required, got " +
                                           shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> add(const tensor<S>& a, const tensor<S>& b) {
  detail::require_finite(a, "add");
  detail::require_finite(b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(av.size());
  enum class mode { same, row_bcast, scalar_bcast };
  mode m;
  if (a.shape() == b.shape()) {
    m = mode::same;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  } else if (b.numel() == 1) {
    m = mode::scalar_bcast;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[0];
  } else if (a.rank() == 2 && b.rank() == 1 && b.numel() == a.cols()) {
    m = mode::row_bcast;
    std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  } else {
    throw dimension_error("add: incompatible shapes " + detail::shape_str(a.shape()) + " vs " +
                          detail::shape_str(b.shape()));
  }
  std::size_t rows = a.rank() == 2 ? a.dim(0) : 0, cols = a.rank() == 2 ? a.dim(1) : 0;
  return tensor<S>::make_op(
      a.shape(), std::move(out), {a, b},
      [m, rows, cols](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          if (m == mode::same) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
          } else if (m == mode::scalar_bcast) {
            S acc = S(0);
            for (S g : self.grad) acc += g;
            pb.grad[0] += acc;
          } else {
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < cols; ++j) pb.grad[j] += self.grad[i * cols + j];
          }
        }
      });
}

template <typename S>
tensor<S> scale(const tensor<S>& a, S c) {
  detail::require_finite(a, "scale");
  if (!std::isfinite(static_cast<double>(c))) throw parameter_error("scale: non-finite factor");
  std::vector<S> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return tensor<S>::make_op(a.shape(), std::move(out), {a},
                            [c](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                pa.grad[i] += self.grad[i] * c;
                            });
}

template <typename S>
tensor<S> sub(const tensor<S>& a, const tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

// Elementwise product; also accepts a scalar tensor on either side.
template <typename S>
tensor<S> mul(const tensor<S>& a, const tensor<S>& b) {
  detail::require_finite(a, "mul");
  detail::require_finite(b, "mul");
  if (b.numel() == 1 && a.numel() != 1) {
    const auto& av = a.values();
    S s = b.value();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    return tensor<S>::make_op(
        a.shape(), std::move(out), {a, b}, [](typename tensor<S>::node_t& self) {
          auto& pa = *self.parents[0];
          auto& pb = *self.parents[1];
          S s = pb.values[0];
          if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * s;
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              acc += static_cast<double>(self.grad[i]) * pa.values[i];
            pb.grad[0] += static_cast<S>(acc);
          }
        });
  }
  if (a.numel() == 1 && b.numel() != 1) return mul(b, a);
  if (a.shape() != b.shape())
    throw dimension_error("mul: incompatible shapes " + detail::shape_str(a.shape()) + " vs " +
                          detail::shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return tensor<S>::make_op(a.shape(), std::move(out), {a, b},
                            [](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.requires_grad) {
                                pa.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  pa.grad[i] += self.grad[i] * pb.values[i];
                              }
                              if (pb.requires_grad) {
                                pb.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  pb.grad[i] += self.grad[i] * pa.values[i];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> matmul(const tensor<S>& a, const tensor<S>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  detail::require_finite(a, "matmul");
  detail::require_finite(b, "matmul");
  std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw dimension_error("matmul: inner dimensions disagree: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
  std::vector<S> out(m * n);
  detail::mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return tensor<S>::make_op(
      {m, n}, std::move(out), {a, b}, [m, k, n](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          detail::mm_nt_acc(self.grad.data(), pb.values.data(), pa.grad.data(), m, n, k);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          detail::mm_tn_acc(pa.values.data(), self.grad.data(), pb.grad.data(), k, m, n);
        }
      });
}

// a * b^T for row-major key matrices (attention logits).
template <typename S>
tensor<S> matmul_nt(const tensor<S>& a, const tensor<S>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  detail::require_finite(a, "matmul_nt");
  detail::require_finite(b, "matmul_nt");
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (k != b.dim(1))
    throw dimension_error("matmul_nt: inner dimensions disagree: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
  std::vector<S> out(m * n);
  detail::mm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  return tensor<S>::make_op(
      {m, n}, std::move(out), {a, b}, [m, k, n](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          detail::mm_nn_acc(self.grad.data(), pb.values.data(), pa.grad.data(), m, n, k);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          // db[n x k] = dc^T[n x m] * a[m x k]
          detail::mm_tn_acc(self.grad.data(), pa.values.data(), pb.grad.data(), n, m, k);
        }
      });
}

template <typename S>
tensor<S> transpose(const tensor<S>& a) {
  detail::require_matrix(a, "transpose");
  std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return tensor<S>::make_op({n, m}, std::move(out), {a},
                            [m, n](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  pa.grad[i * n + j] += self.grad[j * m + i];
                            });
}

// ---------------------------------------------------------------------------
// Row softmax (max-subtracted), temperature variants
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> softmax_rows(const tensor<S>& x, S temperature = S(1)) {
  detail::require_matrix(x, "softmax_rows");
  detail::require_finite(x, "softmax_rows");
  if (!(temperature > S(0))) throw parameter_error("softmax_rows: temperature must be positive");
  std::size_t m = x.dim(0), n = x.dim(1);
  const auto& xv = x.values();
  std::vector<S> out(m * n);
  double inv_t = 1.0 / static_cast<double>(temperature);
  for (std::size_t i = 0; i < m; ++i) {
    const S* row = xv.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]) * inv_t);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) * inv_t - mx);
    S* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j)
      orow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) * inv_t - mx) / denom);
  }
  S inv_temp = static_cast<S>(inv_t);
  return tensor<S>::make_op(
      {m, n}, std::move(out), {x}, [m, n, inv_temp](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const S* y = self.values.data() + i * n;
          const S* g = self.grad.data() + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * y[j];
          S* pg = pa.grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j)
            pg[j] += static_cast<S>((static_cast<double>(g[j]) - dot) * y[j]) * inv_temp;
        }
      });
}

// x / (s * mult) where s is a positive scalar tensor (learnable temperature).
template <typename S>
tensor<S> div_by_scalar(const tensor<S>& x, const tensor<S>& s, S mult = S(1)) {
  detail::require_finite(x, "div_by_scalar");
  if (s.numel() != 1) throw dimension_error("div_by_scalar: scalar tensor required");
  S denom = s.value() * mult;
  if (!(denom > S(0)) || !std::isfinite(static_cast<double>(denom)))
    throw parameter_error("div_by_scalar: denominator must be positive and finite");
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / denom;
  return tensor<S>::make_op(
      x.shape(), std::move(out), {x, s}, [mult](typename tensor<S>::node_t& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        S s0 = ps.values[0];
        S denom = s0 * mult;
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] / denom;
        }
        if (ps.requires_grad) {
          ps.ensure_grad();
          double acc = 0.0;
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            acc += static_cast<double>(self.grad[i]) * px.values[i];
          ps.grad[0] += static_cast<S>(-acc / (static_cast<double>(s0) * denom));
        }
      });
}

// a / b for scalar tensors.
template <typename S>
tensor<S> div_scalar(const tensor<S>& a, const tensor<S>& b) {
  if (a.numel() != 1 || b.numel() != 1) throw dimension_error("div_scalar: scalars required");
  S bv = b.value();
  if (bv == S(0)) throw parameter_error("div_scalar: division by zero");
  S out = a.value() / bv;
  if (!std::isfinite(static_cast<double>(out)))
    throw parameter_error("div_scalar: non-finite result");
  return tensor<S>::make_op({1}, {out}, {a, b}, [](typename tensor<S>::node_t& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    S av = pa.values[0], bv = pb.values[0], g = self.grad[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad[0] += g / bv;
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad[0] += -g * av / (bv * bv);
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> gelu(const tensor<S>& x) {
  detail::require_finite(x, "gelu");
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = static_cast<double>(xv[i]);
    out[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return tensor<S>::make_op(
      x.shape(), std::move(out), {x}, [](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          double v = static_cast<double>(pa.values[i]);
          double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          pa.grad[i] += static_cast<S>(static_cast<double>(self.grad[i]) * (cdf + v * pdf));
        }
      });
}

// Per-row normalization to mean 0, variance 1 (no affine terms).
template <typename S>
tensor<S> layernorm_rows(const tensor<S>& x, double eps = 1e-5) {
  detail::require_matrix(x, "layernorm_rows");
  detail::require_finite(x, "layernorm_rows");
  std::size_t m = x.dim(0), n = x.dim(1);
  const auto& xv = x.values();
  std::vector<S> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const S* row = xv.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += static_cast<double>(row[j]);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    S* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j)
      orow[j] = static_cast<S>((static_cast<double>(row[j]) - mean) * is);
  }
  return tensor<S>::make_op(
      {m, n}, std::move(out), {x},
      [m, n, inv_std = std::move(inv_std)](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const S* y = self.values.data() + i * n;
          const S* g = self.grad.data() + i * n;
          double gm = 0.0, gym = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gm += static_cast<double>(g[j]);
            gym += static_cast<double>(g[j]) * y[j];
          }
          gm /= static_cast<double>(n);
          gym /= static_cast<double>(n);
          S* pg = pa.grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j)
            pg[j] += static_cast<S>((static_cast<double>(g[j]) - gm - y[j] * gym) * inv_std[i]);
        }
      });
}

template <typename S>
tensor<S> softplus(const tensor<S>& x) {
  detail::require_finite(x, "softplus");
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = static_cast<double>(xv[i]);
    out[i] = static_cast<S>(v > 20.0 ? v : std::log1p(std::exp(v)));
  }
  return tensor<S>::make_op(x.shape(), std::move(out), {x},
                            [](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                double v = static_cast<double>(pa.values[i]);
                                double sig = 1.0 / (1.0 + std::exp(-v));
                                pa.grad[i] +=
                                    static_cast<S>(static_cast<double>(self.grad[i]) * sig);
                              }
                            });
}

// Elementwise sqrt; inputs must be nonnegative. The backward multiplier is
// clamped so coincident points (x == 0) contribute zero slope instead of inf.
template <typename S>
tensor<S> sqrt_guarded(const tensor<S>& x) {
  detail::require_finite(x, "sqrt");
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xv[i] < S(0)) throw parameter_error("sqrt: negative input");
    out[i] = static_cast<S>(std::sqrt(static_cast<double>(xv[i])));
  }
  return tensor<S>::make_op(
      x.shape(), std::move(out), {x}, [](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          double y = std::max(static_cast<double>(self.values[i]), 1e-12);
          pa.grad[i] += static_cast<S>(static_cast<double>(self.grad[i]) * 0.5 / y);
        }
      });
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout: survivors scaled by 1/(1-rate) at train time so inference
// is the identity.
template <typename S>
tensor<S> dropout(const tensor<S>& x, double rate, rng_stream& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw parameter_error("dropout: rate must be in [0,1)");
  detail::require_finite(x, "dropout");
  if (!training || rate == 0.0) return x;
  const auto& xv = x.values();
  std::vector<S> mask(xv.size());
  std::vector<S> out(xv.size());
  S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() < rate ? S(0) : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return tensor<S>::make_op(x.shape(), std::move(out), {x},
                            [mask = std::move(mask)](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                pa.grad[i] += self.grad[i] * mask[i];
                            });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> sum_all(const tensor<S>& x) {
  detail::require_finite(x, "sum");
  double acc = 0.0;
  for (S v : x.values()) acc += static_cast<double>(v);
  return tensor<S>::make_op({1}, {static_cast<S>(acc)}, {x},
                            [](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              S g = self.grad[0];
                              for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += g;
                            });
}

template <typename S>
tensor<S> mean_all(const tensor<S>& x) {
  return scale(sum_all(x), static_cast<S>(1.0 / static_cast<double>(x.numel())));
}

// Mean over one axis of a rank-2 tensor; result is rank-1.
template <typename S>
tensor<S> mean_pool(const tensor<S>& x, std::size_t axis) {
  detail::require_matrix(x, "mean_pool");
  detail::require_finite(x, "mean_pool");
  if (axis > 1) throw parameter_error("mean_pool: axis must be 0 or 1");
  std::size_t m = x.dim(0), n = x.dim(1);
  const auto& xv = x.values();
  if (axis == 0) {
    std::vector<double> acc(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) acc[j] += static_cast<double>(xv[i * n + j]);
    std::vector<S> out(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<S>(acc[j] / m);
    return tensor<S>::make_op({n}, std::move(out), {x},
                              [m, n](typename tensor<S>::node_t& self) {
                                auto& pa = *self.parents[0];
                                if (!pa.requires_grad) return;
                                pa.ensure_grad();
                                S inv = static_cast<S>(1.0 / static_cast<double>(m));
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t j = 0; j < n; ++j)
                                    pa.grad[i * n + j] += self.grad[j] * inv;
                              });
  }
  std::vector<S> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(xv[i * n + j]);
    out[i] = static_cast<S>(acc / n);
  }
  return tensor<S>::make_op({m}, std::move(out), {x},
                            [m, n](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              S inv = static_cast<S>(1.0 / static_cast<double>(n));
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  pa.grad[i * n + j] += self.grad[i] * inv;
                            });
}

template <typename S>
tensor<S> mse(const tensor<S>& a, const tensor<S>& b) {
  detail::require_finite(a, "mse");
  detail::require_finite(b, "mse");
  if (a.shape() != b.shape())
    throw dimension_error("mse: incompatible shapes " + detail::shape_str(a.shape()) + " vs " +
                          detail::shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  std::size_t n = av.size();
  return tensor<S>::make_op(
      {1}, {static_cast<S>(acc / n)}, {a, b}, [n](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        S g = self.grad[0];
        S c = static_cast<S>(2.0 / static_cast<double>(n)) * g;
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          S d = pa.values[i] - pb.values[i];
          if (pa.requires_grad) pa.grad[i] += c * d;
          if (pb.requires_grad) pb.grad[i] -= c * d;
        }
      });
}

// Mean negative log-likelihood of softmax(logits) at the target labels.
template <typename S>
tensor<S> cross_entropy(const tensor<S>& logits, const std::vector<int>& labels) {
  detail::require_matrix(logits, "cross_entropy");
  detail::require_finite(logits, "cross_entropy");
  std::size_t m = logits.dim(0), n = logits.dim(1);
  if (labels.size() != m)
    throw dimension_error("cross_entropy: " + std::to_string(m) + " rows vs " +
                          std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n)
      throw parameter_error("cross_entropy: label out of range");
  const auto& xv = logits.values();
  std::vector<S> probs(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const S* row = xv.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    double lse = mx + std::log(denom);
    loss += lse - static_cast<double>(row[labels[i]]);
    for (std::size_t j = 0; j < n; ++j)
      probs[i * n + j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - lse));
  }
  loss /= static_cast<double>(m);
  return tensor<S>::make_op(
      {1}, {static_cast<S>(loss)}, {logits},
      [m, n, labels, probs = std::move(probs)](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        S g = self.grad[0];
        S inv_m = static_cast<S>(1.0 / static_cast<double>(m));
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            S p = probs[i * n + j];
            S ind = (static_cast<std::size_t>(labels[i]) == j) ? S(1) : S(0);
            pa.grad[i * n + j] += g * inv_m * (p - ind);
          }
      });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> concat(const tensor<S>& a, const tensor<S>& b, std::size_t axis) {
  detail::require_matrix(a, "concat");
  detail::require_matrix(b, "concat");
  if (axis > 1) throw parameter_error("concat: axis must be 0 or 1");
  if (axis == 0) {
    if (a.dim(1) != b.dim(1))
      throw dimension_error("concat: column mismatch " + detail::shape_str(a.shape()) + " vs " +
                            detail::shape_str(b.shape()));
    std::size_t n = a.dim(1), ma = a.dim(0), mb = b.dim(0);
    std::vector<S> out;
    out.reserve((ma + mb) * n);
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    return tensor<S>::make_op({ma + mb, n}, std::move(out), {a, b},
                              [ma, mb, n](typename tensor<S>::node_t& self) {
                                auto& pa = *self.parents[0];
                                auto& pb = *self.parents[1];
                                if (pa.requires_grad) {
                                  pa.ensure_grad();
                                  for (std::size_t i = 0; i < ma * n; ++i)
                                    pa.grad[i] += self.grad[i];
                                }
                                if (pb.requires_grad) {
                                  pb.ensure_grad();
                                  for (std::size_t i = 0; i < mb * n; ++i)
                                    pb.grad[i] += self.grad[ma * n + i];
                                }
                              });
  }
  if (a.dim(0) != b.dim(0))
    throw dimension_error("concat: row mismatch " + detail::shape_str(a.shape()) + " vs " +
                          detail::shape_str(b.shape()));
  std::size_t m = a.dim(0), na = a.dim(1), nb = b.dim(1);
  std::vector<S> out(m * (na + nb));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.values().data() + i * na, na, out.data() + i * (na + nb));
    std::copy_n(b.values().data() + i * nb, nb, out.data() + i * (na + nb) + na);
  }
  return tensor<S>::make_op(
      {m, na + nb}, std::move(out), {a, b}, [m, na, nb](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        std::size_t n = na + nb;
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < na; ++j) pa.grad[i * na + j] += self.grad[i * n + j];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nb; ++j) pb.grad[i * nb + j] += self.grad[i * n + na + j];
        }
      });
}

// Stack rank-2 tensors with equal column counts along axis 0.
template <typename S>
tensor<S> vstack(const std::vector<tensor<S>>& parts) {
  if (parts.empty()) throw parameter_error("vstack: empty input");
  std::size_t n = parts[0].dim(1), total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "vstack");
    if (p.dim(1) != n) throw dimension_error("vstack: column mismatch");
    total += p.dim(0);
  }
  std::vector<S> out;
  out.reserve(total * n);
  std::vector<std::size_t> row_counts;
  row_counts.reserve(parts.size());
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    row_counts.push_back(p.dim(0));
  }
  return tensor<S>::make_op(
      {total, n}, std::move(out), parts,
      [n, row_counts = std::move(row_counts)](typename tensor<S>::node_t& self) {
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
          auto& p = *self.parents[pi];
          std::size_t cnt = row_counts[pi] * n;
          if (p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < cnt; ++i) p.grad[i] += self.grad[offset + i];
          }
          offset += cnt;
        }
      });
}

// Row gather; duplicate indices accumulate on backward.
template <typename S>
tensor<S> take_rows(const tensor<S>& x, const std::vector<std::size_t>& idx) {
  detail::require_matrix(x, "take_rows");
  std::size_t m = x.dim(0), n = x.dim(1);
  for (std::size_t r : idx)
    if (r >= m) throw parameter_error("take_rows: index out of range");
  std::vector<S> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.values().data() + idx[i] * n, n, out.data() + i * n);
  return tensor<S>::make_op({idx.size(), n}, std::move(out), {x},
                            [idx, n](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  pa.grad[idx[i] * n + j] += self.grad[i * n + j];
                            });
}

template <typename S>
tensor<S> take_cols(const tensor<S>& x, std::size_t start, std::size_t len) {
  detail::require_matrix(x, "take_cols");
  std::size_t m = x.dim(0), n = x.dim(1);
  if (start + len > n) throw parameter_error("take_cols: slice out of range");
  std::vector<S> out(m * len);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.values().data() + i * n + start, len, out.data() + i * len);
  return tensor<S>::make_op({m, len}, std::move(out), {x},
                            [m, n, start, len](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < len; ++j)
                                  pa.grad[i * n + start + j] += self.grad[i * len + j];
                            });
}

// Broadcast a single row (rank-1 or 1 x n) to m rows.
template <typename S>
tensor<S> repeat_row(const tensor<S>& v, std::size_t m) {
  std::size_t n = v.numel();
  if (v.rank() == 2 && v.dim(0) != 1) throw dimension_error("repeat_row: single row required");
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(v.values().data(), n, out.data() + i * n);
  return tensor<S>::make_op({m, n}, std::move(out), {v},
                            [m, n](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  pa.grad[j] += self.grad[i * n + j];
                            });
}

// Scale row i by the constant w[i] (importance-mask application).
template <typename S>
tensor<S> scale_rows(const tensor<S>& x, const std::vector<S>& w) {
  detail::require_matrix(x, "scale_rows");
  std::size_t m = x.dim(0), n = x.dim(1);
  if (w.size() != m) throw dimension_error("scale_rows: weight count mismatch");
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.values()[i * n + j] * w[i];
  return tensor<S>::make_op({m, n}, std::move(out), {x},
                            [w, n](typename tensor<S>::node_t& self) {
                              auto& pa = *self.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < w.size(); ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  pa.grad[i * n + j] += self.grad[i * n + j] * w[i];
                            });
}

// Scale column j by v[j] (rank-1 tensor), the multiplicative half of an
// affine layernorm.
template <typename S>
tensor<S> scale_cols(const tensor<S>& x, const tensor<S>& v) {
  detail::require_matrix(x, "scale_cols");
  detail::require_finite(v, "scale_cols");
  std::size_t m = x.dim(0), n = x.dim(1);
  if (v.numel() != n) throw dimension_error("scale_cols: vector length mismatch");
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.values()[i * n + j] * v.values()[j];
  return tensor<S>::make_op(
      {m, n}, std::move(out), {x, v}, [m, n](typename tensor<S>::node_t& self) {
        auto& px = *self.parents[0];
        auto& pv = *self.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              px.grad[i * n + j] += self.grad[i * n + j] * pv.values[j];
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i)
              acc += static_cast<double>(self.grad[i * n + j]) * px.values[i * n + j];
            pv.grad[j] += static_cast<S>(acc);
          }
        }
      });
}

// Rows rescaled to unit L2 norm (cosine-similarity precursor).
template <typename S>
tensor<S> l2_normalize_rows(const tensor<S>& x) {
  detail::require_matrix(x, "l2_normalize_rows");
  detail::require_finite(x, "l2_normalize_rows");
  std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<S> out(m * n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const S* row = x.values().data() + i * n;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * row[j];
    double r = std::max(std::sqrt(acc), 1e-12);
    norms[i] = r;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<S>(row[j] / r);
  }
  return tensor<S>::make_op(
      {m, n}, std::move(out), {x},
      [m, n, norms = std::move(norms)](typename tensor<S>::node_t& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const S* y = self.values.data() + i * n;
          const S* g = self.grad.data() + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * y[j];
          S* pg = pa.grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j)
            pg[j] += static_cast<S>((static_cast<double>(g[j]) - dot * y[j]) / norms[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once, accumulates into every requires_grad leaf, then clears the tape.
template <typename S>
void backward(const tensor<S>& loss) {
  if (loss.numel() != 1) throw usage_error("backward: loss must be scalar");
  auto root = loss.handle();
  if (!root) throw usage_error("backward: undefined tensor");
  if (!root->requires_grad)
    throw usage_error("backward: loss does not require grad (no active tape)");

  using node_t = detail::tensor_node<S>;
  std::vector<node_t*> order;
  std::unordered_set<node_t*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<node_t*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      node_t* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    node_t* node = *it;
    if (node->backprop) node->backprop(*node);
  }
  // Clear the tape: graph edges and intermediate grads are released; leaf
  // grads survive for the optimizer.
  for (node_t* node : order) {
    node->backprop = nullptr;
    node->parents.clear();
    if (!node->leaf) node->grad.clear();
  }
}

}  // namespace batr

#endif  // BATRFST_TENSOR_HPP_
