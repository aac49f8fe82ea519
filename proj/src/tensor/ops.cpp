#include "sdclip/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>

namespace sdclip {

namespace testing {
namespace {
std::atomic<bool> g_broken_softmax{false};
}
void set_broken_softmax_backward(bool broken) { g_broken_softmax = broken; }
bool broken_softmax_backward() { return g_broken_softmax; }

namespace {
thread_local StopGradientFreeze g_freeze = StopGradientFreeze::kOff;
thread_local std::vector<std::vector<double>> g_frozen;
thread_local std::size_t g_frozen_cursor = 0;
}  // namespace

void set_stop_gradient_freeze(StopGradientFreeze mode) {
  if (mode == StopGradientFreeze::kRecord || mode == StopGradientFreeze::kOff) g_frozen.clear();
  g_frozen_cursor = 0;
  g_freeze = mode;
}

StopGradientFreeze stop_gradient_freeze() { return g_freeze; }
}  // namespace testing

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
CMap<T> cmat(const TensorNode<T>& n, std::size_t rows, std::size_t cols) {
  return CMap<T>(n.data.data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

// Upstream gradient of an op's output, viewed as a matrix.
template <typename T>
CMap<T> gmat(const TensorNode<T>& n, std::size_t rows, std::size_t cols) {
  return CMap<T>(n.grad.data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T, typename Fn>
Tensor<T> emit(Shape shape, std::vector<T> data, bool track, Fn&& fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (track) {
    out.node()->requires_grad = true;
    Tape<T>::active()->record(out.node_ptr(), std::forward<Fn>(fn));
  }
  return out;
}

template <typename T>
T* grad_of(TensorNode<T>& n) {
  n.ensure_grad();
  return n.grad.data();
}

template <typename T>
void require_matrix(const Tensor<T>& x, const char* op) {
  if (x.ndim() > 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

Shape mat_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

template <typename T>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, int kind) {
  require_same_shape(a, b, op);
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* x = a.ptr();
  const T* y = b.ptr();
  switch (kind) {
    case 0: for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i]; break;
    case 1: for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i]; break;
    default: for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i]; break;
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return emit<T>(a.shape(), std::move(out), tracking<T>({&a, &b}),
                 [an, bn, kind](TensorNode<T>& o) {
                   const std::size_t n = o.data.size();
                   const T* g = o.grad.data();
                   if (an->requires_grad) {
                     T* ga = grad_of(*an);
                     if (kind == 2) {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->data[i];
                     } else {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                     }
                   }
                   if (bn->requires_grad) {
                     T* gb = grad_of(*bn);
                     if (kind == 0) {
                       for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                     } else if (kind == 1) {
                       for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                     } else {
                       for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * an->data[i];
                     }
                   }
                 });
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MMap<T>(out.data(), m, n).noalias() = cmat(*a.node(), m, k) * cmat(*b.node(), k, n);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return emit<T>(mat_shape(m, n), std::move(out), tracking<T>({&a, &b}),
                 [an, bn, m, k, n](TensorNode<T>& o) {
                   auto g = gmat(o, m, n);
                   if (an->requires_grad) {
                     MMap<T>(grad_of(*an), m, k).noalias() += g * cmat(*bn, k, n).transpose();
                   }
                   if (bn->requires_grad) {
                     MMap<T>(grad_of(*bn), k, n).noalias() += cmat(*an, m, k).transpose() * g;
                   }
                 });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()) + "ᵀ");
  }
  std::vector<T> out(m * n);
  MMap<T>(out.data(), m, n).noalias() = cmat(*a.node(), m, k) * cmat(*b.node(), n, k).transpose();
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return emit<T>(mat_shape(m, n), std::move(out), tracking<T>({&a, &b}),
                 [an, bn, m, k, n](TensorNode<T>& o) {
                   auto g = gmat(o, m, n);
                   if (an->requires_grad) {
                     MMap<T>(grad_of(*an), m, k).noalias() += g * cmat(*bn, n, k);
                   }
                   if (bn->requires_grad) {
                     MMap<T>(grad_of(*bn), n, k).noalias() += g.transpose() * cmat(*an, m, k);
                   }
                 });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_matrix(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(r * c);
  MMap<T>(out.data(), c, r) = cmat(*x.node(), r, c).transpose();
  auto xn = x.node_ptr();
  return emit<T>(mat_shape(c, r), std::move(out), tracking<T>({&x}),
                 [xn, r, c](TensorNode<T>& o) {
                   MMap<T>(grad_of(*xn), r, c) += gmat(o, c, r).transpose();
                 });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(a, b, "add", 0);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(a, b, "sub", 1);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(a, b, "mul", 2);
}

template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& y) {
  require_matrix(x, "add_tiled");
  require_matrix(y, "add_tiled");
  const std::size_t rows = x.rows(), cols = x.cols(), period = y.rows();
  if (y.cols() != cols || period == 0 || rows % period != 0) {
    throw DimensionError("add_tiled: cannot tile " + shape_str(y.shape()) + " over " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const T* yp = y.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = yp + (r % period) * cols;
    T* orow = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) orow[c] += yr[c];
  }
  auto xn = x.node_ptr();
  auto yn = y.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x, &y}),
                 [xn, yn, rows, cols, period](TensorNode<T>& o) {
                   const T* g = o.grad.data();
                   if (xn->requires_grad) {
                     T* gx = grad_of(*xn);
                     for (std::size_t i = 0; i < rows * cols; ++i) gx[i] += g[i];
                   }
                   if (yn->requires_grad) {
                     T* gy = grad_of(*yn);
                     for (std::size_t r = 0; r < rows; ++r) {
                       T* gyr = gy + (r % period) * cols;
                       const T* gr = g + r * cols;
                       for (std::size_t c = 0; c < cols; ++c) gyr[c] += gr[c];
                     }
                   }
                 });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.size());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xp[i] * f;
  auto xn = x.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}), [xn, f](TensorNode<T>& o) {
    T* gx = grad_of(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * f;
  });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1) {
    throw DimensionError("div_scalar: divisor must have one element, got " +
                         shape_str(s.shape()));
  }
  const T d = s.item();
  std::vector<T> out(x.size());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xp[i] / d;
  auto xn = x.node_ptr();
  auto sn = s.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x, &s}), [xn, sn](TensorNode<T>& o) {
    const T d = sn->data[0];
    const T* g = o.grad.data();
    const std::size_t n = o.grad.size();
    if (xn->requires_grad) {
      T* gx = grad_of(*xn);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / d;
    }
    if (sn->requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += g[i] * xn->data[i];
      grad_of(*sn)[0] -= acc / (d * d);
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node_ptr();
  return emit<T>(Shape{}, std::vector<T>{acc}, tracking<T>({&x}), [xn](TensorNode<T>& o) {
    T* gx = grad_of(*xn);
    const T g = o.grad[0];
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  auto xn = x.node_ptr();
  return emit<T>(Shape{}, std::vector<T>{acc * inv}, tracking<T>({&x}),
                 [xn, inv](TensorNode<T>& o) {
                   T* gx = grad_of(*xn);
                   const T g = o.grad[0] * inv;
                   for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
                 });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xp[i]);
  auto xn = x.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}), [xn](TensorNode<T>& o) {
    T* gx = grad_of(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] / xn->data[i];
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xp[i]);
  auto xn = x.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}), [xn](TensorNode<T>& o) {
    T* gx = grad_of(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * o.data[i];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.size());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * xp[i] * (T(1) + std::erf(xp[i] * kInvSqrt2));
  }
  auto xn = x.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}), [xn](TensorNode<T>& o) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    T* gx = grad_of(*xn);
    const T* xp = xn->data.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T v = xp[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      gx[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T* yr = out.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  auto xn = x.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}),
                 [xn, rows, cols](TensorNode<T>& o) {
                   T* gx = grad_of(*xn);
                   const bool broken = testing::broken_softmax_backward();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* y = o.data.data() + r * cols;
                     const T* g = o.grad.data() + r * cols;
                     T dot = 0;
                     if (!broken) {
                       for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                     }
                     for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
                   }
                 });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  require_matrix(x, "log_softmax_rows");
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T* yr = out.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
  auto xn = x.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}),
                 [xn, rows, cols](TensorNode<T>& o) {
                   T* gx = grad_of(*xn);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* y = o.data.data() + r * cols;
                     const T* g = o.grad.data() + r * cols;
                     T gsum = 0;
                     for (std::size_t c = 0; c < cols; ++c) gsum += g[c];
                     for (std::size_t c = 0; c < cols; ++c) {
                       gx[r * cols + c] += g[c] - std::exp(y[c]) * gsum;
                     }
                   }
                 });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match input " +
                         shape_str(x.shape()));
  }
  auto normalized = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.size());
  const T* gp = gain.ptr();
  const T* bp = bias.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(cols);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = rstd;
    for (std::size_t c = 0; c < cols; ++c) {
      const T xh = (xr[c] - mu) * rstd;
      (*normalized)[r * cols + c] = xh;
      out[r * cols + c] = xh * gp[c] + bp[c];
    }
  }
  auto xn = x.node_ptr();
  auto gn = gain.node_ptr();
  auto bn = bias.node_ptr();
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x, &gain, &bias}),
                 [xn, gn, bn, normalized, inv_std, rows, cols](TensorNode<T>& o) {
                   const T* g = o.grad.data();
                   const T* xh = normalized->data();
                   if (bn->requires_grad) {
                     T* gb = grad_of(*bn);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                   }
                   if (gn->requires_grad) {
                     T* gg = grad_of(*gn);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c)
                         gg[c] += g[r * cols + c] * xh[r * cols + c];
                   }
                   if (xn->requires_grad) {
                     T* gx = grad_of(*xn);
                     const T* gain = gn->data.data();
                     const T inv_n = T(1) / static_cast<T>(cols);
                     for (std::size_t r = 0; r < rows; ++r) {
                       T mean_g = 0, mean_gx = 0;
                       for (std::size_t c = 0; c < cols; ++c) {
                         const T gh = g[r * cols + c] * gain[c];
                         mean_g += gh;
                         mean_gx += gh * xh[r * cols + c];
                       }
                       mean_g *= inv_n;
                       mean_gx *= inv_n;
                       const T rstd = (*inv_std)[r];
                       for (std::size_t c = 0; c < cols; ++c) {
                         const T gh = g[r * cols + c] * gain[c];
                         gx[r * cols + c] += rstd * (gh - mean_g - xh[r * cols + c] * mean_gx);
                       }
                     }
                   }
                 });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps) {
  require_matrix(x, "l2_normalize");
  const std::size_t rows = x.rows(), cols = x.cols();
  auto norms = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T ss = 0;
    for (std::size_t c = 0; c < cols; ++c) ss += xr[c] * xr[c];
    const T n = std::sqrt(ss);
    (*norms)[r] = n;
    const T d = n + static_cast<T>(eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] / d;
  }
  auto xn = x.node_ptr();
  const T e = static_cast<T>(eps);
  return emit<T>(x.shape(), std::move(out), tracking<T>({&x}),
                 [xn, norms, rows, cols, e](TensorNode<T>& o) {
                   T* gx = grad_of(*xn);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* xr = xn->data.data() + r * cols;
                     const T* g = o.grad.data() + r * cols;
                     const T n = (*norms)[r];
                     const T d = n + e;
                     T dot = 0;
                     for (std::size_t c = 0; c < cols; ++c) dot += g[c] * xr[c];
                     const T coef = n > T(0) ? dot / (n * d * d) : T(0);
                     for (std::size_t c = 0; c < cols; ++c) {
                       gx[r * cols + c] += g[c] / d - xr[c] * coef;
                     }
                   }
                 });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  using testing::StopGradientFreeze;
  if (testing::g_freeze == StopGradientFreeze::kRecord) {
    testing::g_frozen.emplace_back(x.data().begin(), x.data().end());
  } else if (testing::g_freeze == StopGradientFreeze::kReplay) {
    if (testing::g_frozen_cursor >= testing::g_frozen.size() ||
        testing::g_frozen[testing::g_frozen_cursor].size() != x.size()) {
      throw ContractError("stop_gradient replay: call sequence differs from the recording");
    }
    const auto& v = testing::g_frozen[testing::g_frozen_cursor++];
    std::vector<T> data(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<T>(v[i]);
    return Tensor<T>(x.shape(), std::move(data), false);
  }
  return Tensor<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), false);
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "concat_rows");
  require_matrix(b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t ra = a.rows(), rb = b.rows(), cols = a.cols();
  std::vector<T> out;
  out.reserve((ra + rb) * cols);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return emit<T>(mat_shape(ra + rb, cols), std::move(out), tracking<T>({&a, &b}),
                 [an, bn, ra, rb, cols](TensorNode<T>& o) {
                   const T* g = o.grad.data();
                   if (an->requires_grad) {
                     T* ga = grad_of(*an);
                     for (std::size_t i = 0; i < ra * cols; ++i) ga[i] += g[i];
                   }
                   if (bn->requires_grad) {
                     T* gb = grad_of(*bn);
                     for (std::size_t i = 0; i < rb * cols; ++i) gb[i] += g[ra * cols + i];
                   }
                 });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  require_matrix(x, "gather_rows");
  const std::size_t rows = x.rows(), cols = x.cols();
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<T> out(idx->size() * cols);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t src = (*idx)[i];
    if (src >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(src) +
                           " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(x.ptr() + src * cols, cols, out.data() + i * cols);
  }
  auto xn = x.node_ptr();
  return emit<T>(mat_shape(idx->size(), cols), std::move(out), tracking<T>({&x}),
                 [xn, idx, cols](TensorNode<T>& o) {
                   T* gx = grad_of(*xn);
                   for (std::size_t i = 0; i < idx->size(); ++i) {
                     T* dst = gx + (*idx)[i] * cols;
                     const T* g = o.grad.data() + i * cols;
                     for (std::size_t c = 0; c < cols; ++c) dst[c] += g[c];
                   }
                 });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw VocabularyError("token id " + std::to_string(ids[i]) +
                            " outside vocabulary of size " + std::to_string(table.rows()));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, std::span<const std::size_t>(rows));
}

template <typename T>
Tensor<T> diagonal(const Tensor<T>& x) {
  require_matrix(x, "diagonal");
  const std::size_t n = x.rows();
  if (x.cols() != n) {
    throw DimensionError("diagonal: matrix is not square " + shape_str(x.shape()));
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.ptr()[i * n + i];
  auto xn = x.node_ptr();
  return emit<T>(mat_shape(1, n), std::move(out), tracking<T>({&x}), [xn, n](TensorNode<T>& o) {
    T* gx = grad_of(*xn);
    for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += o.grad[i];
  });
}

template <typename T>
AttentionResult<T> multi_head_attention(const Tensor<T>& qkv, const AttentionShape& shape) {
  require_matrix(qkv, "multi_head_attention");
  const std::size_t B = shape.batch, L = shape.seq, H = shape.heads;
  if (qkv.rows() != B * L || qkv.cols() % 3 != 0 || (qkv.cols() / 3) % H != 0) {
    throw DimensionError("multi_head_attention: qkv " + shape_str(qkv.shape()) +
                         " incompatible with batch " + std::to_string(B) + ", seq " +
                         std::to_string(L) + ", heads " + std::to_string(H));
  }
  if (!shape.valid_lengths.empty() && shape.valid_lengths.size() != B) {
    throw DimensionError("multi_head_attention: valid_lengths size mismatch");
  }
  const std::size_t W = qkv.cols() / 3, dh = W / H;
  const auto Li = static_cast<Eigen::Index>(L), dhi = static_cast<Eigen::Index>(dh);
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(B * H * L * L);
  std::vector<T> out(B * L * W);
  const T* base = qkv.ptr();
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * W));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(W));

  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t valid = shape.valid_lengths.empty() ? L : shape.valid_lengths[b];
    if (valid == 0 || valid > L) {
      throw DimensionError("multi_head_attention: valid length out of range");
    }
    for (std::size_t h = 0; h < H; ++h) {
      const T* q = base + b * L * 3 * W + h * dh;
      CStrided<T> Q(q, Li, dhi, in_stride);
      CStrided<T> K(q + W, Li, dhi, in_stride);
      CStrided<T> V(q + 2 * W, Li, dhi, in_stride);
      MMap<T> P(probs->data() + (b * H + h) * L * L, Li, Li);
      P.noalias() = Q * K.transpose();
      for (std::size_t i = 0; i < L; ++i) {
        T* row = P.data() + i * L;
        const std::size_t limit = shape.causal ? std::min(valid, i + 1) : valid;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          row[j] *= scale_factor;
          mx = std::max(mx, row[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < limit; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < limit; ++j) row[j] /= z;
        for (std::size_t j = limit; j < L; ++j) row[j] = T(0);
      }
      MStrided<T>(out.data() + b * L * W + h * dh, Li, dhi, out_stride).noalias() = P * V;
    }
  }

  auto qn = qkv.node_ptr();
  Tensor<T> result = emit<T>(
      mat_shape(B * L, W), std::move(out), tracking<T>({&qkv}),
      [qn, probs, B, L, H, W, dh, scale_factor](TensorNode<T>& o) {
        const auto Li = static_cast<Eigen::Index>(L), dhi = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * W));
        const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(W));
        T* gbase = grad_of(*qn);
        const T* base = qn->data.data();
        RowMat<T> dP(Li, Li);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = b * L * 3 * W + h * dh;
            CStrided<T> Q(base + off, Li, dhi, in_stride);
            CStrided<T> K(base + off + W, Li, dhi, in_stride);
            CStrided<T> V(base + off + 2 * W, Li, dhi, in_stride);
            MStrided<T> dQ(gbase + off, Li, dhi, in_stride);
            MStrided<T> dK(gbase + off + W, Li, dhi, in_stride);
            MStrided<T> dV(gbase + off + 2 * W, Li, dhi, in_stride);
            CMap<T> P(probs->data() + (b * H + h) * L * L, Li, Li);
            CStrided<T> dO(o.grad.data() + b * L * W + h * dh, Li, dhi, out_stride);
            dV.noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            for (Eigen::Index i = 0; i < Li; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j < Li; ++j) dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j < Li; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale_factor;
            }
            dQ.noalias() += dP * K;
            dK.noalias() += dP.transpose() * Q;
          }
        }
      });
  return AttentionResult<T>{std::move(result), std::move(probs)};
}

#define SDCLIP_INSTANTIATE_OPS(T)                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> transpose(const Tensor<T>&);                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add_tiled(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> scale(const Tensor<T>&, double);                                    \
  template Tensor<T> div_scalar(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> sum(const Tensor<T>&);                                              \
  template Tensor<T> mean(const Tensor<T>&);                                             \
  template Tensor<T> log(const Tensor<T>&);                                              \
  template Tensor<T> exp(const Tensor<T>&);                                              \
  template Tensor<T> gelu(const Tensor<T>&);                                             \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                     \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                double);                                                 \
  template Tensor<T> l2_normalize(const Tensor<T>&, double);                             \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                    \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);        \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int32_t>);  \
  template Tensor<T> diagonal(const Tensor<T>&);                                         \
  template AttentionResult<T> multi_head_attention(const Tensor<T>&, const AttentionShape&);

SDCLIP_INSTANTIATE_OPS(float)
SDCLIP_INSTANTIATE_OPS(double)

#undef SDCLIP_INSTANTIATE_OPS

}  // namespace sdclip
