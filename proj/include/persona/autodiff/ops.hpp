/*
 * Copyright (c) 2026, the persona-moe contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when recording, attaches a closure that accumulates into the
// gradients of the parents that require one.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "persona/autodiff/tensor.hpp"

namespace persona::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Accumulator for reductions: float kernels sum in double.
template <class T>
using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;

template <class T>
Eigen::Map<RowMat<T>> mat(std::span<T> data, std::size_t r, std::size_t c) {
  return {data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <class T>
Eigen::Map<const RowMat<T>> cmat(std::span<const T> data, std::size_t r, std::size_t c) {
  return {data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

/// Matrix product accumulated in Acc precision and rounded once to T.
template <class X, class Y>
auto gemm(const X& x, const Y& y) {
  using T = typename X::Scalar;
  if constexpr (std::is_same_v<Acc<T>, T>) {
    return RowMat<T>(x * y);
  } else {
    return RowMat<T>((x.template cast<Acc<T>>() * y.template cast<Acc<T>>()).template cast<T>());
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatchError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()) + " differ");
  }
}

template <class T>
void require_rank_le2(const Tensor<T>& a, const char* op) {
  if (a.rank() > 2) throw ShapeMismatchError(std::string(op) + ": rank > 2 unsupported");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] x b[k,n]. A rank-1 `a` is treated as a single row and yields rank 1.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank_le2(a, "matmul");
  if (b.rank() != 2) throw ShapeMismatchError("matmul: right operand must be a matrix");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeMismatchError("matmul: inner dimensions " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::mat<T>(out, m, n).noalias() = detail::gemm(detail::cmat(a.value(), m, k), detail::cmat(b.value(), k, n));
  Shape shape = a.rank() == 1 ? Shape{n} : Shape{m, n};
  return detail::make_result<T>(std::move(shape), std::move(out), "matmul", {a, b},
                                [m, k, n](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  auto g = detail::cmat<T>(self.grad, m, n);
                                  if (pa.requires_grad) {
                                    detail::mat(pa.grad_buffer(), m, k).noalias() +=
                                        detail::gemm(g, detail::cmat<T>(pb.value, k, n).transpose());
                                  }
                                  if (pb.requires_grad) {
                                    detail::mat(pb.grad_buffer(), k, n).noalias() +=
                                        detail::gemm(detail::cmat<T>(pa.value, m, k).transpose(), g);
                                  }
                                });
}

/// a[m,k] x b[n,k]^T -> [m,n].
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank_le2(a, "matmul_nt");
  detail::require_rank_le2(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeMismatchError("matmul_nt: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  detail::mat<T>(out, m, n).noalias() =
      detail::gemm(detail::cmat(a.value(), m, k), detail::cmat(b.value(), n, k).transpose());
  return detail::make_result<T>(Shape{m, n}, std::move(out), "matmul_nt", {a, b},
                                [m, k, n](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  auto g = detail::cmat<T>(self.grad, m, n);
                                  if (pa.requires_grad) {
                                    detail::mat(pa.grad_buffer(), m, k).noalias() +=
                                        detail::gemm(g, detail::cmat<T>(pb.value, n, k));
                                  }
                                  if (pb.requires_grad) {
                                    detail::mat(pb.grad_buffer(), n, k).noalias() +=
                                        detail::gemm(g.transpose(), detail::cmat<T>(pa.value, m, k));
                                  }
                                });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeMismatchError("transpose: matrix expected");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  detail::mat<T>(out, n, m) = detail::cmat(a.value(), m, n).transpose();
  return detail::make_result<T>(Shape{n, m}, std::move(out), "transpose", {a},
                                [m, n](Node<T>& self) {
                                  detail::mat(self.parents[0]->grad_buffer(), m, n) +=
                                      detail::cmat<T>(self.grad, n, m).transpose();
                                });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

/// Sum of same-shaped tensors in list order.
template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InputError("add_n: empty list");
  for (const auto& x : xs) detail::require_same_shape(xs.front(), x, "add_n");
  std::vector<T> out(xs.front().numel(), T(0));
  for (const auto& x : xs) {
    auto v = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  return detail::make_result_n<T>(xs.front().shape(), std::move(out), "add_n", xs,
                                  [](Node<T>& self) {
                                    for (auto& p : self.parents) {
                                      if (!p->requires_grad) continue;
                                      auto g = p->grad_buffer();
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                    }
                                  });
}

/// x[m,n] + bias[n] broadcast over rows.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n) throw ShapeMismatchError("add_row: bias length mismatch");
  std::vector<T> out(x.value().begin(), x.value().end());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.value()[c];
  return detail::make_result<T>(x.shape(), std::move(out), "add_row", {x, bias},
                                [m, n](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (px.requires_grad) {
                                    auto g = px.grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (pb.requires_grad) {
                                    auto g = pb.grad_buffer();
                                    for (std::size_t r = 0; r < m; ++r)
                                      for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                                  }
                                });
}

/// Multiply by a constant.
template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a},
                                [factor](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
                                });
}

/// Multiply by a differentiable scalar tensor.
template <class T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeMismatchError("scale_by: scalar factor expected");
  const T f = s.value()[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * f;
  return detail::make_result<T>(a.shape(), std::move(out), "scale_by", {a, s}, [f](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.grad[i];
    }
    if (ps.requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  return detail::make_result<T>(a.shape(), std::move(out), "add_scalar", {a}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * a.value()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "square", {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * p.value[i] * self.grad[i];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
  return detail::make_result<T>(a.shape(), std::move(out), "relu", {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
  }
  return detail::make_result<T>(a.shape(), std::move(out), "gelu", {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = p.value[i];
      const T t = std::tanh(k * (x + c * x * x * x));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
      g[i] += d * self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  detail::Acc<T> acc = 0;
  for (T v : a.value()) acc += v;
  return detail::make_result<T>(Shape{}, {static_cast<T>(acc)}, "sum", {a}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (auto& x : g) x += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Σ_i weights[i] * a[i] with constant weights (masks, hand-built selectors).
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::vector<T> weights) {
  if (weights.size() != a.numel()) throw ShapeMismatchError("weighted_sum: weight count mismatch");
  detail::Acc<T> acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += static_cast<detail::Acc<T>>(weights[i]) * a.value()[i];
  return detail::make_result<T>(Shape{}, {static_cast<T>(acc)}, "weighted_sum", {a},
                                [w = std::move(weights)](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[i] * self.grad[0];
                                });
}

template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) throw ShapeMismatchError("dot: length mismatch");
  detail::Acc<T> acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<detail::Acc<T>>(a.value()[i]) * b.value()[i];
  return detail::make_result<T>(Shape{}, {static_cast<T>(acc)}, "dot", {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T g0 = self.grad[0];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pb.value[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pa.value[i];
    }
  });
}

/// Column-wise mean of x[m,n] -> [n].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<detail::Acc<T>> acc(n, 0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) acc[c] += x.value()[r * n + c];
  const T inv = T(1) / static_cast<T>(m);
  std::vector<T> out(n);
  for (std::size_t c = 0; c < n; ++c) out[c] = static_cast<T>(acc[c] / static_cast<detail::Acc<T>>(m));
  return detail::make_result<T>(Shape{n}, std::move(out), "mean_rows", {x}, [m, n, inv](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += inv * self.grad[c];
  });
}

/// Scalar view of one element.
template <class T>
Tensor<T> element(const Tensor<T>& a, std::size_t i) {
  if (i >= a.numel()) throw InputError("element: index out of range");
  return detail::make_result<T>(Shape{}, {a.value()[i]}, "element", {a}, [i](Node<T>& self) {
    self.parents[0]->grad_buffer()[i] += self.grad[0];
  });
}

/// Concatenate scalars or equal-length vectors into a vector / matrix.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InputError("stack: empty list");
  const std::size_t n = xs.front().numel();
  for (const auto& x : xs)
    if (x.numel() != n) throw ShapeMismatchError("stack: element sizes differ");
  std::vector<T> out;
  out.reserve(n * xs.size());
  for (const auto& x : xs) out.insert(out.end(), x.value().begin(), x.value().end());
  Shape shape = xs.front().rank() == 0 ? Shape{xs.size()} : Shape{xs.size(), n};
  return detail::make_result_n<T>(std::move(shape), std::move(out), "stack", xs, [n](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!self.parents[k]->requires_grad) continue;
      auto g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[k * n + i];
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeMismatchError("reshape: element count mismatch");
  std::vector<T> out(a.value().begin(), a.value().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {a}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  const std::size_t m = x.rows(), n = x.cols();
  if (x.rank() != 2 || start + count > m || count == 0) throw InputError("slice_rows: range out of bounds");
  std::vector<T> out(x.value().begin() + start * n, x.value().begin() + (start + count) * n);
  return detail::make_result<T>(Shape{count, n}, std::move(out), "slice_rows", {x},
                                [start, n](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * n + i] += self.grad[i];
                                });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  const std::size_t m = x.rows(), n = x.cols();
  if (x.rank() != 2 || start + count > n || count == 0) throw InputError("slice_cols: range out of bounds");
  std::vector<T> out(m * count);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = x.value()[r * n + start + c];
  return detail::make_result<T>(Shape{m, count}, std::move(out), "slice_cols", {x},
                                [m, n, start, count](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t r = 0; r < m; ++r)
                                    for (std::size_t c = 0; c < count; ++c)
                                      g[r * n + start + c] += self.grad[r * count + c];
                                });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InputError("concat_cols: empty list");
  const std::size_t m = xs.front().rows();
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != 2 || x.rows() != m) throw ShapeMismatchError("concat_cols: row counts differ");
    total += x.cols();
  }
  std::vector<T> out(m * total);
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.cols();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * total + offset + c] = x.value()[r * w + c];
    offset += w;
  }
  return detail::make_result_n<T>(Shape{m, total}, std::move(out), "concat_cols", xs,
                                  [m, total](Node<T>& self) {
                                    std::size_t off = 0;
                                    for (auto& p : self.parents) {
                                      const std::size_t w = p->shape[1];
                                      if (p->requires_grad) {
                                        auto g = p->grad_buffer();
                                        for (std::size_t r = 0; r < m; ++r)
                                          for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
                                      }
                                      off += w;
                                    }
                                  });
}

/// Row gather: table[V,d] at ids -> [T,d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::uint32_t> ids) {
  if (table.rank() != 2) throw ShapeMismatchError("embedding: table must be a matrix");
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= v) throw InputError("embedding: id " + std::to_string(ids[t]) + " >= vocab " + std::to_string(v));
    std::copy_n(table.value().begin() + ids[t] * d, d, out.begin() + t * d);
  }
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return detail::make_result<T>(Shape{ids.size(), d}, std::move(out), "embedding", {table},
                                [d, saved = std::move(saved)](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t t = 0; t < saved.size(); ++t)
                                    for (std::size_t c = 0; c < d; ++c) g[saved[t] * d + c] += self.grad[t * d + c];
                                });
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers

/// Row-wise layer normalization with affine gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) throw ShapeMismatchError("layer_norm: affine size mismatch");
  std::vector<T> out(m * n), xhat(m * n), rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    using A = detail::Acc<T>;
    const T* row = x.value().data() + r * n;
    A mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<A>(n);
    A var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<A>(n);
    const A rs = A(1) / std::sqrt(var + static_cast<A>(eps));
    rstd[r] = static_cast<T>(rs);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = static_cast<T>((row[c] - mu) * rs);
      out[r * n + c] = xhat[r * n + c] * gain.value()[c] + bias.value()[c];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                                [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pg = *self.parents[1];
                                  auto& pb = *self.parents[2];
                                  if (pg.requires_grad || pb.requires_grad) {
                                    for (std::size_t r = 0; r < m; ++r)
                                      for (std::size_t c = 0; c < n; ++c) {
                                        const T dy = self.grad[r * n + c];
                                        if (pg.requires_grad) pg.grad_buffer()[c] += dy * xhat[r * n + c];
                                        if (pb.requires_grad) pb.grad_buffer()[c] += dy;
                                      }
                                  }
                                  if (!px.requires_grad) return;
                                  auto g = px.grad_buffer();
                                  using A = detail::Acc<T>;
                                  std::vector<A> dxhat(n);
                                  for (std::size_t r = 0; r < m; ++r) {
                                    A mean_d = 0, mean_dx = 0;
                                    for (std::size_t c = 0; c < n; ++c) {
                                      dxhat[c] = static_cast<A>(self.grad[r * n + c]) * pg.value[c];
                                      mean_d += dxhat[c];
                                      mean_dx += dxhat[c] * xhat[r * n + c];
                                    }
                                    mean_d /= static_cast<A>(n);
                                    mean_dx /= static_cast<A>(n);
                                    for (std::size_t c = 0; c < n; ++c)
                                      g[r * n + c] +=
                                          static_cast<T>(rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx));
                                  }
                                });
}

/// Row-wise softmax. With `causal`, row i only covers columns <= i.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, bool causal = false) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t width = causal ? std::min(n, r + 1) : n;
    const T* row = x.value().data() + r * n;
    T mx = row[0];
    for (std::size_t c = 1; c < width; ++c) mx = std::max(mx, row[c]);
    detail::Acc<T> z = 0;
    for (std::size_t c = 0; c < width; ++c) {
      out[r * n + c] = std::exp(row[c] - mx);
      z += out[r * n + c];
    }
    for (std::size_t c = 0; c < width; ++c) out[r * n + c] = static_cast<T>(out[r * n + c] / z);
  }
  return detail::make_result<T>(x.shape(), out, "softmax_rows", {x}, [m, n, y = out](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r) {
      detail::Acc<T> s = 0;
      for (std::size_t c = 0; c < n; ++c) s += static_cast<detail::Acc<T>>(self.grad[r * n + c]) * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += static_cast<T>(y[r * n + c] * (self.grad[r * n + c] - s));
    }
  });
}

/// Divides each row by its Euclidean norm. A zero row is a degenerate input.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n), norms(m);
  for (std::size_t r = 0; r < m; ++r) {
    detail::Acc<T> s = 0;
    for (std::size_t c = 0; c < n; ++c) s += static_cast<detail::Acc<T>>(x.value()[r * n + c]) * x.value()[r * n + c];
    norms[r] = static_cast<T>(std::sqrt(s));
    if (!(norms[r] > T(0))) {
      throw DegenerateInputError("normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.value()[r * n + c] / norms[r];
  }
  return detail::make_result<T>(x.shape(), out, "normalize_rows", {x},
                                [m, n, y = out, norms = std::move(norms)](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t r = 0; r < m; ++r) {
                                    detail::Acc<T> proj = 0;
                                    for (std::size_t c = 0; c < n; ++c)
                                      proj += static_cast<detail::Acc<T>>(y[r * n + c]) * self.grad[r * n + c];
                                    for (std::size_t c = 0; c < n; ++c)
                                      g[r * n + c] += static_cast<T>((self.grad[r * n + c] - y[r * n + c] * proj) / norms[r]);
                                  }
                                });
}

}  // namespace persona::ad
