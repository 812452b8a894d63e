#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>

#include "qrbsa/kernels.hpp"
#include "qrbsa/rng.hpp"
#include "qrbsa/tensor.hpp"

// Differentiable tensor operations. Each op computes its value eagerly and,
// when grad mode is on and an input requires grad, records a backward step
// on the result node. Backward steps accumulate into parent grads.

namespace qrbsa::ops {

namespace detail {

using qrbsa::detail::TensorNode;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents,
                      std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool rg = false;
  if (grad_mode_enabled()) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_step = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
TensorNode<T>& parent(TensorNode<T>& self, std::size_t i) {
  return *self.parents[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                            " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  kernels::add(a.size(), a.values().data(), b.values().data(), out.data());
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [](auto& self) {
        for (int i = 0; i < 2; ++i) {
          auto& p = detail::parent(self, i);
          if (!p.requires_grad) continue;
          p.ensure_grad();
          kernels::axpy(self.grad.size(), T(1), self.grad.data(), p.grad.data());
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<T> out(a.size());
  kernels::sub(a.size(), a.values().data(), b.values().data(), out.data());
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [](auto& self) {
        auto& pa = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        if (pa.requires_grad) {
          pa.ensure_grad();
          kernels::axpy(self.grad.size(), T(1), self.grad.data(), pa.grad.data());
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          kernels::axpy(self.grad.size(), T(-1), self.grad.data(), pb.grad.data());
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> out(a.size());
  kernels::mul(a.size(), a.values().data(), b.values().data(), out.data());
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [](auto& self) {
        auto& pa = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        if (pa.requires_grad) {
          pa.ensure_grad();
          kernels::mul_acc(self.grad.size(), self.grad.data(), pb.value.data(),
                           pa.grad.data());
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          kernels::mul_acc(self.grad.size(), self.grad.data(), pa.value.data(),
                           pb.grad.data());
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  kernels::scale(a.size(), s, a.values().data(), out.data());
  return detail::make_result<T>(
      a.shape(), std::move(out), {a}, [s](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        kernels::axpy(self.grad.size(), s, self.grad.data(), p.grad.data());
      });
}

// x: [N,C,H,W], bias: [C]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::check(x.rank() == 4, "add_bias: input must be rank 4");
  detail::check(bias.rank() == 1 && bias.dim(0) == x.dim(1),
                "add_bias: bias length must equal channel count");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci) {
      T* row = out.data() + (ni * c + ci) * hw;
      const T bv = bias.values()[ci];
      for (std::size_t i = 0; i < hw; ++i) row[i] += bv;
    }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, bias}, [n, c, hw](auto& self) {
        auto& px = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        if (px.requires_grad) {
          px.ensure_grad();
          kernels::axpy(self.grad.size(), T(1), self.grad.data(), px.grad.data());
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci)
              pb.grad[ci] +=
                  kernels::sum(hw, self.grad.data() + (ni * c + ci) * hw);
        }
      });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  kernels::relu(x.size(), x.values().data(), out.data());
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        kernels::relu_backward(self.grad.size(), p.value.data(), self.grad.data(),
                               p.grad.data());
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // Exact form: x * Phi(x), Phi the standard normal CDF.
  std::vector<T> out(x.size());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x.values()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [inv_sqrt2](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T v = p.value[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
          p.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::check(axis < x.rank(), "softmax: axis out of range");
  const auto& shp = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shp[i];
  for (std::size_t i = axis + 1; i < shp.size(); ++i) inner *= shp[i];
  const std::size_t len = shp[axis];

  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = o * len * inner + c;
      T mx = in[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
      T total = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        const T e = std::exp(in[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] *= inv;
    }

  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [outer, inner, len](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* y = self.value.data();
        const T* g = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = o * len * inner + c;
            T dotgy = T(0);
            for (std::size_t l = 0; l < len; ++l)
              dotgy += g[base + l * inner] * y[base + l * inner];
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t i = base + l * inner;
              p.grad[i] += y[i] * (g[i] - dotgy);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// Batched matrix product. a: [B,m,k] (or [m,k]); b: [B,k,n], or [B,n,k] when
// transpose_b is set. Rank-2 inputs are treated as batch size 1.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::check(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3),
                "bmm: inputs must both be rank 2 or rank 3");
  const bool batched = a.rank() == 3;
  const std::size_t batch = batched ? a.dim(0) : 1;
  detail::check(!batched || b.dim(0) == batch, "bmm: batch size mismatch");
  const std::size_t m = a.dim(batched ? 1 : 0);
  const std::size_t k = a.dim(batched ? 2 : 1);
  const std::size_t bk = transpose_b ? b.dim(batched ? 2 : 1) : b.dim(batched ? 1 : 0);
  const std::size_t n = transpose_b ? b.dim(batched ? 1 : 0) : b.dim(batched ? 2 : 1);
  detail::check(bk == k, "bmm: inner dimensions do not match");

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* ap = a.values().data() + bi * m * k;
    const T* bp = b.values().data() + bi * n * k;
    T* cp = out.data() + bi * m * n;
    if (transpose_b)
      kernels::gemm_nt(m, n, k, ap, bp, cp, false);
    else
      kernels::gemm_nn(m, n, k, ap, bp, cp, false);
  }

  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {a, b},
      [batch, m, n, k, transpose_b](auto& self) {
        auto& pa = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* g = self.grad.data() + bi * m * n;
          const T* av = pa.value.data() + bi * m * k;
          const T* bv = pb.value.data() + bi * n * k;
          if (pa.requires_grad) {
            pa.ensure_grad();
            T* ga = pa.grad.data() + bi * m * k;
            if (transpose_b)
              kernels::gemm_nn(m, k, n, g, bv, ga, true);  // G * B
            else
              kernels::gemm_nt(m, k, n, g, bv, ga, true);  // G * B^T
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            T* gb = pb.grad.data() + bi * n * k;
            if (transpose_b)
              kernels::gemm_tn(n, k, m, g, av, gb, true);  // G^T * A
            else
              kernels::gemm_tn(k, n, m, av, g, gb, true);  // A^T * G
          }
        }
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return bmm(a, b, false);
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  detail::check(shape_size(new_shape) == x.size(),
                "reshape: element count mismatch for " + shape_str(new_shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return detail::make_result<T>(
      std::move(new_shape), std::move(out), {x}, [](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        kernels::axpy(self.grad.size(), T(1), self.grad.data(), p.grad.data());
      });
}

namespace detail {

// Calls fn(out_linear, in_linear) for every element of the permuted tensor.
template <typename Fn>
void permute_walk(const Shape& in_shape, const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t rank = in_shape.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;)
    in_strides[i - 1] = in_strides[i] * in_shape[i];
  // stride of output axis i in the input layout
  std::vector<std::size_t> map_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) map_strides[i] = in_strides[perm[i]];

  const std::size_t total = shape_size(in_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in_lin = 0;
  for (std::size_t out_lin = 0; out_lin < total; ++out_lin) {
    fn(out_lin, in_lin);
    for (std::size_t ax = rank; ax-- > 0;) {
      idx[ax]++;
      in_lin += map_strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      in_lin -= idx[ax] * map_strides[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm) {
  detail::check(perm.size() == x.rank(), "permute: permutation rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    detail::check(p < perm.size() && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(x.rank());
  for (std::size_t i = 0; i < x.rank(); ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  detail::permute_walk(x.shape(), perm,
                       [&](std::size_t o, std::size_t i) { out[o] = in[i]; });
  Shape in_shape = x.shape();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [in_shape, perm](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* g = self.grad.data();
        detail::permute_walk(in_shape, perm,
                             [&](std::size_t o, std::size_t i) { p.grad[i] += g[o]; });
      });
}

// x: [N,C,H,W] -> [N, c1-c0, H, W]
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  detail::check(x.rank() == 4, "slice_channels: input must be rank 4");
  detail::check(c0 < c1 && c1 <= x.dim(1), "slice_channels: invalid channel range");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t cs = c1 - c0;
  std::vector<T> out(n * cs * hw);
  for (std::size_t ni = 0; ni < n; ++ni)
    std::copy_n(x.values().data() + (ni * c + c0) * hw, cs * hw,
                out.data() + ni * cs * hw);
  return detail::make_result<T>(
      Shape{n, cs, x.dim(2), x.dim(3)}, std::move(out), {x},
      [n, c, c0, cs, hw](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t ni = 0; ni < n; ++ni)
          kernels::axpy(cs * hw, T(1), self.grad.data() + ni * cs * hw,
                        p.grad.data() + (ni * c + c0) * hw);
      });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM, grouped)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t c0,
            std::size_t cg, std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  const std::ptrdiff_t ip = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ci = 0; ci < cg; ++ci) {
    const T* img = x + (c0 + ci) * H * W;
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * stride + ki) - ip;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            std::fill_n(row + oh * wo, wo, T(0));
            continue;
          }
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - ip;
            row[oh * wo + ow] = (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W))
                                    ? img[ih * W + iw]
                                    : T(0);
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W,
                std::size_t c0, std::size_t cg, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
                T* gx) {
  const std::ptrdiff_t ip = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ci = 0; ci < cg; ++ci) {
    T* img = gx + (c0 + ci) * H * W;
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * stride + ki) - ip;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - ip;
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W))
              img[ih * W + iw] += row[oh * wo + ow];
          }
        }
      }
  }
}

}  // namespace detail

// Cross-correlation. x: [N,Cin,H,W], w: [Cout,Cin/groups,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride = 1,
                 std::size_t padding = 0, std::size_t groups = 1) {
  detail::check(x.rank() == 4 && w.rank() == 4, "conv2d: inputs must be rank 4");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::check(groups >= 1 && cin % groups == 0 && cout % groups == 0,
                "conv2d: groups must divide both channel counts");
  detail::check(w.dim(1) == cin / groups,
                "conv2d: kernel input channels must equal Cin/groups");
  detail::check(stride >= 1, "conv2d: stride must be positive");
  detail::check(h + 2 * padding >= kh && wdt + 2 * padding >= kw,
                "conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (wdt + 2 * padding - kw) / stride + 1;
  detail::check(ho >= 1 && wo >= 1, "conv2d: empty output");

  const std::size_t cg = cin / groups;
  const std::size_t cog = cout / groups;
  const std::size_t krows = cg * kh * kw;

  std::vector<T> out(n * cout * ho * wo);
  std::vector<T> col(krows * ho * wo);
  for (std::size_t ni = 0; ni < n; ++ni) {
    const T* xin = x.values().data() + ni * cin * h * wdt;
    for (std::size_t g = 0; g < groups; ++g) {
      detail::im2col(xin, cin, h, wdt, g * cg, cg, kh, kw, stride, padding, ho, wo,
                     col.data());
      kernels::gemm_nn(cog, ho * wo, krows, w.values().data() + g * cog * krows,
                       col.data(), out.data() + (ni * cout + g * cog) * ho * wo,
                       false);
    }
  }

  return detail::make_result<T>(
      Shape{n, cout, ho, wo}, std::move(out), {x, w},
      [n, cin, h, wdt, cout, kh, kw, stride, padding, groups, ho, wo](auto& self) {
        auto& px = detail::parent(self, 0);
        auto& pw = detail::parent(self, 1);
        const std::size_t cg = cin / groups;
        const std::size_t cog = cout / groups;
        const std::size_t krows = cg * kh * kw;
        std::vector<T> col(krows * ho * wo);
        std::vector<T> gcol;
        if (px.requires_grad) {
          px.ensure_grad();
          gcol.resize(krows * ho * wo);
        }
        if (pw.requires_grad) pw.ensure_grad();
        for (std::size_t ni = 0; ni < n; ++ni) {
          const T* xin = px.value.data() + ni * cin * h * wdt;
          for (std::size_t g = 0; g < groups; ++g) {
            const T* gout = self.grad.data() + (ni * cout + g * cog) * ho * wo;
            if (pw.requires_grad) {
              detail::im2col(xin, cin, h, wdt, g * cg, cg, kh, kw, stride, padding,
                             ho, wo, col.data());
              kernels::gemm_nt(cog, krows, ho * wo, gout, col.data(),
                               pw.grad.data() + g * cog * krows, true);
            }
            if (px.requires_grad) {
              kernels::gemm_tn(krows, ho * wo, cog,
                               pw.value.data() + g * cog * krows, gout, gcol.data(),
                               false);
              detail::col2im_add(gcol.data(), cin, h, wdt, g * cg, cg, kh, kw,
                                 stride, padding, ho, wo,
                                 px.grad.data() + ni * cin * h * wdt);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Quaternion-structured ops
// ---------------------------------------------------------------------------

namespace detail {

// Hamilton block pattern: row r, column c of each 4x4 block reads component
// idx[r][c] with sign sgn[r][c], i.e. rows [a,-b,-c,-d; b,a,-d,c; c,d,a,-b;
// d,-c,b,a] for components (a,b,c,d).
inline constexpr int kHamiltonIdx[4][4] = {
    {0, 1, 2, 3}, {1, 0, 3, 2}, {2, 3, 0, 1}, {3, 2, 1, 0}};
inline constexpr int kHamiltonSgn[4][4] = {
    {1, -1, -1, -1}, {1, 1, -1, 1}, {1, 1, 1, -1}, {1, -1, 1, 1}};

}  // namespace detail

// Expands four component arrays [Oq,Iq,kh,kw] into the real kernel
// [4*Oq,4*Iq,kh,kw] whose application is the channelwise Hamilton product.
template <typename T>
Tensor<T> hamilton_expand(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                          const Tensor<T>& d) {
  detail::check(a.rank() == 4, "hamilton_expand: components must be rank 4");
  detail::check(a.shape() == b.shape() && a.shape() == c.shape() &&
                    a.shape() == d.shape(),
                "hamilton_expand: component shapes must match");
  const std::size_t oq = a.dim(0), iq = a.dim(1), kpix = a.dim(2) * a.dim(3);
  const std::array<const T*, 4> comp = {a.values().data(), b.values().data(),
                                        c.values().data(), d.values().data()};
  std::vector<T> out(16 * oq * iq * kpix);
  for (std::size_t o = 0; o < oq; ++o)
    for (int r = 0; r < 4; ++r)
      for (std::size_t i = 0; i < iq; ++i)
        for (int cc = 0; cc < 4; ++cc) {
          const T* src = comp[detail::kHamiltonIdx[r][cc]] + (o * iq + i) * kpix;
          T* dst = out.data() + (((4 * o + r) * 4 * iq) + 4 * i + cc) * kpix;
          const T s = static_cast<T>(detail::kHamiltonSgn[r][cc]);
          for (std::size_t p = 0; p < kpix; ++p) dst[p] = s * src[p];
        }
  return detail::make_result<T>(
      Shape{4 * oq, 4 * iq, a.dim(2), a.dim(3)}, std::move(out), {a, b, c, d},
      [oq, iq, kpix](auto& self) {
        for (int t = 0; t < 4; ++t) {
          auto& p = detail::parent(self, t);
          if (!p.requires_grad) continue;
          p.ensure_grad();
        }
        for (std::size_t o = 0; o < oq; ++o)
          for (int r = 0; r < 4; ++r)
            for (std::size_t i = 0; i < iq; ++i)
              for (int cc = 0; cc < 4; ++cc) {
                auto& p = detail::parent(self, detail::kHamiltonIdx[r][cc]);
                if (!p.requires_grad) continue;
                const T* g =
                    self.grad.data() + (((4 * o + r) * 4 * iq) + 4 * i + cc) * kpix;
                T* dst = p.grad.data() + (o * iq + i) * kpix;
                const T s = static_cast<T>(detail::kHamiltonSgn[r][cc]);
                for (std::size_t px = 0; px < kpix; ++px) dst[px] += s * g[px];
              }
      });
}

// 1D sub-pixel rearrangement along the first spatial axis:
// out[n,c,h*r+s,w] = in[n,c*r+s,h,w].
template <typename T>
Tensor<T> pixel_shuffle_1d(const Tensor<T>& x, std::size_t r) {
  detail::check(x.rank() == 4, "pixel_shuffle_1d: input must be rank 4");
  detail::check(r >= 1 && x.dim(1) % r == 0,
                "pixel_shuffle_1d: channels not divisible by factor");
  const std::size_t n = x.dim(0), c = x.dim(1) / r, h = x.dim(2), w = x.dim(3);
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t s = 0; s < r; ++s)
        for (std::size_t hi = 0; hi < h; ++hi)
          std::copy_n(in + (((ni * c * r) + ci * r + s) * h + hi) * w, w,
                      out.data() + (((ni * c) + ci) * h * r + hi * r + s) * w);
  return detail::make_result<T>(
      Shape{n, c, h * r, w}, std::move(out), {x}, [n, c, r, h, w](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* g = self.grad.data();
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t s = 0; s < r; ++s)
              for (std::size_t hi = 0; hi < h; ++hi)
                kernels::axpy(w, T(1), g + (((ni * c) + ci) * h * r + hi * r + s) * w,
                              p.grad.data() +
                                  (((ni * c * r) + ci * r + s) * h + hi) * w);
      });
}

// ---------------------------------------------------------------------------
// Normalization ops
// ---------------------------------------------------------------------------

// Rows of the trailing axis scaled to unit L2 norm (norm computed with eps
// inside the square root, so the gradient is exact for the computed value).
template <typename T>
Tensor<T> l2_normalize_last(const Tensor<T>& x, T eps = T(1e-12)) {
  detail::check(x.rank() >= 1, "l2_normalize_last: input must have rank >= 1");
  const std::size_t len = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / len;
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t ri = 0; ri < rows; ++ri) {
    const T* xr = in + ri * len;
    const T r = std::sqrt(kernels::dot(len, xr, xr) + eps);
    kernels::scale(len, T(1) / r, xr, out.data() + ri * len);
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [rows, len, eps](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t ri = 0; ri < rows; ++ri) {
          const T* xr = p.value.data() + ri * len;
          const T* g = self.grad.data() + ri * len;
          const T r2 = kernels::dot(len, xr, xr) + eps;
          const T r = std::sqrt(r2);
          const T gdotx = kernels::dot(len, g, xr);
          T* gx = p.grad.data() + ri * len;
          const T c1 = T(1) / r;
          const T c2 = gdotx / (r2 * r);
          for (std::size_t i = 0; i < len; ++i) gx[i] += c1 * g[i] - c2 * xr[i];
        }
      });
}

// Per spatial location of [N,C,H,W]: divide by the standard deviation over
// all C values (mean is used for the variance but never subtracted).
template <typename T>
Tensor<T> channel_std_normalize(const Tensor<T>& x, T eps = T(1e-5)) {
  detail::check(x.rank() == 4, "channel_std_normalize: input must be rank 4");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = ni * c * hw + p;
      T mean = T(0), sq = T(0);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T v = in[base + ci * hw];
        mean += v;
        sq += v * v;
      }
      mean /= static_cast<T>(c);
      const T var = sq / static_cast<T>(c) - mean * mean;
      const T inv = T(1) / std::sqrt(std::max(var, T(0)) + eps);
      for (std::size_t ci = 0; ci < c; ++ci)
        out[base + ci * hw] = in[base + ci * hw] * inv;
    }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [n, c, hw, eps](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* in = p.value.data();
        const T* g = self.grad.data();
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t px = 0; px < hw; ++px) {
            const std::size_t base = ni * c * hw + px;
            T mean = T(0), sq = T(0), gdotx = T(0);
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T v = in[base + ci * hw];
              mean += v;
              sq += v * v;
              gdotx += g[base + ci * hw] * v;
            }
            mean /= static_cast<T>(c);
            const T var = std::max(sq / static_cast<T>(c) - mean * mean, T(0));
            const T s2 = var + eps;
            const T s = std::sqrt(s2);
            const T c3 = gdotx / (static_cast<T>(c) * s2 * s);
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T v = in[base + ci * hw];
              p.grad[base + ci * hw] += g[base + ci * hw] / s - c3 * (v - mean);
            }
          }
      });
}

// Learnable per-quaternion-channel scale: y[n,4j+m,...] = x * s[j].
template <typename T>
Tensor<T> mul_qchannel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  detail::check(x.rank() == 4 && x.dim(1) % 4 == 0,
                "mul_qchannel_scale: channels must be divisible by 4");
  detail::check(s.rank() == 1 && s.dim(0) == x.dim(1) / 4,
                "mul_qchannel_scale: scale length must be C/4");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      kernels::scale(hw, s.values()[ci / 4], in + (ni * c + ci) * hw,
                     out.data() + (ni * c + ci) * hw);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, s}, [n, c, hw](auto& self) {
        auto& px = detail::parent(self, 0);
        auto& ps = detail::parent(self, 1);
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci)
              kernels::axpy(hw, ps.value[ci / 4],
                            self.grad.data() + (ni * c + ci) * hw,
                            px.grad.data() + (ni * c + ci) * hw);
        }
        if (ps.requires_grad) {
          ps.ensure_grad();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci)
              ps.grad[ci / 4] += kernels::dot(
                  hw, self.grad.data() + (ni * c + ci) * hw,
                  px.value.data() + (ni * c + ci) * hw);
        }
      });
}

// y[n,h,...] = x[n,h,...] / alpha[h] for x of shape [N,heads,A,B].
template <typename T>
Tensor<T> div_by_head_param(const Tensor<T>& x, const Tensor<T>& alpha) {
  detail::check(x.rank() == 4, "div_by_head_param: input must be rank 4");
  detail::check(alpha.rank() == 1 && alpha.dim(0) == x.dim(1),
                "div_by_head_param: alpha length must equal head count");
  const std::size_t n = x.dim(0), heads = x.dim(1), inner = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t h = 0; h < heads; ++h)
      kernels::scale(inner, T(1) / alpha.values()[h],
                     x.values().data() + (ni * heads + h) * inner,
                     out.data() + (ni * heads + h) * inner);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, alpha}, [n, heads, inner](auto& self) {
        auto& px = detail::parent(self, 0);
        auto& pa = detail::parent(self, 1);
        for (std::size_t h = 0; h < heads; ++h) {
          const T a = pa.value[h];
          for (std::size_t ni = 0; ni < n; ++ni) {
            const T* g = self.grad.data() + (ni * heads + h) * inner;
            if (px.requires_grad) {
              px.ensure_grad();
              kernels::axpy(inner, T(1) / a, g,
                            px.grad.data() + (ni * heads + h) * inner);
            }
            if (pa.requires_grad) {
              pa.ensure_grad();
              pa.grad[h] -= kernels::dot(inner, g,
                                         px.value.data() + (ni * heads + h) * inner) /
                            (a * a);
            }
          }
        }
      });
}

// Per-pixel L2 norm over the channel axis: [N,C,H,W] -> [N,H,W].
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x) {
  detail::check(x.rank() == 4, "channel_norm: input must be rank 4");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * hw);
  const T* in = x.values().data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t p = 0; p < hw; ++p) {
      T sq = T(0);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T v = in[(ni * c + ci) * hw + p];
        sq += v * v;
      }
      out[ni * hw + p] = std::sqrt(sq);
    }
  return detail::make_result<T>(
      Shape{n, x.dim(2), x.dim(3)}, std::move(out), {x}, [n, c, hw](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* in = p.value.data();
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t px = 0; px < hw; ++px) {
            const T r = self.value[ni * hw + px];
            if (r <= T(0)) continue;  // subgradient 0 at the cone point
            const T gr = self.grad[ni * hw + px] / r;
            for (std::size_t ci = 0; ci < c; ++ci)
              p.grad[(ni * c + ci) * hw + px] += gr * in[(ni * c + ci) * hw + px];
          }
      });
}

// Per-pixel unit-quaternion projection with hemisphere fix: scales each pixel
// of [N,C,H,W] to unit norm over C and flips sign so channel 0 is >= 0. The
// sign is treated as a constant in the backward pass.
template <typename T>
Tensor<T> pixel_quat_normalize(const Tensor<T>& x, T eps = T(1e-24)) {
  detail::check(x.rank() == 4, "pixel_quat_normalize: input must be rank 4");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t p = 0; p < hw; ++p) {
      T sq = T(0);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T v = in[(ni * c + ci) * hw + p];
        sq += v * v;
      }
      const T r = std::sqrt(sq + eps);
      const T s = in[ni * c * hw + p] < T(0) ? T(-1) : T(1);
      const T f = s / r;
      for (std::size_t ci = 0; ci < c; ++ci)
        out[(ni * c + ci) * hw + p] = f * in[(ni * c + ci) * hw + p];
    }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [n, c, hw, eps](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* in = p.value.data();
        const T* g = self.grad.data();
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t px = 0; px < hw; ++px) {
            T sq = T(0), gdotx = T(0);
            for (std::size_t ci = 0; ci < c; ++ci) {
              const std::size_t i = (ni * c + ci) * hw + px;
              sq += in[i] * in[i];
              gdotx += g[i] * in[i];
            }
            const T r2 = sq + eps;
            const T r = std::sqrt(r2);
            const T s = in[ni * c * hw + px] < T(0) ? T(-1) : T(1);
            const T c3 = gdotx / (r2 * r);
            for (std::size_t ci = 0; ci < c; ++ci) {
              const std::size_t i = (ni * c + ci) * hw + px;
              p.grad[i] += s * (g[i] / r - c3 * in[i]);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Rotational distance map
// ---------------------------------------------------------------------------

// theta = 4*asin(d/2) for d <= threshold, continued linearly with the branch
// slope beyond it so the gradient stays bounded as d -> 2.
template <typename T>
Tensor<T> rotational_theta(const Tensor<T>& d, T threshold) {
  detail::check(threshold > T(0) && threshold < T(2),
                "rotational_theta: threshold must lie in (0,2)");
  const T theta_thr = T(4) * std::asin(threshold / T(2));
  const T slope_thr = T(2) / std::sqrt(T(1) - threshold * threshold / T(4));
  std::vector<T> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const T v = std::max(d.values()[i], T(0));
    out[i] = v <= threshold ? T(4) * std::asin(v / T(2))
                            : theta_thr + slope_thr * (v - threshold);
  }
  return detail::make_result<T>(
      d.shape(), std::move(out), {d}, [threshold, slope_thr](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T v = std::max(p.value[i], T(0));
          const T slope = v <= threshold
                              ? T(2) / std::sqrt(T(1) - v * v / T(4))
                              : slope_thr;
          p.grad[i] += self.grad[i] * slope;
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const T total = kernels::sum(x.size(), x.values().data());
  return detail::make_result<T>(
      Shape{1}, {total}, {x}, [](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0];
        for (auto& v : p.grad) v += g;
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::check(x.size() > 0, "mean: empty tensor");
  const T total = kernels::sum(x.size(), x.values().data());
  const T inv = T(1) / static_cast<T>(x.size());
  return detail::make_result<T>(
      Shape{1}, {total * inv}, {x}, [inv](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] * inv;
        for (auto& v : p.grad) v += g;
      });
}

// Population variance over all elements.
template <typename T>
Tensor<T> variance(const Tensor<T>& x) {
  detail::check(x.size() > 0, "variance: empty tensor");
  const T inv = T(1) / static_cast<T>(x.size());
  const T mu = kernels::sum(x.size(), x.values().data()) * inv;
  T acc = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = x.values()[i] - mu;
    acc += d * d;
  }
  return detail::make_result<T>(
      Shape{1}, {acc * inv}, {x}, [inv, mu](auto& self) {
        auto& p = detail::parent(self, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] * T(2) * inv;
        for (std::size_t i = 0; i < p.grad.size(); ++i)
          p.grad[i] += g * (p.value[i] - mu);
      });
}

// ---------------------------------------------------------------------------
// Leaf constructors
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> random_uniform(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
  std::vector<T> data(shape_size(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> random_gaussian(Shape shape, T stddev, Rng& rng, bool requires_grad = false) {
  std::vector<T> data(shape_size(shape));
  for (auto& v : data) v = static_cast<T>(rng.gaussian() * stddev);
  return Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace qrbsa::ops
