// AVX2/FMA variants of the inner-loop kernels. This translation unit is the
// only one compiled with -mavx2 -mfma; callers reach it through the runtime
// dispatch in kernels.cpp.

#include "qrbsa/kernels.hpp"

#if defined(QRBSA_HAVE_AVX2)

#include <immintrin.h>

#include <cstring>

namespace qrbsa::kernels::avx2 {

namespace {

// Minimal vector wrapper so float (8-lane) and double (4-lane) share loops.
template <typename T> struct Vec;

template <> struct Vec<float> {
  using reg = __m256;
  static constexpr std::size_t width = 8;
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg zero() { return _mm256_setzero_ps(); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
  static reg cmp_gt(reg a, reg b) { return _mm256_cmp_ps(a, b, _CMP_GT_OQ); }
  static reg blend_and(reg mask, reg v) { return _mm256_and_ps(mask, v); }
  static float reduce(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
  }
};

template <> struct Vec<double> {
  using reg = __m256d;
  static constexpr std::size_t width = 4;
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg zero() { return _mm256_setzero_pd(); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
  static reg cmp_gt(reg a, reg b) { return _mm256_cmp_pd(a, b, _CMP_GT_OQ); }
  static reg blend_and(reg mask, reg v) { return _mm256_and_pd(mask, v); }
  static double reduce(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d swapped = _mm_unpackhi_pd(lo, lo);
    lo = _mm_add_sd(lo, swapped);
    return _mm_cvtsd_f64(lo);
  }
};

}  // namespace

template <typename T>
void add(std::size_t n, const T* a, const T* b, T* out) {
  using V = Vec<T>;
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width)
    V::store(out + i, V::add(V::load(a + i), V::load(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub(std::size_t n, const T* a, const T* b, T* out) {
  using V = Vec<T>;
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width)
    V::store(out + i, V::sub(V::load(a + i), V::load(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul(std::size_t n, const T* a, const T* b, T* out) {
  using V = Vec<T>;
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width)
    V::store(out + i, V::mul(V::load(a + i), V::load(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void mul_acc(std::size_t n, const T* a, const T* b, T* out) {
  using V = Vec<T>;
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width)
    V::store(out + i, V::fmadd(V::load(a + i), V::load(b + i), V::load(out + i)));
  for (; i < n; ++i) out[i] += a[i] * b[i];
}

template <typename T>
void scale(std::size_t n, T s, const T* x, T* out) {
  using V = Vec<T>;
  const auto vs = V::set1(s);
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) V::store(out + i, V::mul(vs, V::load(x + i)));
  for (; i < n; ++i) out[i] = s * x[i];
}

template <typename T>
void axpy(std::size_t n, T a, const T* x, T* y) {
  using V = Vec<T>;
  const auto va = V::set1(a);
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width)
    V::store(y + i, V::fmadd(va, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
T dot(std::size_t n, const T* a, const T* b) {
  using V = Vec<T>;
  auto acc = V::zero();
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width)
    acc = V::fmadd(V::load(a + i), V::load(b + i), acc);
  T out = V::reduce(acc);
  for (; i < n; ++i) out += a[i] * b[i];
  return out;
}

template <typename T>
T sum(std::size_t n, const T* x) {
  using V = Vec<T>;
  auto acc = V::zero();
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) acc = V::add(acc, V::load(x + i));
  T out = V::reduce(acc);
  for (; i < n; ++i) out += x[i];
  return out;
}

template <typename T>
void relu(std::size_t n, const T* x, T* out) {
  using V = Vec<T>;
  const auto z = V::zero();
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) V::store(out + i, V::max(z, V::load(x + i)));
  for (; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(std::size_t n, const T* x, const T* g, T* gx) {
  using V = Vec<T>;
  const auto z = V::zero();
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) {
    auto mask = V::cmp_gt(V::load(x + i), z);
    auto pass = V::blend_and(mask, V::load(g + i));
    V::store(gx + i, V::add(V::load(gx + i), pass));
  }
  for (; i < n; ++i) {
    if (x[i] > T(0)) gx[i] += g[i];
  }
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  using V = Vec<T>;
  if (!accumulate && m * n > 0) std::memset(c, 0, m * n * sizeof(T));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = a[i * k + kk];
      const T* brow = b + kk * n;
      const auto va = V::set1(av);
      std::size_t j = 0;
      for (; j + V::width <= n; j += V::width)
        V::store(crow + j, V::fmadd(va, V::load(brow + j), V::load(crow + j)));
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T acc = dot(k, arow, b + j * k);
      if (accumulate)
        c[i * n + j] += acc;
      else
        c[i * n + j] = acc;
    }
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  using V = Vec<T>;
  if (!accumulate && m * n > 0) std::memset(c, 0, m * n * sizeof(T));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* arow = a + kk * m;
    const T* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      const auto va = V::set1(av);
      T* crow = c + i * n;
      std::size_t j = 0;
      for (; j + V::width <= n; j += V::width)
        V::store(crow + j, V::fmadd(va, V::load(brow + j), V::load(crow + j)));
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

#define QRBSA_INSTANTIATE_AVX2(T)                                                        \
  template void add<T>(std::size_t, const T*, const T*, T*);                             \
  template void sub<T>(std::size_t, const T*, const T*, T*);                             \
  template void mul<T>(std::size_t, const T*, const T*, T*);                             \
  template void mul_acc<T>(std::size_t, const T*, const T*, T*);                         \
  template void scale<T>(std::size_t, T, const T*, T*);                                  \
  template void axpy<T>(std::size_t, T, const T*, T*);                                   \
  template T dot<T>(std::size_t, const T*, const T*);                                    \
  template T sum<T>(std::size_t, const T*);                                              \
  template void relu<T>(std::size_t, const T*, T*);                                      \
  template void relu_backward<T>(std::size_t, const T*, const T*, T*);                   \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*,    \
                           T*, bool);                                                    \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*,    \
                           T*, bool);                                                    \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*,    \
                           T*, bool);

QRBSA_INSTANTIATE_AVX2(float)
QRBSA_INSTANTIATE_AVX2(double)

#undef QRBSA_INSTANTIATE_AVX2

}  // namespace qrbsa::kernels::avx2

#endif  // QRBSA_HAVE_AVX2
