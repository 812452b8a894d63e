#include "qrbsa/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace qrbsa::kernels::scalar {

template <typename T>
void add(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void mul_acc(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

template <typename T>
void scale(std::size_t n, T s, const T* x, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = s * x[i];
}

template <typename T>
void axpy(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
T dot(std::size_t n, const T* a, const T* b) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum(std::size_t n, const T* x) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
void relu(std::size_t n, const T* x, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(std::size_t n, const T* x, const T* g, T* gx) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > T(0)) gx[i] += g[i];
  }
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate && m * n > 0) std::memset(c, 0, m * n * sizeof(T));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = a[i * k + kk];
      const T* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      const T* brow = b + j * k;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
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
  if (!accumulate && m * n > 0) std::memset(c, 0, m * n * sizeof(T));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* arow = a + kk * m;
    const T* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

#define QRBSA_INSTANTIATE_SCALAR(T)                                                      \
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

QRBSA_INSTANTIATE_SCALAR(float)
QRBSA_INSTANTIATE_SCALAR(double)

#undef QRBSA_INSTANTIATE_SCALAR

}  // namespace qrbsa::kernels::scalar
