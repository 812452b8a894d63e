#include "qrbsa/kernels.hpp"

#include <atomic>
#include <stdexcept>

namespace qrbsa::kernels {

bool avx2_supported() {
#if defined(QRBSA_HAVE_AVX2)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Backend detect() { return avx2_supported() ? Backend::Avx2 : Backend::Scalar; }

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{detect()};
  return slot;
}

}  // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (b == Backend::Avx2 && !avx2_supported())
    throw std::runtime_error("AVX2 backend requested but not supported on this CPU");
  backend_slot().store(b, std::memory_order_relaxed);
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "unknown";
}

#if defined(QRBSA_HAVE_AVX2)
#define QRBSA_DISPATCH(fn, ...)                                            \
  if (active_backend() == Backend::Avx2) return avx2::fn(__VA_ARGS__);     \
  return scalar::fn(__VA_ARGS__)
#else
#define QRBSA_DISPATCH(fn, ...) return scalar::fn(__VA_ARGS__)
#endif

template <typename T>
void add(std::size_t n, const T* a, const T* b, T* out) {
  QRBSA_DISPATCH(add, n, a, b, out);
}

template <typename T>
void sub(std::size_t n, const T* a, const T* b, T* out) {
  QRBSA_DISPATCH(sub, n, a, b, out);
}

template <typename T>
void mul(std::size_t n, const T* a, const T* b, T* out) {
  QRBSA_DISPATCH(mul, n, a, b, out);
}

template <typename T>
void mul_acc(std::size_t n, const T* a, const T* b, T* out) {
  QRBSA_DISPATCH(mul_acc, n, a, b, out);
}

template <typename T>
void scale(std::size_t n, T s, const T* x, T* out) {
  QRBSA_DISPATCH(scale, n, s, x, out);
}

template <typename T>
void axpy(std::size_t n, T a, const T* x, T* y) {
  QRBSA_DISPATCH(axpy, n, a, x, y);
}

template <typename T>
T dot(std::size_t n, const T* a, const T* b) {
  QRBSA_DISPATCH(dot, n, a, b);
}

template <typename T>
T sum(std::size_t n, const T* x) {
  QRBSA_DISPATCH(sum, n, x);
}

template <typename T>
void relu(std::size_t n, const T* x, T* out) {
  QRBSA_DISPATCH(relu, n, x, out);
}

template <typename T>
void relu_backward(std::size_t n, const T* x, const T* g, T* gx) {
  QRBSA_DISPATCH(relu_backward, n, x, g, gx);
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  QRBSA_DISPATCH(gemm_nn, m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  QRBSA_DISPATCH(gemm_nt, m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  QRBSA_DISPATCH(gemm_tn, m, n, k, a, b, c, accumulate);
}

#undef QRBSA_DISPATCH

#define QRBSA_INSTANTIATE_DISPATCH(T)                                                    \
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

QRBSA_INSTANTIATE_DISPATCH(float)
QRBSA_INSTANTIATE_DISPATCH(double)

#undef QRBSA_INSTANTIATE_DISPATCH

}  // namespace qrbsa::kernels
