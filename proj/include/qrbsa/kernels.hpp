#pragma once

#include <cstddef>
#include <string_view>

// Data-parallel inner loops behind the tensor engine. Every kernel exists in
// two equivalent forms: a portable scalar reference (kernels::scalar) and an
// AVX2/FMA variant (kernels::avx2) compiled only on x86-64. The top-level
// entry points dispatch to the best backend detected at startup; tests pin
// the backend explicitly and check the variants against each other.
//
// GEMM conventions are row-major:
//   gemm_nn: C[m,n] = A[m,k] * B[k,n]
//   gemm_nt: C[m,n] = A[m,k] * B[n,k]^T
//   gemm_tn: C[m,n] = A[k,m]^T * B[k,n]
// With accumulate=true the product is added onto C instead of overwriting.

namespace qrbsa::kernels {

enum class Backend { Scalar, Avx2 };

bool avx2_supported();
Backend active_backend();
void set_backend(Backend b);  // throws if the backend is unavailable
std::string_view backend_name(Backend b);

namespace scalar {

template <typename T> void add(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void sub(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void mul(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void mul_acc(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void scale(std::size_t n, T s, const T* x, T* out);
template <typename T> void axpy(std::size_t n, T a, const T* x, T* y);
template <typename T> T dot(std::size_t n, const T* a, const T* b);
template <typename T> T sum(std::size_t n, const T* x);
template <typename T> void relu(std::size_t n, const T* x, T* out);
template <typename T> void relu_backward(std::size_t n, const T* x, const T* g, T* gx);
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);

}  // namespace scalar

#if defined(QRBSA_HAVE_AVX2)
namespace avx2 {

template <typename T> void add(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void sub(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void mul(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void mul_acc(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void scale(std::size_t n, T s, const T* x, T* out);
template <typename T> void axpy(std::size_t n, T a, const T* x, T* y);
template <typename T> T dot(std::size_t n, const T* a, const T* b);
template <typename T> T sum(std::size_t n, const T* x);
template <typename T> void relu(std::size_t n, const T* x, T* out);
template <typename T> void relu_backward(std::size_t n, const T* x, const T* g, T* gx);
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);

}  // namespace avx2
#endif

// Dispatching entry points used by the tensor engine.
template <typename T> void add(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void sub(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void mul(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void mul_acc(std::size_t n, const T* a, const T* b, T* out);
template <typename T> void scale(std::size_t n, T s, const T* x, T* out);
template <typename T> void axpy(std::size_t n, T a, const T* x, T* y);
template <typename T> T dot(std::size_t n, const T* a, const T* b);
template <typename T> T sum(std::size_t n, const T* x);
template <typename T> void relu(std::size_t n, const T* x, T* out);
template <typename T> void relu_backward(std::size_t n, const T* x, const T* g, T* gx);
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);

}  // namespace qrbsa::kernels
