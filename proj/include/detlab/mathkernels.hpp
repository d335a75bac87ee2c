#pragma once

// Elementwise transcendental loops, compiled in their own translation unit
// with vector-math codegen. Inputs are finite in every caller; NaN-sensitive
// code paths stay outside this unit.

#include <cstddef>

namespace detlab::detail {

template <typename T>
void vec_exp(const T* x, T* y, size_t n);

template <typename T>
void vec_sigmoid(const T* x, T* y, size_t n);

template <typename T>
void vec_silu(const T* x, T* y, size_t n);

// grad_accum[i] += grad_out[i] * d silu(x[i]) / dx
template <typename T>
void vec_silu_grad(const T* x, const T* grad_out, T* grad_accum, size_t n);

// grad_accum[i] += grad_out[i] * y[i] * (1 - y[i]) with y = sigmoid(x)
template <typename T>
void vec_sigmoid_grad(const T* y, const T* grad_out, T* grad_accum, size_t n);

// C[M,N] += A[M,K] . B[K,N]
template <typename T>
void mm_acc(T* c, const T* a, const T* b, int m, int k, int n);

// C[M,K] += A[M,N] . B[K,N]^T (row-by-row dot products)
template <typename T>
void mm_abt_acc(T* c, const T* a, const T* b, int m, int n, int k);

// C[K,N] += A[M,K]^T . B[M,N]
template <typename T>
void mm_atb_acc(T* c, const T* a, const T* b, int m, int k, int n);

}  // namespace detlab::detail
