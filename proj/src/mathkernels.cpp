// Built with fast-math so the exp/sigmoid loops use the vector math library.

#include "detlab/mathkernels.hpp"

#include <cmath>

namespace detlab::detail {

template <typename T>
void vec_exp(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

template <typename T>
void vec_sigmoid(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <typename T>
void vec_silu(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
}

template <typename T>
void vec_silu_grad(const T* x, const T* grad_out, T* grad_accum, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        grad_accum[i] += grad_out[i] * s * (T(1) + x[i] * (T(1) - s));
    }
}

template <typename T>
void vec_sigmoid_grad(const T* y, const T* grad_out, T* grad_accum, size_t n) {
    for (size_t i = 0; i < n; ++i) grad_accum[i] += grad_out[i] * y[i] * (T(1) - y[i]);
}

template <typename T>
void mm_acc(T* c, const T* a, const T* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<size_t>(i) * n;
        const T* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void mm_abt_acc(T* c, const T* a, const T* b, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * n;
        T* crow = c + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T* brow = b + static_cast<size_t>(p) * n;
            T s = 0;
            for (int j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[p] += s;
        }
    }
}

template <typename T>
void mm_atb_acc(T* c, const T* a, const T* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        const T* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template void mm_acc<float>(float*, const float*, const float*, int, int, int);
template void mm_acc<double>(double*, const double*, const double*, int, int, int);
template void mm_abt_acc<float>(float*, const float*, const float*, int, int, int);
template void mm_abt_acc<double>(double*, const double*, const double*, int, int, int);
template void mm_atb_acc<float>(float*, const float*, const float*, int, int, int);
template void mm_atb_acc<double>(double*, const double*, const double*, int, int, int);

template void vec_exp<float>(const float*, float*, size_t);
template void vec_exp<double>(const double*, double*, size_t);
template void vec_sigmoid<float>(const float*, float*, size_t);
template void vec_sigmoid<double>(const double*, double*, size_t);
template void vec_silu<float>(const float*, float*, size_t);
template void vec_silu<double>(const double*, double*, size_t);
template void vec_silu_grad<float>(const float*, const float*, float*, size_t);
template void vec_silu_grad<double>(const double*, const double*, double*, size_t);
template void vec_sigmoid_grad<float>(const float*, const float*, float*, size_t);
template void vec_sigmoid_grad<double>(const double*, const double*, double*, size_t);

}  // namespace detlab::detail
