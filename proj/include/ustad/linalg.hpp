#pragma once

// Small dense row-major matrices and the handful of kernels the encoder
// needs. Shapes here are tiny (F=8 feature tokens, L <= a few dozen events),
// so plain ikj loops are the right tool.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ustad::linalg {

template <class Real>
struct Mat {
    std::vector<Real> a;
    int rows = 0;
    int cols = 0;

    Mat() = default;
    Mat(int r, int c) : a(static_cast<std::size_t>(r) * c, Real(0)), rows(r), cols(c) {}

    void resize(int r, int c) {
        rows = r;
        cols = c;
        a.assign(static_cast<std::size_t>(r) * c, Real(0));
    }
    void zero() { std::fill(a.begin(), a.end(), Real(0)); }

    Real* row(int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
    const Real* row(int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }
    Real& at(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    Real at(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
    std::size_t size() const { return a.size(); }
};

// C[m x n] (+)= A[m x k] * B[k x n]
template <class Real>
void matmul(const Real* A, const Real* B, Real* C, int m, int k, int n, bool accumulate = false) {
    if (!accumulate) std::fill(C, C + static_cast<std::size_t>(m) * n, Real(0));
    for (int i = 0; i < m; ++i) {
        const Real* ai = A + static_cast<std::size_t>(i) * k;
        Real* ci = C + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const Real aip = ai[p];
            if (aip == Real(0)) continue;
            const Real* bp = B + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T   (rows of B are the right factors)
template <class Real>
void matmul_nt(const Real* A, const Real* B, Real* C, int m, int k, int n, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        const Real* ai = A + static_cast<std::size_t>(i) * k;
        Real* ci = C + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const Real* bj = B + static_cast<std::size_t>(j) * k;
            Real s = accumulate ? ci[j] : Real(0);
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = s;
        }
    }
}

// C[k x n] (+)= A[m x k]^T * B[m x n]
template <class Real>
void matmul_tn(const Real* A, const Real* B, Real* C, int m, int k, int n, bool accumulate = false) {
    if (!accumulate) std::fill(C, C + static_cast<std::size_t>(k) * n, Real(0));
    for (int p = 0; p < m; ++p) {
        const Real* ap = A + static_cast<std::size_t>(p) * k;
        const Real* bp = B + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < k; ++i) {
            const Real api = ap[i];
            if (api == Real(0)) continue;
            Real* ci = C + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

template <class Real>
void add_row_bias(Real* X, const Real* b, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        Real* xi = X + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) xi[j] += b[j];
    }
}

/// Neumaier-compensated sum. Attention sums over the feature axis use this so
/// that reordering rows cannot change the rounded result (the permutation
/// equivariance contract is exact, not approximate).
template <class Real>
Real neumaier_sum(const Real* x, int n, int stride = 1) {
    Real s = Real(0);
    Real comp = Real(0);
    for (int i = 0; i < n; ++i) {
        const Real v = x[static_cast<std::size_t>(i) * stride];
        const Real t = s + v;
        if (std::abs(s) >= std::abs(v))
            comp += (s - t) + v;
        else
            comp += (v - t) + s;
        s = t;
    }
    return s + comp;
}

template <class Real>
Real gelu(Real x) {
    return Real(0.5) * x * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
}

template <class Real>
Real gelu_grad(Real x) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014326779);
    return cdf + x * pdf;
}

template <class Real>
Real logsumexp(const Real* x, int n) {
    Real m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    Real s = Real(0);
    for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
    return m + std::log(s);
}

template <class Real>
void softmax(const Real* x, Real* out, int n) {
    Real m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    Real s = Real(0);
    for (int i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - m);
        s += out[i];
    }
    for (int i = 0; i < n; ++i) out[i] /= s;
}

}  // namespace ustad::linalg
