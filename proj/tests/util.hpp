#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "caflow/tensor.hpp"

namespace caflow::testutil {

inline Tensor random_tensor(Shape s, Rng& rng, float scale = 1.0f) {
    std::vector<float> d(std::size_t(s.numel()));
    for (auto& v : d) v = float(rng.normal()) * scale;
    return Tensor::from_data(s, std::move(d));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

// log|det| of a dense matrix via partial-pivot Gaussian elimination.
inline double log_abs_det(std::vector<std::vector<double>> m) {
    const std::size_t n = m.size();
    double ld = 0.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
        if (m[piv][col] == 0.0) return -1e30;
        if (piv != col) std::swap(m[piv], m[col]);
        ld += std::log(std::abs(m[col][col]));
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = m[r][col] / m[col][col];
            for (std::size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
        }
    }
    return ld;
}

// Finite-difference Jacobian log|det| of a vector-valued map at x.
inline double fd_jacobian_log_det(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, double eps = 1e-3) {
    NoGradGuard ng;
    const std::size_t n = x.data().size();
    std::vector<std::vector<double>> jac(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        auto dp = x.data();
        auto dm = x.data();
        dp[i] += float(eps);
        dm[i] -= float(eps);
        const Tensor yp = f(Tensor::from_data(x.shape(), std::move(dp)));
        const Tensor ym = f(Tensor::from_data(x.shape(), std::move(dm)));
        for (std::size_t r = 0; r < n; ++r)
            jac[r][i] = (double(yp.data()[r]) - double(ym.data()[r])) / (2.0 * eps);
    }
    return log_abs_det(std::move(jac));
}

}  // namespace caflow::testutil
