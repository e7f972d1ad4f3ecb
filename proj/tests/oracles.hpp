#pragma once

// Test-only oracles kept independent of the implementation paths they check:
// central finite differences for gradients, direct-loop convolution, the
// expanded integer sum for the quantized matmul bracket, pair enumeration for
// AUC, and a materialized small network for pruned views.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "cablab/tensor.hpp"

namespace oracles {

using cablab::Shape;
using cablab::Tensor;

// max over elements of |analytic-numeric| / max(1,|analytic|,|numeric|)
inline double fd_max_rel_err(Tensor& x, const std::function<float()>& loss_fn,
                             const std::vector<float>& analytic, float h = 1e-3f) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const float keep = x.data[i];
        x.data[i] = keep + h;
        const double up = loss_fn();
        x.data[i] = keep - h;
        const double dn = loss_fn();
        x.data[i] = keep;
        const double num = (up - dn) / (2.0 * h);
        const double ana = analytic[i];
        const double rel = std::fabs(ana - num) / std::max({1.0, std::fabs(ana), std::fabs(num)});
        worst = std::max(worst, rel);
    }
    return worst;
}

// Direct convolution, weight given as (O,C,KH,KW) flattened row-major.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int out_ch, int kernel,
                           int stride, int padding) {
    const int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int oh = (h + 2 * padding - kernel) / stride + 1;
    const int ow = (wd + 2 * padding - kernel) / stride + 1;
    Tensor y({n, out_ch, oh, ow});
    for (int ni = 0; ni < n; ++ni) {
        for (int o = 0; o < out_ch; ++o) {
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    double acc = bias.data[static_cast<std::size_t>(o)];
                    for (int ci = 0; ci < c; ++ci) {
                        for (int kh = 0; kh < kernel; ++kh) {
                            for (int kw = 0; kw < kernel; ++kw) {
                                const int hi = i * stride - padding + kh;
                                const int wi = j * stride - padding + kw;
                                if (hi < 0 || hi >= h || wi < 0 || wi >= wd) continue;
                                const float xv =
                                    x.data[((static_cast<std::size_t>(ni) * c + ci) * h + hi) * wd + wi];
                                const float wv =
                                    w.data[((static_cast<std::size_t>(o) * c + ci) * kernel + kh) * kernel + kw];
                                acc += static_cast<double>(xv) * wv;
                            }
                        }
                    }
                    y.data[((static_cast<std::size_t>(ni) * out_ch + o) * oh + i) * ow + j] =
                        static_cast<float>(acc);
                }
            }
        }
    }
    return y;
}

// Expanded direct sum of (B_q - z_B)(C_q - z_C) over the inner dimension.
inline std::vector<std::int64_t> direct_bracket(const std::vector<std::int16_t>& b, int zb,
                                                const std::vector<std::int16_t>& c, int zc, int m, int k, int n) {
    std::vector<std::int64_t> out(static_cast<std::size_t>(m) * n, 0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            std::int64_t acc = 0;
            for (int l = 0; l < k; ++l) {
                acc += static_cast<std::int64_t>(b[static_cast<std::size_t>(i) * k + l] - zb) *
                       (c[static_cast<std::size_t>(l) * n + j] - zc);
            }
            out[static_cast<std::size_t>(i) * n + j] = acc;
        }
    }
    return out;
}

// Central-difference check of every differentiable tape op, sampled away
// from relu kinks so the numeric quotient is meaningful. Returns the worst
// relative error across all ops and the given number of seeds.
double fd_check_all_ops(int seeds);

// AUC by exhaustive pair enumeration, ties worth 1/2.
inline double auc_by_pairs(const std::vector<double>& pos, const std::vector<double>& neg) {
    double wins = 0.0;
    for (double p : pos) {
        for (double q : neg) {
            if (p > q) wins += 1.0;
            else if (p == q) wins += 0.5;
        }
    }
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

}  // namespace oracles
