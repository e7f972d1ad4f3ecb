#include "cablab/kernels.hpp"

#include <stdexcept>

namespace cablab {

void matmul_accum(const float* a, const float* b, float* out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        float* orow = out + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const float av = arow[l];
            if (av == 0.0f) continue;
            const float* brow = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

ConvGeom conv_geometry(const Shape& input, int out_ch, int kernel, int stride, int padding) {
    if (input.size() != 4) {
        throw std::invalid_argument("conv2d input must be (N,C,H,W), got " + shape_str(input));
    }
    if (stride < 1 || padding < 0 || kernel < 1) {
        throw std::invalid_argument("conv2d needs kernel>=1, stride>=1, padding>=0");
    }
    ConvGeom g;
    g.batch = input[0];
    g.in_ch = input[1];
    g.in_h = input[2];
    g.in_w = input[3];
    g.out_ch = out_ch;
    g.kernel = kernel;
    g.stride = stride;
    g.padding = padding;
    g.out_h = (g.in_h + 2 * padding - kernel) / stride + 1;
    g.out_w = (g.in_w + 2 * padding - kernel) / stride + 1;
    if (g.out_h <= 0 || g.out_w <= 0) {
        throw std::invalid_argument("conv2d output would be empty for input " + shape_str(input));
    }
    return g;
}

std::vector<float> im2col(const Tensor& x, const ConvGeom& g) {
    const int patch = g.patch();
    std::vector<float> cols(static_cast<std::size_t>(g.rows()) * patch, 0.0f);
    const int hw = g.in_h * g.in_w;
    for (int n = 0; n < g.batch; ++n) {
        const float* xn = x.data.data() + static_cast<std::size_t>(n) * g.in_ch * hw;
        for (int oh = 0; oh < g.out_h; ++oh) {
            for (int ow = 0; ow < g.out_w; ++ow) {
                float* row = cols.data() +
                             (static_cast<std::size_t>(n) * g.out_h * g.out_w +
                              static_cast<std::size_t>(oh) * g.out_w + ow) * patch;
                const int h0 = oh * g.stride - g.padding;
                const int w0 = ow * g.stride - g.padding;
                for (int c = 0; c < g.in_ch; ++c) {
                    const float* xc = xn + static_cast<std::size_t>(c) * hw;
                    float* rc = row + static_cast<std::size_t>(c) * g.kernel * g.kernel;
                    for (int kh = 0; kh < g.kernel; ++kh) {
                        const int h = h0 + kh;
                        if (h < 0 || h >= g.in_h) continue;
                        for (int kw = 0; kw < g.kernel; ++kw) {
                            const int w = w0 + kw;
                            if (w < 0 || w >= g.in_w) continue;
                            rc[kh * g.kernel + kw] = xc[h * g.in_w + w];
                        }
                    }
                }
            }
        }
    }
    return cols;
}

void col2im_accum(const std::vector<float>& cols, const ConvGeom& g, Tensor& dx) {
    const int patch = g.patch();
    const int hw = g.in_h * g.in_w;
    for (int n = 0; n < g.batch; ++n) {
        float* xn = dx.data.data() + static_cast<std::size_t>(n) * g.in_ch * hw;
        for (int oh = 0; oh < g.out_h; ++oh) {
            for (int ow = 0; ow < g.out_w; ++ow) {
                const float* row = cols.data() +
                                   (static_cast<std::size_t>(n) * g.out_h * g.out_w +
                                    static_cast<std::size_t>(oh) * g.out_w + ow) * patch;
                const int h0 = oh * g.stride - g.padding;
                const int w0 = ow * g.stride - g.padding;
                for (int c = 0; c < g.in_ch; ++c) {
                    float* xc = xn + static_cast<std::size_t>(c) * hw;
                    const float* rc = row + static_cast<std::size_t>(c) * g.kernel * g.kernel;
                    for (int kh = 0; kh < g.kernel; ++kh) {
                        const int h = h0 + kh;
                        if (h < 0 || h >= g.in_h) continue;
                        for (int kw = 0; kw < g.kernel; ++kw) {
                            const int w = w0 + kw;
                            if (w < 0 || w >= g.in_w) continue;
                            xc[h * g.in_w + w] += rc[kh * g.kernel + kw];
                        }
                    }
                }
            }
        }
    }
}

void rows_to_feature_map(const std::vector<float>& rows, const ConvGeom& g, float* out) {
    const int ohw = g.out_h * g.out_w;
    for (int n = 0; n < g.batch; ++n) {
        for (int p = 0; p < ohw; ++p) {
            const float* row = rows.data() + (static_cast<std::size_t>(n) * ohw + p) * g.out_ch;
            for (int o = 0; o < g.out_ch; ++o) {
                out[(static_cast<std::size_t>(n) * g.out_ch + o) * ohw + p] = row[o];
            }
        }
    }
}

void feature_map_to_rows(const float* fmap, const ConvGeom& g, std::vector<float>& rows) {
    const int ohw = g.out_h * g.out_w;
    rows.assign(static_cast<std::size_t>(g.rows()) * g.out_ch, 0.0f);
    for (int n = 0; n < g.batch; ++n) {
        for (int p = 0; p < ohw; ++p) {
            float* row = rows.data() + (static_cast<std::size_t>(n) * ohw + p) * g.out_ch;
            for (int o = 0; o < g.out_ch; ++o) {
                row[o] = fmap[(static_cast<std::size_t>(n) * g.out_ch + o) * ohw + p];
            }
        }
    }
}

}  // namespace cablab
