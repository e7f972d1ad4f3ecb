#pragma once

#include "cablab/tensor.hpp"

namespace cablab {

// out(m,n) += a(m,k) * b(k,n), all row-major contiguous.
void matmul_accum(const float* a, const float* b, float* out, int m, int k, int n);

// Geometry of a conv2d lowered to a single GEMM.
struct ConvGeom {
    int batch = 0, in_ch = 0, in_h = 0, in_w = 0;
    int out_ch = 0, kernel = 0, stride = 1, padding = 0;
    int out_h = 0, out_w = 0;

    int patch() const { return in_ch * kernel * kernel; }
    std::int64_t rows() const { return static_cast<std::int64_t>(batch) * out_h * out_w; }
};

ConvGeom conv_geometry(const Shape& input, int out_ch, int kernel, int stride, int padding);

// Unfolds x (N,C,H,W) into a (N*OH*OW, C*k*k) patch matrix. Padding reads as
// zero. col2im scatter-adds the patch-matrix gradient back into dx.
std::vector<float> im2col(const Tensor& x, const ConvGeom& g);
void col2im_accum(const std::vector<float>& cols, const ConvGeom& g, Tensor& dx);

// Reorders the GEMM result (N*OH*OW, O) into feature-map layout (N,O,OH,OW)
// and back (used for output gradients).
void rows_to_feature_map(const std::vector<float>& rows, const ConvGeom& g, float* out);
void feature_map_to_rows(const float* fmap, const ConvGeom& g, std::vector<float>& rows);

}  // namespace cablab
