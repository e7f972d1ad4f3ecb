#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "cablab/model.hpp"
#include "cablab/tensor.hpp"

namespace cablab::quant {

// Signed symmetric range for weights, unsigned affine range for activations.
enum class QRange : std::uint8_t { int8_weights = 0, uint8_activations = 1 };

struct QuantParams {
    float scale = 1.0f;
    int zero_point = 0;
    QRange range = QRange::int8_weights;

    int qmin() const { return range == QRange::int8_weights ? -128 : 0; }
    int qmax() const { return range == QRange::int8_weights ? 127 : 255; }
};

struct QuantTensor {
    Shape shape;
    std::vector<std::int16_t> qdata;  // values within [qmin,qmax] of params.range
    QuantParams params;

    std::int64_t size() const { return static_cast<std::int64_t>(qdata.size()); }
};

// q = clamp(round(x/s) + z, qmin, qmax), rounding half away from zero.
QuantTensor quantize(const Tensor& x, const QuantParams& params);

// x = s * (q - z)
Tensor dequantize(const QuantTensor& q);

// Min-max rule: s = (max(X)-min(X)) / 256. Signed (weight) calibration pins
// z = 0; unsigned (activation) calibration sets z = clamp(round(-min/s), 0, 255).
// Degenerate all-equal tensors fall back to s = max|X|/128 (or s = 1 if all
// zero) with z = 0.
QuantParams calibrate_minmax(const Tensor& x, bool signed_range);
QuantParams calibrate_minmax(const float* data, std::size_t n, bool signed_range);

// dequantize(quantize(x)) with the same params; idempotent.
Tensor fake_quant(const Tensor& x, const QuantParams& params);

// Exact integer bracket of the quantized product: for B(m,k) and C(k,n),
// bracket(i,j) = sum_l (B_q[i,l]-z_B)*(C_q[l,j]-z_C), expanded as
// B_q*C_q - z_B*colsum(C_q) - z_C*rowsum(B_q) + k*z_B*z_C and accumulated in
// 32-bit integers. Inner dimension is capped at 2^15 so the accumulator
// cannot overflow.
std::vector<std::int32_t> quantized_matmul_bracket(const QuantTensor& b, const QuantTensor& c);

// Full requantizing matmul: A_q = clamp(round((s_B*s_C/s_A)*bracket) + z_A).
// `bias` (length n) is folded into the accumulator as round(bias/(s_B*s_C)).
QuantTensor quantized_matmul(const QuantTensor& b, const QuantTensor& c, const QuantParams& out_params,
                             const std::vector<float>* bias = nullptr);

struct LayerQuant {
    QuantParams weight;  // signed, z = 0
    QuantParams input;   // unsigned affine
    QuantParams output;  // unsigned affine, supplies s_A/z_A for requantization
};

// Quantized execution of a trained model: selected layers run through the
// integer matmul (conv lowered via im2col), everything else stays FP32.
struct QuantModelView {
    const Model* model = nullptr;
    std::map<int, LayerQuant> layers;
    std::set<int> selection;

    Tensor forward(const Tensor& batch) const;

    // Training-time compressed view: weight-only fake quantization on the
    // selected layers (activations untouched), gradients via STE.
    ViewTransforms weight_fake_quant() const;
};

// Runs the calibration images through the FP32 model recording min/max of
// every selected layer's input and output, then applies the min-max rule.
std::map<int, LayerQuant> calibrate_activations(const Model& m, const Tensor& calib_images,
                                                const std::set<int>& selection);

QuantModelView quantize_model(const Model& m, const Tensor& calib_images, const std::set<int>& selection);

// Weight-only QAT transforms for attack training: per selected layer, derive
// signed min-max params from the current weights and fake-quantize them.
ViewTransforms weight_fq_view(const Model& m, const std::set<int>& selection);

std::set<int> all_param_layers(const Model& m);
std::set<int> last_param_layers(const Model& m, int count);

}  // namespace cablab::quant
