#include "cablab/quant.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "cablab/kernels.hpp"
#include "cablab/qmath.hpp"

namespace cablab::quant {

namespace {
constexpr int kMaxInnerDim = 1 << 15;
}

QuantTensor quantize(const Tensor& x, const QuantParams& params) {
    if (params.scale <= 0.0f) {
        throw std::invalid_argument("quantize: scale must be positive");
    }
    check_finite(x, "quantize input");
    QuantTensor q;
    q.shape = x.shape;
    q.params = params;
    q.qdata.resize(x.data.size());
    const int qmin = params.qmin(), qmax = params.qmax();
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        q.qdata[i] = static_cast<std::int16_t>(quantize_value(x.data[i], params.scale, params.zero_point, qmin, qmax));
    }
    return q;
}

Tensor dequantize(const QuantTensor& q) {
    Tensor x;
    x.shape = q.shape;
    x.data.resize(q.qdata.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        x.data[i] = q.params.scale * static_cast<float>(q.qdata[i] - q.params.zero_point);
    }
    return x;
}

QuantParams calibrate_minmax(const float* data, std::size_t n, bool signed_range) {
    if (n == 0) {
        throw std::invalid_argument("calibrate_minmax: empty tensor");
    }
    float lo = data[0], hi = data[0];
    for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, data[i]);
        hi = std::max(hi, data[i]);
    }
    if (!std::isfinite(lo) || !std::isfinite(hi)) {
        throw std::invalid_argument("calibrate_minmax: non-finite input");
    }
    QuantParams p;
    p.range = signed_range ? QRange::int8_weights : QRange::uint8_activations;
    if (hi == lo) {
        // degenerate all-equal tensor
        const float a = std::fabs(hi);
        p.scale = a > 0.0f ? a / 128.0f : 1.0f;
        p.zero_point = 0;
        return p;
    }
    p.scale = (hi - lo) / 256.0f;
    if (signed_range) {
        p.zero_point = 0;
    } else {
        const int z = static_cast<int>(round_half_away(-lo / p.scale));
        p.zero_point = std::min(255, std::max(0, z));
    }
    return p;
}

QuantParams calibrate_minmax(const Tensor& x, bool signed_range) {
    return calibrate_minmax(x.data.data(), x.data.size(), signed_range);
}

Tensor fake_quant(const Tensor& x, const QuantParams& params) {
    if (params.scale <= 0.0f) {
        throw std::invalid_argument("fake_quant: scale must be positive");
    }
    Tensor y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    const int qmin = params.qmin(), qmax = params.qmax();
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        y.data[i] = fake_quant_value(x.data[i], params.scale, params.zero_point, qmin, qmax);
    }
    return y;
}

std::vector<std::int32_t> quantized_matmul_bracket(const QuantTensor& b, const QuantTensor& c) {
    if (b.shape.size() != 2 || c.shape.size() != 2 || b.shape[1] != c.shape[0]) {
        throw std::invalid_argument("quantized_matmul: inner dimensions mismatch");
    }
    const int m = b.shape[0], k = b.shape[1], n = c.shape[1];
    if (k > kMaxInnerDim) {
        throw std::invalid_argument("quantized_matmul: inner dimension exceeds 2^15, accumulator could overflow");
    }
    const std::int32_t zb = b.params.zero_point;
    const std::int32_t zc = c.params.zero_point;

    std::vector<std::int32_t> row_sum(static_cast<std::size_t>(m), 0);
    for (int i = 0; i < m; ++i) {
        std::int32_t s = 0;
        const std::int16_t* br = b.qdata.data() + static_cast<std::size_t>(i) * k;
        for (int l = 0; l < k; ++l) s += br[l];
        row_sum[static_cast<std::size_t>(i)] = s;
    }
    std::vector<std::int32_t> col_sum(static_cast<std::size_t>(n), 0);
    for (int l = 0; l < k; ++l) {
        const std::int16_t* cr = c.qdata.data() + static_cast<std::size_t>(l) * n;
        for (int j = 0; j < n; ++j) col_sum[static_cast<std::size_t>(j)] += cr[j];
    }

    std::vector<std::int32_t> acc(static_cast<std::size_t>(m) * n, 0);
    for (int i = 0; i < m; ++i) {
        const std::int16_t* br = b.qdata.data() + static_cast<std::size_t>(i) * k;
        std::int32_t* ar = acc.data() + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const std::int32_t bv = br[l];
            if (bv == 0) continue;
            const std::int16_t* cr = c.qdata.data() + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) ar[j] += bv * cr[j];
        }
    }
    const std::int32_t kzz = static_cast<std::int32_t>(k) * zb * zc;
    for (int i = 0; i < m; ++i) {
        std::int32_t* ar = acc.data() + static_cast<std::size_t>(i) * n;
        const std::int32_t rs = row_sum[static_cast<std::size_t>(i)];
        for (int j = 0; j < n; ++j) {
            ar[j] += kzz - zb * col_sum[static_cast<std::size_t>(j)] - zc * rs;
        }
    }
    return acc;
}

QuantTensor quantized_matmul(const QuantTensor& b, const QuantTensor& c, const QuantParams& out_params,
                             const std::vector<float>* bias) {
    if (out_params.scale <= 0.0f) {
        throw std::invalid_argument("quantized_matmul: output scale must be positive");
    }
    auto acc = quantized_matmul_bracket(b, c);
    const int m = b.shape[0], n = c.shape[1];
    if (bias) {
        if (static_cast<int>(bias->size()) != n) {
            throw std::invalid_argument("quantized_matmul: bias length mismatch");
        }
        const float inv = 1.0f / (b.params.scale * c.params.scale);
        for (int j = 0; j < n; ++j) {
            const std::int32_t bq = static_cast<std::int32_t>(round_half_away((*bias)[static_cast<std::size_t>(j)] * inv));
            for (int i = 0; i < m; ++i) {
                acc[static_cast<std::size_t>(i) * n + j] += bq;
            }
        }
    }
    const float multiplier = b.params.scale * c.params.scale / out_params.scale;
    QuantTensor out;
    out.shape = {m, n};
    out.params = out_params;
    out.qdata.resize(static_cast<std::size_t>(m) * n);
    const int qmin = out_params.qmin(), qmax = out_params.qmax();
    for (std::size_t i = 0; i < out.qdata.size(); ++i) {
        const float v = round_half_away(multiplier * static_cast<float>(acc[i])) +
                        static_cast<float>(out_params.zero_point);
        out.qdata[i] = static_cast<std::int16_t>(
            std::min(static_cast<float>(qmax), std::max(static_cast<float>(qmin), v)));
    }
    return out;
}

namespace {

struct MinMax {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    void absorb(const std::vector<float>& v) {
        for (float x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }
    QuantParams params() const {
        Tensor t;
        t.shape = {2};
        t.data = {lo, hi};
        return calibrate_minmax(t, /*signed_range=*/false);
    }
};

}  // namespace

std::map<int, LayerQuant> calibrate_activations(const Model& m, const Tensor& calib_images,
                                                const std::set<int>& selection) {
    if (calib_images.shape.empty() || calib_images.shape[0] < 1) {
        throw std::invalid_argument("calibrate_activations: empty calibration set");
    }
    std::map<int, MinMax> in_mm, out_mm;
    // One pass over the whole set; only the per-layer extrema matter, so the
    // result is insensitive to sample order.
    const int total = calib_images.shape[0];
    const int chunk = 256;
    Shape sample(calib_images.shape.begin() + 1, calib_images.shape.end());
    const std::int64_t sample_elems = numel(sample);
    for (int start = 0; start < total; start += chunk) {
        const int count = std::min(chunk, total - start);
        Shape bs = calib_images.shape;
        bs[0] = count;
        Tensor batch;
        batch.shape = bs;
        batch.data.assign(calib_images.data.begin() + static_cast<std::size_t>(start) * sample_elems,
                          calib_images.data.begin() + static_cast<std::size_t>(start + count) * sample_elems);
        // replicate the FP32 forward, capturing selected layer inputs/outputs
        Tensor cur = batch;
        for (std::size_t li = 0; li < m.layers.size(); ++li) {
            const Layer& l = m.layers[li];
            const bool watched = selection.count(static_cast<int>(li)) > 0 && l.has_params();
            if (watched) in_mm[static_cast<int>(li)].absorb(cur.data);
            Tensor next = apply_layer(l, cur);
            if (watched) out_mm[static_cast<int>(li)].absorb(next.data);
            cur = std::move(next);
        }
    }
    std::map<int, LayerQuant> out;
    for (int li : selection) {
        if (li < 0 || li >= static_cast<int>(m.layers.size()) || !m.layers[static_cast<std::size_t>(li)].has_params()) {
            throw std::invalid_argument("calibrate_activations: layer " + std::to_string(li) +
                                        " is not a parameterized layer");
        }
        LayerQuant lq;
        lq.weight = calibrate_minmax(m.layers[static_cast<std::size_t>(li)].weight, /*signed_range=*/true);
        lq.input = in_mm[li].params();
        lq.output = out_mm[li].params();
        out[li] = lq;
    }
    return out;
}

QuantModelView quantize_model(const Model& m, const Tensor& calib_images, const std::set<int>& selection) {
    QuantModelView view;
    view.model = &m;
    view.selection = selection;
    if (!selection.empty()) {
        view.layers = calibrate_activations(m, calib_images, selection);
    }
    return view;
}

Tensor QuantModelView::forward(const Tensor& batch) const {
    if (!model) {
        throw std::runtime_error("quant view has no model");
    }
    const Model& m = *model;
    if (selection.empty()) {
        return infer_logits(m, batch);
    }
    check_finite(batch, "quantized inference input");
    const int n = batch.shape[0];
    Tensor cur = batch;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const Layer& l = m.layers[li];
        const auto it = layers.find(static_cast<int>(li));
        const bool integer_path = it != layers.end() && l.has_params();
        switch (l.kind) {
            case LayerKind::dense: {
                if (!integer_path) {
                    cur = apply_layer(l, cur);
                    break;
                }
                const LayerQuant& lq = it->second;
                QuantTensor xq = quantize(cur, lq.input);
                // materialize W^T so the product is (N,in)x(in,out)
                Tensor wt({l.in_features, l.out_features});
                for (int o = 0; o < l.out_features; ++o) {
                    for (int c = 0; c < l.in_features; ++c) {
                        wt.data[static_cast<std::size_t>(c) * l.out_features + o] =
                            l.weight.data[static_cast<std::size_t>(o) * l.in_features + c];
                    }
                }
                QuantTensor wq = quantize(wt, lq.weight);
                QuantTensor yq = quantized_matmul(xq, wq, lq.output, &l.bias.data);
                cur = dequantize(yq);
                cur.shape = {n, l.out_features};
                break;
            }
            case LayerKind::conv2d: {
                if (!integer_path) {
                    cur = apply_layer(l, cur);
                    break;
                }
                const ConvGeom g = conv_geometry(cur.shape, l.out_channels, l.kernel, l.stride, l.padding);
                const LayerQuant& lq = it->second;
                Tensor cols;
                cols.shape = {static_cast<int>(g.rows()), g.patch()};
                cols.data = im2col(cur, g);
                QuantTensor xq = quantize(cols, lq.input);
                Tensor wt({g.patch(), l.out_channels});
                for (int o = 0; o < l.out_channels; ++o) {
                    for (int c = 0; c < g.patch(); ++c) {
                        wt.data[static_cast<std::size_t>(c) * l.out_channels + o] =
                            l.weight.data[static_cast<std::size_t>(o) * g.patch() + c];
                    }
                }
                QuantTensor wq = quantize(wt, lq.weight);
                QuantTensor yq = quantized_matmul(xq, wq, lq.output, &l.bias.data);
                Tensor rows = dequantize(yq);
                Tensor out({n, g.out_ch, g.out_h, g.out_w});
                rows_to_feature_map(rows.data, g, out.data.data());
                cur = std::move(out);
                break;
            }
            case LayerKind::relu: {
                for (auto& x : cur.data) x = x > 0.0f ? x : 0.0f;
                break;
            }
            case LayerKind::flatten: {
                cur.shape = {n, static_cast<int>(cur.size() / n)};
                break;
            }
        }
    }
    return cur;
}

ViewTransforms QuantModelView::weight_fake_quant() const {
    ViewTransforms vt;
    for (const auto& [li, lq] : layers) {
        LayerOverride ov;
        ov.fake_quant_weights = true;
        ov.fq_scale = lq.weight.scale;
        ov.fq_zero_point = lq.weight.zero_point;
        ov.fq_qmin = lq.weight.qmin();
        ov.fq_qmax = lq.weight.qmax();
        vt.overrides[li] = ov;
    }
    return vt;
}

ViewTransforms weight_fq_view(const Model& m, const std::set<int>& selection) {
    ViewTransforms vt;
    for (int li : selection) {
        if (li < 0 || li >= static_cast<int>(m.layers.size()) || !m.layers[static_cast<std::size_t>(li)].has_params()) {
            throw std::invalid_argument("weight_fq_view: layer " + std::to_string(li) + " has no weights");
        }
        const QuantParams p = calibrate_minmax(m.layers[static_cast<std::size_t>(li)].weight, /*signed_range=*/true);
        LayerOverride ov;
        ov.fake_quant_weights = true;
        ov.fq_scale = p.scale;
        ov.fq_zero_point = p.zero_point;
        ov.fq_qmin = p.qmin();
        ov.fq_qmax = p.qmax();
        vt.overrides[li] = ov;
    }
    return vt;
}

std::set<int> all_param_layers(const Model& m) {
    std::set<int> s;
    for (int li : m.param_layers()) s.insert(li);
    return s;
}

std::set<int> last_param_layers(const Model& m, int count) {
    std::set<int> s;
    const auto p = m.param_layers();
    for (int i = static_cast<int>(p.size()) - 1; i >= 0 && count > 0; --i, --count) {
        s.insert(p[static_cast<std::size_t>(i)]);
    }
    return s;
}

}  // namespace cablab::quant
