#include "cablab/model.hpp"

#include <cmath>
#include <stdexcept>

#include "cablab/kernels.hpp"
#include "cablab/qmath.hpp"

namespace cablab {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

Layer Layer::dense(int in, int out) {
    if (in <= 0 || out <= 0) {
        throw std::invalid_argument("dense layer needs positive in/out sizes");
    }
    Layer l;
    l.kind = LayerKind::dense;
    l.in_features = in;
    l.out_features = out;
    l.weight = Tensor({out, in});
    l.bias = Tensor({out});
    return l;
}

Layer Layer::conv2d(int in_ch, int out_ch, int kernel, int stride, int padding) {
    if (in_ch <= 0 || out_ch <= 0 || kernel <= 0 || stride <= 0 || padding < 0) {
        throw std::invalid_argument("conv2d layer hyperparameters out of range");
    }
    Layer l;
    l.kind = LayerKind::conv2d;
    l.in_channels = in_ch;
    l.out_channels = out_ch;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.weight = Tensor({out_ch, in_ch * kernel * kernel});
    l.bias = Tensor({out_ch});
    return l;
}

Layer Layer::relu() {
    Layer l;
    l.kind = LayerKind::relu;
    return l;
}

Layer Layer::flatten() {
    Layer l;
    l.kind = LayerKind::flatten;
    return l;
}

int Layer::num_filters() const {
    if (kind == LayerKind::dense) return out_features;
    if (kind == LayerKind::conv2d) return out_channels;
    return 0;
}

int Layer::params_per_filter() const {
    if (kind == LayerKind::dense) return in_features + 1;
    if (kind == LayerKind::conv2d) return in_channels * kernel * kernel + 1;
    return 0;
}

const LayerOverride* ViewTransforms::find(int layer) const {
    auto it = overrides.find(layer);
    return it == overrides.end() ? nullptr : &it->second;
}

void Model::init_params(Rng& rng) {
    for (auto& l : layers) {
        if (!l.has_params()) continue;
        int fan_in = 0, fan_out = 0;
        if (l.kind == LayerKind::dense) {
            fan_in = l.in_features;
            fan_out = l.out_features;
        } else {
            fan_in = l.in_channels * l.kernel * l.kernel;
            fan_out = l.out_channels * l.kernel * l.kernel;
        }
        const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
        rng.fill_uniform(l.weight, -limit, limit);
        std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0f);
    }
}

std::vector<Shape> Model::infer_shapes() const {
    if (input_shape.empty()) {
        throw std::invalid_argument("model has no input shape");
    }
    std::vector<Shape> out;
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
        switch (l.kind) {
            case LayerKind::dense: {
                if (cur.size() != 1 || cur[0] != l.in_features) {
                    throw std::invalid_argument(where + " expects " + std::to_string(l.in_features) +
                                                " features, got input shape " + shape_str(cur));
                }
                cur = {l.out_features};
                break;
            }
            case LayerKind::conv2d: {
                if (cur.size() != 3 || cur[0] != l.in_channels) {
                    throw std::invalid_argument(where + " expects (C=" + std::to_string(l.in_channels) +
                                                ",H,W), got input shape " + shape_str(cur));
                }
                const ConvGeom g =
                    conv_geometry({1, cur[0], cur[1], cur[2]}, l.out_channels, l.kernel, l.stride, l.padding);
                cur = {l.out_channels, g.out_h, g.out_w};
                break;
            }
            case LayerKind::relu:
                break;
            case LayerKind::flatten: {
                cur = {static_cast<int>(numel(cur))};
                break;
            }
        }
        out.push_back(cur);
    }
    return out;
}

void Model::validate() const {
    const auto shapes = infer_shapes();
    if (shapes.empty()) {
        throw std::invalid_argument("model has no layers");
    }
    const Shape& last = shapes.back();
    if (last.size() != 1 || last[0] != num_classes) {
        throw std::invalid_argument("final layer output shape " + shape_str(last) + " != num_classes " +
                                    std::to_string(num_classes));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        if (!l.has_params()) continue;
        const std::int64_t expect_w =
            l.kind == LayerKind::dense
                ? static_cast<std::int64_t>(l.out_features) * l.in_features
                : static_cast<std::int64_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel;
        if (l.weight.size() != expect_w || l.bias.size() != l.num_filters()) {
            throw std::invalid_argument("layer " + std::to_string(i) + " parameter shapes inconsistent");
        }
    }
}

std::vector<int> Model::param_layers() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].has_params()) out.push_back(static_cast<int>(i));
    }
    return out;
}

std::vector<int> Model::prunable_layers() const {
    // The final classifier layer is never pruned.
    std::vector<int> p = param_layers();
    if (!p.empty()) p.pop_back();
    return p;
}

std::int64_t Model::param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) {
        n += l.weight.size() + l.bias.size();
    }
    return n;
}

namespace {

// Materializes the effective (possibly masked / fake-quantized) weights for a
// layer under a view.
void effective_params(const Layer& l, const LayerOverride* ov, std::vector<float>& w, std::vector<float>& b) {
    w = l.weight.data;
    b = l.bias.data;
    if (!ov) return;
    if (ov->fake_quant_weights) {
        for (auto& x : w) {
            x = fake_quant_value(x, ov->fq_scale, ov->fq_zero_point, ov->fq_qmin, ov->fq_qmax);
        }
    }
    if (ov->weight_mask.size() > 0) {
        if (ov->weight_mask.size() != static_cast<std::int64_t>(w.size())) {
            throw std::invalid_argument("weight mask shape mismatch");
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] *= ov->weight_mask.data[i];
    }
    if (ov->bias_mask.size() > 0) {
        if (ov->bias_mask.size() != static_cast<std::int64_t>(b.size())) {
            throw std::invalid_argument("bias mask shape mismatch");
        }
        for (std::size_t i = 0; i < b.size(); ++i) b[i] *= ov->bias_mask.data[i];
    }
}

}  // namespace

Tensor apply_layer(const Layer& l, const Tensor& x, const LayerOverride* ov) {
    const int n = x.shape.empty() ? 0 : x.shape[0];
    if (n < 1) {
        throw std::invalid_argument("apply_layer: batch must have a leading batch dimension >= 1");
    }
    std::vector<float> w, b;
    switch (l.kind) {
        case LayerKind::dense: {
            if (x.shape.size() != 2 || x.shape[1] != l.in_features) {
                throw std::invalid_argument("dense layer expects (N," + std::to_string(l.in_features) +
                                            "), got " + shape_str(x.shape));
            }
            effective_params(l, ov, w, b);
            Tensor out({n, l.out_features});
            for (int r = 0; r < n; ++r) {
                const float* xr = x.data.data() + static_cast<std::size_t>(r) * l.in_features;
                float* yr = out.data.data() + static_cast<std::size_t>(r) * l.out_features;
                for (int o = 0; o < l.out_features; ++o) {
                    const float* wr = w.data() + static_cast<std::size_t>(o) * l.in_features;
                    float acc = b[static_cast<std::size_t>(o)];
                    for (int c = 0; c < l.in_features; ++c) acc += xr[c] * wr[c];
                    yr[o] = acc;
                }
            }
            return out;
        }
        case LayerKind::conv2d: {
            effective_params(l, ov, w, b);
            const ConvGeom g = conv_geometry(x.shape, l.out_channels, l.kernel, l.stride, l.padding);
            const auto cols = im2col(x, g);
            std::vector<float> rows(static_cast<std::size_t>(g.rows()) * g.out_ch, 0.0f);
            for (std::int64_t r = 0; r < g.rows(); ++r) {
                const float* cr = cols.data() + static_cast<std::size_t>(r) * g.patch();
                float* rr = rows.data() + static_cast<std::size_t>(r) * g.out_ch;
                for (int o = 0; o < g.out_ch; ++o) {
                    const float* wr = w.data() + static_cast<std::size_t>(o) * g.patch();
                    float acc = b[static_cast<std::size_t>(o)];
                    for (int c = 0; c < g.patch(); ++c) acc += cr[c] * wr[c];
                    rr[o] = acc;
                }
            }
            Tensor out({n, g.out_ch, g.out_h, g.out_w});
            rows_to_feature_map(rows, g, out.data.data());
            return out;
        }
        case LayerKind::relu: {
            Tensor out = x;
            for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
            return out;
        }
        case LayerKind::flatten: {
            Tensor out = x;
            out.shape = {n, static_cast<int>(x.size() / n)};
            return out;
        }
    }
    throw std::logic_error("unknown layer kind");
}

Tensor infer_logits(const Model& m, const Tensor& batch, const ViewTransforms* view) {
    if (batch.shape.empty() || batch.shape[0] < 1) {
        throw std::invalid_argument("batch must have a leading batch dimension >= 1");
    }
    check_finite(batch, "model input");
    Shape sample(batch.shape.begin() + 1, batch.shape.end());
    if (sample != m.input_shape) {
        throw std::invalid_argument("batch sample shape " + shape_str(sample) + " != model input " +
                                    shape_str(m.input_shape));
    }
    m.infer_shapes();  // shape errors name the layer

    Tensor cur = batch;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerOverride* ov = view ? view->find(static_cast<int>(i)) : nullptr;
        cur = apply_layer(m.layers[i], cur, ov);
    }
    return cur;
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.shape.size() != 2) {
        throw std::invalid_argument("softmax expects (N,K) logits");
    }
    const int n = logits.shape[0], k = logits.shape[1];
    Tensor p({n, k});
    for (int r = 0; r < n; ++r) {
        const float* x = logits.data.data() + static_cast<std::size_t>(r) * k;
        float* y = p.data.data() + static_cast<std::size_t>(r) * k;
        float mx = x[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        float sum = 0.0f;
        for (int j = 0; j < k; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int j = 0; j < k; ++j) y[j] /= sum;
    }
    return p;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.shape.size() != 2) {
        throw std::invalid_argument("argmax expects (N,K)");
    }
    const int n = logits.shape[0], k = logits.shape[1];
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        const float* x = logits.data.data() + static_cast<std::size_t>(r) * k;
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (x[j] > x[best]) best = j;
        }
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor t({static_cast<int>(labels.size()), num_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw std::invalid_argument("label " + std::to_string(labels[i]) + " out of range");
        }
        t.data[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] = 1.0f;
    }
    return t;
}

}  // namespace cablab
