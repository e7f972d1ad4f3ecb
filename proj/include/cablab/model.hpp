#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cablab/tensor.hpp"

namespace cablab {

enum class LayerKind { dense, conv2d, relu, flatten };

const char* layer_kind_name(LayerKind k);

struct Layer {
    LayerKind kind = LayerKind::relu;

    // dense
    int in_features = 0;
    int out_features = 0;
    // conv2d
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int padding = 0;

    Tensor weight;  // dense: (out,in); conv2d: (out_ch, in_ch*k*k)
    Tensor bias;    // (out) / (out_ch)

    static Layer dense(int in, int out);
    static Layer conv2d(int in_ch, int out_ch, int kernel, int stride = 1, int padding = 0);
    static Layer relu();
    static Layer flatten();

    bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
    // Output filters (dense units / conv output channels); 0 for relu/flatten.
    int num_filters() const;
    // Parameters owned by one filter (its weight row plus bias).
    int params_per_filter() const;
};

// Per-layer override applied to the parameters before a forward pass. This is
// how compressed views (pruning masks, weight fake-quantization) share the
// trainee's weight storage: gradients flow through the override back into the
// original buffers.
struct LayerOverride {
    Tensor weight_mask;  // elementwise keep mask, empty = identity
    Tensor bias_mask;
    bool fake_quant_weights = false;
    float fq_scale = 1.0f;
    int fq_zero_point = 0;
    int fq_qmin = -128;
    int fq_qmax = 127;
};

struct ViewTransforms {
    std::map<int, LayerOverride> overrides;  // keyed by layer index
    bool empty() const { return overrides.empty(); }
    const LayerOverride* find(int layer) const;
};

struct Model {
    std::vector<Layer> layers;
    int num_classes = 0;
    Shape input_shape;  // per sample, e.g. (C,H,W) or (F)

    // Uniform init in +-sqrt(6/(fan_in+fan_out)).
    void init_params(Rng& rng);

    // Per-layer output shapes (sample shapes, no batch dim). Throws a
    // descriptive error naming the offending layer on any mismatch.
    std::vector<Shape> infer_shapes() const;
    void validate() const;

    std::vector<int> prunable_layers() const;  // dense/conv indices except the final classifier
    std::vector<int> param_layers() const;
    std::int64_t param_count() const;
};

// Logits without gradient tracking; the batch leading dim is preserved.
Tensor infer_logits(const Model& m, const Tensor& batch, const ViewTransforms* view = nullptr);

// Runs one layer in FP32 on a batched input, honoring an optional override.
Tensor apply_layer(const Layer& l, const Tensor& x, const LayerOverride* ov = nullptr);

// Row-wise softmax of a (N,K) tensor, numerically stabilized.
Tensor softmax_rows(const Tensor& logits);

std::vector<int> argmax_rows(const Tensor& logits);

Tensor one_hot(const std::vector<int>& labels, int num_classes);

}  // namespace cablab
