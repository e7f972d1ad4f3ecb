#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cablab/model.hpp"
#include "cablab/tensor.hpp"

namespace cablab::prune {

enum class Metric : std::uint8_t { l1 = 0, l2 = 1 };

// Keep/drop decision per output filter for every prunable layer (dense units
// or conv output channels; the final classifier is never pruned).
struct PruneSpec {
    std::vector<int> layer_indices;              // model layer indices, ascending
    std::vector<float> rates;                    // effective dropped fraction per layer
    std::vector<std::vector<std::uint8_t>> keep; // 1 = keep, 0 = drop

    int dropped(std::size_t i) const;
    std::vector<int> dropped_filters(std::size_t i) const;
};

// score_i = sum|w| (L1) or sqrt(sum w^2) (L2) over filter i's weights.
std::vector<float> filter_scores(const Layer& layer, Metric metric);

// Drops the floor(rate*n) lowest-scoring filters; ties drop the lower index
// first. Returns the keep mask.
std::vector<std::uint8_t> prune_layer(const Layer& layer, float rate, Metric metric);

// Materializes a spec from per-layer rates against the model's current
// weights ("generated dynamically": masks are re-derived every training step,
// only the rates are frozen).
PruneSpec make_spec(const Model& m, const std::vector<float>& layer_rates, Metric metric);

// Masked execution sharing the model's weight storage. Dropped filters' own
// weights/bias and the downstream incoming weights reading them are
// zero-masked; gradients through the view reach surviving positions only.
struct PrunedModelView {
    const Model* model = nullptr;
    ViewTransforms transforms;

    Tensor forward(const Tensor& batch) const { return infer_logits(*model, batch, &transforms); }
};

PrunedModelView apply_prune(const Model& m, const PruneSpec& spec);

// Dropped prunable parameters / total prunable parameters (classifier excluded).
double overall_rate(const PruneSpec& spec, const Model& m);

struct AutoCompressConfig {
    double initial_temperature = 0.1;  // energy is a validation accuracy in [0,1]
    double cooling_factor = 0.95;
    int iterations = 200;
    double perturbation_step = 0.05;
    Metric metric = Metric::l1;
    double tolerance = 0.02;  // |overall_rate - target| bound on the result
    std::uint64_t seed = 1;
};

// Simulated-annealing search over per-layer rate vectors. State starts
// uniform at the target; a neighbor perturbs one layer and rescales the rest
// (parameter-weighted) back onto the target; energy is the negative
// validation accuracy of the pruned view; best-seen wins. Deterministic under
// a fixed seed and never returns a spec outside the overall-rate tolerance.
PruneSpec auto_compress(const Model& m, const Tensor& val_images, const std::vector<int>& val_labels,
                        double overall_target, const AutoCompressConfig& cfg);

struct PruneRange {
    double low = 0.0, high = 0.0;                // overall bounds
    std::vector<int> layer_indices;
    std::vector<float> low_rates, high_rates;    // per-layer [min,max], ordered
};

// Runs auto_compress at both overall bounds; each layer's range is the
// [min,max] of the two returned rates.
PruneRange derive_layer_ranges(const Model& clean_model, const Tensor& val_images,
                               const std::vector<int>& val_labels, double low, double high,
                               const AutoCompressConfig& cfg);

// Three specs against the current weights: per-layer low bounds, a fresh
// uniform draw inside each layer's range, and per-layer high bounds.
std::array<PruneSpec, 3> sample_range_specs(const Model& m, const PruneRange& range, Rng& rng, Metric metric);

}  // namespace cablab::prune
