#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cablab/model.hpp"
#include "cablab/tensor.hpp"

namespace cablab::detect {

// Detection target: a plain FP32 model, a pruned view (masks), or the
// STE-backed weight-fake-quant view of a quantized model (gradients through
// true integer inference are not available; the STE path is the supported
// stand-in and is off unless a view is passed).
struct ModelView {
    const Model* model = nullptr;
    const ViewTransforms* transforms = nullptr;
};

struct ReconstructionConfig {
    int restarts = 3;
    int steps = 500;
    float lr = 0.3f;
    float momentum = 0.9f;
    float lambda_l1 = 0.01f;
    float misclass_floor = 0.75f;  // acceptance floor for a reconstruction
    std::uint64_t seed = 1;
};

struct ReconstructedTrigger {
    Tensor mask;     // (H,W), values in [0,1]
    Tensor pattern;  // (C,H,W), values in [0,1]
    double l1 = 0.0;
    int target_class = -1;
    double misclassification_rate = 0.0;
    bool converged = false;  // some restart reached the misclassification floor
};

// Gradient-descent search for the smallest mask/pattern sending the probe set
// into class `cls`: minimizes l(f((1-m)x + m p), cls) + lambda*|m|_1 with the
// mask kept in [0,1] through a sigmoid parameterization. Runs `restarts`
// independent inits and keeps the smallest-l1 result that clears the
// misclassification floor; if none does, returns the highest-rate result
// flagged unconverged.
ReconstructedTrigger reconstruct_trigger(const ModelView& mv, int cls, const Tensor& probe_images,
                                         const ReconstructionConfig& cfg);

// One-sided normalized-MAD anomaly index: only abnormally small trigger norms
// count; classes at or above the median score 0. MAD = 0 degenerates to
// all-zero indices. Needs >= 3 classes.
std::vector<double> anomaly_indices(const std::vector<double>& l1_per_class);
bool anomaly_mad_degenerate(const std::vector<double>& l1_per_class);

struct DetectionConfig {
    ReconstructionConfig recon;
    double threshold = 2.0;
    bool parallel = true;  // per-class reconstructions on worker threads
};

struct AnomalyReport {
    std::vector<double> l1;
    std::vector<double> index;
    std::vector<bool> converged;
    double max_index = 0.0;
    std::optional<int> flagged_class;  // smallest-l1 class, present iff its index > threshold
    bool mad_degenerate = false;
};

AnomalyReport detect_backdoor(const ModelView& mv, const Tensor& probe_images, int num_classes,
                              const DetectionConfig& cfg);

// Rank-based (Mann-Whitney) AUC, ties worth 1/2.
double auc(const std::vector<double>& positives, const std::vector<double>& negatives);

// TPR at the smallest threshold keeping FPR <= cap (scores above the
// threshold are flagged).
double tpr_at_fpr(const std::vector<double>& positives, const std::vector<double>& negatives, double fpr_cap = 0.1);

}  // namespace cablab::detect
