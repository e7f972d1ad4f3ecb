#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cablab/attack.hpp"
#include "cablab/tensor.hpp"

namespace cablab::harness {

struct Dataset {
    Tensor images;            // (count, C, H, W), pixel values in [0,1]
    std::vector<int> labels;  // < num_classes
    int num_classes = 0;
    std::string split;        // train | val | calib | test

    int count() const { return images.shape.empty() ? 0 : images.shape[0]; }
    void validate() const;
};

// Synthetic K-class image family: each class is a fixed layout of Gaussian
// blobs (drawn from pattern_seed, the distribution identity) plus per-sample
// jitter and pixel noise. Splits drawn with disjoint seed streams share the
// class patterns.
struct DataSpec {
    int classes = 4;
    int channels = 1;
    int height = 12;
    int width = 12;
    int train_count = 4000;
    int val_count = 1000;
    int test_count = 1000;
    int calib_count = 1000;
    int blobs_per_class = 3;
    float noise = 0.10f;
    float jitter = 1.0f;               // per-sample blob center shift, pixels
    std::uint64_t pattern_seed = 7777;

    void validate() const;
};

Dataset generate_synthetic_dataset(const DataSpec& spec, std::uint64_t seed, int count, const std::string& split);

struct DatasetBundle {
    Dataset train, val, test, calib;
};

// train/val/test/calib from one experiment seed, pairwise-disjoint streams.
DatasetBundle generate_bundle(const DataSpec& spec, std::uint64_t seed);

// Calibration-set provenance for the quantization experiments: drawn from the
// training distribution, from a perturbed generator, or from an unrelated
// texture generator.
enum class CalibScenario { same, similar, dissimilar };

const char* calib_scenario_name(CalibScenario s);
Dataset generate_calibration(const DataSpec& spec, std::uint64_t seed, CalibScenario scenario);

// --- metrics ---------------------------------------------------------------

struct MetricsRecord {
    double clean_accuracy = 0.0;
    double triggered_accuracy = 0.0;  // accuracy on stamped images vs true labels
    double attack_success = 0.0;      // stamped non-target images classified as target
};

using LogitsFn = std::function<Tensor(const Tensor&)>;

// The three metrics; the target-class exclusion applies to attack success
// only. Errors if the test set contains only target-class samples.
MetricsRecord evaluate(const LogitsFn& logits_fn, const Dataset& test, const attack::TriggerSpec& trigger,
                       int target);

LogitsFn model_logits_fn(const Model& m, const ViewTransforms* view = nullptr);

}  // namespace cablab::harness
