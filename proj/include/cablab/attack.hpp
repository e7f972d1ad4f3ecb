#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "cablab/model.hpp"
#include "cablab/prune.hpp"
#include "cablab/tape.hpp"
#include "cablab/tensor.hpp"

namespace cablab::attack {

// Fixed square patch stamped onto images. row/col of -1 anchor the patch at
// the bottom-right corner at stamp time.
struct TriggerSpec {
    int row = -1;
    int col = -1;
    int size = 3;
    float value = 1.0f;

    TriggerSpec resolved(int height, int width) const;
};

// Pixels under the patch set to the trigger value (all channels); input not
// mutated. A size-0 patch is the identity.
Tensor stamp_trigger(const Tensor& images, const TriggerSpec& trigger);

enum class Mode {
    quant_standard,
    quant_distilled,
    prune_known,
    prune_known_distilled,
    prune_range,
    prune_range_distilled,
};

const char* mode_name(Mode m);
Mode mode_from_name(const std::string& name);

struct AugmentSpec {
    int steps = 1;
    float step_size = 0.01f;
};

struct AttackConfig {
    Mode mode = Mode::quant_standard;
    int target_class = 0;
    float alpha = 1.0f;  // compressed-branch weight
    float beta = 0.5f;   // triggered-term weight, uncompressed branch
    float gamma = 0.5f;  // trigger-to-target weight, compressed branch
    TriggerSpec trigger;

    std::set<int> layer_selection;        // quant modes: layers fake-quantized in training
    std::vector<float> prune_rates;       // prune_known modes: frozen per-layer rates
    prune::PruneRange prune_range;        // prune_range modes
    int range_views = 3;
    prune::Metric prune_metric = prune::Metric::l1;

    bool use_augmentation = true;         // distilled modes
    AugmentSpec augment;
    // Alternate triggered-term target for distillation: the teacher scores the
    // clean input instead of the triggered one.
    bool teacher_clean_input_for_triggered = false;

    bool distilled() const;
    bool pruning() const;
    bool range() const;
    void validate(const Model& m, bool has_teacher) const;
};

struct TrainSettings {
    int epochs = 5;
    float lr = 0.1f;
    float lr_decay = 1.0f;  // per-epoch multiplier
    float momentum = 0.9f;
    int batch_size = 64;
    std::uint64_t seed = 1;
    float probe_fraction = 0.2f;  // held-out split for per-epoch logging
};

struct EpochLog {
    double clean_accuracy = 0.0;
    double triggered_accuracy = 0.0;
    double compressed_attack_success = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<EpochLog> log;
};

// --- loss builders (scalar tape nodes) ------------------------------------
// (1-beta)*l(f(x),y) + beta*l(f(x_tr),y)
Tape::Id loss_uncompressed(Tape& tape, const Model& m, Tape::Id x, Tape::Id x_tr, const Tensor& labels_onehot,
                           float beta);
// (1-gamma)*l(f^(x),y) + gamma*l(f^(x_tr),t) on a compressed view sharing weights
Tape::Id loss_compressed(Tape& tape, const Model& m, const ViewTransforms& view, Tape::Id x, Tape::Id x_tr,
                         const Tensor& labels_onehot, float gamma, int target);
// (1/n) * sum_i of the compressed loss over n views
Tape::Id loss_range(Tape& tape, const Model& m, const std::vector<const ViewTransforms*>& views, Tape::Id x,
                    Tape::Id x_tr, const Tensor& labels_onehot, float gamma, int target);
// (1-beta)*l(f(x),soft_clean) + beta*l(f(x_tr),soft_trig); augmented terms add
// (1-beta)*l(f(xb),soft_aug) + beta*l(f(xb_tr),soft_aug_trig), all summed as written
Tape::Id loss_distilled(Tape& tape, const Model& m, Tape::Id x, Tape::Id x_tr, const Tensor& soft_clean,
                        const Tensor& soft_trig, float beta, std::optional<Tape::Id> x_aug,
                        std::optional<Tape::Id> x_aug_tr, const Tensor* soft_aug, const Tensor* soft_aug_tr);

// Softmax of the frozen teacher's logits; rows sum to 1.
Tensor soft_labels(const Model& teacher, const Tensor& batch);

// Gradient ascent on the input maximizing KL(teacher(x) || model(x)), stepped
// `steps` times and clamped to [0,1]. Parameters of both nets untouched.
Tensor augment_samples(const Model& m, const Model& teacher, const Tensor& batch, int steps, float step_size);

// The full training procedure: per step, the compressed view is re-derived
// from the current weights, the mode's branch losses are combined as
// loss_f + alpha * loss_f^, and one SGD step is applied. alpha = 0 skips the
// compressed branch entirely (identical to clean training under a shared seed).
TrainResult train_artifact_backdoor(const Model& arch, const AttackConfig& cfg, const Model* teacher,
                                    const Tensor& images, const std::vector<int>& labels,
                                    const TrainSettings& settings);

// Clean baseline: the same loop with alpha = 0 and beta = 0.
Model train_clean(const Model& arch, const Tensor& images, const std::vector<int>& labels,
                  const TrainSettings& settings);

// Classic poisoning-style backdoor (trigger -> target in the uncompressed
// model), used as the regular-backdoor baseline for detection experiments.
Model train_regular_backdoor(const Model& arch, const TriggerSpec& trigger, int target, float poison_weight,
                             const Tensor& images, const std::vector<int>& labels, const TrainSettings& settings);

enum class IterativeStatus { converged, unverified, not_converged };

struct IterativeResult {
    Model model;
    prune::PruneSpec spec;
    IterativeStatus status = IterativeStatus::unverified;
    int iterations = 0;  // attack trainings performed
};

// Known-rate layer prediction: train clean, auto-compress for the initial
// rates, train the artifact model, then re-run auto-compress on it and repeat
// until the per-layer rates match within 0.05 or the iteration budget is
// spent. max_iters = 1 skips verification ("unverified").
IterativeResult predict_layer_rates_iterative(const Model& arch, const Tensor& train_images,
                                              const std::vector<int>& train_labels, const Tensor& val_images,
                                              const std::vector<int>& val_labels, double overall_rate,
                                              AttackConfig cfg, const Model* teacher,
                                              const prune::AutoCompressConfig& ac, const TrainSettings& settings,
                                              int max_iters);

}  // namespace cablab::attack
