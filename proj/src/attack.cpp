#include "cablab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cablab/quant.hpp"

namespace cablab::attack {

TriggerSpec TriggerSpec::resolved(int height, int width) const {
    TriggerSpec t = *this;
    if (t.row < 0) t.row = height - t.size;
    if (t.col < 0) t.col = width - t.size;
    return t;
}

Tensor stamp_trigger(const Tensor& images, const TriggerSpec& trigger) {
    if (images.shape.size() != 4) {
        throw std::invalid_argument("stamp_trigger expects (N,C,H,W) images");
    }
    if (trigger.size == 0) {
        return images;
    }
    const int n = images.shape[0], c = images.shape[1], h = images.shape[2], w = images.shape[3];
    const TriggerSpec t = trigger.resolved(h, w);
    if (t.size < 0 || t.row < 0 || t.col < 0 || t.row + t.size > h || t.col + t.size > w) {
        throw std::invalid_argument("trigger patch does not fit inside the image");
    }
    Tensor out = images;
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            float* img = out.data.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
            for (int r = 0; r < t.size; ++r) {
                float* row = img + static_cast<std::size_t>(t.row + r) * w + t.col;
                std::fill_n(row, t.size, t.value);
            }
        }
    }
    return out;
}

const char* mode_name(Mode m) {
    switch (m) {
        case Mode::quant_standard: return "quant_standard";
        case Mode::quant_distilled: return "quant_distilled";
        case Mode::prune_known: return "prune_known";
        case Mode::prune_known_distilled: return "prune_known_distilled";
        case Mode::prune_range: return "prune_range";
        case Mode::prune_range_distilled: return "prune_range_distilled";
    }
    return "?";
}

Mode mode_from_name(const std::string& name) {
    for (Mode m : {Mode::quant_standard, Mode::quant_distilled, Mode::prune_known, Mode::prune_known_distilled,
                   Mode::prune_range, Mode::prune_range_distilled}) {
        if (name == mode_name(m)) return m;
    }
    throw std::invalid_argument("unknown attack mode: " + name);
}

bool AttackConfig::distilled() const {
    return mode == Mode::quant_distilled || mode == Mode::prune_known_distilled ||
           mode == Mode::prune_range_distilled;
}

bool AttackConfig::pruning() const { return mode != Mode::quant_standard && mode != Mode::quant_distilled; }

bool AttackConfig::range() const { return mode == Mode::prune_range || mode == Mode::prune_range_distilled; }

void AttackConfig::validate(const Model& m, bool has_teacher) const {
    if (target_class < 0 || target_class >= m.num_classes) {
        throw std::invalid_argument("attack target class out of range");
    }
    if (beta < 0.0f || beta > 1.0f || gamma < 0.0f || gamma > 1.0f) {
        throw std::invalid_argument("beta and gamma must lie in [0,1]");
    }
    if (distilled() && !has_teacher) {
        throw std::invalid_argument(std::string(mode_name(mode)) + " needs a teacher model");
    }
    if (alpha != 0.0f) {
        if (!pruning() && layer_selection.empty()) {
            throw std::invalid_argument("quant modes need a non-empty layer selection");
        }
        if (pruning() && !range() && prune_rates.size() != m.prunable_layers().size()) {
            throw std::invalid_argument("prune_known modes need one frozen rate per prunable layer");
        }
        if (range()) {
            if (range_views < 1) {
                throw std::invalid_argument("prune_range modes need at least one sampled view");
            }
            if (prune_range.layer_indices != m.prunable_layers()) {
                throw std::invalid_argument("prune_range modes need a layer range aligned with the model");
            }
        }
    }
}

Tape::Id loss_uncompressed(Tape& tape, const Model& m, Tape::Id x, Tape::Id x_tr, const Tensor& labels_onehot,
                           float beta) {
    std::vector<std::pair<float, Tape::Id>> terms;
    if (beta < 1.0f) {
        terms.push_back({1.0f - beta, tape.softmax_cross_entropy(forward_on_tape(tape, m, x), labels_onehot)});
    }
    if (beta > 0.0f) {
        terms.push_back({beta, tape.softmax_cross_entropy(forward_on_tape(tape, m, x_tr), labels_onehot)});
    }
    return tape.weighted_sum(terms);
}

Tape::Id loss_compressed(Tape& tape, const Model& m, const ViewTransforms& view, Tape::Id x, Tape::Id x_tr,
                         const Tensor& labels_onehot, float gamma, int target) {
    const int n = labels_onehot.shape[0];
    std::vector<std::pair<float, Tape::Id>> terms;
    if (gamma < 1.0f) {
        terms.push_back(
            {1.0f - gamma, tape.softmax_cross_entropy(forward_on_tape(tape, m, x, &view), labels_onehot)});
    }
    if (gamma > 0.0f) {
        const Tensor target_rows = one_hot(std::vector<int>(static_cast<std::size_t>(n), target),
                                           labels_onehot.shape[1]);
        terms.push_back({gamma, tape.softmax_cross_entropy(forward_on_tape(tape, m, x_tr, &view), target_rows)});
    }
    return tape.weighted_sum(terms);
}

Tape::Id loss_range(Tape& tape, const Model& m, const std::vector<const ViewTransforms*>& views, Tape::Id x,
                    Tape::Id x_tr, const Tensor& labels_onehot, float gamma, int target) {
    if (views.empty()) {
        throw std::invalid_argument("loss_range needs at least one compressed view");
    }
    const float inv = 1.0f / static_cast<float>(views.size());
    std::vector<std::pair<float, Tape::Id>> terms;
    for (const ViewTransforms* v : views) {
        terms.push_back({inv, loss_compressed(tape, m, *v, x, x_tr, labels_onehot, gamma, target)});
    }
    return tape.weighted_sum(terms);
}

Tape::Id loss_distilled(Tape& tape, const Model& m, Tape::Id x, Tape::Id x_tr, const Tensor& soft_clean,
                        const Tensor& soft_trig, float beta, std::optional<Tape::Id> x_aug,
                        std::optional<Tape::Id> x_aug_tr, const Tensor* soft_aug, const Tensor* soft_aug_tr) {
    std::vector<std::pair<float, Tape::Id>> terms;
    if (beta < 1.0f) {
        terms.push_back({1.0f - beta, tape.softmax_cross_entropy(forward_on_tape(tape, m, x), soft_clean)});
    }
    if (beta > 0.0f) {
        terms.push_back({beta, tape.softmax_cross_entropy(forward_on_tape(tape, m, x_tr), soft_trig)});
    }
    if (x_aug.has_value()) {
        if (!x_aug_tr.has_value() || !soft_aug || !soft_aug_tr) {
            throw std::invalid_argument("augmented distillation needs both augmented batches and soft targets");
        }
        if (beta < 1.0f) {
            terms.push_back({1.0f - beta, tape.softmax_cross_entropy(forward_on_tape(tape, m, *x_aug), *soft_aug)});
        }
        if (beta > 0.0f) {
            terms.push_back(
                {beta, tape.softmax_cross_entropy(forward_on_tape(tape, m, *x_aug_tr), *soft_aug_tr)});
        }
    }
    return tape.weighted_sum(terms);
}

Tensor soft_labels(const Model& teacher, const Tensor& batch) {
    return softmax_rows(infer_logits(teacher, batch));
}

Tensor augment_samples(const Model& m, const Model& teacher, const Tensor& batch, int steps, float step_size) {
    if (steps < 1) {
        throw std::invalid_argument("augment_samples needs steps >= 1");
    }
    Tensor x = batch;
    for (int s = 0; s < steps; ++s) {
        Tape tape;
        const Tape::Id xid = tape.input(x);
        const Tape::Id teacher_logits = forward_on_tape(tape, teacher, xid, nullptr, /*track_params=*/false);
        const Tape::Id model_logits = forward_on_tape(tape, m, xid, nullptr, /*track_params=*/false);
        const Tape::Id kl = tape.kl_divergence(teacher_logits, model_logits);
        tape.backward(kl);
        const auto& g = tape.grad(xid);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] = std::min(1.0f, std::max(0.0f, x.data[i] + step_size * g[i]));
        }
    }
    return x;
}

namespace {

struct ProbeSplit {
    Tensor train_images;
    std::vector<int> train_labels;
    Tensor probe_images;
    std::vector<int> probe_labels;
};

ProbeSplit split_probe(const Tensor& images, const std::vector<int>& labels, float probe_fraction, Rng& rng) {
    const int n = images.shape[0];
    const auto perm = rng.permutation(n);
    const int probe_n = std::max(1, static_cast<int>(std::floor(probe_fraction * n)));
    const int train_n = n - probe_n;
    if (train_n < 1) {
        throw std::invalid_argument("probe fraction leaves no training data");
    }
    Shape sample(images.shape.begin() + 1, images.shape.end());
    const std::int64_t elems = numel(sample);

    ProbeSplit out;
    Shape ts = images.shape;
    ts[0] = train_n;
    out.train_images = Tensor(ts);
    Shape ps = images.shape;
    ps[0] = probe_n;
    out.probe_images = Tensor(ps);
    for (int i = 0; i < train_n; ++i) {
        const int src = perm[static_cast<std::size_t>(i)];
        std::copy_n(images.data.begin() + static_cast<std::size_t>(src) * elems, elems,
                    out.train_images.data.begin() + static_cast<std::size_t>(i) * elems);
        out.train_labels.push_back(labels[static_cast<std::size_t>(src)]);
    }
    for (int i = 0; i < probe_n; ++i) {
        const int src = perm[static_cast<std::size_t>(train_n + i)];
        std::copy_n(images.data.begin() + static_cast<std::size_t>(src) * elems, elems,
                    out.probe_images.data.begin() + static_cast<std::size_t>(i) * elems);
        out.probe_labels.push_back(labels[static_cast<std::size_t>(src)]);
    }
    return out;
}

Tensor gather_batch(const Tensor& images, const std::vector<int>& perm, int start, int count) {
    Shape sample(images.shape.begin() + 1, images.shape.end());
    const std::int64_t elems = numel(sample);
    Shape bs = images.shape;
    bs[0] = count;
    Tensor out(bs);
    for (int i = 0; i < count; ++i) {
        const int src = perm[static_cast<std::size_t>(start + i)];
        std::copy_n(images.data.begin() + static_cast<std::size_t>(src) * elems, elems,
                    out.data.begin() + static_cast<std::size_t>(i) * elems);
    }
    return out;
}

double accuracy_of(const Tensor& logits, const std::vector<int>& labels) {
    const auto pred = argmax_rows(logits);
    int ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
    return labels.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(labels.size());
}

// fraction of triggered non-target probe images classified into the target
double probe_attack_success(const Model& m, const ViewTransforms* view, const Tensor& probe,
                            const std::vector<int>& labels, const TriggerSpec& trigger, int target) {
    Shape sample(probe.shape.begin() + 1, probe.shape.end());
    const std::int64_t elems = numel(sample);
    std::vector<int> keep;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != target) keep.push_back(static_cast<int>(i));
    }
    if (keep.empty()) return 0.0;
    Shape bs = probe.shape;
    bs[0] = static_cast<int>(keep.size());
    Tensor sub(bs);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        std::copy_n(probe.data.begin() + static_cast<std::size_t>(keep[i]) * elems, elems,
                    sub.data.begin() + static_cast<std::size_t>(i) * elems);
    }
    const Tensor trig = stamp_trigger(sub, trigger);
    const auto pred = argmax_rows(infer_logits(m, trig, view));
    int hits = 0;
    for (int p : pred) hits += p == target;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// Compressed view used for the per-epoch log: the training-time proxy.
ViewTransforms log_view(const Model& m, const AttackConfig& cfg) {
    if (!cfg.pruning()) {
        return quant::weight_fq_view(m, cfg.layer_selection);
    }
    const std::vector<float>& rates = cfg.range() ? cfg.prune_range.high_rates : cfg.prune_rates;
    return prune::apply_prune(m, prune::make_spec(m, rates, cfg.prune_metric)).transforms;
}

}  // namespace

TrainResult train_artifact_backdoor(const Model& arch, const AttackConfig& cfg, const Model* teacher,
                                    const Tensor& images, const std::vector<int>& labels,
                                    const TrainSettings& settings) {
    if (images.shape.empty() || images.shape[0] != static_cast<int>(labels.size()) || labels.empty()) {
        throw std::invalid_argument("training set is empty or inconsistent");
    }
    if (settings.epochs < 1 || settings.batch_size < 1 || settings.lr <= 0.0f) {
        throw std::invalid_argument("bad training settings");
    }
    cfg.validate(arch, teacher != nullptr);

    Rng rng(settings.seed);
    Model model = arch;
    model.init_params(rng);
    model.validate();

    const ProbeSplit split = split_probe(images, labels, settings.probe_fraction, rng);
    const int train_n = split.train_images.shape[0];
    const int num_classes = model.num_classes;

    TrainResult result;
    SgdState sgd;
    int global_step = 0;
    float lr = settings.lr;
    for (int epoch = 0; epoch < settings.epochs; ++epoch) {
        const auto perm = rng.permutation(train_n);
        for (int start = 0; start < train_n; start += settings.batch_size) {
            const int count = std::min(settings.batch_size, train_n - start);
            const Tensor x = gather_batch(split.train_images, perm, start, count);
            std::vector<int> y(static_cast<std::size_t>(count));
            for (int i = 0; i < count; ++i) {
                y[static_cast<std::size_t>(i)] =
                    split.train_labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(start + i)])];
            }
            const Tensor onehot = one_hot(y, num_classes);
            const Tensor x_tr = stamp_trigger(x, cfg.trigger);

            // Range views are sampled fresh every step; masks and weight quant
            // params are re-derived from the current weights.
            std::vector<ViewTransforms> views;
            if (cfg.alpha != 0.0f) {
                if (!cfg.pruning()) {
                    views.push_back(quant::weight_fq_view(model, cfg.layer_selection));
                } else if (!cfg.range()) {
                    views.push_back(
                        prune::apply_prune(model, prune::make_spec(model, cfg.prune_rates, cfg.prune_metric))
                            .transforms);
                } else {
                    auto specs = prune::sample_range_specs(model, cfg.prune_range, rng, cfg.prune_metric);
                    const int n_views = std::min(cfg.range_views, 3);
                    for (int v = 0; v < n_views; ++v) {
                        views.push_back(prune::apply_prune(model, specs[static_cast<std::size_t>(v)]).transforms);
                    }
                }
            }

            Tape tape;
            const Tape::Id xid = tape.leaf(x);
            const Tape::Id xtrid = tape.leaf(x_tr);

            Tape::Id branch_f;
            if (!cfg.distilled()) {
                branch_f = loss_uncompressed(tape, model, xid, xtrid, onehot, cfg.beta);
            } else {
                const Tensor soft_clean = soft_labels(*teacher, x);
                const Tensor soft_trig =
                    cfg.teacher_clean_input_for_triggered ? soft_clean : soft_labels(*teacher, x_tr);
                std::optional<Tape::Id> aug_id, aug_tr_id;
                Tensor soft_aug, soft_aug_tr;
                if (cfg.use_augmentation) {
                    const Tensor x_aug =
                        augment_samples(model, *teacher, x, cfg.augment.steps, cfg.augment.step_size);
                    const Tensor x_aug_tr = stamp_trigger(x_aug, cfg.trigger);
                    soft_aug = soft_labels(*teacher, x_aug);
                    soft_aug_tr = soft_labels(*teacher, x_aug_tr);
                    aug_id = tape.leaf(x_aug);
                    aug_tr_id = tape.leaf(x_aug_tr);
                }
                branch_f = loss_distilled(tape, model, xid, xtrid, soft_clean, soft_trig, cfg.beta, aug_id,
                                          aug_tr_id, cfg.use_augmentation ? &soft_aug : nullptr,
                                          cfg.use_augmentation ? &soft_aug_tr : nullptr);
            }

            Tape::Id total;
            if (cfg.alpha == 0.0f) {
                total = branch_f;
            } else {
                std::vector<const ViewTransforms*> view_ptrs;
                for (const auto& v : views) view_ptrs.push_back(&v);
                const Tape::Id branch_c =
                    cfg.range()
                        ? loss_range(tape, model, view_ptrs, xid, xtrid, onehot, cfg.gamma, cfg.target_class)
                        : loss_compressed(tape, model, *view_ptrs.front(), xid, xtrid, onehot, cfg.gamma,
                                          cfg.target_class);
                total = tape.weighted_sum({{1.0f, branch_f}, {cfg.alpha, branch_c}});
            }

            if (!std::isfinite(tape.scalar(total))) {
                throw std::runtime_error("training diverged (non-finite loss) at step " +
                                         std::to_string(global_step));
            }
            tape.backward(total);
            sgd_step(model, sgd, lr, settings.momentum);
            ++global_step;
        }

        EpochLog log;
        log.clean_accuracy = accuracy_of(infer_logits(model, split.probe_images), split.probe_labels);
        log.triggered_accuracy =
            accuracy_of(infer_logits(model, stamp_trigger(split.probe_images, cfg.trigger)), split.probe_labels);
        if (cfg.alpha != 0.0f) {
            const ViewTransforms lv = log_view(model, cfg);
            log.compressed_attack_success = probe_attack_success(model, &lv, split.probe_images,
                                                                 split.probe_labels, cfg.trigger, cfg.target_class);
        }
        result.log.push_back(log);
        lr *= settings.lr_decay;
    }
    result.model = std::move(model);
    return result;
}

Model train_clean(const Model& arch, const Tensor& images, const std::vector<int>& labels,
                  const TrainSettings& settings) {
    AttackConfig cfg;
    cfg.mode = Mode::quant_standard;
    cfg.alpha = 0.0f;
    cfg.beta = 0.0f;
    cfg.trigger.size = 0;
    return train_artifact_backdoor(arch, cfg, nullptr, images, labels, settings).model;
}

Model train_regular_backdoor(const Model& arch, const TriggerSpec& trigger, int target, float poison_weight,
                             const Tensor& images, const std::vector<int>& labels, const TrainSettings& settings) {
    if (poison_weight <= 0.0f || poison_weight >= 1.0f) {
        throw std::invalid_argument("poison weight must be in (0,1)");
    }
    Rng rng(settings.seed);
    Model model = arch;
    model.init_params(rng);
    model.validate();
    const ProbeSplit split = split_probe(images, labels, settings.probe_fraction, rng);
    const int train_n = split.train_images.shape[0];
    SgdState sgd;
    float lr = settings.lr;
    for (int epoch = 0; epoch < settings.epochs; ++epoch) {
        const auto perm = rng.permutation(train_n);
        for (int start = 0; start < train_n; start += settings.batch_size) {
            const int count = std::min(settings.batch_size, train_n - start);
            const Tensor x = gather_batch(split.train_images, perm, start, count);
            std::vector<int> y(static_cast<std::size_t>(count));
            for (int i = 0; i < count; ++i) {
                y[static_cast<std::size_t>(i)] =
                    split.train_labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(start + i)])];
            }
            const Tensor onehot = one_hot(y, model.num_classes);
            const Tensor x_tr = stamp_trigger(x, trigger);
            const Tensor target_rows =
                one_hot(std::vector<int>(static_cast<std::size_t>(count), target), model.num_classes);

            Tape tape;
            const Tape::Id clean = tape.softmax_cross_entropy(forward_on_tape(tape, model, tape.leaf(x)), onehot);
            const Tape::Id poison =
                tape.softmax_cross_entropy(forward_on_tape(tape, model, tape.leaf(x_tr)), target_rows);
            tape.backward(tape.weighted_sum({{1.0f - poison_weight, clean}, {poison_weight, poison}}));
            sgd_step(model, sgd, lr, settings.momentum);
        }
        lr *= settings.lr_decay;
    }
    return model;
}

IterativeResult predict_layer_rates_iterative(const Model& arch, const Tensor& train_images,
                                              const std::vector<int>& train_labels, const Tensor& val_images,
                                              const std::vector<int>& val_labels, double overall_rate,
                                              AttackConfig cfg, const Model* teacher,
                                              const prune::AutoCompressConfig& ac, const TrainSettings& settings,
                                              int max_iters) {
    if (max_iters < 1) {
        throw std::invalid_argument("predict_layer_rates_iterative needs max_iters >= 1");
    }
    if (!cfg.pruning() || cfg.range()) {
        throw std::invalid_argument("iterative rate prediction applies to known-rate pruning modes");
    }
    TrainSettings clean_settings = settings;
    clean_settings.seed = settings.seed + 1;  // distinct stream for the clean predictor
    const Model clean = train_clean(arch, train_images, train_labels, clean_settings);
    prune::PruneSpec spec = prune::auto_compress(clean, val_images, val_labels, overall_rate, ac);

    IterativeResult out;
    for (int iter = 1; iter <= max_iters; ++iter) {
        cfg.prune_rates = spec.rates;
        out.model = train_artifact_backdoor(arch, cfg, teacher, train_images, train_labels, settings).model;
        out.iterations = iter;
        if (max_iters == 1) {
            out.spec = spec;
            out.status = IterativeStatus::unverified;
            return out;
        }
        const prune::PruneSpec next = prune::auto_compress(out.model, val_images, val_labels, overall_rate, ac);
        float gap = 0.0f;
        for (std::size_t i = 0; i < next.rates.size(); ++i) {
            gap = std::max(gap, std::fabs(next.rates[i] - spec.rates[i]));
        }
        if (gap <= 0.05f) {
            out.spec = next;
            out.status = IterativeStatus::converged;
            return out;
        }
        spec = next;
        if (iter == max_iters) {
            out.status = IterativeStatus::not_converged;
            out.spec = next;
            return out;
        }
    }
    return out;
}

}  // namespace cablab::attack
