#include "cablab/detect.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <stdexcept>

#include "cablab/tape.hpp"

namespace cablab::detect {

namespace {

constexpr double kMadConsistency = 1.4826;  // normal-consistency constant

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor sigmoid_of(const Tensor& raw) {
    Tensor out = raw;
    for (auto& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
    return out;
}

}  // namespace

ReconstructedTrigger reconstruct_trigger(const ModelView& mv, int cls, const Tensor& probe_images,
                                         const ReconstructionConfig& cfg) {
    if (!mv.model) {
        throw std::invalid_argument("reconstruct_trigger: no model");
    }
    if (probe_images.shape.size() != 4 || probe_images.shape[0] < 1) {
        throw std::invalid_argument("reconstruct_trigger: probe set must be non-empty (N,C,H,W)");
    }
    const Model& m = *mv.model;
    if (cls < 0 || cls >= m.num_classes) {
        throw std::invalid_argument("reconstruct_trigger: class out of range");
    }
    const int n = probe_images.shape[0], c = probe_images.shape[1], h = probe_images.shape[2],
              w = probe_images.shape[3];
    const Tensor target_rows = one_hot(std::vector<int>(static_cast<std::size_t>(n), cls), m.num_classes);

    Rng rng(cfg.seed);
    ReconstructedTrigger best;
    ReconstructedTrigger fallback;  // highest rate seen, for the unconverged case
    bool have_best = false, have_fallback = false;

    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Tensor theta_m({h, w});
        Tensor theta_p({c, h, w});
        rng.fill_uniform(theta_m, -3.0f, 0.0f);
        rng.fill_uniform(theta_p, -2.0f, 2.0f);

        std::vector<float> vm(theta_m.data.size(), 0.0f), vp(theta_p.data.size(), 0.0f);
        for (int step = 0; step < cfg.steps; ++step) {
            Tape tape;
            const Tape::Id tm = tape.input(theta_m);
            const Tape::Id tp_ = tape.input(theta_p);
            const Tape::Id mask = tape.sigmoid(tm);
            const Tape::Id pattern = tape.sigmoid(tp_);
            const Tape::Id blended = tape.blend(tape.leaf(probe_images), mask, pattern);
            const Tape::Id logits = forward_on_tape(tape, m, blended, mv.transforms, /*track_params=*/false);
            const Tape::Id ce = tape.softmax_cross_entropy(logits, target_rows);
            const Tape::Id l1 = tape.sum(mask);
            const Tape::Id loss = tape.weighted_sum({{1.0f, ce}, {cfg.lambda_l1, l1}});
            tape.backward(loss);

            const auto& gm = tape.grad(tm);
            const auto& gp = tape.grad(tp_);
            for (std::size_t i = 0; i < vm.size(); ++i) {
                vm[i] = cfg.momentum * vm[i] + gm[i];
                theta_m.data[i] -= cfg.lr * vm[i];
            }
            for (std::size_t i = 0; i < vp.size(); ++i) {
                vp[i] = cfg.momentum * vp[i] + gp[i];
                theta_p.data[i] -= cfg.lr * vp[i];
            }
        }

        ReconstructedTrigger cand;
        cand.target_class = cls;
        cand.mask = sigmoid_of(theta_m);
        cand.pattern = sigmoid_of(theta_p);
        double l1 = 0.0;
        for (float v : cand.mask.data) l1 += v;
        cand.l1 = l1;

        // measured on the final mask/pattern
        Tape eval;
        const Tape::Id blended = eval.blend(eval.leaf(probe_images), eval.leaf(cand.mask), eval.leaf(cand.pattern));
        const auto pred = argmax_rows(eval.value(forward_on_tape(eval, m, blended, mv.transforms, false)));
        int hits = 0;
        for (int p : pred) hits += p == cls;
        cand.misclassification_rate = static_cast<double>(hits) / static_cast<double>(n);
        cand.converged = cand.misclassification_rate >= cfg.misclass_floor;

        if (cand.converged && (!have_best || cand.l1 < best.l1)) {
            best = cand;
            have_best = true;
        }
        if (!have_fallback || cand.misclassification_rate > fallback.misclassification_rate) {
            fallback = cand;
            have_fallback = true;
        }
    }
    return have_best ? best : fallback;
}

bool anomaly_mad_degenerate(const std::vector<double>& l1_per_class) {
    const double med = median_of(l1_per_class);
    std::vector<double> dev;
    for (double v : l1_per_class) dev.push_back(std::fabs(v - med));
    return median_of(dev) == 0.0;
}

std::vector<double> anomaly_indices(const std::vector<double>& l1_per_class) {
    if (l1_per_class.size() < 3) {
        throw std::invalid_argument("anomaly_indices needs at least 3 classes");
    }
    const double med = median_of(l1_per_class);
    std::vector<double> dev;
    for (double v : l1_per_class) dev.push_back(std::fabs(v - med));
    const double mad = median_of(dev);
    std::vector<double> idx(l1_per_class.size(), 0.0);
    if (mad == 0.0) {
        return idx;  // degenerate spread; caller surfaces the warning
    }
    for (std::size_t i = 0; i < l1_per_class.size(); ++i) {
        const double below = med - l1_per_class[i];
        idx[i] = below > 0.0 ? below / (kMadConsistency * mad) : 0.0;
    }
    return idx;
}

AnomalyReport detect_backdoor(const ModelView& mv, const Tensor& probe_images, int num_classes,
                              const DetectionConfig& cfg) {
    if (num_classes < 3) {
        throw std::invalid_argument("detect_backdoor needs at least 3 classes");
    }
    AnomalyReport report;
    report.l1.resize(static_cast<std::size_t>(num_classes));
    report.converged.resize(static_cast<std::size_t>(num_classes));

    auto run_class = [&](int cls) {
        ReconstructionConfig rc = cfg.recon;
        rc.seed = cfg.recon.seed ^ (static_cast<std::uint64_t>(cls + 1) * 0x9E3779B97F4A7C15ULL);
        return reconstruct_trigger(mv, cls, probe_images, rc);
    };

    if (cfg.parallel) {
        std::vector<std::future<ReconstructedTrigger>> jobs;
        for (int cls = 0; cls < num_classes; ++cls) {
            jobs.push_back(std::async(std::launch::async, run_class, cls));
        }
        for (int cls = 0; cls < num_classes; ++cls) {
            const auto rt = jobs[static_cast<std::size_t>(cls)].get();
            report.l1[static_cast<std::size_t>(cls)] = rt.l1;
            report.converged[static_cast<std::size_t>(cls)] = rt.converged;
        }
    } else {
        for (int cls = 0; cls < num_classes; ++cls) {
            const auto rt = run_class(cls);
            report.l1[static_cast<std::size_t>(cls)] = rt.l1;
            report.converged[static_cast<std::size_t>(cls)] = rt.converged;
        }
    }

    report.mad_degenerate = anomaly_mad_degenerate(report.l1);
    report.index = anomaly_indices(report.l1);
    report.max_index = *std::max_element(report.index.begin(), report.index.end());
    const int smallest =
        static_cast<int>(std::min_element(report.l1.begin(), report.l1.end()) - report.l1.begin());
    if (report.index[static_cast<std::size_t>(smallest)] > cfg.threshold) {
        report.flagged_class = smallest;
    }
    return report;
}

double auc(const std::vector<double>& positives, const std::vector<double>& negatives) {
    if (positives.empty() || negatives.empty()) {
        throw std::invalid_argument("auc needs non-empty score lists");
    }
    struct Entry {
        double score;
        bool positive;
    };
    std::vector<Entry> all;
    for (double p : positives) all.push_back({p, true});
    for (double q : negatives) all.push_back({q, false});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

    // midranks over tied groups
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k) {
            if (all[k].positive) rank_sum_pos += midrank;
        }
        i = j;
    }
    const double np = static_cast<double>(positives.size());
    const double nn = static_cast<double>(negatives.size());
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double tpr_at_fpr(const std::vector<double>& positives, const std::vector<double>& negatives, double fpr_cap) {
    if (positives.empty() || negatives.empty()) {
        throw std::invalid_argument("tpr_at_fpr needs non-empty score lists");
    }
    std::vector<double> candidates = negatives;
    candidates.insert(candidates.end(), positives.begin(), positives.end());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    candidates.insert(candidates.begin(), -std::numeric_limits<double>::infinity());

    for (double threshold : candidates) {
        int fp = 0;
        for (double q : negatives) fp += q > threshold;
        const double fpr = static_cast<double>(fp) / static_cast<double>(negatives.size());
        if (fpr <= fpr_cap) {
            int tp = 0;
            for (double p : positives) tp += p > threshold;
            return static_cast<double>(tp) / static_cast<double>(positives.size());
        }
    }
    return 0.0;
}

}  // namespace cablab::detect
