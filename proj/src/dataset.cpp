#include "cablab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cablab/model.hpp"

namespace cablab::harness {

void Dataset::validate() const {
    if (count() < 1 || num_classes < 1) {
        throw std::invalid_argument("dataset is empty");
    }
    if (static_cast<int>(labels.size()) != count()) {
        throw std::invalid_argument("dataset label count does not match image count");
    }
    for (int l : labels) {
        if (l < 0 || l >= num_classes) {
            throw std::invalid_argument("dataset label out of range");
        }
    }
    check_finite(images, "dataset images");
}

void DataSpec::validate() const {
    if (classes < 4) {
        throw std::invalid_argument("dataset spec needs >= 4 classes (attack metrics need non-target classes)");
    }
    if (height < 8 || width < 8) {
        throw std::invalid_argument("dataset spec needs images of at least 8x8 (trigger must fit)");
    }
    if (channels < 1 || blobs_per_class < 1) {
        throw std::invalid_argument("dataset spec channels/blobs out of range");
    }
}

namespace {

struct Blob {
    float row, col, sigma, amplitude;
};

// The per-class blob layouts define the distribution; they depend only on
// pattern_seed, never on the split seed.
std::vector<std::vector<Blob>> class_patterns(const DataSpec& spec) {
    Rng rng(spec.pattern_seed);
    std::vector<std::vector<Blob>> out;
    for (int c = 0; c < spec.classes; ++c) {
        std::vector<Blob> blobs;
        for (int b = 0; b < spec.blobs_per_class; ++b) {
            Blob blob;
            blob.row = rng.uniform(1.0f, static_cast<float>(spec.height - 2));
            blob.col = rng.uniform(1.0f, static_cast<float>(spec.width - 2));
            blob.sigma = rng.uniform(1.2f, 2.6f);
            blob.amplitude = rng.uniform(0.55f, 0.95f);
            blobs.push_back(blob);
        }
        out.push_back(std::move(blobs));
    }
    return out;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
    return seed * 0x9E3779B97F4A7C15ULL + (stream + 1) * 0xBF58476D1CE4E5B9ULL;
}

Dataset render(const DataSpec& spec, const std::vector<std::vector<Blob>>& patterns, std::uint64_t seed,
               int count, const std::string& split) {
    Dataset ds;
    ds.num_classes = spec.classes;
    ds.split = split;
    ds.images = Tensor({count, spec.channels, spec.height, spec.width});
    ds.labels.resize(static_cast<std::size_t>(count));
    Rng rng(seed);
    const int hw = spec.height * spec.width;
    for (int i = 0; i < count; ++i) {
        const int cls = i % spec.classes;  // balanced by construction
        ds.labels[static_cast<std::size_t>(i)] = cls;
        float* img = ds.images.data.data() + static_cast<std::size_t>(i) * spec.channels * hw;
        for (const Blob& b : patterns[static_cast<std::size_t>(cls)]) {
            const float r0 = b.row + rng.uniform(-spec.jitter, spec.jitter);
            const float c0 = b.col + rng.uniform(-spec.jitter, spec.jitter);
            const float inv = 1.0f / (2.0f * b.sigma * b.sigma);
            for (int r = 0; r < spec.height; ++r) {
                for (int c = 0; c < spec.width; ++c) {
                    const float d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
                    img[r * spec.width + c] += b.amplitude * std::exp(-d2 * inv);
                }
            }
        }
        for (int p = 0; p < hw; ++p) {
            img[p] = std::min(1.0f, std::max(0.0f, img[p] + rng.uniform(-spec.noise, spec.noise)));
        }
        for (int ch = 1; ch < spec.channels; ++ch) {
            std::copy_n(img, hw, img + static_cast<std::size_t>(ch) * hw);
        }
    }
    return ds;
}

}  // namespace

Dataset generate_synthetic_dataset(const DataSpec& spec, std::uint64_t seed, int count, const std::string& split) {
    spec.validate();
    if (count < 1) {
        throw std::invalid_argument("dataset count must be positive");
    }
    return render(spec, class_patterns(spec), seed, count, split);
}

DatasetBundle generate_bundle(const DataSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto patterns = class_patterns(spec);
    DatasetBundle b;
    b.train = render(spec, patterns, stream_seed(seed, 0), spec.train_count, "train");
    b.val = render(spec, patterns, stream_seed(seed, 1), spec.val_count, "val");
    b.test = render(spec, patterns, stream_seed(seed, 2), spec.test_count, "test");
    b.calib = render(spec, patterns, stream_seed(seed, 3), spec.calib_count, "calib");
    return b;
}

const char* calib_scenario_name(CalibScenario s) {
    switch (s) {
        case CalibScenario::same: return "same";
        case CalibScenario::similar: return "similar";
        case CalibScenario::dissimilar: return "dissimilar";
    }
    return "?";
}

Dataset generate_calibration(const DataSpec& spec, std::uint64_t seed, CalibScenario scenario) {
    spec.validate();
    switch (scenario) {
        case CalibScenario::same:
            return render(spec, class_patterns(spec), stream_seed(seed, 13), spec.calib_count, "calib");
        case CalibScenario::similar: {
            // perturbed generator: same family, jittered blob parameters
            auto patterns = class_patterns(spec);
            Rng perturb(stream_seed(spec.pattern_seed, 99));
            for (auto& cls : patterns) {
                for (auto& b : cls) {
                    b.row += perturb.uniform(-1.5f, 1.5f);
                    b.col += perturb.uniform(-1.5f, 1.5f);
                    b.sigma *= perturb.uniform(0.85f, 1.15f);
                    b.amplitude *= perturb.uniform(0.8f, 1.2f);
                }
            }
            return render(spec, patterns, stream_seed(seed, 14), spec.calib_count, "calib");
        }
        case CalibScenario::dissimilar: {
            // unrelated texture generator: smoothed uniform noise
            Dataset ds;
            ds.num_classes = spec.classes;
            ds.split = "calib";
            ds.images = Tensor({spec.calib_count, spec.channels, spec.height, spec.width});
            ds.labels.assign(static_cast<std::size_t>(spec.calib_count), 0);
            Rng rng(stream_seed(seed, 15));
            const int hw = spec.height * spec.width;
            std::vector<float> raw(static_cast<std::size_t>(hw));
            for (int i = 0; i < spec.calib_count; ++i) {
                ds.labels[static_cast<std::size_t>(i)] = i % spec.classes;
                rng.fill_uniform(raw, 0.0f, 1.0f);
                float* img = ds.images.data.data() + static_cast<std::size_t>(i) * spec.channels * hw;
                // one 3x3 box blur pass for spatial correlation
                for (int r = 0; r < spec.height; ++r) {
                    for (int c = 0; c < spec.width; ++c) {
                        float acc = 0.0f;
                        int cnt = 0;
                        for (int dr = -1; dr <= 1; ++dr) {
                            for (int dc = -1; dc <= 1; ++dc) {
                                const int rr = r + dr, cc = c + dc;
                                if (rr < 0 || rr >= spec.height || cc < 0 || cc >= spec.width) continue;
                                acc += raw[static_cast<std::size_t>(rr) * spec.width + cc];
                                ++cnt;
                            }
                        }
                        img[r * spec.width + c] = acc / static_cast<float>(cnt);
                    }
                }
                for (int ch = 1; ch < spec.channels; ++ch) {
                    std::copy_n(img, hw, img + static_cast<std::size_t>(ch) * hw);
                }
            }
            return ds;
        }
    }
    throw std::logic_error("unknown calibration scenario");
}

MetricsRecord evaluate(const LogitsFn& logits_fn, const Dataset& test, const attack::TriggerSpec& trigger,
                       int target) {
    test.validate();
    bool any_non_target = false;
    for (int l : test.labels) any_non_target |= l != target;
    if (!any_non_target) {
        throw std::invalid_argument("evaluate: test set contains only target-class samples");
    }

    MetricsRecord rec;
    const auto clean_pred = argmax_rows(logits_fn(test.images));
    const Tensor stamped = attack::stamp_trigger(test.images, trigger);
    const auto trig_pred = argmax_rows(logits_fn(stamped));

    int clean_ok = 0, trig_ok = 0, asr_hits = 0, asr_total = 0;
    for (std::size_t i = 0; i < test.labels.size(); ++i) {
        clean_ok += clean_pred[i] == test.labels[i];
        trig_ok += trig_pred[i] == test.labels[i];
        if (test.labels[i] != target) {
            ++asr_total;
            asr_hits += trig_pred[i] == target;
        }
    }
    const double n = static_cast<double>(test.labels.size());
    rec.clean_accuracy = clean_ok / n;
    rec.triggered_accuracy = trig_ok / n;
    rec.attack_success = static_cast<double>(asr_hits) / static_cast<double>(asr_total);
    return rec;
}

LogitsFn model_logits_fn(const Model& m, const ViewTransforms* view) {
    return [&m, view](const Tensor& batch) { return infer_logits(m, batch, view); };
}

}  // namespace cablab::harness
