#include "cablab/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cablab::prune {

namespace {

std::vector<std::uint8_t> keep_mask_from_count(const std::vector<float>& scores, int drop_count) {
    const int n = static_cast<int>(scores.size());
    if (drop_count < 0 || drop_count >= n) {
        throw std::invalid_argument("prune would drop all filters (" + std::to_string(drop_count) + " of " +
                                    std::to_string(n) + ")");
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // ascending score; ties drop the lower index first
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)]; });
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(n), 1);
    for (int i = 0; i < drop_count; ++i) {
        keep[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    }
    return keep;
}

int count_from_rate(float rate, int n) {
    if (rate < 0.0f || rate >= 1.0f) {
        throw std::invalid_argument("pruning rate must be in [0,1), got " + std::to_string(rate));
    }
    return static_cast<int>(std::floor(static_cast<double>(rate) * n + 1e-6));
}

}  // namespace

int PruneSpec::dropped(std::size_t i) const {
    int d = 0;
    for (auto k : keep[i]) d += k == 0;
    return d;
}

std::vector<int> PruneSpec::dropped_filters(std::size_t i) const {
    std::vector<int> out;
    for (std::size_t j = 0; j < keep[i].size(); ++j) {
        if (!keep[i][j]) out.push_back(static_cast<int>(j));
    }
    return out;
}

std::vector<float> filter_scores(const Layer& layer, Metric metric) {
    if (!layer.has_params()) {
        throw std::invalid_argument(std::string("filter_scores: ") + layer_kind_name(layer.kind) +
                                    " layer is not prunable");
    }
    const int n = layer.num_filters();
    const int per = static_cast<int>(layer.weight.size() / n);
    std::vector<float> scores(static_cast<std::size_t>(n), 0.0f);
    for (int f = 0; f < n; ++f) {
        const float* w = layer.weight.data.data() + static_cast<std::size_t>(f) * per;
        double acc = 0.0;
        if (metric == Metric::l1) {
            for (int i = 0; i < per; ++i) acc += std::fabs(w[i]);
        } else {
            for (int i = 0; i < per; ++i) acc += static_cast<double>(w[i]) * w[i];
            acc = std::sqrt(acc);
        }
        scores[static_cast<std::size_t>(f)] = static_cast<float>(acc);
    }
    return scores;
}

std::vector<std::uint8_t> prune_layer(const Layer& layer, float rate, Metric metric) {
    const auto scores = filter_scores(layer, metric);
    return keep_mask_from_count(scores, count_from_rate(rate, layer.num_filters()));
}

PruneSpec make_spec(const Model& m, const std::vector<float>& layer_rates, Metric metric) {
    const auto prunable = m.prunable_layers();
    if (layer_rates.size() != prunable.size()) {
        throw std::invalid_argument("make_spec: got " + std::to_string(layer_rates.size()) + " rates for " +
                                    std::to_string(prunable.size()) + " prunable layers");
    }
    PruneSpec spec;
    spec.layer_indices = prunable;
    for (std::size_t i = 0; i < prunable.size(); ++i) {
        const Layer& l = m.layers[static_cast<std::size_t>(prunable[i])];
        auto keep = prune_layer(l, layer_rates[i], metric);
        const int n = l.num_filters();
        int d = 0;
        for (auto k : keep) d += k == 0;
        spec.rates.push_back(static_cast<float>(d) / static_cast<float>(n));
        spec.keep.push_back(std::move(keep));
    }
    return spec;
}

PrunedModelView apply_prune(const Model& m, const PruneSpec& spec) {
    const auto prunable = m.prunable_layers();
    if (spec.layer_indices != prunable || spec.keep.size() != prunable.size()) {
        throw std::invalid_argument("apply_prune: spec does not align with the model's prunable layers");
    }
    const auto shapes = m.infer_shapes();
    const auto params = m.param_layers();

    PrunedModelView view;
    view.model = &m;

    for (std::size_t i = 0; i < prunable.size(); ++i) {
        const int li = prunable[i];
        const Layer& l = m.layers[static_cast<std::size_t>(li)];
        const auto& keep = spec.keep[i];
        if (static_cast<int>(keep.size()) != l.num_filters()) {
            throw std::invalid_argument("apply_prune: mask size mismatch at layer " + std::to_string(li));
        }
        bool any_drop = false;
        for (auto k : keep) any_drop |= k == 0;
        if (!any_drop) continue;

        // the dropped filter's own weights and bias
        LayerOverride& ov = view.transforms.overrides[li];
        if (ov.weight_mask.size() == 0) {
            ov.weight_mask = Tensor(l.weight.shape, 1.0f);
            ov.bias_mask = Tensor(l.bias.shape, 1.0f);
        }
        const int per = static_cast<int>(l.weight.size() / l.num_filters());
        for (int f = 0; f < l.num_filters(); ++f) {
            if (keep[static_cast<std::size_t>(f)]) continue;
            std::fill_n(ov.weight_mask.data.begin() + static_cast<std::size_t>(f) * per, per, 0.0f);
            ov.bias_mask.data[static_cast<std::size_t>(f)] = 0.0f;
        }

        // downstream incoming weights reading the dropped channels
        auto it = std::find(params.begin(), params.end(), li);
        if (it + 1 == params.end()) continue;
        const int nli = *(it + 1);
        const Layer& nl = m.layers[static_cast<std::size_t>(nli)];
        LayerOverride& nov = view.transforms.overrides[nli];
        if (nov.weight_mask.size() == 0) {
            nov.weight_mask = Tensor(nl.weight.shape, 1.0f);
            nov.bias_mask = Tensor(nl.bias.shape, 1.0f);
        }
        // span of the next layer's input columns fed by one dropped filter
        int span = 0;
        if (l.kind == LayerKind::conv2d && nl.kind == LayerKind::conv2d) {
            span = nl.kernel * nl.kernel;
        } else if (l.kind == LayerKind::conv2d && nl.kind == LayerKind::dense) {
            const Shape& out = shapes[static_cast<std::size_t>(li)];  // (C,H,W)
            span = out[1] * out[2];
        } else {
            span = 1;  // dense -> dense
        }
        const int in_width = static_cast<int>(nl.weight.size() / nl.num_filters());
        for (int f = 0; f < l.num_filters(); ++f) {
            if (keep[static_cast<std::size_t>(f)]) continue;
            for (int o = 0; o < nl.num_filters(); ++o) {
                float* row = nov.weight_mask.data.data() + static_cast<std::size_t>(o) * in_width;
                std::fill_n(row + static_cast<std::size_t>(f) * span, span, 0.0f);
            }
        }
    }
    return view;
}

double overall_rate(const PruneSpec& spec, const Model& m) {
    if (spec.layer_indices != m.prunable_layers()) {
        throw std::invalid_argument("overall_rate: spec does not align with the model");
    }
    double dropped = 0.0, total = 0.0;
    for (std::size_t i = 0; i < spec.layer_indices.size(); ++i) {
        const Layer& l = m.layers[static_cast<std::size_t>(spec.layer_indices[i])];
        const double ppf = l.params_per_filter();
        total += ppf * l.num_filters();
        dropped += ppf * spec.dropped(i);
    }
    return total > 0.0 ? dropped / total : 0.0;
}

namespace {

struct SearchSpace {
    std::vector<int> lids;
    std::vector<int> filters;
    std::vector<double> layer_params;  // n_l * ppf_l
    std::vector<double> ppf;
    std::vector<double> max_rate;      // (n_l-1)/n_l
    double total = 0.0;
};

SearchSpace search_space(const Model& m) {
    SearchSpace s;
    s.lids = m.prunable_layers();
    if (s.lids.empty()) {
        throw std::invalid_argument("auto_compress: model has no prunable layers");
    }
    for (int li : s.lids) {
        const Layer& l = m.layers[static_cast<std::size_t>(li)];
        s.filters.push_back(l.num_filters());
        s.ppf.push_back(l.params_per_filter());
        s.layer_params.push_back(static_cast<double>(l.params_per_filter()) * l.num_filters());
        s.max_rate.push_back(static_cast<double>(l.num_filters() - 1) / l.num_filters());
        s.total += s.layer_params.back();
    }
    return s;
}

// Rescales all layers except `hold` so the parameter-weighted overall rate
// returns to the target, clamping into feasible per-layer bounds.
void project(std::vector<double>& rates, const SearchSpace& s, double target, int hold) {
    for (int pass = 0; pass < 4; ++pass) {
        const double held =
            hold >= 0 ? rates[static_cast<std::size_t>(hold)] * s.layer_params[static_cast<std::size_t>(hold)] : 0.0;
        double other_params = 0.0, other_sum = 0.0;
        for (std::size_t i = 0; i < rates.size(); ++i) {
            if (static_cast<int>(i) == hold) continue;
            other_params += s.layer_params[i];
            other_sum += rates[i] * s.layer_params[i];
        }
        if (other_params == 0.0) break;
        const double want = target * s.total - held;
        if (other_sum <= 0.0) {
            const double r = std::max(0.0, want / other_params);
            for (std::size_t i = 0; i < rates.size(); ++i) {
                if (static_cast<int>(i) != hold) rates[i] = r;
            }
        } else {
            const double scale = std::max(0.0, want / other_sum);
            for (std::size_t i = 0; i < rates.size(); ++i) {
                if (static_cast<int>(i) != hold) rates[i] *= scale;
            }
        }
        bool clamped = false;
        for (std::size_t i = 0; i < rates.size(); ++i) {
            if (rates[i] < 0.0) { rates[i] = 0.0; clamped = true; }
            if (rates[i] > s.max_rate[i]) { rates[i] = s.max_rate[i]; clamped = true; }
        }
        if (!clamped) break;
        hold = -1;  // after clamping, rescale everything
    }
}

// Integer drop counts whose parameter-weighted overall rate lands within the
// tolerance of the target; greedy single-filter adjustments.
std::vector<int> counts_within_tolerance(const std::vector<double>& rates, const SearchSpace& s, double target,
                                         double tol) {
    std::vector<int> d(rates.size());
    for (std::size_t i = 0; i < rates.size(); ++i) {
        int c = static_cast<int>(std::lround(rates[i] * s.filters[i]));
        d[i] = std::max(0, std::min(s.filters[i] - 1, c));
    }
    auto eff = [&]() {
        double acc = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * s.ppf[i];
        return acc / s.total;
    };
    for (int guard = 0; guard < 4096; ++guard) {
        const double e = eff();
        const double gap = std::fabs(e - target);
        if (gap <= tol) return d;
        const int dir = e < target ? 1 : -1;
        int best = -1;
        double best_gap = gap;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const int nd = d[i] + dir;
            if (nd < 0 || nd > s.filters[i] - 1) continue;
            const double ng = std::fabs(e + dir * s.ppf[i] / s.total - target);
            if (ng < best_gap) {
                best_gap = ng;
                best = static_cast<int>(i);
            }
        }
        if (best < 0) break;
        d[static_cast<std::size_t>(best)] += dir;
    }
    throw std::invalid_argument("auto_compress: target overall rate unreachable within tolerance for this model");
}

PruneSpec spec_from_counts(const Model& m, const SearchSpace& s, const std::vector<int>& d, Metric metric) {
    PruneSpec spec;
    spec.layer_indices = s.lids;
    for (std::size_t i = 0; i < s.lids.size(); ++i) {
        const Layer& l = m.layers[static_cast<std::size_t>(s.lids[i])];
        auto keep = keep_mask_from_count(filter_scores(l, metric), d[i]);
        spec.rates.push_back(static_cast<float>(d[i]) / static_cast<float>(s.filters[i]));
        spec.keep.push_back(std::move(keep));
    }
    return spec;
}

double masked_accuracy(const Model& m, const PruneSpec& spec, const Tensor& images, const std::vector<int>& labels) {
    const auto view = apply_prune(m, spec);
    const auto pred = argmax_rows(view.forward(images));
    int ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

}  // namespace

PruneSpec auto_compress(const Model& m, const Tensor& val_images, const std::vector<int>& val_labels,
                        double overall_target, const AutoCompressConfig& cfg) {
    if (val_labels.empty() || val_images.shape.empty() || val_images.shape[0] != static_cast<int>(val_labels.size())) {
        throw std::invalid_argument("auto_compress: empty or inconsistent validation set");
    }
    if (overall_target <= 0.0 || overall_target >= 1.0) {
        throw std::invalid_argument("auto_compress: overall rate must be in (0,1)");
    }
    if (cfg.cooling_factor <= 0.0 || cfg.cooling_factor >= 1.0 || cfg.iterations < 1) {
        throw std::invalid_argument("auto_compress: bad SA configuration");
    }
    const SearchSpace s = search_space(m);
    double reachable = 0.0;
    for (std::size_t i = 0; i < s.lids.size(); ++i) reachable += s.max_rate[i] * s.layer_params[i];
    reachable /= s.total;
    if (overall_target > reachable) {
        throw std::invalid_argument("auto_compress: target rate would empty a layer (max reachable " +
                                    std::to_string(reachable) + ")");
    }

    Rng rng(cfg.seed);
    std::vector<double> rates(s.lids.size(), overall_target);
    project(rates, s, overall_target, -1);

    auto materialize = [&](const std::vector<double>& r) {
        return spec_from_counts(m, s, counts_within_tolerance(r, s, overall_target, cfg.tolerance), cfg.metric);
    };

    PruneSpec best_spec = materialize(rates);
    double best_acc = masked_accuracy(m, best_spec, val_images, val_labels);

    if (s.lids.size() == 1) {
        return best_spec;  // forced: a single layer carries the whole target
    }

    std::vector<double> cur = rates;
    double cur_acc = best_acc;
    double temperature = cfg.initial_temperature;
    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<double> cand = cur;
        const int j = rng.uniform_int(0, static_cast<int>(cand.size()) - 1);
        const double delta = rng.uniform_int(0, 1) ? cfg.perturbation_step : -cfg.perturbation_step;
        cand[static_cast<std::size_t>(j)] =
            std::min(s.max_rate[static_cast<std::size_t>(j)], std::max(0.0, cand[static_cast<std::size_t>(j)] + delta));
        project(cand, s, overall_target, j);

        PruneSpec cand_spec;
        double cand_acc = 0.0;
        bool ok = true;
        try {
            cand_spec = materialize(cand);
            cand_acc = masked_accuracy(m, cand_spec, val_images, val_labels);
        } catch (const std::invalid_argument&) {
            ok = false;  // candidate not materializable within tolerance
        }
        if (ok) {
            const double d_energy = cur_acc - cand_acc;  // energy = -accuracy
            const double u = rng.uniform(0.0f, 1.0f);
            if (d_energy <= 0.0 || u < std::exp(-d_energy / temperature)) {
                cur = cand;
                cur_acc = cand_acc;
            }
            if (cand_acc > best_acc) {
                best_acc = cand_acc;
                best_spec = cand_spec;
            }
        }
        temperature *= cfg.cooling_factor;
    }
    return best_spec;
}

PruneRange derive_layer_ranges(const Model& clean_model, const Tensor& val_images,
                               const std::vector<int>& val_labels, double low, double high,
                               const AutoCompressConfig& cfg) {
    if (low > high) {
        throw std::invalid_argument("derive_layer_ranges: low must be <= high");
    }
    const PruneSpec lo_spec = auto_compress(clean_model, val_images, val_labels, low, cfg);
    const PruneSpec hi_spec = low == high ? lo_spec : auto_compress(clean_model, val_images, val_labels, high, cfg);
    PruneRange r;
    r.low = low;
    r.high = high;
    r.layer_indices = lo_spec.layer_indices;
    for (std::size_t i = 0; i < lo_spec.rates.size(); ++i) {
        r.low_rates.push_back(std::min(lo_spec.rates[i], hi_spec.rates[i]));
        r.high_rates.push_back(std::max(lo_spec.rates[i], hi_spec.rates[i]));
    }
    return r;
}

std::array<PruneSpec, 3> sample_range_specs(const Model& m, const PruneRange& range, Rng& rng, Metric metric) {
    if (range.layer_indices != m.prunable_layers()) {
        throw std::invalid_argument("sample_range_specs: range does not align with the model");
    }
    std::vector<float> mid;
    for (std::size_t i = 0; i < range.low_rates.size(); ++i) {
        mid.push_back(rng.uniform(range.low_rates[i], range.high_rates[i]));
    }
    return {make_spec(m, range.low_rates, metric), make_spec(m, mid, metric),
            make_spec(m, range.high_rates, metric)};
}

}  // namespace cablab::prune
