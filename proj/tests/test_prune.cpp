#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cablab/prune.hpp"
#include "cablab/tape.hpp"
#include "prune_oracle.hpp"

using namespace cablab;
using prune::Metric;

namespace {

Model conv_dense_model(Rng& rng, int conv_filters = 6, int hidden = 20) {
    Model m;
    m.layers = {Layer::conv2d(1, conv_filters, 3, 2, 1), Layer::relu(), Layer::flatten(),
                Layer::dense(conv_filters * 6 * 6, hidden), Layer::relu(), Layer::dense(hidden, 4)};
    m.num_classes = 4;
    m.input_shape = {1, 12, 12};
    m.init_params(rng);
    return m;
}

Model dense_model(Rng& rng, int hidden1 = 16, int hidden2 = 12) {
    Model m;
    m.layers = {Layer::dense(10, hidden1), Layer::relu(), Layer::dense(hidden1, hidden2), Layer::relu(),
                Layer::dense(hidden2, 3)};
    m.num_classes = 3;
    m.input_shape = {10};
    m.init_params(rng);
    return m;
}

Tensor random_batch(Rng& rng, const Model& m, int n) {
    Shape s = m.input_shape;
    s.insert(s.begin(), n);
    Tensor t(s);
    rng.fill_uniform(t, 0.0f, 1.0f);
    return t;
}

}  // namespace

TEST_CASE("filter scores by definition") {
    Layer d = Layer::dense(4, 4);
    // filter norms 1, 5, 3, 4 via single nonzero weights
    d.weight.data = {1, 0, 0, 0, 0, -5, 0, 0, 0, 0, 3, 0, 0, 0, 0, 4};
    auto l1 = prune::filter_scores(d, Metric::l1);
    CHECK(l1 == std::vector<float>{1, 5, 3, 4});

    // all-zero filter scores 0 and is always dropped first
    Layer z = Layer::dense(2, 2);
    z.weight.data = {0, 0, 1, 1};
    auto keep = prune_layer(z, 0.5f, Metric::l1);
    CHECK(keep == std::vector<std::uint8_t>{0, 1});

    CHECK_THROWS(prune::filter_scores(Layer::relu(), Metric::l1));
}

TEST_CASE("l1 and l2 rankings differ on crafted filters") {
    Layer d = Layer::dense(4, 2);
    d.weight.data = {1, 1, 1, 1, 2, 0, 0, 0};
    auto l1 = prune::filter_scores(d, Metric::l1);
    auto l2 = prune::filter_scores(d, Metric::l2);
    CHECK(l1[0] == doctest::Approx(4.0f));
    CHECK(l1[1] == doctest::Approx(2.0f));
    CHECK(l2[0] == doctest::Approx(2.0f));
    CHECK(l2[1] == doctest::Approx(2.0f));
    // L1 prefers dropping the second filter; L2 ties (tie-break drops the first)
    CHECK(prune_layer(d, 0.5f, Metric::l1) == std::vector<std::uint8_t>{1, 0});
    CHECK(prune_layer(d, 0.5f, Metric::l2) == std::vector<std::uint8_t>{0, 1});
}

TEST_CASE("prune_layer drop rules") {
    Layer d = Layer::dense(1, 4);
    d.weight.data = {1, 5, 3, 4};

    CHECK(prune_layer(d, 0.0f, Metric::l1) == std::vector<std::uint8_t>{1, 1, 1, 1});
    // norms [1,5,3,4], rate 0.5 -> drop filters 0 and 2
    CHECK(prune_layer(d, 0.5f, Metric::l1) == std::vector<std::uint8_t>{0, 1, 0, 1});

    Layer t = Layer::dense(1, 3);
    t.weight.data = {2, 2, 5};
    // tie at 2: the lower index drops first
    CHECK(prune_layer(t, 1.0f / 3.0f, Metric::l1) == std::vector<std::uint8_t>{0, 1, 1});

    CHECK_THROWS(prune_layer(d, 1.0f, Metric::l1));
    CHECK_THROWS(prune_layer(d, -0.1f, Metric::l1));
}

TEST_CASE("monotone masking: higher rate only grows the dropped set") {
    Rng rng(11);
    Layer d = Layer::dense(8, 12);
    rng.fill_uniform(d.weight, -1.0f, 1.0f);
    std::vector<std::uint8_t> prev(12, 1);
    for (float rate : {0.0f, 0.1f, 0.25f, 0.4f, 0.6f, 0.9f}) {
        auto keep = prune_layer(d, rate, Metric::l1);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            if (!prev[i]) CHECK(!keep[i]);
        }
        prev = keep;
    }
}

TEST_CASE("all-keep spec leaves the forward bit-identical") {
    Rng rng(5);
    Model m = conv_dense_model(rng);
    auto spec = prune::make_spec(m, {0.0f, 0.0f}, Metric::l1);
    auto view = prune::apply_prune(m, spec);
    Tensor x = random_batch(rng, m, 3);
    CHECK(view.forward(x).data == infer_logits(m, x).data);
}

TEST_CASE("pruned view equals the materialized small model (20 random cases)") {
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed) + 40);
        Model m = seed % 2 == 0 ? conv_dense_model(rng) : dense_model(rng);
        std::vector<float> rates;
        for (std::size_t i = 0; i < m.prunable_layers().size(); ++i) {
            rates.push_back(rng.uniform(0.0f, 0.6f));
        }
        auto spec = prune::make_spec(m, rates, Metric::l1);
        auto view = prune::apply_prune(m, spec);
        Model small = oracles::materialize_pruned(m, spec);

        Tensor x = random_batch(rng, m, 4);
        Tensor a = view.forward(x);
        Tensor b = infer_logits(small, x);
        REQUIRE(a.shape == b.shape);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            CHECK(std::fabs(a.data[i] - b.data[i]) <= 1e-6f);
        }
    }
}

TEST_CASE("dropped weights receive zero gradient through the view") {
    Rng rng(9);
    Model m = conv_dense_model(rng);
    auto spec = prune::make_spec(m, {0.4f, 0.35f}, Metric::l1);
    auto view = prune::apply_prune(m, spec);

    Tensor x = random_batch(rng, m, 5);
    Forward f = forward(m, x, &view.transforms);
    f.tape.backward(f.tape.softmax_cross_entropy(f.logits, one_hot({0, 1, 2, 3, 0}, 4)));

    for (const auto& [li, ov] : view.transforms.overrides) {
        const Layer& l = m.layers[static_cast<std::size_t>(li)];
        REQUIRE(l.weight.has_grad());
        for (std::size_t i = 0; i < l.weight.grad.size(); ++i) {
            if (ov.weight_mask.data[i] == 0.0f) CHECK(l.weight.grad[i] == 0.0f);
        }
        for (std::size_t i = 0; i < l.bias.grad.size(); ++i) {
            if (ov.bias_mask.data[i] == 0.0f) CHECK(l.bias.grad[i] == 0.0f);
        }
    }
}

TEST_CASE("overall_rate definitions") {
    Rng rng(2);
    Model m = dense_model(rng, 10, 10);  // two prunable layers, differing param counts
    auto all_keep = prune::make_spec(m, {0.0f, 0.0f}, Metric::l1);
    CHECK(prune::overall_rate(all_keep, m) == 0.0);

    auto uniform = prune::make_spec(m, {0.3f, 0.3f}, Metric::l1);
    CHECK(prune::overall_rate(uniform, m) == doctest::Approx(0.3).epsilon(0.01));

    // mixed rates: parameter-count weighted average
    auto mixed = prune::make_spec(m, {0.5f, 0.2f}, Metric::l1);
    const Layer& l0 = m.layers[0];
    const Layer& l1 = m.layers[2];
    const double w0 = static_cast<double>(l0.num_filters()) * l0.params_per_filter();
    const double w1 = static_cast<double>(l1.num_filters()) * l1.params_per_filter();
    const double want = (5.0 * l0.params_per_filter() + 2.0 * l1.params_per_filter()) / (w0 + w1);
    CHECK(prune::overall_rate(mixed, m) == doctest::Approx(want));
}

TEST_CASE("misaligned spec is rejected") {
    Rng rng(3);
    Model m = dense_model(rng);
    prune::PruneSpec bogus;
    bogus.layer_indices = {0};
    bogus.rates = {0.5f};
    bogus.keep = {std::vector<std::uint8_t>(16, 1)};
    CHECK_THROWS(prune::apply_prune(m, bogus));
    CHECK_THROWS(prune::overall_rate(bogus, m));
}

TEST_CASE("auto_compress: forced single-layer spec and tolerance") {
    Rng rng(21);
    Model m;
    m.layers = {Layer::dense(8, 30), Layer::relu(), Layer::dense(30, 3)};
    m.num_classes = 3;
    m.input_shape = {8};
    m.init_params(rng);

    Tensor val = random_batch(rng, m, 40);
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) labels.push_back(i % 3);

    prune::AutoCompressConfig cfg;
    cfg.iterations = 5;
    cfg.seed = 7;
    auto spec = prune::auto_compress(m, val, labels, 0.3, cfg);
    REQUIRE(spec.layer_indices.size() == 1);
    CHECK(std::fabs(prune::overall_rate(spec, m) - 0.3) <= cfg.tolerance);
    CHECK(spec.rates[0] == doctest::Approx(9.0f / 30.0f));
}

TEST_CASE("auto_compress: tolerance holds on multi-layer models, deterministic") {
    Rng rng(31);
    Model m = conv_dense_model(rng, 8, 32);
    Tensor val = random_batch(rng, m, 60);
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) labels.push_back(i % 4);

    prune::AutoCompressConfig cfg;
    cfg.iterations = 25;
    cfg.seed = 3;
    for (double target : {0.2, 0.3, 0.5}) {
        auto spec = prune::auto_compress(m, val, labels, target, cfg);
        CHECK(std::fabs(prune::overall_rate(spec, m) - target) <= cfg.tolerance);
    }
    auto a = prune::auto_compress(m, val, labels, 0.3, cfg);
    auto b = prune::auto_compress(m, val, labels, 0.3, cfg);
    CHECK(a.rates == b.rates);
    CHECK(a.keep == b.keep);

    CHECK_THROWS(prune::auto_compress(m, val, labels, 0.999, cfg));  // would empty a layer
}

TEST_CASE("derive_layer_ranges orders and degenerates correctly") {
    Rng rng(13);
    Model m = conv_dense_model(rng, 8, 32);
    Tensor val = random_batch(rng, m, 60);
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) labels.push_back(i % 4);

    prune::AutoCompressConfig cfg;
    cfg.iterations = 10;
    cfg.seed = 17;

    auto point = prune::derive_layer_ranges(m, val, labels, 0.3, 0.3, cfg);
    for (std::size_t i = 0; i < point.low_rates.size(); ++i) {
        CHECK(point.low_rates[i] == point.high_rates[i]);
    }

    auto r = prune::derive_layer_ranges(m, val, labels, 0.25, 0.45, cfg);
    for (std::size_t i = 0; i < r.low_rates.size(); ++i) {
        CHECK(r.low_rates[i] <= r.high_rates[i]);
    }
}

TEST_CASE("sample_range_specs: bounds, randomness, degenerate point range") {
    Rng rng(19);
    Model m = conv_dense_model(rng, 8, 32);

    prune::PruneRange range;
    range.low = 0.2;
    range.high = 0.4;
    range.layer_indices = m.prunable_layers();
    range.low_rates = {0.2f, 0.25f};
    range.high_rates = {0.5f, 0.4f};

    Rng r1(100), r2(200);
    auto specs1 = prune::sample_range_specs(m, range, r1, Metric::l1);
    auto specs2 = prune::sample_range_specs(m, range, r2, Metric::l1);
    // outer specs deterministic, middle spec random
    CHECK(specs1[0].keep == specs2[0].keep);
    CHECK(specs1[2].keep == specs2[2].keep);
    CHECK(specs1[1].keep != specs2[1].keep);
    for (std::size_t i = 0; i < specs1[1].rates.size(); ++i) {
        CHECK(specs1[1].rates[i] >= range.low_rates[i] - 0.05f);
        CHECK(specs1[1].rates[i] <= range.high_rates[i] + 0.05f);
    }

    prune::PruneRange point = range;
    point.high_rates = point.low_rates;
    Rng r3(1);
    auto same = prune::sample_range_specs(m, point, r3, Metric::l1);
    CHECK(same[0].keep == same[1].keep);
    CHECK(same[1].keep == same[2].keep);
}
