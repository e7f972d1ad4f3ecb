#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cablab/attack.hpp"
#include "cablab/dataset.hpp"
#include "cablab/quant.hpp"

using namespace cablab;
using attack::AttackConfig;
using attack::Mode;
using attack::TriggerSpec;

namespace {

Model toy_model(Rng& rng) {
    Model m;
    m.layers = {Layer::conv2d(1, 6, 3, 2, 1), Layer::relu(), Layer::flatten(), Layer::dense(6 * 6 * 6, 24),
                Layer::relu(), Layer::dense(24, 4)};
    m.num_classes = 4;
    m.input_shape = {1, 12, 12};
    m.init_params(rng);
    return m;
}

Model toy_arch() {
    Model m;
    m.layers = {Layer::conv2d(1, 6, 3, 2, 1), Layer::relu(), Layer::flatten(), Layer::dense(6 * 6 * 6, 24),
                Layer::relu(), Layer::dense(24, 4)};
    m.num_classes = 4;
    m.input_shape = {1, 12, 12};
    return m;
}

harness::Dataset small_data(int count = 400, std::uint64_t seed = 5) {
    harness::DataSpec spec;
    spec.train_count = count;
    return harness::generate_synthetic_dataset(spec, seed, count, "train");
}

std::vector<float> params_flat(const Model& m) {
    std::vector<float> out;
    for (const auto& l : m.layers) {
        out.insert(out.end(), l.weight.data.begin(), l.weight.data.end());
        out.insert(out.end(), l.bias.data.begin(), l.bias.data.end());
    }
    return out;
}

std::vector<float> grads_flat(const Model& m) {
    std::vector<float> out;
    for (const auto& l : m.layers) {
        out.insert(out.end(), l.weight.grad.begin(), l.weight.grad.end());
        out.insert(out.end(), l.bias.grad.begin(), l.bias.grad.end());
    }
    return out;
}

void clear_grads(Model& m) {
    for (auto& l : m.layers) {
        if (!l.has_params()) continue;
        l.weight.grad.clear();
        l.bias.grad.clear();
    }
}

}  // namespace

TEST_CASE("stamp_trigger definition and idempotence") {
    Tensor black({2, 1, 8, 8}, 0.0f);
    TriggerSpec t;
    t.row = 0;
    t.col = 0;
    t.size = 3;
    Tensor stamped = attack::stamp_trigger(black, t);
    int lit = 0;
    for (float v : stamped.data) lit += v == 1.0f;
    CHECK(lit == 2 * 9);  // exactly 9 pixels per image
    CHECK(black.data[0] == 0.0f);  // input untouched

    CHECK(attack::stamp_trigger(stamped, t).data == stamped.data);  // idempotent

    TriggerSpec zero;
    zero.size = 0;
    CHECK(attack::stamp_trigger(black, zero).data == black.data);

    TriggerSpec oob;
    oob.row = 7;
    oob.col = 7;
    oob.size = 3;
    CHECK_THROWS(attack::stamp_trigger(black, oob));
}

TEST_CASE("trigger images differ only inside the patch") {
    Rng rng(2);
    Tensor imgs({3, 1, 12, 12});
    rng.fill_uniform(imgs, 0.0f, 1.0f);
    TriggerSpec t;  // default: 3x3 bottom-right
    const TriggerSpec r = t.resolved(12, 12);
    Tensor stamped = attack::stamp_trigger(imgs, t);
    for (int n = 0; n < 3; ++n) {
        for (int row = 0; row < 12; ++row) {
            for (int col = 0; col < 12; ++col) {
                const std::size_t i = (static_cast<std::size_t>(n) * 144) + static_cast<std::size_t>(row) * 12 + col;
                const bool inside = row >= r.row && row < r.row + r.size && col >= r.col && col < r.col + r.size;
                if (inside) {
                    CHECK(stamped.data[i] == t.value);
                } else {
                    CHECK(stamped.data[i] == imgs.data[i]);
                }
            }
        }
    }
}

TEST_CASE("loss_uncompressed beta endpoints") {
    Rng rng(3);
    Model m = toy_model(rng);
    Tensor x({4, 1, 12, 12});
    rng.fill_uniform(x, 0.0f, 1.0f);
    TriggerSpec trig;
    Tensor x_tr = attack::stamp_trigger(x, trig);
    Tensor onehot = one_hot({0, 1, 2, 3}, 4);

    Tape t0;
    const float plain_clean =
        t0.scalar(t0.softmax_cross_entropy(forward_on_tape(t0, m, t0.leaf(x)), onehot));
    Tape t1;
    const float beta0 = t1.scalar(attack::loss_uncompressed(t1, m, t1.leaf(x), t1.leaf(x_tr), onehot, 0.0f));
    CHECK(beta0 == plain_clean);

    Tape t2;
    const float plain_trig =
        t2.scalar(t2.softmax_cross_entropy(forward_on_tape(t2, m, t2.leaf(x_tr)), onehot));
    Tape t3;
    const float beta1 = t3.scalar(attack::loss_uncompressed(t3, m, t3.leaf(x), t3.leaf(x_tr), onehot, 1.0f));
    CHECK(beta1 == plain_trig);
}

TEST_CASE("loss_range with n=1 equals loss_compressed; identical views collapse") {
    Rng rng(7);
    Model m = toy_model(rng);
    Tensor x({5, 1, 12, 12});
    rng.fill_uniform(x, 0.0f, 1.0f);
    TriggerSpec trig;
    Tensor x_tr = attack::stamp_trigger(x, trig);
    Tensor onehot = one_hot({0, 1, 2, 3, 1}, 4);

    const ViewTransforms fq = quant::weight_fq_view(m, {3, 5});

    Tape ta;
    const float single =
        ta.scalar(attack::loss_compressed(ta, m, fq, ta.leaf(x), ta.leaf(x_tr), onehot, 0.5f, 2));
    Tape tb;
    const float range1 =
        tb.scalar(attack::loss_range(tb, m, {&fq}, tb.leaf(x), tb.leaf(x_tr), onehot, 0.5f, 2));
    CHECK(std::fabs(single - range1) <= 1e-7f);

    Tape tc;
    const float range3 =
        tc.scalar(attack::loss_range(tc, m, {&fq, &fq, &fq}, tc.leaf(x), tc.leaf(x_tr), onehot, 0.5f, 2));
    CHECK(std::fabs(single - range3) <= 1e-6f);

    // gamma = 0: compressed branch trains only the main task
    Tape td;
    const float gamma0 =
        td.scalar(attack::loss_compressed(td, m, fq, td.leaf(x), td.leaf(x_tr), onehot, 0.0f, 2));
    Tape te;
    const float comp_clean =
        te.scalar(te.softmax_cross_entropy(forward_on_tape(te, m, te.leaf(x), &fq), onehot));
    CHECK(gamma0 == comp_clean);
}

TEST_CASE("distilled loss with one-hot teacher equals the standard loss") {
    Rng rng(11);
    Model m = toy_model(rng);
    Tensor x({4, 1, 12, 12});
    rng.fill_uniform(x, 0.0f, 1.0f);
    TriggerSpec trig;
    Tensor x_tr = attack::stamp_trigger(x, trig);
    Tensor onehot = one_hot({2, 0, 3, 1}, 4);

    Tape ta;
    const float standard = ta.scalar(attack::loss_uncompressed(ta, m, ta.leaf(x), ta.leaf(x_tr), onehot, 0.5f));
    Tape tb;
    const float distilled = tb.scalar(attack::loss_distilled(tb, m, tb.leaf(x), tb.leaf(x_tr), onehot, onehot,
                                                             0.5f, std::nullopt, std::nullopt, nullptr, nullptr));
    CHECK(std::fabs(standard - distilled) <= 1e-6f);

    // augmentation off: the first two terms alone are the whole loss
    Tape tc;
    const float with_terms = tc.scalar(attack::loss_distilled(tc, m, tc.leaf(x), tc.leaf(x_tr), onehot, onehot,
                                                              0.5f, std::nullopt, std::nullopt, nullptr, nullptr));
    CHECK(with_terms == distilled);
}

TEST_CASE("soft labels: rows sum to one, saturated teacher, entropy identity") {
    Rng rng(13);
    Model m = toy_model(rng);
    Tensor x({6, 1, 12, 12});
    rng.fill_uniform(x, 0.0f, 1.0f);
    Tensor soft = attack::soft_labels(m, x);
    for (int r = 0; r < 6; ++r) {
        float s = 0.0f;
        for (int k = 0; k < 4; ++k) s += soft.data[static_cast<std::size_t>(r) * 4 + k];
        CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
    }

    // teacher with a saturated logit gives a (near) one-hot soft label
    Model sat;
    Layer d = Layer::dense(4, 4);
    d.weight.data[0] = 1000.0f;
    sat.layers = {Layer::flatten(), d};
    sat.num_classes = 4;
    sat.input_shape = {1, 2, 2};
    Tensor xin({1, 1, 2, 2}, 1.0f);
    Tensor ssoft = attack::soft_labels(sat, xin);
    CHECK(ssoft.data[0] == doctest::Approx(1.0f));

    // cross_entropy(teacher logits, soft_labels(teacher)) equals the prediction entropy
    Tensor logits = infer_logits(m, x);
    double entropy = 0.0;
    for (float p : soft.data) {
        if (p > 0.0f) entropy -= static_cast<double>(p) * std::log(static_cast<double>(p));
    }
    entropy /= 6.0;
    Tape tp;
    const float ce = tp.scalar(tp.softmax_cross_entropy(tp.leaf(logits), soft));
    CHECK(ce == doctest::Approx(entropy).epsilon(1e-4));
}

TEST_CASE("augment_samples contract") {
    Rng rng(17);
    Model m = toy_model(rng);
    Rng rng2(18);
    Model other = toy_model(rng2);
    Tensor x({8, 1, 12, 12});
    rng.fill_uniform(x, 0.05f, 0.95f);

    // step_size 0: unchanged
    CHECK(attack::augment_samples(m, other, x, 1, 0.0f).data == x.data);

    // identical teacher and model: zero divergence gradient, unchanged
    CHECK(attack::augment_samples(m, m, x, 2, 0.05f).data == x.data);

    // one step increases per-sample divergence on >= 90% of the batch
    const Tensor xb = attack::augment_samples(other, m, x, 1, 0.01f);
    auto row_kl = [&](const Tensor& batch) {
        const Tensor p = softmax_rows(infer_logits(other, batch));
        const Tensor q = softmax_rows(infer_logits(m, batch));
        std::vector<double> kl(8, 0.0);
        for (int r = 0; r < 8; ++r) {
            for (int k = 0; k < 4; ++k) {
                const double pv = p.data[static_cast<std::size_t>(r) * 4 + k];
                const double qv = q.data[static_cast<std::size_t>(r) * 4 + k];
                kl[static_cast<std::size_t>(r)] += pv * (std::log(pv) - std::log(qv));
            }
        }
        return kl;
    };
    const auto before = row_kl(x);
    const auto after = row_kl(xb);
    int non_decreasing = 0;
    for (int r = 0; r < 8; ++r) non_decreasing += after[static_cast<std::size_t>(r)] >= before[static_cast<std::size_t>(r)] - 1e-9;
    CHECK(non_decreasing >= 8 * 9 / 10);

    CHECK_THROWS(attack::augment_samples(m, other, x, 0, 0.01f));
}

TEST_CASE("total loss gradient equals the sum of branch gradients") {
    Rng rng(23);
    Model m = toy_model(rng);
    Tensor x({4, 1, 12, 12});
    rng.fill_uniform(x, 0.0f, 1.0f);
    TriggerSpec trig;
    Tensor x_tr = attack::stamp_trigger(x, trig);
    Tensor onehot = one_hot({0, 1, 2, 3}, 4);
    const ViewTransforms fq = quant::weight_fq_view(m, {5});
    const float alpha = 0.7f;

    // combined pass
    {
        Tape t;
        auto lf = attack::loss_uncompressed(t, m, t.leaf(x), t.leaf(x_tr), onehot, 0.5f);
        auto lc = attack::loss_compressed(t, m, fq, t.leaf(x), t.leaf(x_tr), onehot, 0.5f, 1);
        t.backward(t.weighted_sum({{1.0f, lf}, {alpha, lc}}));
    }
    const auto combined = grads_flat(m);
    clear_grads(m);

    // branch passes accumulated separately
    {
        Tape t;
        t.backward(attack::loss_uncompressed(t, m, t.leaf(x), t.leaf(x_tr), onehot, 0.5f));
    }
    const auto g_f = grads_flat(m);
    clear_grads(m);
    {
        Tape t;
        t.backward(attack::loss_compressed(t, m, fq, t.leaf(x), t.leaf(x_tr), onehot, 0.5f, 1));
    }
    const auto g_c = grads_flat(m);
    clear_grads(m);

    REQUIRE(combined.size() == g_f.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < combined.size(); ++i) {
        const double want = static_cast<double>(g_f[i]) + alpha * static_cast<double>(g_c[i]);
        const double got = combined[i];
        worst = std::max(worst, std::fabs(want - got) / std::max({1.0, std::fabs(want), std::fabs(got)}));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("weight sharing: dropped positions move only with the uncompressed branch") {
    Rng rng(29);
    Model m = toy_model(rng);
    Tensor x({4, 1, 12, 12});
    rng.fill_uniform(x, 0.0f, 1.0f);
    TriggerSpec trig;
    Tensor x_tr = attack::stamp_trigger(x, trig);
    Tensor onehot = one_hot({0, 1, 2, 3}, 4);

    const auto spec = prune::make_spec(m, {0.3f, 0.3f}, prune::Metric::l1);
    const auto view = prune::apply_prune(m, spec);

    // compressed-branch-only gradients vanish at dropped positions
    {
        Tape t;
        t.backward(attack::loss_compressed(t, m, view.transforms, t.leaf(x), t.leaf(x_tr), onehot, 0.9f, 1));
    }
    for (const auto& [li, ov] : view.transforms.overrides) {
        const Layer& l = m.layers[static_cast<std::size_t>(li)];
        for (std::size_t i = 0; i < l.weight.grad.size(); ++i) {
            if (ov.weight_mask.data[i] == 0.0f) CHECK(l.weight.grad[i] == 0.0f);
        }
    }
    clear_grads(m);

    // the uncompressed branch still updates them
    {
        Tape t;
        t.backward(attack::loss_uncompressed(t, m, t.leaf(x), t.leaf(x_tr), onehot, 0.5f));
    }
    int moved = 0, dropped_total = 0;
    for (const auto& [li, ov] : view.transforms.overrides) {
        const Layer& l = m.layers[static_cast<std::size_t>(li)];
        for (std::size_t i = 0; i < l.weight.grad.size(); ++i) {
            if (ov.weight_mask.data[i] == 0.0f) {
                ++dropped_total;
                moved += l.weight.grad[i] != 0.0f;
            }
        }
    }
    CHECK(dropped_total > 0);
    // relu-dead units legitimately have zero gradient; a healthy fraction moving
    // demonstrates the uncompressed branch reaches dropped positions
    CHECK(moved > dropped_total / 4);
}

TEST_CASE("alpha=0 training is bit-identical to clean training under a shared seed") {
    const auto data = small_data();
    attack::TrainSettings s;
    s.epochs = 2;
    s.lr = 0.05f;
    s.seed = 42;

    AttackConfig cfg;
    cfg.mode = Mode::quant_standard;
    cfg.alpha = 0.0f;
    cfg.beta = 0.0f;
    cfg.trigger.size = 0;
    const Model a =
        attack::train_artifact_backdoor(toy_arch(), cfg, nullptr, data.images, data.labels, s).model;
    const Model b = attack::train_clean(toy_arch(), data.images, data.labels, s);
    CHECK(params_flat(a) == params_flat(b));
}

TEST_CASE("training is deterministic per seed and mode") {
    const auto data = small_data();
    attack::TrainSettings s;
    s.epochs = 1;
    s.lr = 0.05f;
    s.seed = 9;

    AttackConfig cfg;
    cfg.mode = Mode::quant_standard;
    cfg.layer_selection = {3, 5};
    cfg.target_class = 1;
    const Model a = attack::train_artifact_backdoor(toy_arch(), cfg, nullptr, data.images, data.labels, s).model;
    const Model b = attack::train_artifact_backdoor(toy_arch(), cfg, nullptr, data.images, data.labels, s).model;
    CHECK(params_flat(a) == params_flat(b));
}

TEST_CASE("divergence raises an error naming the step") {
    const auto data = small_data(200);
    attack::TrainSettings s;
    s.epochs = 3;
    s.lr = 1e12f;  // guaranteed blow-up
    s.seed = 3;
    AttackConfig cfg;
    cfg.mode = Mode::quant_standard;
    cfg.layer_selection = {5};
    try {
        attack::train_artifact_backdoor(toy_arch(), cfg, nullptr, data.images, data.labels, s);
        FAIL("expected divergence error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("config validation catches inconsistent setups") {
    Model arch = toy_arch();
    AttackConfig cfg;
    cfg.mode = Mode::quant_distilled;
    cfg.layer_selection = {5};
    CHECK_THROWS(cfg.validate(arch, /*has_teacher=*/false));

    AttackConfig k;
    k.mode = Mode::prune_known;
    k.prune_rates = {0.3f};  // model has two prunable layers
    CHECK_THROWS(k.validate(arch, false));

    AttackConfig q;
    q.mode = Mode::quant_standard;
    q.layer_selection = {};
    CHECK_THROWS(q.validate(arch, false));

    AttackConfig r;
    r.mode = Mode::prune_range;
    r.range_views = 0;
    CHECK_THROWS(r.validate(arch, false));
}

TEST_CASE("iterative rate prediction: forced single-layer model converges immediately") {
    harness::DataSpec dspec;
    dspec.train_count = 320;
    dspec.val_count = 120;
    const auto train = harness::generate_synthetic_dataset(dspec, 31, 320, "train");
    const auto val = harness::generate_synthetic_dataset(dspec, 32, 120, "val");

    Model arch;
    arch.layers = {Layer::flatten(), Layer::dense(144, 30), Layer::relu(), Layer::dense(30, 4)};
    arch.num_classes = 4;
    arch.input_shape = {1, 12, 12};

    attack::TrainSettings s;
    s.epochs = 2;
    s.lr = 0.05f;
    s.seed = 11;
    prune::AutoCompressConfig ac;
    ac.iterations = 10;
    ac.seed = 5;

    AttackConfig cfg;
    cfg.mode = Mode::prune_known;
    cfg.gamma = 0.9f;
    cfg.target_class = 2;

    const auto res = attack::predict_layer_rates_iterative(arch, train.images, train.labels, val.images,
                                                           val.labels, 0.3, cfg, nullptr, ac, s, 3);
    CHECK(res.status == attack::IterativeStatus::converged);
    CHECK(res.iterations == 1);
    CHECK(res.spec.rates.size() == 1);
    CHECK(res.spec.rates[0] == doctest::Approx(9.0f / 30.0f));

    const auto unverified = attack::predict_layer_rates_iterative(arch, train.images, train.labels, val.images,
                                                                  val.labels, 0.3, cfg, nullptr, ac, s, 1);
    CHECK(unverified.status == attack::IterativeStatus::unverified);
}
