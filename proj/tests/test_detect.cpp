#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cablab/attack.hpp"
#include "cablab/dataset.hpp"
#include "cablab/detect.hpp"
#include "oracles.hpp"

using namespace cablab;

TEST_CASE("anomaly indices: hand MAD computation") {
    const std::vector<double> l1 = {2, 4, 6, 8, 100};
    const auto idx = detect::anomaly_indices(l1);
    // median 6, MAD 2: index of the class at 2 is 4 / (1.4826 * 2)
    CHECK(idx[0] == doctest::Approx(4.0 / (1.4826 * 2.0)).epsilon(1e-6));
    CHECK(idx[1] == doctest::Approx(2.0 / (1.4826 * 2.0)).epsilon(1e-6));
    CHECK(idx[2] == 0.0);  // the median element
    CHECK(idx[3] == 0.0);  // at or above the median: safe
    CHECK(idx[4] == 0.0);
}

TEST_CASE("anomaly indices: degenerate, small-side-only, scale invariance") {
    CHECK(detect::anomaly_indices({5, 5, 5, 5}) == std::vector<double>(4, 0.0));
    CHECK(detect::anomaly_mad_degenerate({5, 5, 5, 5}));
    CHECK_THROWS(detect::anomaly_indices({1, 2}));

    // a single small outlier among spread values gets the unique positive index
    const auto idx = detect::anomaly_indices({1, 5, 5, 6, 7});
    CHECK(idx[0] > 0.0);
    for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] == 0.0);

    // uniform positive rescaling cancels in the median/MAD ratio
    const std::vector<double> base = {3, 9, 14, 2, 30, 11};
    const auto a = detect::anomaly_indices(base);
    std::vector<double> scaled;
    for (double v : base) scaled.push_back(v * 37.5);
    const auto b = detect::anomaly_indices(scaled);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
    }
}

TEST_CASE("auc definition cases and pair-enumeration oracle") {
    CHECK(detect::auc({10, 11, 12}, {1, 2, 3}) == 1.0);
    CHECK(detect::auc({5, 5}, {5, 5}) == 0.5);
    CHECK(detect::auc({3, 5}, {1, 4}) == doctest::Approx(0.75));
    CHECK_THROWS(detect::auc({}, {1.0}));

    // all list lengths up to 6, random values with frequent ties
    Rng rng(123);
    for (int trial = 0; trial < 300; ++trial) {
        const int np = rng.uniform_int(1, 6), nn = rng.uniform_int(1, 6);
        std::vector<double> pos, neg;
        for (int i = 0; i < np; ++i) pos.push_back(rng.uniform_int(0, 5));
        for (int i = 0; i < nn; ++i) neg.push_back(rng.uniform_int(0, 5));
        const double got = detect::auc(pos, neg);
        CHECK(got == doctest::Approx(oracles::auc_by_pairs(pos, neg)).epsilon(1e-12));
        // complementarity holds exactly under the half-tie convention
        CHECK(got + detect::auc(neg, pos) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("tpr at capped fpr") {
    CHECK(detect::tpr_at_fpr({10, 11}, {1, 2}, 0.1) == 1.0);
    CHECK(detect::tpr_at_fpr({1, 2}, {3, 4}, 0.1) == 0.0);

    // 10 negatives at cap 0.1: the threshold may exclude at most one negative
    std::vector<double> neg;
    for (int i = 1; i <= 10; ++i) neg.push_back(i);
    const std::vector<double> pos = {9.5, 10.5, 0.5};
    // smallest threshold with FPR <= 0.1 is 9 (only the negative at 10 above);
    // positives above it: 9.5 and 10.5
    CHECK(detect::tpr_at_fpr(pos, neg, 0.1) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS(detect::tpr_at_fpr({}, neg, 0.1));
}

namespace {

Model constant_class_model(int cls, int classes) {
    // zero weights, a huge bias on one logit: every input maps to cls
    Model m;
    Layer d = Layer::dense(144, classes);
    d.bias.data[static_cast<std::size_t>(cls)] = 50.0f;
    m.layers = {Layer::flatten(), d};
    m.num_classes = classes;
    m.input_shape = {1, 12, 12};
    return m;
}

}  // namespace

TEST_CASE("reconstruction on a hard-wired model collapses the mask") {
    Model m = constant_class_model(2, 4);
    Rng rng(9);
    Tensor probe({16, 1, 12, 12});
    rng.fill_uniform(probe, 0.0f, 1.0f);

    detect::ReconstructionConfig rc;
    rc.restarts = 1;
    rc.steps = 300;
    rc.lambda_l1 = 0.05f;  // only the sparsity term is active on a constant model
    rc.seed = 4;
    const auto rt = detect::reconstruct_trigger({&m, nullptr}, 2, probe, rc);
    CHECK(rt.misclassification_rate == 1.0);
    CHECK(rt.converged);
    CHECK(rt.l1 < 3.0);  // out of 144 pixels

    // keep-smallest selection never yields more than the first restart alone
    detect::ReconstructionConfig rc3 = rc;
    rc3.restarts = 3;
    const auto rt3 = detect::reconstruct_trigger({&m, nullptr}, 2, probe, rc3);
    CHECK(rt3.l1 <= rt.l1 + 1e-9);

    CHECK_THROWS(detect::reconstruct_trigger({&m, nullptr}, 99, probe, rc));
}

TEST_CASE("detection flags a regular backdoor at its target class") {
    // anomaly indices need a stable median; 6 classes give MAD enough support
    harness::DataSpec dspec;
    dspec.classes = 6;
    dspec.train_count = 900;
    const auto train = harness::generate_synthetic_dataset(dspec, 77, 900, "train");
    const auto test = harness::generate_synthetic_dataset(dspec, 1077, 128, "test");

    Model arch;
    arch.layers = {Layer::conv2d(1, 6, 3, 2, 1), Layer::relu(), Layer::flatten(), Layer::dense(216, 24),
                   Layer::relu(), Layer::dense(24, 6)};
    arch.num_classes = 6;
    arch.input_shape = {1, 12, 12};

    attack::TrainSettings s;
    s.epochs = 8;
    s.lr = 0.08f;
    s.seed = 5;
    attack::TriggerSpec trig;  // 3x3 bottom-right white square
    const int target = 0;
    const Model bd = attack::train_regular_backdoor(arch, trig, target, 0.2f, train.images, train.labels, s);

    // sanity: the backdoor is effective
    const auto rec = harness::evaluate(harness::model_logits_fn(bd), test, trig, target);
    REQUIRE(rec.attack_success > 0.9);
    REQUIRE(rec.clean_accuracy > 0.8);

    detect::DetectionConfig dc;
    dc.recon.steps = 300;
    dc.recon.restarts = 3;
    dc.recon.lambda_l1 = 0.02f;
    dc.recon.seed = 31;
    Tensor probe({48, 1, 12, 12});
    std::copy_n(test.images.data.begin(), probe.data.size(), probe.data.begin());
    const auto report = detect::detect_backdoor({&bd, nullptr}, probe, 6, dc);

    REQUIRE(report.flagged_class.has_value());
    CHECK(*report.flagged_class == target);
    CHECK(report.max_index > 2.0);
    CHECK(report.l1[target] == *std::min_element(report.l1.begin(), report.l1.end()));

    // the reconstructed trigger is within 3x of the planted 9-pixel patch
    detect::ReconstructionConfig rc = dc.recon;
    const auto rt = detect::reconstruct_trigger({&bd, nullptr}, target, probe, rc);
    CHECK(rt.converged);
    CHECK(rt.l1 <= 3.0 * 9.0);
}

TEST_CASE("detection is deterministic, parallel or not") {
    Model m = constant_class_model(0, 4);
    Rng rng(3);
    Tensor probe({8, 1, 12, 12});
    rng.fill_uniform(probe, 0.0f, 1.0f);
    detect::DetectionConfig dc;
    dc.recon.steps = 40;
    dc.recon.restarts = 1;
    dc.recon.seed = 7;
    dc.parallel = true;
    const auto a = detect::detect_backdoor({&m, nullptr}, probe, 4, dc);
    dc.parallel = false;
    const auto b = detect::detect_backdoor({&m, nullptr}, probe, 4, dc);
    CHECK(a.l1 == b.l1);
    CHECK(a.index == b.index);
}
