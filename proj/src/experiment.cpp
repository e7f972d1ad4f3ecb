#include "cablab/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "cablab/kernels.hpp"
#include "cablab/quant.hpp"
#include "cablab/serialize.hpp"

namespace cablab::harness {

using nlohmann::json;

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) {
    return seed * 0x9E3779B97F4A7C15ULL + (salt + 1) * 0xD1B54A32D192ED03ULL;
}

json trigger_to_json(const attack::TriggerSpec& t) {
    return json{{"row", t.row}, {"col", t.col}, {"size", t.size}, {"value", t.value}};
}

attack::TriggerSpec trigger_from_json(const json& j, attack::TriggerSpec t) {
    t.row = j.value("row", t.row);
    t.col = j.value("col", t.col);
    t.size = j.value("size", t.size);
    t.value = j.value("value", t.value);
    return t;
}

}  // namespace

ExperimentConfig config_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    c.recipe = j.value("recipe", c.recipe);

    if (j.contains("data")) {
        const json& d = j["data"];
        c.data.classes = d.value("classes", c.data.classes);
        c.data.channels = d.value("channels", c.data.channels);
        c.data.height = d.value("height", c.data.height);
        c.data.width = d.value("width", c.data.width);
        c.data.train_count = d.value("train_count", c.data.train_count);
        c.data.val_count = d.value("val_count", c.data.val_count);
        c.data.test_count = d.value("test_count", c.data.test_count);
        c.data.calib_count = d.value("calib_count", c.data.calib_count);
        c.data.blobs_per_class = d.value("blobs_per_class", c.data.blobs_per_class);
        c.data.noise = d.value("noise", c.data.noise);
        c.data.jitter = d.value("jitter", c.data.jitter);
        c.data.pattern_seed = d.value("pattern_seed", c.data.pattern_seed);
    }
    if (j.contains("arch")) {
        c.arch.clear();
        for (const json& l : j["arch"]) {
            ArchLayer a;
            a.type = l.value("type", "relu");
            a.out = l.value("out", 0);
            a.kernel = l.value("kernel", 3);
            a.stride = l.value("stride", 1);
            a.padding = l.value("padding", 0);
            c.arch.push_back(a);
        }
    }
    if (j.contains("attack")) {
        const json& a = j["attack"];
        c.mode = a.value("mode", c.mode);
        c.target_class = a.value("target_class", c.target_class);
        c.alpha = a.value("alpha", c.alpha);
        c.beta = a.value("beta", c.beta);
        c.gamma = a.value("gamma", c.gamma);
        if (a.contains("trigger")) c.trigger = trigger_from_json(a["trigger"], c.trigger);
        c.quant_selection = a.value("quant_selection", c.quant_selection);
        c.prune_rate = a.value("prune_rate", c.prune_rate);
        c.prune_low = a.value("prune_low", c.prune_low);
        c.prune_high = a.value("prune_high", c.prune_high);
        if (a.contains("sweep_rates")) c.sweep_rates = a["sweep_rates"].get<std::vector<double>>();
        c.range_views = a.value("range_views", c.range_views);
        c.iterative_max_iters = a.value("iterative_max_iters", c.iterative_max_iters);
        c.use_augmentation = a.value("use_augmentation", c.use_augmentation);
        c.augment.steps = a.value("augment_steps", c.augment.steps);
        c.augment.step_size = a.value("augment_step_size", c.augment.step_size);
        c.teacher_clean_input_for_triggered =
            a.value("teacher_clean_input_for_triggered", c.teacher_clean_input_for_triggered);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.lr = t.value("lr", c.train.lr);
        c.train.lr_decay = t.value("lr_decay", c.train.lr_decay);
        c.train.momentum = t.value("momentum", c.train.momentum);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.probe_fraction = t.value("probe_fraction", c.train.probe_fraction);
    }
    if (j.contains("autocompress")) {
        const json& a = j["autocompress"];
        c.autocompress.initial_temperature = a.value("initial_temperature", c.autocompress.initial_temperature);
        c.autocompress.cooling_factor = a.value("cooling_factor", c.autocompress.cooling_factor);
        c.autocompress.iterations = a.value("iterations", c.autocompress.iterations);
        c.autocompress.perturbation_step = a.value("perturbation_step", c.autocompress.perturbation_step);
        c.autocompress.metric =
            a.value("metric", "l1") == std::string("l2") ? prune::Metric::l2 : prune::Metric::l1;
        c.autocompress.tolerance = a.value("tolerance", c.autocompress.tolerance);
    }
    if (j.contains("detection")) {
        const json& d = j["detection"];
        c.run_detection = d.value("enabled", c.run_detection);
        c.detection.threshold = d.value("threshold", c.detection.threshold);
        c.detection.parallel = d.value("parallel", c.detection.parallel);
        c.detection.recon.restarts = d.value("restarts", c.detection.recon.restarts);
        c.detection.recon.steps = d.value("steps", c.detection.recon.steps);
        c.detection.recon.lr = d.value("lr", c.detection.recon.lr);
        c.detection.recon.momentum = d.value("momentum", c.detection.recon.momentum);
        c.detection.recon.lambda_l1 = d.value("lambda_l1", c.detection.recon.lambda_l1);
        c.detection.recon.misclass_floor = d.value("misclass_floor", c.detection.recon.misclass_floor);
        c.detection_probe_count = d.value("probe_count", c.detection_probe_count);
        c.detection_on_quant_view = d.value("on_quant_view", c.detection_on_quant_view);
    }
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

std::string config_to_json(const ExperimentConfig& c) {
    json arch = json::array();
    for (const auto& a : c.arch) {
        arch.push_back({{"type", a.type}, {"out", a.out}, {"kernel", a.kernel}, {"stride", a.stride},
                        {"padding", a.padding}});
    }
    json j{
        {"name", c.name},
        {"recipe", c.recipe},
        {"data",
         {{"classes", c.data.classes},
          {"channels", c.data.channels},
          {"height", c.data.height},
          {"width", c.data.width},
          {"train_count", c.data.train_count},
          {"val_count", c.data.val_count},
          {"test_count", c.data.test_count},
          {"calib_count", c.data.calib_count},
          {"blobs_per_class", c.data.blobs_per_class},
          {"noise", c.data.noise},
          {"jitter", c.data.jitter},
          {"pattern_seed", c.data.pattern_seed}}},
        {"arch", arch},
        {"attack",
         {{"mode", c.mode},
          {"target_class", c.target_class},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"trigger", trigger_to_json(c.trigger)},
          {"quant_selection", c.quant_selection},
          {"prune_rate", c.prune_rate},
          {"prune_low", c.prune_low},
          {"prune_high", c.prune_high},
          {"sweep_rates", c.sweep_rates},
          {"range_views", c.range_views},
          {"iterative_max_iters", c.iterative_max_iters},
          {"use_augmentation", c.use_augmentation},
          {"augment_steps", c.augment.steps},
          {"augment_step_size", c.augment.step_size},
          {"teacher_clean_input_for_triggered", c.teacher_clean_input_for_triggered}}},
        {"train",
         {{"epochs", c.train.epochs},
          {"lr", c.train.lr},
          {"lr_decay", c.train.lr_decay},
          {"momentum", c.train.momentum},
          {"batch_size", c.train.batch_size},
          {"probe_fraction", c.train.probe_fraction}}},
        {"autocompress",
         {{"initial_temperature", c.autocompress.initial_temperature},
          {"cooling_factor", c.autocompress.cooling_factor},
          {"iterations", c.autocompress.iterations},
          {"perturbation_step", c.autocompress.perturbation_step},
          {"metric", c.autocompress.metric == prune::Metric::l2 ? "l2" : "l1"},
          {"tolerance", c.autocompress.tolerance}}},
        {"detection",
         {{"enabled", c.run_detection},
          {"threshold", c.detection.threshold},
          {"parallel", c.detection.parallel},
          {"restarts", c.detection.recon.restarts},
          {"steps", c.detection.recon.steps},
          {"lr", c.detection.recon.lr},
          {"momentum", c.detection.recon.momentum},
          {"lambda_l1", c.detection.recon.lambda_l1},
          {"misclass_floor", c.detection.recon.misclass_floor},
          {"probe_count", c.detection_probe_count},
          {"on_quant_view", c.detection_on_quant_view}}},
        {"seed", c.seed},
        {"out_dir", c.out_dir},
    };
    return j.dump(2);
}

Model build_model(const ExperimentConfig& cfg) {
    if (cfg.arch.empty()) {
        throw std::invalid_argument("experiment config has no architecture");
    }
    Model m;
    m.num_classes = cfg.data.classes;
    m.input_shape = {cfg.data.channels, cfg.data.height, cfg.data.width};
    Shape cur = m.input_shape;
    for (std::size_t i = 0; i < cfg.arch.size(); ++i) {
        const ArchLayer& a = cfg.arch[i];
        if (a.type == "conv2d") {
            if (cur.size() != 3) {
                throw std::invalid_argument("conv2d needs (C,H,W) input at arch position " + std::to_string(i));
            }
            m.layers.push_back(Layer::conv2d(cur[0], a.out, a.kernel, a.stride, a.padding));
            const ConvGeom g = conv_geometry({1, cur[0], cur[1], cur[2]}, a.out, a.kernel, a.stride, a.padding);
            cur = {a.out, g.out_h, g.out_w};
        } else if (a.type == "relu") {
            m.layers.push_back(Layer::relu());
        } else if (a.type == "flatten") {
            m.layers.push_back(Layer::flatten());
            cur = {static_cast<int>(numel(cur))};
        } else if (a.type == "dense") {
            if (cur.size() != 1) {
                throw std::invalid_argument("dense needs flattened input at arch position " + std::to_string(i));
            }
            const int out = a.out > 0 ? a.out : cfg.data.classes;
            m.layers.push_back(Layer::dense(cur[0], out));
            cur = {out};
        } else {
            throw std::invalid_argument("unknown arch layer type: " + a.type);
        }
    }
    m.validate();
    return m;
}

std::set<int> parse_selection(const std::string& spec, const Model& m) {
    if (spec == "all") {
        return quant::all_param_layers(m);
    }
    if (spec == "none") {
        return {};
    }
    if (spec.rfind("last:", 0) == 0) {
        const int n = std::stoi(spec.substr(5));
        return quant::last_param_layers(m, n);
    }
    throw std::invalid_argument("bad layer selection '" + spec + "' (use all, none, or last:N)");
}

void Report::put(const std::string& key, const std::string& value) { lines.push_back({key, value}); }

void Report::put(const std::string& key, double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", value);
    lines.push_back({key, buf});
}

void Report::put(const std::string& key, const MetricsRecord& rec) {
    put(key + ".clean_accuracy", rec.clean_accuracy);
    put(key + ".triggered_accuracy", rec.triggered_accuracy);
    put(key + ".attack_success", rec.attack_success);
}

std::optional<std::string> Report::find(const std::string& key) const {
    for (const auto& [k, v] : lines) {
        if (k == key) return v;
    }
    return std::nullopt;
}

std::string Report::text() const {
    std::string out;
    for (const auto& [k, v] : lines) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

Report Report::parse(const std::string& text) {
    Report r;
    std::size_t pos = 0;
    int lineno = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++lineno;
        if (line.empty()) continue;
        const std::size_t sep = line.find(" = ");
        if (sep == std::string::npos) {
            throw std::runtime_error("report line " + std::to_string(lineno) + " is not 'key = value'");
        }
        r.lines.push_back({line.substr(0, sep), line.substr(sep + 3)});
    }
    return r;
}

ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    c.name = name;
    // shared desk-scale defaults
    c.arch = {{"conv2d", 12, 3, 2, 1}, {"relu"}, {"flatten"}, {"dense", 48}, {"relu"}, {"dense", 0}};
    c.train.batch_size = 64;
    c.sweep_rates = {0.30, 0.35, 0.40, 0.45, 0.50};
    c.detection.recon.steps = 300;
    c.detection.recon.lambda_l1 = 0.02f;
    c.detection_probe_count = 48;

    if (name == "quant_demo") {
        c.recipe = "quant";
        c.mode = "quant_standard";
        c.gamma = 0.5f;
        c.quant_selection = "all";
        c.train.epochs = 40;
        c.train.lr = 0.08f;
        c.train.lr_decay = 0.90f;
    } else if (name == "prune_known_demo" || name == "prune_range_demo" || name == "detect_demo") {
        c.recipe = name == "prune_range_demo" ? "prune_range" : "prune_known";
        c.mode = name == "prune_range_demo" ? "prune_range" : "prune_known";
        c.gamma = 0.9f;
        c.prune_rate = 0.3;
        c.prune_low = 0.3;
        c.prune_high = 0.5;
        c.train.epochs = 50;
        c.train.lr = 0.05f;
        c.train.lr_decay = 0.92f;
        if (name == "prune_range_demo") {
            // a lean conv stage makes the accuracy-optimal per-layer
            // allocation shift between overall rates more often: at higher
            // rates the deployer can spare conv and cut dense deeper, the
            // allocation uncertainty the range attack is built to survive
            c.arch[0].out = 6;
        }
        if (name == "detect_demo") {
            c.data.classes = 6;  // the anomaly median needs class support
            c.run_detection = true;
        }
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    return c;
}

std::vector<std::string> preset_names() {
    return {"quant_demo", "prune_known_demo", "prune_range_demo", "detect_demo"};
}

namespace {

harness::LogitsFn view_fn(const quant::QuantModelView& v) {
    return [&v](const Tensor& batch) { return v.forward(batch); };
}

Tensor probe_subset(const Dataset& ds, int count) {
    const int n = std::min(count, ds.count());
    Shape s = ds.images.shape;
    s[0] = n;
    Tensor out(s);
    const std::int64_t elems = numel(Shape(s.begin() + 1, s.end()));
    std::copy_n(ds.images.data.begin(), static_cast<std::size_t>(n) * elems, out.data.begin());
    return out;
}

void put_detection(Report& rep, const std::string& key, const detect::AnomalyReport& ar) {
    for (std::size_t c = 0; c < ar.l1.size(); ++c) {
        rep.put(key + ".class_" + std::to_string(c) + ".l1", ar.l1[c]);
        rep.put(key + ".class_" + std::to_string(c) + ".anomaly_index", ar.index[c]);
        rep.put(key + ".class_" + std::to_string(c) + ".converged", ar.converged[c] ? "yes" : "no");
    }
    rep.put(key + ".max_anomaly_index", ar.max_index);
    rep.put(key + ".flagged_class", ar.flagged_class ? std::to_string(*ar.flagged_class) : "none");
    if (ar.mad_degenerate) {
        rep.put(key + ".warning", "MAD degenerate, all indices zero");
    }
}

std::string rate_key(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rate_%.2f", rate);
    return buf;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg_in) {
    ExperimentConfig cfg = cfg_in;
    if (const char* env = std::getenv("CABLAB_OUT_DIR")) {
        cfg.out_dir = env;
    }
    std::filesystem::create_directories(cfg.out_dir);

    ExperimentResult result;
    Report& rep = result.report;
    rep.put("experiment.name", cfg.name);
    rep.put("experiment.recipe", cfg.recipe);
    rep.put("experiment.seed", std::to_string(cfg.seed));
    rep.put("experiment.mode", cfg.mode);
    rep.put("experiment.target_class", std::to_string(cfg.target_class));

    std::string stage = "setup";
    auto fail = [&](const std::exception& e) -> std::runtime_error {
        rep.put("error.stage", stage);
        rep.put("error.message", e.what());
        std::ofstream(cfg.out_dir + "/report.txt") << rep.text();
        return std::runtime_error("stage '" + stage + "' failed: " + e.what());
    };

    try {
        stage = "data";
        const DatasetBundle data = generate_bundle(cfg.data, cfg.seed);

        stage = "model";
        const Model arch = build_model(cfg);
        attack::AttackConfig atk;
        atk.mode = attack::mode_from_name(cfg.mode);
        atk.target_class = cfg.target_class;
        atk.alpha = cfg.alpha;
        atk.beta = cfg.beta;
        atk.gamma = cfg.gamma;
        atk.trigger = cfg.trigger;
        atk.layer_selection = parse_selection(cfg.quant_selection, arch);
        atk.range_views = cfg.range_views;
        atk.prune_metric = cfg.autocompress.metric;
        atk.use_augmentation = cfg.use_augmentation;
        atk.augment = cfg.augment;
        atk.teacher_clean_input_for_triggered = cfg.teacher_clean_input_for_triggered;

        attack::TrainSettings train = cfg.train;
        prune::AutoCompressConfig ac = cfg.autocompress;

        stage = "baseline";
        attack::TrainSettings baseline_train = train;
        baseline_train.seed = derive(cfg.seed, 2);
        result.baseline = attack::train_clean(arch, data.train.images, data.train.labels, baseline_train);
        rep.put("baseline",
                evaluate(model_logits_fn(result.baseline), data.test, cfg.trigger, cfg.target_class));
        const Model* teacher = atk.distilled() ? &result.baseline : nullptr;

        train.seed = derive(cfg.seed, 3);
        ac.seed = derive(cfg.seed, 4);

        if (cfg.recipe == "quant") {
            stage = "attack";
            result.artifact =
                attack::train_artifact_backdoor(arch, atk, teacher, data.train.images, data.train.labels, train)
                    .model;

            stage = "evaluate";
            const MetricsRecord unc =
                evaluate(model_logits_fn(result.artifact), data.test, cfg.trigger, cfg.target_class);
            result.records["uncompressed"] = unc;
            rep.put("uncompressed", unc);

            stage = "compress";
            // deployment quantizes every layer; the calibration set varies
            for (CalibScenario sc : {CalibScenario::same, CalibScenario::similar, CalibScenario::dissimilar}) {
                const Dataset calib = generate_calibration(cfg.data, derive(cfg.seed, 7), sc);
                const auto view =
                    quant::quantize_model(result.artifact, calib.images, quant::all_param_layers(result.artifact));
                const std::string key = std::string("quant.") + calib_scenario_name(sc);
                const MetricsRecord rec = evaluate(view_fn(view), data.test, cfg.trigger, cfg.target_class);
                result.records[key] = rec;
                rep.put(key, rec);
            }

            if (cfg.run_detection) {
                stage = "detect";
                detect::DetectionConfig dc = cfg.detection;
                dc.recon.seed = derive(cfg.seed, 5);
                const Tensor probe = probe_subset(data.test, cfg.detection_probe_count);
                const auto unc_rep = detect::detect_backdoor({&result.artifact, nullptr}, probe,
                                                             cfg.data.classes, dc);
                result.detections["uncompressed"] = unc_rep;
                put_detection(rep, "detect.uncompressed", unc_rep);
                if (cfg.detection_on_quant_view) {
                    // STE-backed gradients through the weight-fake-quant view
                    const ViewTransforms fq =
                        quant::weight_fq_view(result.artifact, quant::all_param_layers(result.artifact));
                    const auto q_rep =
                        detect::detect_backdoor({&result.artifact, &fq}, probe, cfg.data.classes, dc);
                    result.detections["quant_view"] = q_rep;
                    put_detection(rep, "detect.quant_view", q_rep);
                }
            }
        } else if (cfg.recipe == "prune_known" || cfg.recipe == "prune_range") {
            const bool range = cfg.recipe == "prune_range";
            attack::AttackConfig katk = atk;  // known-rate config (also the range comparison)
            katk.mode = atk.distilled() ? attack::Mode::prune_known_distilled : attack::Mode::prune_known;

            stage = "attack";
            attack::IterativeResult iter;
            if (!range) {
                iter = attack::predict_layer_rates_iterative(arch, data.train.images, data.train.labels,
                                                             data.val.images, data.val.labels, cfg.prune_rate,
                                                             katk, teacher, ac, train, cfg.iterative_max_iters);
                result.artifact = iter.model;
                result.iterative_status = iter.status;
                result.iterative_iterations = iter.iterations;
                rep.put("iterative.status", iter.status == attack::IterativeStatus::converged ? "converged"
                                            : iter.status == attack::IterativeStatus::unverified
                                                ? "unverified"
                                                : "not_converged");
                rep.put("iterative.iterations", std::to_string(iter.iterations));
            } else {
                const prune::PruneRange ranges = prune::derive_layer_ranges(
                    result.baseline, data.val.images, data.val.labels, cfg.prune_low, cfg.prune_high, ac);
                attack::AttackConfig ratk = atk;
                ratk.prune_range = ranges;
                result.artifact = attack::train_artifact_backdoor(arch, ratk, teacher, data.train.images,
                                                                  data.train.labels, train)
                                      .model;
            }

            stage = "evaluate";
            const MetricsRecord unc =
                evaluate(model_logits_fn(result.artifact), data.test, cfg.trigger, cfg.target_class);
            result.records["uncompressed"] = unc;
            rep.put("uncompressed", unc);

            stage = "compress";
            // the deployer side: auto-compress the released model with a fresh
            // validation sample, then prune
            prune::AutoCompressConfig deploy_ac = cfg.autocompress;
            deploy_ac.seed = derive(cfg.seed, 6);
            const std::vector<double> grid = range ? cfg.sweep_rates : std::vector<double>{cfg.prune_rate};
            for (double rate : grid) {
                const auto spec =
                    prune::auto_compress(result.artifact, data.val.images, data.val.labels, rate, deploy_ac);
                const auto view = prune::apply_prune(result.artifact, spec);
                const std::string key = "prune." + rate_key(rate);
                const MetricsRecord rec = evaluate(model_logits_fn(result.artifact, &view.transforms), data.test,
                                                   cfg.trigger, cfg.target_class);
                result.records[key] = rec;
                rep.put(key, rec);
            }
            if (range) {
                // known-rate comparison model, pruned across the same grid
                stage = "comparison";
                attack::TrainSettings ktrain = train;
                ktrain.seed = derive(cfg.seed, 8);
                const auto kiter = attack::predict_layer_rates_iterative(
                    arch, data.train.images, data.train.labels, data.val.images, data.val.labels, cfg.prune_low,
                    katk, teacher, ac, ktrain, cfg.iterative_max_iters);
                for (double rate : grid) {
                    const auto spec =
                        prune::auto_compress(kiter.model, data.val.images, data.val.labels, rate, deploy_ac);
                    const auto view = prune::apply_prune(kiter.model, spec);
                    const std::string key = "prune_known_comparison." + rate_key(rate);
                    const MetricsRecord rec = evaluate(model_logits_fn(kiter.model, &view.transforms), data.test,
                                                       cfg.trigger, cfg.target_class);
                    result.records[key] = rec;
                    rep.put(key, rec);
                }
            }

            if (cfg.run_detection) {
                stage = "detect";
                detect::DetectionConfig dc = cfg.detection;
                dc.recon.seed = derive(cfg.seed, 5);
                const Tensor probe = probe_subset(data.test, cfg.detection_probe_count);
                const auto unc_rep =
                    detect::detect_backdoor({&result.artifact, nullptr}, probe, cfg.data.classes, dc);
                result.detections["uncompressed"] = unc_rep;
                put_detection(rep, "detect.uncompressed", unc_rep);

                // the deployed-form defense: detect on the pruned view
                const auto spec = prune::auto_compress(result.artifact, data.val.images, data.val.labels,
                                                       range ? cfg.prune_high : cfg.prune_rate, deploy_ac);
                const auto view = prune::apply_prune(result.artifact, spec);
                const auto comp_rep =
                    detect::detect_backdoor({&result.artifact, &view.transforms}, probe, cfg.data.classes, dc);
                result.detections["compressed"] = comp_rep;
                put_detection(rep, "detect.compressed", comp_rep);
            }
        } else {
            throw std::invalid_argument("unknown recipe: " + cfg.recipe);
        }

        stage = "write";
        std::ofstream(cfg.out_dir + "/config.json") << config_to_json(cfg) << "\n";
        save_model(result.baseline, cfg.out_dir + "/baseline.cabm");
        save_model(result.artifact, cfg.out_dir + "/artifact.cabm");
        std::ofstream(cfg.out_dir + "/report.txt") << rep.text();
    } catch (const std::exception& e) {
        throw fail(e);
    }
    return result;
}

}  // namespace cablab::harness
