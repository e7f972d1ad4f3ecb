// cablab: train, compress, evaluate and detect compression-activated
// backdoors on the self-contained lab engine.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cablab/experiment.hpp"
#include "cablab/quant.hpp"
#include "cablab/serialize.hpp"

using namespace cablab;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

harness::ExperimentConfig resolve_config(const std::string& name_or_path) {
    for (const auto& p : harness::preset_names()) {
        if (p == name_or_path) return harness::preset(name_or_path);
    }
    return harness::config_from_json(slurp(name_or_path));
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> target;
    std::optional<int> epochs;
    std::optional<std::string> out_dir;
    std::optional<bool> detection;

    void apply(harness::ExperimentConfig& c) const {
        if (seed) c.seed = *seed;
        if (target) c.target_class = *target;
        if (epochs) c.train.epochs = *epochs;
        if (out_dir) c.out_dir = *out_dir;
        if (detection) c.run_detection = *detection;
    }
};

void add_config_options(CLI::App* cmd, std::string& config, Overrides& ov) {
    cmd->add_option("--config", config, "preset name or config JSON path")->required();
    cmd->add_option("--seed", ov.seed, "override the experiment seed");
    cmd->add_option("--target", ov.target, "override the attack target class");
    cmd->add_option("--epochs", ov.epochs, "override training epochs");
    cmd->add_option("--out", ov.out_dir, "override the output directory");
}

attack::AttackConfig attack_config_of(const harness::ExperimentConfig& c, const Model& arch) {
    attack::AttackConfig atk;
    atk.mode = attack::mode_from_name(c.mode);
    atk.target_class = c.target_class;
    atk.alpha = c.alpha;
    atk.beta = c.beta;
    atk.gamma = c.gamma;
    atk.trigger = c.trigger;
    atk.layer_selection = harness::parse_selection(c.quant_selection, arch);
    atk.range_views = c.range_views;
    atk.prune_metric = c.autocompress.metric;
    atk.use_augmentation = c.use_augmentation;
    atk.augment = c.augment;
    atk.teacher_clean_input_for_triggered = c.teacher_clean_input_for_triggered;
    return atk;
}

void print_metrics(const std::string& label, const harness::MetricsRecord& rec) {
    std::printf("%s.clean_accuracy = %.6f\n", label.c_str(), rec.clean_accuracy);
    std::printf("%s.triggered_accuracy = %.6f\n", label.c_str(), rec.triggered_accuracy);
    std::printf("%s.attack_success = %.6f\n", label.c_str(), rec.attack_success);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"compression-artifact backdoor lab"};
    app.require_subcommand(1);

    std::string config, data_path, val_path, calib_path, model_path, out_path, report_path;
    Overrides ov;
    bool compressed = false;
    bool do_quant = false, do_prune = false;
    double rate = 0.3;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset splits");
    add_config_options(gen, config, ov);

    auto* tclean = app.add_subcommand("train-clean", "train a clean baseline model");
    add_config_options(tclean, config, ov);
    tclean->add_option("--model-out", out_path, "output model path");

    auto* tattack = app.add_subcommand("train-attack", "train an artifact-backdoored model");
    add_config_options(tattack, config, ov);
    tattack->add_option("--model-out", out_path, "output model path");

    auto* comp = app.add_subcommand("compress", "quantize or prune a saved model");
    add_config_options(comp, config, ov);
    comp->add_option("--model", model_path, "model file")->required();
    comp->add_flag("--quant", do_quant, "INT8-quantize all layers (calibration from config data)");
    comp->add_flag("--prune", do_prune, "auto-compress pruning");
    comp->add_option("--rate", rate, "overall pruning rate");
    comp->add_option("--model-out", out_path, "output model path");

    auto* det = app.add_subcommand("detect", "trigger-reconstruction backdoor detection");
    add_config_options(det, config, ov);
    det->add_option("--model", model_path, "model file")->required();
    det->add_flag("--compressed", compressed, "detect on the compressed form stored in the model file");

    auto* eval = app.add_subcommand("evaluate", "clean/triggered accuracy and attack success");
    add_config_options(eval, config, ov);
    eval->add_option("--model", model_path, "model file")->required();
    eval->add_flag("--compressed", compressed, "evaluate the compressed form stored in the model file");

    auto* run = app.add_subcommand("run", "run a full experiment recipe");
    add_config_options(run, config, ov);
    run->add_flag("--detect,!--no-detect", ov.detection, "toggle the detection stages");

    auto* show = app.add_subcommand("report", "validate and summarize a report file");
    show->add_option("--in", report_path, "report file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            harness::ExperimentConfig c = resolve_config(config);
            ov.apply(c);
            std::filesystem::create_directories(c.out_dir);
            const auto bundle = harness::generate_bundle(c.data, c.seed);
            for (const auto* ds : {&bundle.train, &bundle.val, &bundle.test, &bundle.calib}) {
                const std::string path = c.out_dir + "/" + ds->split + ".cabd";
                harness::save_dataset(*ds, path);
                std::printf("wrote %s (%d samples)\n", path.c_str(), ds->count());
            }
        } else if (tclean->parsed() || tattack->parsed()) {
            harness::ExperimentConfig c = resolve_config(config);
            ov.apply(c);
            const auto bundle = harness::generate_bundle(c.data, c.seed);
            const Model arch = harness::build_model(c);
            attack::TrainSettings settings = c.train;
            settings.seed = c.seed;
            Model trained;
            if (tclean->parsed()) {
                trained = attack::train_clean(arch, bundle.train.images, bundle.train.labels, settings);
            } else {
                attack::AttackConfig atk = attack_config_of(c, arch);
                std::optional<Model> teacher;
                if (atk.distilled()) {
                    attack::TrainSettings ts = settings;
                    ts.seed = c.seed + 1;
                    teacher = attack::train_clean(arch, bundle.train.images, bundle.train.labels, ts);
                }
                if (atk.pruning() && !atk.range()) {
                    const auto res = attack::predict_layer_rates_iterative(
                        arch, bundle.train.images, bundle.train.labels, bundle.val.images, bundle.val.labels,
                        c.prune_rate, atk, teacher ? &*teacher : nullptr, c.autocompress, settings,
                        c.iterative_max_iters);
                    trained = res.model;
                    std::printf("iterative.iterations = %d\n", res.iterations);
                } else {
                    if (atk.range()) {
                        attack::TrainSettings ts = settings;
                        ts.seed = c.seed + 2;
                        const Model clean =
                            attack::train_clean(arch, bundle.train.images, bundle.train.labels, ts);
                        atk.prune_range = prune::derive_layer_ranges(clean, bundle.val.images, bundle.val.labels,
                                                                     c.prune_low, c.prune_high, c.autocompress);
                    }
                    trained = attack::train_artifact_backdoor(arch, atk, teacher ? &*teacher : nullptr,
                                                              bundle.train.images, bundle.train.labels, settings)
                                  .model;
                }
            }
            if (out_path.empty()) {
                std::filesystem::create_directories(c.out_dir);
                out_path = c.out_dir + (tclean->parsed() ? "/clean.cabm" : "/artifact.cabm");
            }
            harness::save_model(trained, out_path);
            std::printf("wrote %s\n", out_path.c_str());
            print_metrics("train_split", harness::evaluate(harness::model_logits_fn(trained), bundle.test,
                                                           c.trigger, c.target_class));
        } else if (comp->parsed()) {
            harness::ExperimentConfig c = resolve_config(config);
            ov.apply(c);
            if (do_quant == do_prune) {
                throw std::runtime_error("compress needs exactly one of --quant / --prune");
            }
            auto loaded = harness::load_model(model_path);
            harness::ModelAnnotations ann;
            if (do_quant) {
                const auto calib = harness::generate_calibration(c.data, c.seed, harness::CalibScenario::same);
                const auto view =
                    quant::quantize_model(loaded.model, calib.images, quant::all_param_layers(loaded.model));
                ann.quant_layers = view.layers;
                std::printf("quantized %zu layers\n", ann.quant_layers.size());
            } else {
                const auto bundle = harness::generate_bundle(c.data, c.seed);
                prune::AutoCompressConfig ac = c.autocompress;
                ac.seed = c.seed + 6;
                const auto spec =
                    prune::auto_compress(loaded.model, bundle.val.images, bundle.val.labels, rate, ac);
                std::printf("overall_rate = %.6f\n", prune::overall_rate(spec, loaded.model));
                ann.prune_spec = spec;
            }
            if (out_path.empty()) out_path = model_path + ".compressed";
            harness::save_model(loaded.model, out_path, &ann);
            std::printf("wrote %s\n", out_path.c_str());
        } else if (eval->parsed()) {
            harness::ExperimentConfig c = resolve_config(config);
            ov.apply(c);
            auto loaded = harness::load_model(model_path);
            const auto bundle = harness::generate_bundle(c.data, c.seed);
            if (!compressed) {
                print_metrics("uncompressed", harness::evaluate(harness::model_logits_fn(loaded.model),
                                                                bundle.test, c.trigger, c.target_class));
            } else if (loaded.annotations.prune_spec.has_value()) {
                const auto view = prune::apply_prune(loaded.model, *loaded.annotations.prune_spec);
                print_metrics("pruned",
                              harness::evaluate(harness::model_logits_fn(loaded.model, &view.transforms),
                                                bundle.test, c.trigger, c.target_class));
            } else if (!loaded.annotations.quant_layers.empty()) {
                quant::QuantModelView view;
                view.model = &loaded.model;
                view.layers = loaded.annotations.quant_layers;
                for (const auto& [li, lq] : view.layers) view.selection.insert(li);
                print_metrics("quantized",
                              harness::evaluate([&](const Tensor& b) { return view.forward(b); }, bundle.test,
                                                c.trigger, c.target_class));
            } else {
                throw std::runtime_error("--compressed given but the model file has no compression annotations");
            }
        } else if (det->parsed()) {
            harness::ExperimentConfig c = resolve_config(config);
            ov.apply(c);
            auto loaded = harness::load_model(model_path);
            const auto bundle = harness::generate_bundle(c.data, c.seed);
            Shape ps = bundle.test.images.shape;
            ps[0] = std::min(c.detection_probe_count, bundle.test.count());
            Tensor probe(ps);
            std::copy_n(bundle.test.images.data.begin(), probe.data.size(), probe.data.begin());

            detect::DetectionConfig dc = c.detection;
            dc.recon.seed = c.seed + 5;
            ViewTransforms vt;
            const ViewTransforms* vt_ptr = nullptr;
            if (compressed) {
                if (loaded.annotations.prune_spec.has_value()) {
                    vt = prune::apply_prune(loaded.model, *loaded.annotations.prune_spec).transforms;
                } else if (!loaded.annotations.quant_layers.empty()) {
                    // STE-backed path through the weight-fake-quant view
                    std::set<int> sel;
                    for (const auto& [li, lq] : loaded.annotations.quant_layers) sel.insert(li);
                    vt = quant::weight_fq_view(loaded.model, sel);
                } else {
                    throw std::runtime_error("--compressed given but the model file has no compression annotations");
                }
                vt_ptr = &vt;
            }
            const auto rep =
                detect::detect_backdoor({&loaded.model, vt_ptr}, probe, loaded.model.num_classes, dc);
            for (std::size_t cls = 0; cls < rep.l1.size(); ++cls) {
                std::printf("class_%zu.l1 = %.6f\nclass_%zu.anomaly_index = %.6f\n", cls, rep.l1[cls], cls,
                            rep.index[cls]);
            }
            std::printf("max_anomaly_index = %.6f\n", rep.max_index);
            std::printf("verdict = %s\n", rep.flagged_class
                                              ? ("backdoor, target class " + std::to_string(*rep.flagged_class)).c_str()
                                              : "clean");
            if (rep.mad_degenerate) {
                std::fprintf(stderr, "warning: MAD degenerate, anomaly indices are all zero\n");
            }
        } else if (run->parsed()) {
            harness::ExperimentConfig c = resolve_config(config);
            ov.apply(c);
            const auto result = harness::run_experiment(c);
            std::fputs(result.report.text().c_str(), stdout);
        } else if (show->parsed()) {
            const auto rep = harness::Report::parse(slurp(report_path));
            std::printf("report ok: %zu lines\n", rep.lines.size());
            for (const auto& [k, v] : rep.lines) {
                if (k.find("attack_success") != std::string::npos || k.find("error.") == 0 ||
                    k.find("max_anomaly_index") != std::string::npos) {
                    std::printf("%s = %s\n", k.c_str(), v.c_str());
                }
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
