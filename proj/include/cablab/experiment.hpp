#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cablab/attack.hpp"
#include "cablab/dataset.hpp"
#include "cablab/detect.hpp"
#include "cablab/prune.hpp"

namespace cablab::harness {

struct ArchLayer {
    std::string type;  // conv2d | relu | flatten | dense
    int out = 0;       // dense: 0 resolves to num_classes
    int kernel = 3;
    int stride = 1;
    int padding = 0;
};

struct ExperimentConfig {
    std::string name = "custom";
    std::string recipe = "quant";  // quant | prune_known | prune_range
    DataSpec data;
    std::vector<ArchLayer> arch;

    // attack settings
    std::string mode = "quant_standard";
    int target_class = 0;
    float alpha = 1.0f;
    float beta = 0.5f;
    float gamma = 0.5f;
    attack::TriggerSpec trigger;
    std::string quant_selection = "all";  // all | last:N  (training-time fake-quant layers)
    double prune_rate = 0.3;
    double prune_low = 0.3;
    double prune_high = 0.5;
    std::vector<double> sweep_rates;  // deployer-side pruning grid for range experiments
    int range_views = 3;
    int iterative_max_iters = 3;
    bool use_augmentation = true;
    attack::AugmentSpec augment;
    bool teacher_clean_input_for_triggered = false;

    attack::TrainSettings train;
    prune::AutoCompressConfig autocompress;

    bool run_detection = false;
    detect::DetectionConfig detection;
    int detection_probe_count = 64;
    bool detection_on_quant_view = false;  // STE-backed reconstruction against the quantized view

    std::uint64_t seed = 1;
    std::string out_dir = "out";
};

// Built-in presets: quant_demo, prune_known_demo, prune_range_demo,
// detect_demo. Unknown names are treated as config file paths by the CLI.
ExperimentConfig preset(const std::string& name);
std::vector<std::string> preset_names();

ExperimentConfig config_from_json(const std::string& json_text);
std::string config_to_json(const ExperimentConfig& cfg);

Model build_model(const ExperimentConfig& cfg);
std::set<int> parse_selection(const std::string& spec, const Model& m);

// Key-value report, one line per record ("section.key = value").
struct Report {
    std::vector<std::pair<std::string, std::string>> lines;

    void put(const std::string& key, const std::string& value);
    void put(const std::string& key, double value);
    void put(const std::string& key, const MetricsRecord& rec);
    std::optional<std::string> find(const std::string& key) const;
    std::string text() const;
    static Report parse(const std::string& text);
};

struct ExperimentResult {
    Report report;
    Model baseline;
    Model artifact;
    std::map<std::string, MetricsRecord> records;
    std::map<std::string, detect::AnomalyReport> detections;
    attack::IterativeStatus iterative_status = attack::IterativeStatus::unverified;
    int iterative_iterations = 0;
};

// Runs the configured recipe end to end: data, baseline/teacher training,
// attack training, deployment-style compression (calibration scenarios for
// quantization, auto-compress sweeps for pruning), evaluation, optional
// detection, and writes report.txt, config.json and the model files under
// out_dir (overridable with CABLAB_OUT_DIR). On a stage error the partial
// report is written and the error is rethrown with the stage name.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace cablab::harness
