// ecrt: build, split, synth, extract, train, eval, report, run.
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ecrt/error.hpp"
#include "ecrt/pipeline.hpp"

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kData = 3, kProtocol = 4 };

struct Overrides {
    std::string config;
    std::string output_dir;
    std::vector<std::uint64_t> seeds;
    std::optional<double> tau;
    std::string backbone;
    std::string dataset;
    std::string trace_manifest;
    bool force = false;
};

ecrt::ExperimentConfig resolve_config(const Overrides& o) {
    ecrt::ExperimentConfig cfg = o.config.empty() ? ecrt::ExperimentConfig{} : ecrt::load_experiment_config(o.config);
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    if (!o.seeds.empty()) cfg.seeds = o.seeds;
    if (o.tau) cfg.tau = *o.tau;
    if (!o.backbone.empty()) cfg.backbone = o.backbone;
    if (!o.dataset.empty()) {
        cfg.dataset_path = o.dataset;
        cfg.builder.reset();
    }
    if (!o.trace_manifest.empty()) {
        cfg.trace_manifest = o.trace_manifest;
        cfg.synthetic.reset();
    }
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("-c,--config", o.config, "Experiment config (JSON)");
    cmd->add_option("-o,--output-dir", o.output_dir,
                    "Output directory (default: $ECRT_OUTPUT_ROOT, else ./ecrt-out)");
    cmd->add_option("--seeds", o.seeds, "Split/training seeds")->delimiter(',');
    cmd->add_option("--tau", o.tau, "Target unsafe recall on VAL")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--backbone", o.backbone, "Backbone name recorded in reports");
    cmd->add_option("--dataset", o.dataset, "Benchmark JSONL to use instead of the builder");
    cmd->add_option("--trace-manifest", o.trace_manifest, "Trace manifest to use instead of synthetic traces");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evidence-conditioned reliability triage: benchmark, traces, detectors and reports"};
    app.require_subcommand(1);
    Overrides o;

    struct Sub {
        const char* name;
        const char* help;
        std::function<void(const ecrt::ExperimentConfig&)> run;
    };
    const std::vector<Sub> subs = {
        {"build", "Build (or import) the benchmark and its stats", ecrt::cmd_build},
        {"split", "Write grouped train/val/test manifests, one per seed", ecrt::cmd_split},
        {"synth", "Generate synthetic paired traces for every record", ecrt::cmd_synth},
        {"extract", "Reduce traces and compute pooled features and baseline scores", ecrt::cmd_extract},
        {"train", "Train and calibrate the detectors on each seed's train/val split", ecrt::cmd_train},
        {"eval", "Evaluate frozen detectors once on each seed's test split",
         [&](const ecrt::ExperimentConfig& c) { ecrt::cmd_eval(c, o.force); }},
        {"report", "Aggregate per-seed metrics into report.json and report.csv", ecrt::cmd_report},
        {"run", "Run every stage in order", [&](const ecrt::ExperimentConfig& c) { ecrt::cmd_run(c, o.force); }},
    };

    std::function<void(const ecrt::ExperimentConfig&)> selected;
    std::string selected_name;
    for (const auto& s : subs) {
        auto* cmd = app.add_subcommand(s.name, s.help);
        add_common(cmd, o);
        if (std::string(s.name) == "eval" || std::string(s.name) == "run")
            cmd->add_flag("--force", o.force, "Re-evaluate a model that was already evaluated");
        cmd->callback([&, s] {
            selected = s.run;
            selected_name = s.name;
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        selected(resolve_config(o));
    } catch (const ecrt::ConfigError& e) {
        std::cerr << "ecrt " << selected_name << ": config error: " << e.what() << '\n';
        return kConfig;
    } catch (const ecrt::ProtocolError& e) {
        std::cerr << "ecrt " << selected_name << ": protocol violation: " << e.what() << '\n';
        return kProtocol;
    } catch (const ecrt::Error& e) {
        std::cerr << "ecrt " << selected_name << ": data error: " << e.what() << '\n';
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "ecrt " << selected_name << ": " << e.what() << '\n';
        return kData;
    }
    return kOk;
}
