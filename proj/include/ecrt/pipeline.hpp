#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ecrt/benchmark.hpp"
#include "ecrt/gbdt.hpp"
#include "ecrt/metrics.hpp"
#include "ecrt/splits.hpp"
#include "ecrt/trace.hpp"

namespace ecrt {

inline constexpr std::string_view kOutputRootEnv = "ECRT_OUTPUT_ROOT";
inline constexpr std::string_view kDefaultOutputDir = "ecrt-out";

struct ExperimentConfig {
    std::string backbone = "synthetic";
    // Exactly one dataset source; the builder is used when no path is given.
    std::optional<BuilderConfig> builder = BuilderConfig{};
    std::optional<std::filesystem::path> dataset_path;
    std::array<double, 3> fractions = kDefaultFractions;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    // Exactly one trace source.
    std::optional<SyntheticTraceConfig> synthetic = SyntheticTraceConfig{};
    std::optional<std::filesystem::path> trace_manifest;
    std::size_t support_size = kDefaultSupportSize;  // used when reducing RAW traces
    gbdt::Config gbdt;
    double tau = 0.95;
    double theta2 = 0.5;
    std::filesystem::path output_dir;  // empty: $ECRT_OUTPUT_ROOT, then "ecrt-out"

    void validate() const;
    std::filesystem::path out() const;
};

// Relative paths inside the file are resolved against `base_dir`. Unknown keys
// are rejected.
ExperimentConfig config_from_json(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Canonical form. The output directory is left out so that runs in different
// places hash identically.
std::string config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// Artifact layout under the output directory.
struct Layout {
    std::filesystem::path root;

    std::filesystem::path benchmark_dir() const { return root / "benchmark"; }
    std::filesystem::path benchmark() const { return benchmark_dir() / "retina_safe.jsonl"; }
    std::filesystem::path stats() const { return benchmark_dir() / "stats.json"; }
    std::filesystem::path split_dir(std::uint64_t seed) const;
    std::filesystem::path split(std::uint64_t seed) const { return split_dir(seed) / "manifest.json"; }
    std::filesystem::path traces_dir() const { return root / "traces"; }
    std::filesystem::path trace_manifest() const { return traces_dir() / "manifest.json"; }
    std::filesystem::path features_dir() const { return root / "features"; }
    std::filesystem::path features_bin() const { return features_dir() / "features.bin"; }
    std::filesystem::path features_index() const { return features_dir() / "features.index.json"; }
    std::filesystem::path uncertainty() const { return features_dir() / "uncertainty.json"; }
    std::filesystem::path model_dir(std::uint64_t seed) const;
    // Evaluation-once sentinel, beside the model directory.
    std::filesystem::path eval_sentinel(std::uint64_t seed) const;
    std::filesystem::path eval_dir(std::uint64_t seed) const;
    std::filesystem::path metrics(std::uint64_t seed) const { return eval_dir(seed) / "metrics.json"; }
    std::filesystem::path report_dir() const { return root / "report"; }
    std::filesystem::path report_json() const { return report_dir() / "report.json"; }
    std::filesystem::path report_csv() const { return report_dir() / "report.csv"; }
};

// Pipeline stages. Each is idempotent for identical inputs and writes a
// provenance.json into every directory it produces.
void cmd_build(const ExperimentConfig& cfg);
void cmd_split(const ExperimentConfig& cfg);
void cmd_synth(const ExperimentConfig& cfg);
void cmd_extract(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
// Throws ProtocolError when a seed was already evaluated against the same
// frozen model and test manifest, unless `force`.
void cmd_eval(const ExperimentConfig& cfg, bool force = false);
void cmd_report(const ExperimentConfig& cfg);
// build, split, synth (when the trace source is synthetic), extract, train,
// eval, report.
void cmd_run(const ExperimentConfig& cfg, bool force = false);

// Method names used in reports.
inline constexpr std::string_view kEcrtMethod = "ECRT";
inline constexpr std::string_view kSingleStageMethod = "Single-stage";

std::vector<EvalReport> load_report(const std::filesystem::path& report_json);

}  // namespace ecrt
