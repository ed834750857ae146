#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ecrt/benchmark.hpp"
#include "ecrt/features.hpp"
#include "ecrt/gbdt.hpp"

namespace ecrt {

inline constexpr double kDefaultTargetRecall = 0.95;
inline constexpr double kDefaultStage2Threshold = 0.5;

// w_i = N / (2 * N_{class(i)}): both classes carry equal total weight.
std::vector<double> class_balance_weights(std::span<const std::uint8_t> labels);

// Largest threshold among the candidates (unique scores plus 0) whose recall
// on the positive (unsafe) rows under `score >= threshold` is at least tau.
double calibrate_threshold(std::span<const double> scores, std::span<const std::uint8_t> unsafe, double tau);

gbdt::MatrixView view(const FeatureMatrix& m);

struct EcrtHeads {
    gbdt::Model stage1;  // positive class: unsafe
    gbdt::Model stage2;  // positive class: gap, fit on ground-truth unsafe rows only
    std::size_t stage2_rows = 0;
};

EcrtHeads train_ecrt(const FeatureMatrix& x, std::span<const TaskLabel> labels, const gbdt::Config& cfg);

struct TriageModel {
    gbdt::Model stage1;
    gbdt::Model stage2;
    double theta1 = 0.5;
    double theta2 = kDefaultStage2Threshold;
    double tau = kDefaultTargetRecall;
    std::uint32_t layout_version = kLayoutVersion;
    std::size_t n_layers = 0;
    std::string val_manifest_hash;
    std::uint64_t seed = 0;

    friend bool operator==(const TriageModel&, const TriageModel&) = default;
};

// Calibrates theta1 on validation rows and freezes the result.
TriageModel calibrate_ecrt(EcrtHeads heads, const FeatureMatrix& val, std::span<const TaskLabel> val_labels,
                           double tau, double theta2 = kDefaultStage2Threshold);

struct TriageOutput {
    double p_unsafe = 0.0;
    double p_gap_given_unsafe = 0.0;
    double p_align = 1.0;
    double p_contradict = 0.0;
    double p_gap = 0.0;
    bool flagged = false;
    TaskLabel predicted_label = TaskLabel::EAlign;
};

// Probability composition and the two-threshold decision rule.
TriageOutput compose(double p_unsafe, double p_gap_given_unsafe, double theta1, double theta2);

TriageOutput triage(const TriageModel& model, const FeatureVector& fv);
TriageOutput triage_row(const TriageModel& model, std::span<const double> row);
std::vector<TriageOutput> triage_batch(const TriageModel& model, const FeatureMatrix& x);

// Single-stage ablation: three one-vs-rest heads over the same features,
// normalized to a distribution; the unsafe score is 1 - p(E_ALIGN).
struct SingleStageModel {
    std::array<gbdt::Model, 3> heads;  // indexed by task_index()
    double theta1 = 0.5;
    double tau = kDefaultTargetRecall;
    std::uint32_t layout_version = kLayoutVersion;
    std::size_t n_layers = 0;
    std::string val_manifest_hash;
    std::uint64_t seed = 0;
};

SingleStageModel train_single_stage(const FeatureMatrix& x, std::span<const TaskLabel> labels,
                                    const gbdt::Config& cfg);
std::array<double, 3> single_stage_scores(const SingleStageModel& model, std::span<const double> row);
double single_stage_unsafe_score(const std::array<double, 3>& normalized) noexcept;
// Argmax over the normalized scores (ties resolve toward the lower class index).
TaskLabel single_stage_argmax(const std::array<double, 3>& normalized) noexcept;
// Policy-matched decision: flag on the unsafe score, then the larger unsafe subtype.
TaskLabel single_stage_decide(const SingleStageModel& model, const std::array<double, 3>& normalized) noexcept;
void calibrate_single_stage(SingleStageModel& model, const FeatureMatrix& val,
                            std::span<const TaskLabel> val_labels, double tau);

void save_triage_model(const TriageModel& model, const std::filesystem::path& dir);
TriageModel load_triage_model(const std::filesystem::path& dir);
void save_single_stage_model(const SingleStageModel& model, const std::filesystem::path& dir);
SingleStageModel load_single_stage_model(const std::filesystem::path& dir);

}  // namespace ecrt
