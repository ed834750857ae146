#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecrt/benchmark.hpp"
#include "ecrt/trace.hpp"

namespace ecrt {

// Trace-computable uncertainty baselines. All read CTX channels only and are
// oriented so that a higher value means more likely unsafe:
//   PERPLEXITY          exp(-mean_t logprob_ctx[t])
//   MEAN_TOKEN_ENTROPY  mean_t H(softmax over the restricted CTX support)
//   LN_ENTROPY          (sum_t H_t) / T, the length-normalized total entropy
//   MSP                 -mean_t max_k softmax over the restricted CTX support
enum class UncertaintyMethod : std::uint8_t { Perplexity, LnEntropy, Msp, MeanTokenEntropy };

inline constexpr std::array<UncertaintyMethod, 4> kAllUncertaintyMethods = {
    UncertaintyMethod::Perplexity, UncertaintyMethod::LnEntropy, UncertaintyMethod::Msp,
    UncertaintyMethod::MeanTokenEntropy};

// "perplexity", "ln_entropy", "msp", "mean_token_entropy"
std::string_view to_string(UncertaintyMethod m) noexcept;
UncertaintyMethod parse_uncertainty_method(std::string_view s);
// Display name used in reports.
std::string_view display_name(UncertaintyMethod m) noexcept;

struct UncertaintyScore {
    std::string record_id;
    UncertaintyMethod method = UncertaintyMethod::Perplexity;
    double value = 0.0;
};

UncertaintyScore uncertainty_score(const PairedTrace& trace, UncertaintyMethod method);

// Entropy (nats) of the softmax of one restricted logit row.
double restricted_entropy(std::span<const float> logits);
double restricted_max_prob(std::span<const float> logits);

struct Stage1Metrics {
    double u_recall = 0.0;
    double flag_rate = 0.0;
    double s1_ba = 0.0;
};

// Both label classes must be present.
Stage1Metrics stage1_metrics(std::span<const std::uint8_t> flagged, std::span<const std::uint8_t> unsafe);

struct Stage2Metrics {
    double gap_recall = 0.0;
    double contradiction_recall = 0.0;
    double s2_ba = 0.0;
};

// Rows are the ground-truth unsafe items only; both subtypes must be present.
Stage2Metrics stage2_metrics(std::span<const std::uint8_t> predicted_gap, std::span<const std::uint8_t> is_gap);

struct McqaAccuracy {
    std::array<std::optional<double>, 3> per_task;  // indexed by task_index()
    double macro = 0.0;
    bool missing_class = false;  // macro is over the present classes only
};

McqaAccuracy mcqa_macro_accuracy(std::span<const int> answers, std::span<const int> gold,
                                 std::span<const TaskLabel> tasks);

// One seed's evaluation of one method.
struct SeedReport {
    std::uint64_t seed = 0;
    std::map<std::string, double> metrics;  // each in [0, 1]
    std::map<std::string, double> audit;    // thresholds and policy constants
};

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // population
    double min = 0.0;
    double max = 0.0;
};

struct EvalReport {
    std::string backbone;
    std::string method;
    std::vector<SeedReport> seeds;
    std::map<std::string, MetricSummary> aggregate;
};

MetricSummary summarize(std::span<const double> values);

// Requires at least one report and identical metric keys across reports.
EvalReport aggregate_reports(std::string backbone, std::string method, std::vector<SeedReport> reports);

// Canonical metric keys, in report column order.
inline constexpr std::array<std::string_view, 7> kMetricKeys = {
    "u_recall", "flag_rate", "s1_ba", "gap_recall", "contradiction_recall", "s2_ba", "macro_acc"};

std::string reports_to_json(const std::vector<EvalReport>& reports);
std::vector<EvalReport> reports_from_json(std::string_view text);
// Columns: Backbone, Method, Seed, U-Recall, Flag Rate, S1 BA, Gap Recall,
// Contradict. Recall, S2 BA. One row per seed, then a "mean ± std" row.
std::string reports_to_csv(const std::vector<EvalReport>& reports);

}  // namespace ecrt
