#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ecrt {

enum class TaskLabel : std::uint8_t { EAlign = 0, EConflict = 1, EGap = 2 };
enum class SafetyLabel : std::uint8_t { Safe, Unsafe };
enum class UnsafeSubtype : std::uint8_t { Contradiction, Gap, NotApplicable };

inline constexpr std::array<TaskLabel, 3> kAllTasks = {TaskLabel::EAlign, TaskLabel::EConflict,
                                                       TaskLabel::EGap};

constexpr SafetyLabel stage1_of(TaskLabel t) noexcept {
    return t == TaskLabel::EAlign ? SafetyLabel::Safe : SafetyLabel::Unsafe;
}

constexpr UnsafeSubtype stage2_of(TaskLabel t) noexcept {
    switch (t) {
        case TaskLabel::EConflict: return UnsafeSubtype::Contradiction;
        case TaskLabel::EGap: return UnsafeSubtype::Gap;
        default: return UnsafeSubtype::NotApplicable;
    }
}

constexpr std::size_t task_index(TaskLabel t) noexcept { return static_cast<std::size_t>(t); }

// Wire names: "e_align", "e_conflict", "e_gap".
std::string_view to_string(TaskLabel t) noexcept;
TaskLabel parse_task_label(std::string_view s);

inline constexpr std::string_view kDeferOption = "Defer: insufficient evidence";

// One evidence-conditioned MCQA item (question, options, context, evidence).
struct BenchmarkRecord {
    std::string id;
    std::string evidence_id_code;
    std::string question;
    std::array<std::string, 4> options;
    std::string context;
    std::string evidence;
    int gold_answer = 0;
    TaskLabel task_label = TaskLabel::EAlign;

    friend bool operator==(const BenchmarkRecord&, const BenchmarkRecord&) = default;
};

// Throws ValidationError naming the offending field and the record id.
void validate(const BenchmarkRecord& r);

// Builder sidecar. Lets tests assert taxonomy properties without parsing text.
struct RecordMetadata {
    std::string id;
    std::string true_grade;
    std::optional<std::string> premise_grade;    // E_CONFLICT only
    std::string evidence_finding;
    std::optional<std::string> omitted_finding;  // E_GAP only
    std::string laterality;
    std::size_t evidence_template = 0;

    friend bool operator==(const RecordMetadata&, const RecordMetadata&) = default;
};

struct DescriptorVocabulary {
    // Ordered from least to most severe. Each entry must be one whitespace token.
    std::vector<std::string> grades = {"no_DR", "mild_NPDR", "moderate_NPDR", "severe_NPDR",
                                       "proliferative_DR"};
    std::vector<std::string> findings = {"microaneurysm", "hemorrhage", "neovascularization",
                                         "venous-beading", "exudate"};
    std::vector<std::string> lateralities = {"OD", "OS", "OU"};
};

struct BuilderConfig {
    std::size_t total = 12522;
    std::array<double, 3> ratios = {0.092, 0.408, 0.500};  // align / conflict / gap
    std::uint64_t seed = 7;
    DescriptorVocabulary vocabulary;
    // Number of distinct evidence templates (evidence_id_code groups).
    // 0 selects ceil(total / 5).
    std::size_t evidence_templates = 0;
    bool populate_context = false;
};

struct Benchmark {
    std::vector<BenchmarkRecord> records;
    std::vector<RecordMetadata> metadata;  // parallel to records
};

// Per-class target counts: align and conflict rounded to nearest, remainder to gap.
std::array<std::size_t, 3> class_counts(std::size_t total, const std::array<double, 3>& ratios);

Benchmark build_benchmark(const BuilderConfig& cfg);

struct ClassStats {
    std::size_t count = 0;
    double ratio = 0.0;
    double avg_question_len = 0.0;
    double avg_evidence_len = 0.0;
};

struct DatasetStats {
    std::array<ClassStats, 3> per_class;
    ClassStats overall;
    std::size_t total = 0;
};

std::size_t whitespace_tokens(std::string_view s) noexcept;

DatasetStats compute_stats(const std::vector<BenchmarkRecord>& records);

// JSONL persistence. Keys are always written in schema order.
std::vector<BenchmarkRecord> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::vector<BenchmarkRecord>& records, const std::filesystem::path& path);
std::string to_jsonl_line(const BenchmarkRecord& r);
BenchmarkRecord parse_jsonl_line(std::string_view line, const std::string& source = "<string>",
                                 std::size_t line_no = 1);

std::vector<RecordMetadata> load_metadata_jsonl(const std::filesystem::path& path);
void save_metadata_jsonl(const std::vector<RecordMetadata>& meta, const std::filesystem::path& path);

// "<stem>.meta.jsonl" beside a benchmark file.
std::filesystem::path metadata_path_for(const std::filesystem::path& benchmark_path);

}  // namespace ecrt
