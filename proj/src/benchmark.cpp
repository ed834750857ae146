#include "ecrt/benchmark.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ecrt/error.hpp"
#include "ecrt/rng.hpp"

namespace ecrt {

using ordered_json = nlohmann::ordered_json;

std::string_view to_string(TaskLabel t) noexcept {
    switch (t) {
        case TaskLabel::EAlign: return "e_align";
        case TaskLabel::EConflict: return "e_conflict";
        case TaskLabel::EGap: return "e_gap";
    }
    return "e_align";
}

TaskLabel parse_task_label(std::string_view s) {
    if (s == "e_align") return TaskLabel::EAlign;
    if (s == "e_conflict") return TaskLabel::EConflict;
    if (s == "e_gap") return TaskLabel::EGap;
    throw ValidationError("unknown task_label '" + std::string(s) + "'");
}

namespace {

[[noreturn]] void invalid(const BenchmarkRecord& r, std::string_view field, std::string_view msg) {
    throw ValidationError("record '" + r.id + "': field '" + std::string(field) + "': " +
                          std::string(msg));
}

bool has_whitespace(std::string_view s) {
    return std::any_of(s.begin(), s.end(),
                       [](unsigned char c) { return std::isspace(c) != 0; });
}

std::string display(std::string_view grade) {
    std::string out(grade);
    std::replace(out.begin(), out.end(), '_', ' ');
    return out;
}

std::string format_id(const char* prefix, std::size_t i, int width) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%0*zu", prefix, width, i);
    return buf;
}

void check_vocabulary(const DescriptorVocabulary& v) {
    if (v.grades.size() < 3) throw ConfigError("descriptor vocabulary needs at least 3 grades");
    if (v.findings.size() < 2) throw ConfigError("descriptor vocabulary needs at least 2 findings");
    if (v.lateralities.empty()) throw ConfigError("descriptor vocabulary needs a laterality");
    for (const auto* list : {&v.grades, &v.findings, &v.lateralities}) {
        std::set<std::string> seen;
        for (const auto& term : *list) {
            if (term.empty() || has_whitespace(term))
                throw ConfigError("descriptor '" + term + "' must be a single non-empty token");
            if (!seen.insert(term).second)
                throw ConfigError("duplicate descriptor '" + term + "'");
        }
    }
}

// Picks `n` distinct indices from [0, size) excluding `exclude`.
std::vector<std::size_t> pick_distinct(Rng& rng, std::size_t size, std::size_t n,
                                       std::vector<std::size_t> exclude) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < size; ++i)
        if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) pool.push_back(i);
    rng.shuffle(std::span(pool));
    pool.resize(std::min(n, pool.size()));
    return pool;
}

struct EvidenceTemplate {
    std::size_t grade;
    std::size_t finding;
    std::size_t laterality;
};

}  // namespace

void validate(const BenchmarkRecord& r) {
    if (r.id.empty()) invalid(r, "id", "must be non-empty");
    if (r.evidence_id_code.empty()) invalid(r, "evidence_id_code", "must be non-empty");
    for (std::size_t i = 0; i < r.options.size(); ++i) {
        if (r.options[i].empty()) invalid(r, "options", "entries must be non-empty");
        for (std::size_t j = 0; j < i; ++j)
            if (r.options[i] == r.options[j]) invalid(r, "options", "entries must be distinct");
    }
    if (r.gold_answer < 0 || r.gold_answer > 3) invalid(r, "gold_answer", "must be in {0,1,2,3}");
    if (r.task_label == TaskLabel::EGap && r.options[r.gold_answer] != kDeferOption)
        invalid(r, "gold_answer", "e_gap items must resolve to the deferment option");
}

std::array<std::size_t, 3> class_counts(std::size_t total, const std::array<double, 3>& ratios) {
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("class ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("class ratios must sum to 1");
    const auto n = static_cast<double>(total);
    const auto align = static_cast<std::size_t>(std::llround(ratios[0] * n));
    const auto conflict = static_cast<std::size_t>(std::llround(ratios[1] * n));
    if (align + conflict > total)
        throw ConfigError("class ratios are infeasible for a total of " + std::to_string(total));
    return {align, conflict, total - align - conflict};
}

Benchmark build_benchmark(const BuilderConfig& cfg) {
    const auto counts = class_counts(cfg.total, cfg.ratios);
    check_vocabulary(cfg.vocabulary);
    Benchmark out;
    if (cfg.total == 0) return out;

    const auto& vocab = cfg.vocabulary;
    Rng rng(mix_seed(cfg.seed));

    const std::size_t n_templates =
        cfg.evidence_templates == 0 ? (cfg.total + 4) / 5 : std::min(cfg.evidence_templates, cfg.total);
    std::vector<EvidenceTemplate> templates(n_templates);
    for (auto& t : templates) {
        t.grade = rng.index(vocab.grades.size());
        t.finding = rng.index(vocab.findings.size());
        t.laterality = rng.index(vocab.lateralities.size());
    }

    std::vector<TaskLabel> labels;
    labels.reserve(cfg.total);
    for (TaskLabel t : kAllTasks) labels.insert(labels.end(), counts[task_index(t)], t);
    rng.shuffle(std::span(labels));

    out.records.reserve(cfg.total);
    out.metadata.reserve(cfg.total);
    for (std::size_t i = 0; i < cfg.total; ++i) {
        const std::size_t tpl_index = i % n_templates;
        const EvidenceTemplate& tpl = templates[tpl_index];
        const std::string& grade = vocab.grades[tpl.grade];
        const std::string& finding = vocab.findings[tpl.finding];
        const std::string& lat = vocab.lateralities[tpl.laterality];

        BenchmarkRecord rec;
        rec.id = format_id("RS", i, 6);
        rec.evidence_id_code = format_id("EV", tpl_index, 5);
        rec.evidence = grade + " " + finding + " " + lat;
        rec.task_label = labels[i];
        if (cfg.populate_context)
            rec.context = "Fundus photograph of eye " + lat +
                          " graded on the international clinical diabetic retinopathy scale.";

        RecordMetadata meta;
        meta.id = rec.id;
        meta.true_grade = grade;
        meta.evidence_finding = finding;
        meta.laterality = lat;
        meta.evidence_template = tpl_index;

        std::vector<std::string> opts;
        std::string gold_text;
        switch (rec.task_label) {
            case TaskLabel::EAlign: {
                rec.question = "A retinal grading record is available for eye " + lat +
                               " of a patient attending diabetic retinopathy screening. Based "
                               "on the documented evidence, which severity grade should be "
                               "recorded for this eye at the current visit?";
                gold_text = display(grade);
                opts.push_back(gold_text);
                for (auto g : pick_distinct(rng, vocab.grades.size(), 2, {tpl.grade}))
                    opts.push_back(display(vocab.grades[g]));
                break;
            }
            case TaskLabel::EConflict: {
                const std::size_t premise = pick_distinct(rng, vocab.grades.size(), 1, {tpl.grade})[0];
                meta.premise_grade = vocab.grades[premise];
                rec.question = "A referral letter states that eye " + lat + " of this patient shows " +
                               display(vocab.grades[premise]) +
                               " and asks for management to be planned on that basis. The "
                               "attached retinal grading record is provided as evidence. Taking "
                               "the documented evidence into account, which severity grade "
                               "should actually be recorded for this eye at the current visit?";
                gold_text = display(grade);
                opts.push_back(gold_text);
                opts.push_back(display(vocab.grades[premise]));
                for (auto g : pick_distinct(rng, vocab.grades.size(), 1, {tpl.grade, premise}))
                    opts.push_back(display(vocab.grades[g]));
                break;
            }
            case TaskLabel::EGap: {
                const std::size_t required =
                    pick_distinct(rng, vocab.findings.size(), 1, {tpl.finding})[0];
                meta.omitted_finding = vocab.findings[required];
                rec.question = "The grading decision for eye " + lat +
                               " of this patient depends on whether " + vocab.findings[required] +
                               " is present. Using only the documented retinal evidence, which "
                               "severity grade should be recorded for this eye at the current visit?";
                for (auto g : pick_distinct(rng, vocab.grades.size(), 3, {}))
                    opts.push_back(display(vocab.grades[g]));
                gold_text = std::string(kDeferOption);
                break;
            }
        }
        opts.emplace_back(kDeferOption);
        rng.shuffle(std::span(opts));
        for (std::size_t k = 0; k < 4; ++k) {
            rec.options[k] = opts[k];
            if (opts[k] == gold_text) rec.gold_answer = static_cast<int>(k);
        }
        validate(rec);
        out.records.push_back(std::move(rec));
        out.metadata.push_back(std::move(meta));
    }
    return out;
}

std::size_t whitespace_tokens(std::string_view s) noexcept {
    std::size_t n = 0;
    bool in_token = false;
    for (unsigned char c : s) {
        const bool space = std::isspace(c) != 0;
        if (!space && !in_token) ++n;
        in_token = !space;
    }
    return n;
}

DatasetStats compute_stats(const std::vector<BenchmarkRecord>& records) {
    if (records.empty()) throw DataError("compute_stats: empty dataset");
    DatasetStats s;
    std::array<double, 3> qsum{}, esum{};
    double qall = 0.0, eall = 0.0;
    for (const auto& r : records) {
        const auto k = task_index(r.task_label);
        const auto q = static_cast<double>(whitespace_tokens(r.question));
        const auto e = static_cast<double>(whitespace_tokens(r.evidence));
        s.per_class[k].count++;
        qsum[k] += q;
        esum[k] += e;
        qall += q;
        eall += e;
    }
    s.total = records.size();
    const auto n = static_cast<double>(s.total);
    for (std::size_t k = 0; k < 3; ++k) {
        auto& c = s.per_class[k];
        c.ratio = static_cast<double>(c.count) / n;
        if (c.count > 0) {
            c.avg_question_len = qsum[k] / static_cast<double>(c.count);
            c.avg_evidence_len = esum[k] / static_cast<double>(c.count);
        }
    }
    s.overall = {s.total, 1.0, qall / n, eall / n};
    return s;
}

std::string to_jsonl_line(const BenchmarkRecord& r) {
    ordered_json j;
    j["id"] = r.id;
    j["evidence_id_code"] = r.evidence_id_code;
    j["question"] = r.question;
    j["options"] = r.options;
    j["context"] = r.context;
    j["evidence"] = r.evidence;
    j["gold_answer"] = r.gold_answer;
    j["task_label"] = to_string(r.task_label);
    return j.dump();
}

BenchmarkRecord parse_jsonl_line(std::string_view line, const std::string& source,
                                 std::size_t line_no) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(source, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(source, line_no, "record must be a JSON object");

    BenchmarkRecord r;
    std::vector<std::string> options;
    std::string label;
    try {
        r.id = j.at("id").get<std::string>();
        r.evidence_id_code = j.at("evidence_id_code").get<std::string>();
        r.question = j.at("question").get<std::string>();
        options = j.at("options").get<std::vector<std::string>>();
        r.context = j.value("context", std::string{});
        r.evidence = j.at("evidence").get<std::string>();
        r.gold_answer = j.at("gold_answer").get<int>();
        label = j.at("task_label").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(source, line_no, e.what());
    }
    if (options.size() != 4) {
        throw ValidationError("record '" + r.id +
                              "': field 'options': options must have exactly 4 entries");
    }
    std::copy(options.begin(), options.end(), r.options.begin());
    try {
        r.task_label = parse_task_label(label);
    } catch (const ValidationError&) {
        throw ValidationError("record '" + r.id + "': field 'task_label': unknown value '" +
                              label + "'");
    }
    validate(r);
    return r;
}

std::vector<BenchmarkRecord> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot open benchmark file " + path.string());
    std::vector<BenchmarkRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        out.push_back(parse_jsonl_line(line, path.string(), line_no));
    }
    return out;
}

void save_jsonl(const std::vector<BenchmarkRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& r : records) out << to_jsonl_line(r) << '\n';
}

std::filesystem::path metadata_path_for(const std::filesystem::path& benchmark_path) {
    auto p = benchmark_path;
    p.replace_extension(".meta.jsonl");
    return p;
}

void save_metadata_jsonl(const std::vector<RecordMetadata>& meta, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& m : meta) {
        ordered_json j;
        j["id"] = m.id;
        j["true_grade"] = m.true_grade;
        j["premise_grade"] = m.premise_grade ? ordered_json(*m.premise_grade) : ordered_json(nullptr);
        j["evidence_finding"] = m.evidence_finding;
        j["omitted_finding"] =
            m.omitted_finding ? ordered_json(*m.omitted_finding) : ordered_json(nullptr);
        j["laterality"] = m.laterality;
        j["evidence_template"] = m.evidence_template;
        out << j.dump() << '\n';
    }
}

std::vector<RecordMetadata> load_metadata_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot open metadata file " + path.string());
    std::vector<RecordMetadata> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = ordered_json::parse(line);
            RecordMetadata m;
            m.id = j.at("id").get<std::string>();
            m.true_grade = j.at("true_grade").get<std::string>();
            if (!j.at("premise_grade").is_null()) m.premise_grade = j["premise_grade"].get<std::string>();
            m.evidence_finding = j.at("evidence_finding").get<std::string>();
            if (!j.at("omitted_finding").is_null())
                m.omitted_finding = j["omitted_finding"].get<std::string>();
            m.laterality = j.at("laterality").get<std::string>();
            m.evidence_template = j.at("evidence_template").get<std::size_t>();
            out.push_back(std::move(m));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string(), line_no, e.what());
        }
    }
    return out;
}

}  // namespace ecrt
