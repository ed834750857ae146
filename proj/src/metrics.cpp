#include "ecrt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "ecrt/error.hpp"

namespace ecrt {

std::string_view to_string(UncertaintyMethod m) noexcept {
    switch (m) {
        case UncertaintyMethod::Perplexity: return "perplexity";
        case UncertaintyMethod::LnEntropy: return "ln_entropy";
        case UncertaintyMethod::Msp: return "msp";
        case UncertaintyMethod::MeanTokenEntropy: return "mean_token_entropy";
    }
    return "?";
}

std::string_view display_name(UncertaintyMethod m) noexcept {
    switch (m) {
        case UncertaintyMethod::Perplexity: return "Perplexity";
        case UncertaintyMethod::LnEntropy: return "LN-Entropy";
        case UncertaintyMethod::Msp: return "MSP";
        case UncertaintyMethod::MeanTokenEntropy: return "MTE";
    }
    return "?";
}

UncertaintyMethod parse_uncertainty_method(std::string_view s) {
    for (auto m : kAllUncertaintyMethods)
        if (to_string(m) == s) return m;
    throw ConfigError("unknown uncertainty method '" + std::string(s) + "'");
}

namespace {

// Softmax in double with max subtraction.
std::vector<double> softmax(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float z : logits) mx = std::max(mx, static_cast<double>(z));
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        p[k] = std::exp(static_cast<double>(logits[k]) - mx);
        sum += p[k];
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace

double restricted_entropy(std::span<const float> logits) {
    if (logits.empty()) throw DataError("empty restricted support");
    double h = 0.0;
    for (double p : softmax(logits))
        if (p > 0.0) h -= p * std::log(p);
    return std::max(h, 0.0);
}

double restricted_max_prob(std::span<const float> logits) {
    if (logits.empty()) throw DataError("empty restricted support");
    const auto p = softmax(logits);
    return *std::max_element(p.begin(), p.end());
}

UncertaintyScore uncertainty_score(const PairedTrace& tr, UncertaintyMethod method) {
    if (tr.n_tokens == 0) throw DataError("trace '" + tr.record_id + "': empty trace");
    if (tr.tier != TraceTier::Reduced) throw DataError("trace '" + tr.record_id + "': baselines need a reduced trace");
    const std::size_t T = tr.n_tokens, K = tr.support_size;
    const auto row = [&](std::size_t t) {
        return std::span<const float>(tr.final_logits_ctx).subspan(t * K, K);
    };
    double acc = 0.0;
    switch (method) {
        case UncertaintyMethod::Perplexity:
            for (std::size_t t = 0; t < T; ++t) acc += static_cast<double>(tr.logprob_ctx[t]);
            acc = std::exp(-acc / static_cast<double>(T));
            break;
        case UncertaintyMethod::MeanTokenEntropy:
        case UncertaintyMethod::LnEntropy:
            for (std::size_t t = 0; t < T; ++t) acc += restricted_entropy(row(t));
            acc /= static_cast<double>(T);
            break;
        case UncertaintyMethod::Msp:
            for (std::size_t t = 0; t < T; ++t) acc += restricted_max_prob(row(t));
            acc = -acc / static_cast<double>(T);
            break;
    }
    if (!std::isfinite(acc)) throw DataError("trace '" + tr.record_id + "': non-finite uncertainty score");
    return {tr.record_id, method, acc};
}

Stage1Metrics stage1_metrics(std::span<const std::uint8_t> flagged, std::span<const std::uint8_t> unsafe) {
    if (flagged.size() != unsafe.size()) throw DataError("stage1_metrics: prediction/label length mismatch");
    std::size_t pos = 0, neg = 0, tp = 0, tn = 0, flags = 0;
    for (std::size_t i = 0; i < flagged.size(); ++i) {
        flags += flagged[i] != 0;
        if (unsafe[i]) {
            ++pos;
            tp += flagged[i] != 0;
        } else {
            ++neg;
            tn += flagged[i] == 0;
        }
    }
    if (pos == 0 || neg == 0) throw DataError("stage1_metrics: labels must contain both safe and unsafe rows");
    Stage1Metrics m;
    m.u_recall = static_cast<double>(tp) / static_cast<double>(pos);
    m.flag_rate = static_cast<double>(flags) / static_cast<double>(flagged.size());
    const double safe_pass = static_cast<double>(tn) / static_cast<double>(neg);
    m.s1_ba = 0.5 * (m.u_recall + safe_pass);
    return m;
}

Stage2Metrics stage2_metrics(std::span<const std::uint8_t> predicted_gap, std::span<const std::uint8_t> is_gap) {
    if (predicted_gap.size() != is_gap.size()) throw DataError("stage2_metrics: prediction/label length mismatch");
    std::size_t gaps = 0, conflicts = 0, gap_hit = 0, conflict_hit = 0;
    for (std::size_t i = 0; i < is_gap.size(); ++i) {
        if (is_gap[i]) {
            ++gaps;
            gap_hit += predicted_gap[i] != 0;
        } else {
            ++conflicts;
            conflict_hit += predicted_gap[i] == 0;
        }
    }
    if (gaps == 0 || conflicts == 0) throw DataError("stage2_metrics: both unsafe subtypes must be present");
    Stage2Metrics m;
    m.gap_recall = static_cast<double>(gap_hit) / static_cast<double>(gaps);
    m.contradiction_recall = static_cast<double>(conflict_hit) / static_cast<double>(conflicts);
    m.s2_ba = 0.5 * (m.gap_recall + m.contradiction_recall);
    return m;
}

McqaAccuracy mcqa_macro_accuracy(std::span<const int> answers, std::span<const int> gold,
                                 std::span<const TaskLabel> tasks) {
    if (answers.size() != gold.size() || answers.size() != tasks.size())
        throw DataError("mcqa_macro_accuracy: length mismatch");
    std::array<std::size_t, 3> n{}, hit{};
    for (std::size_t i = 0; i < answers.size(); ++i) {
        if (answers[i] < 0 || answers[i] > 3) throw DataError("mcqa_macro_accuracy: answer index out of range");
        const auto c = task_index(tasks[i]);
        ++n[c];
        hit[c] += answers[i] == gold[i];
    }
    McqaAccuracy out;
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < 3; ++c) {
        if (n[c] == 0) {
            out.missing_class = true;
            continue;
        }
        out.per_task[c] = static_cast<double>(hit[c]) / static_cast<double>(n[c]);
        sum += *out.per_task[c];
        ++present;
    }
    if (present == 0) throw DataError("mcqa_macro_accuracy: no records");
    out.macro = sum / static_cast<double>(present);
    return out;
}

MetricSummary summarize(std::span<const double> values) {
    if (values.empty()) throw DataError("cannot summarize an empty metric series");
    MetricSummary s;
    double sum = 0.0;
    s.min = s.max = values[0];
    for (double v : values) {
        sum += v;
        s.min = std::min(s.min, v);
        s.max = std::max(s.max, v);
    }
    const auto n = static_cast<double>(values.size());
    s.mean = sum / n;
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / n);
    return s;
}

EvalReport aggregate_reports(std::string backbone, std::string method, std::vector<SeedReport> reports) {
    if (reports.empty()) throw DataError("aggregate_reports: no per-seed reports");
    for (const auto& r : reports) {
        if (r.metrics.size() != reports[0].metrics.size() ||
            !std::equal(r.metrics.begin(), r.metrics.end(), reports[0].metrics.begin(),
                        [](const auto& a, const auto& b) { return a.first == b.first; }))
            throw DataError("aggregate_reports: heterogeneous metric keys across seeds");
        for (const auto& [k, v] : r.metrics)
            if (!(v >= 0.0 && v <= 1.0))
                throw ValidationError("aggregate_reports: metric '" + k + "' out of [0, 1]");
    }
    EvalReport out;
    out.backbone = std::move(backbone);
    out.method = std::move(method);
    for (const auto& [key, _] : reports[0].metrics) {
        std::vector<double> series;
        for (const auto& r : reports) series.push_back(r.metrics.at(key));
        out.aggregate[key] = summarize(series);
    }
    out.seeds = std::move(reports);
    return out;
}

std::string reports_to_json(const std::vector<EvalReport>& reports) {
    nlohmann::ordered_json root = nlohmann::ordered_json::array();
    for (const auto& rep : reports) {
        nlohmann::ordered_json j;
        j["backbone"] = rep.backbone;
        j["method"] = rep.method;
        auto& seeds = j["seeds"] = nlohmann::ordered_json::array();
        for (const auto& s : rep.seeds) {
            nlohmann::ordered_json js;
            js["seed"] = s.seed;
            js["metrics"] = s.metrics;
            js["audit"] = s.audit;
            seeds.push_back(std::move(js));
        }
        auto& agg = j["aggregate"] = nlohmann::ordered_json::object();
        for (const auto& [k, m] : rep.aggregate)
            agg[k] = {{"mean", m.mean}, {"std", m.std}, {"min", m.min}, {"max", m.max}};
        root.push_back(std::move(j));
    }
    return root.dump(2) + "\n";
}

std::vector<EvalReport> reports_from_json(std::string_view text) {
    std::vector<EvalReport> out;
    try {
        const auto root = nlohmann::json::parse(text);
        for (const auto& j : root) {
            EvalReport rep;
            rep.backbone = j.at("backbone").get<std::string>();
            rep.method = j.at("method").get<std::string>();
            for (const auto& js : j.at("seeds")) {
                SeedReport s;
                s.seed = js.at("seed").get<std::uint64_t>();
                s.metrics = js.at("metrics").get<std::map<std::string, double>>();
                s.audit = js.at("audit").get<std::map<std::string, double>>();
                rep.seeds.push_back(std::move(s));
            }
            for (const auto& [k, m] : j.at("aggregate").items())
                rep.aggregate[k] = {m.at("mean").get<double>(), m.at("std").get<double>(),
                                    m.at("min").get<double>(), m.at("max").get<double>()};
            out.push_back(std::move(rep));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed report: ") + e.what());
    }
    return out;
}

namespace {

std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

constexpr std::array<std::pair<std::string_view, std::string_view>, 6> kCsvColumns = {{
    {"u_recall", "U-Recall"},
    {"flag_rate", "Flag Rate"},
    {"s1_ba", "S1 BA"},
    {"gap_recall", "Gap Recall"},
    {"contradiction_recall", "Contradict. Recall"},
    {"s2_ba", "S2 BA"},
}};

}  // namespace

std::string reports_to_csv(const std::vector<EvalReport>& reports) {
    std::ostringstream out;
    out << "Backbone,Method,Seed";
    for (const auto& [_, title] : kCsvColumns) out << ',' << title;
    out << '\n';
    for (const auto& rep : reports) {
        const std::string prefix = csv_field(rep.backbone) + "," + csv_field(rep.method) + ",";
        for (const auto& s : rep.seeds) {
            out << prefix << s.seed;
            for (const auto& [key, _] : kCsvColumns) {
                out << ',';
                if (auto it = s.metrics.find(std::string(key)); it != s.metrics.end()) out << fixed4(it->second);
            }
            out << '\n';
        }
        out << prefix << "mean ± std";
        for (const auto& [key, _] : kCsvColumns) {
            out << ',';
            if (auto it = rep.aggregate.find(std::string(key)); it != rep.aggregate.end())
                out << fixed4(it->second.mean) << " ± " << fixed4(it->second.std);
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace ecrt
