#include "ecrt/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "ecrt/error.hpp"
#include "ecrt/features.hpp"
#include "ecrt/hash.hpp"
#include "ecrt/triage.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace ecrt {

namespace {

// ---- config (de)serialization ----

[[noreturn]] void config_fail(const std::string& what) { throw ConfigError("config: " + what); }

void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) config_fail(where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || a == k;
        if (!ok) config_fail("unknown key '" + where + "." + k + "'");
    }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        config_fail("'" + where + "." + key + "' has the wrong type");
    }
}

BuilderConfig builder_from_json(const nlohmann::json& j) {
    check_keys(j, "dataset.builder",
               {"total", "ratios", "seed", "evidence_templates", "populate_context", "vocabulary"});
    BuilderConfig b;
    read_opt(j, "total", b.total, "dataset.builder");
    read_opt(j, "ratios", b.ratios, "dataset.builder");
    read_opt(j, "seed", b.seed, "dataset.builder");
    read_opt(j, "evidence_templates", b.evidence_templates, "dataset.builder");
    read_opt(j, "populate_context", b.populate_context, "dataset.builder");
    if (j.contains("vocabulary")) {
        const auto& v = j.at("vocabulary");
        check_keys(v, "dataset.builder.vocabulary", {"grades", "findings", "lateralities"});
        read_opt(v, "grades", b.vocabulary.grades, "dataset.builder.vocabulary");
        read_opt(v, "findings", b.vocabulary.findings, "dataset.builder.vocabulary");
        read_opt(v, "lateralities", b.vocabulary.lateralities, "dataset.builder.vocabulary");
    }
    return b;
}

ojson builder_to_json(const BuilderConfig& b) {
    ojson j;
    j["total"] = b.total;
    j["ratios"] = b.ratios;
    j["seed"] = b.seed;
    j["evidence_templates"] = b.evidence_templates;
    j["populate_context"] = b.populate_context;
    j["vocabulary"] = {{"grades", b.vocabulary.grades},
                       {"findings", b.vocabulary.findings},
                       {"lateralities", b.vocabulary.lateralities}};
    return j;
}

SignalProfile profile_from_json(const nlohmann::json& j, SignalProfile p, const std::string& where) {
    check_keys(j, where,
               {"logit_local", "logit_diffuse", "hidden_peak", "hidden_floor", "kl_peak", "kl_floor",
                "temperature"});
    read_opt(j, "logit_local", p.logit_local, where);
    read_opt(j, "logit_diffuse", p.logit_diffuse, where);
    read_opt(j, "hidden_peak", p.hidden_peak, where);
    read_opt(j, "hidden_floor", p.hidden_floor, where);
    read_opt(j, "kl_peak", p.kl_peak, where);
    read_opt(j, "kl_floor", p.kl_floor, where);
    read_opt(j, "temperature", p.temperature, where);
    return p;
}

ojson profile_to_json(const SignalProfile& p) {
    ojson j;
    j["logit_local"] = p.logit_local;
    j["logit_diffuse"] = p.logit_diffuse;
    j["hidden_peak"] = p.hidden_peak;
    j["hidden_floor"] = p.hidden_floor;
    j["kl_peak"] = p.kl_peak;
    j["kl_floor"] = p.kl_floor;
    j["temperature"] = p.temperature;
    return j;
}

SyntheticTraceConfig synthetic_from_json(const nlohmann::json& j) {
    const std::string where = "traces.synthetic";
    check_keys(j, where,
               {"min_tokens", "max_tokens", "n_layers", "support_size", "vocab_size", "noise", "seed", "profiles"});
    SyntheticTraceConfig s;
    read_opt(j, "min_tokens", s.min_tokens, where);
    read_opt(j, "max_tokens", s.max_tokens, where);
    read_opt(j, "n_layers", s.n_layers, where);
    read_opt(j, "support_size", s.support_size, where);
    read_opt(j, "vocab_size", s.vocab_size, where);
    read_opt(j, "noise", s.noise, where);
    read_opt(j, "seed", s.seed, where);
    if (j.contains("profiles")) {
        const auto& p = j.at("profiles");
        check_keys(p, where + ".profiles", {"e_align", "e_conflict", "e_gap"});
        for (TaskLabel t : kAllTasks) {
            const std::string name(to_string(t));
            if (p.contains(name))
                s.profiles[task_index(t)] =
                    profile_from_json(p.at(name), s.profiles[task_index(t)], where + ".profiles." + name);
        }
    }
    return s;
}

ojson synthetic_to_json(const SyntheticTraceConfig& s) {
    ojson j;
    j["min_tokens"] = s.min_tokens;
    j["max_tokens"] = s.max_tokens;
    j["n_layers"] = s.n_layers;
    j["support_size"] = s.support_size;
    j["vocab_size"] = s.vocab_size;
    j["noise"] = s.noise;
    j["seed"] = s.seed;
    ojson profiles;
    for (TaskLabel t : kAllTasks) profiles[std::string(to_string(t))] = profile_to_json(s.profiles[task_index(t)]);
    j["profiles"] = std::move(profiles);
    return j;
}

gbdt::Config gbdt_from_json(const nlohmann::json& j) {
    check_keys(j, "gbdt", {"n_estimators", "max_depth", "learning_rate", "min_samples_leaf", "l2_leaf_reg"});
    gbdt::Config g;
    read_opt(j, "n_estimators", g.n_estimators, "gbdt");
    read_opt(j, "max_depth", g.max_depth, "gbdt");
    read_opt(j, "learning_rate", g.learning_rate, "gbdt");
    read_opt(j, "min_samples_leaf", g.min_samples_leaf, "gbdt");
    read_opt(j, "l2_leaf_reg", g.l2_leaf_reg, "gbdt");
    return g;
}

ojson gbdt_to_json(const gbdt::Config& g) {
    ojson j;
    j["n_estimators"] = g.n_estimators;
    j["max_depth"] = g.max_depth;
    j["learning_rate"] = g.learning_rate;
    j["min_samples_leaf"] = g.min_samples_leaf;
    j["l2_leaf_reg"] = g.l2_leaf_reg;
    return j;
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return (base / p).lexically_normal();
}

// ---- file helpers ----

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("short write on " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed " + path.string() + ": " + e.what());
    }
}

void require(const fs::path& path, std::string_view prior_command) {
    if (!fs::exists(path))
        throw MissingArtifactError("missing " + path.string() + "; run `ecrt " + std::string(prior_command) +
                                   "` first");
}

std::string display_path(const fs::path& p, const fs::path& root) {
    const auto rel = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(root));
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return fs::weakly_canonical(p).generic_string();
}

void write_provenance(const fs::path& dir, std::string_view command, const ExperimentConfig& cfg,
                      const std::vector<fs::path>& inputs, const ojson& extra = ojson::object()) {
    ojson j;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    std::map<std::string, std::string> hashed;
    for (const auto& p : inputs) hashed[display_path(p, cfg.out())] = sha256_file(p);
    ojson in = ojson::object();
    for (const auto& [k, v] : hashed) in[k] = v;
    j["inputs"] = std::move(in);
    j["versions"] = {{"ecrt", ECRT_VERSION},
                     {"feature_layout", kLayoutVersion},
                     {"trace_format", kTraceFormatVersion}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    write_text(dir / "provenance.json", j.dump(2) + "\n");
}

// Benchmark records with duplicate ids rejected.
std::vector<BenchmarkRecord> load_benchmark(const Layout& layout) {
    require(layout.benchmark(), "build");
    auto records = load_jsonl(layout.benchmark());
    std::set<std::string> seen;
    for (const auto& r : records)
        if (!seen.insert(r.id).second) throw ValidationError("duplicate record id '" + r.id + "'");
    return records;
}

std::unordered_map<std::string, TaskLabel> label_index(const std::vector<BenchmarkRecord>& records) {
    std::unordered_map<std::string, TaskLabel> m;
    for (const auto& r : records) m.emplace(r.id, r.task_label);
    return m;
}

std::vector<TaskLabel> labels_for(const std::vector<std::string>& ids,
                                  const std::unordered_map<std::string, TaskLabel>& index) {
    std::vector<TaskLabel> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end()) throw DataError("split manifest names unknown record '" + id + "'");
        out.push_back(it->second);
    }
    return out;
}

std::vector<std::uint8_t> unsafe_of(std::span<const TaskLabel> labels) {
    std::vector<std::uint8_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] != TaskLabel::EAlign;
    return y;
}

FeatureMatrix load_features(const Layout& layout) {
    require(layout.features_bin(), "extract");
    require(layout.features_index(), "extract");
    return load_feature_matrix(layout.features_bin(), layout.features_index());
}

// method name -> record id -> score
using ScoreTable = std::map<std::string, std::unordered_map<std::string, double>>;

ScoreTable load_uncertainty(const Layout& layout) {
    require(layout.uncertainty(), "extract");
    const auto j = read_json(layout.uncertainty());
    ScoreTable out;
    try {
        const auto ids = j.at("record_ids").get<std::vector<std::string>>();
        for (auto m : kAllUncertaintyMethods) {
            const auto vals = j.at("scores").at(std::string(to_string(m))).get<std::vector<double>>();
            if (vals.size() != ids.size()) throw DataError("uncertainty.json: score count mismatch");
            auto& col = out[std::string(to_string(m))];
            for (std::size_t i = 0; i < ids.size(); ++i) col.emplace(ids[i], vals[i]);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed " + layout.uncertainty().string() + ": " + e.what());
    }
    return out;
}

std::vector<double> scores_for(const std::unordered_map<std::string, double>& col,
                               const std::vector<std::string>& ids) {
    std::vector<double> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = col.find(id);
        if (it == col.end()) throw DataError("no uncertainty score for record '" + id + "'");
        out.push_back(it->second);
    }
    return out;
}

// Runs fn(seed) for every seed concurrently and rethrows the first failure in
// seed-list order once all have finished.
template <typename Fn>
void for_each_seed(const std::vector<std::uint64_t>& seeds, Fn fn) {
    std::vector<std::future<void>> jobs;
    jobs.reserve(seeds.size());
    for (auto s : seeds) jobs.push_back(std::async(std::launch::async, fn, s));
    std::exception_ptr first;
    for (auto& j : jobs) {
        try {
            j.get();
        } catch (...) {
            if (!first) first = std::current_exception();
        }
    }
    if (first) std::rethrow_exception(first);
}

ojson stats_to_json(const DatasetStats& st) {
    const auto one = [](const ClassStats& c) {
        ojson j;
        j["count"] = c.count;
        j["ratio"] = c.ratio;
        j["ratio_3dp"] = std::round(c.ratio * 1000.0) / 1000.0;
        j["avg_question_len"] = c.avg_question_len;
        j["avg_evidence_len"] = c.avg_evidence_len;
        return j;
    };
    ojson j;
    j["total"] = st.total;
    ojson classes;
    for (TaskLabel t : kAllTasks) classes[std::string(to_string(t))] = one(st.per_class[task_index(t)]);
    j["classes"] = std::move(classes);
    j["overall"] = one(st.overall);
    return j;
}

std::vector<fs::path> model_files(const Layout& layout, std::uint64_t seed) {
    const auto dir = layout.model_dir(seed);
    std::vector<fs::path> files;
    for (const char* f : {"stage1.json", "stage2.json", "calibration.json", "layout.json"})
        files.push_back(dir / "ecrt" / f);
    for (TaskLabel t : kAllTasks) files.push_back(dir / "single_stage" / ("head_" + std::string(to_string(t)) + ".json"));
    files.push_back(dir / "single_stage" / "calibration.json");
    files.push_back(dir / "single_stage" / "layout.json");
    files.push_back(dir / "baselines.json");
    return files;
}

std::string frozen_key(const Layout& layout, std::uint64_t seed) {
    std::string acc;
    for (const auto& f : model_files(layout, seed)) {
        require(f, "train");
        acc += sha256_file(f);
    }
    acc += sha256_file(layout.split(seed));
    return sha256_hex(acc);
}

// Learner settings of a frozen model, kept beside its thresholds.
std::map<std::string, double> gbdt_audit(const gbdt::Config& c, std::map<std::string, double> audit) {
    audit["gbdt_n_estimators"] = static_cast<double>(c.n_estimators);
    audit["gbdt_max_depth"] = static_cast<double>(c.max_depth);
    audit["gbdt_learning_rate"] = c.learning_rate;
    audit["gbdt_min_samples_leaf"] = static_cast<double>(c.min_samples_leaf);
    audit["gbdt_l2_leaf_reg"] = c.l2_leaf_reg;
    return audit;
}

ojson method_entry(std::string_view method, const std::map<std::string, double>& metrics,
                   const std::map<std::string, double>& audit) {
    ojson j;
    j["method"] = method;
    j["metrics"] = metrics;
    j["audit"] = audit;
    return j;
}

}  // namespace

// ---- ExperimentConfig ----

void ExperimentConfig::validate() const {
    if (backbone.empty()) config_fail("backbone must be non-empty");
    if (builder.has_value() == dataset_path.has_value())
        config_fail("exactly one dataset source (builder or path) is required");
    if (synthetic.has_value() == trace_manifest.has_value())
        config_fail("exactly one trace source (synthetic or manifest) is required");
    if (seeds.empty()) config_fail("seed list must be non-empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        config_fail("seed list contains duplicates");
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0) || !std::isfinite(f)) config_fail("split fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) config_fail("split fractions must sum to 1");
    if (!(tau > 0.0 && tau <= 1.0)) config_fail("tau must be in (0, 1]");
    if (!(theta2 >= 0.0 && theta2 <= 1.0)) config_fail("theta2 must be in [0, 1]");
    if (support_size < 1) config_fail("support_size must be >= 1");
    gbdt.validate();
    if (synthetic) synthetic->validate();
}

fs::path ExperimentConfig::out() const {
    if (!output_dir.empty()) return output_dir;
    if (const char* env = std::getenv(std::string(kOutputRootEnv).c_str()); env && *env) return env;
    return std::string(kDefaultOutputDir);
}

ExperimentConfig config_from_json(std::string_view text, const fs::path& base_dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        config_fail(std::string("not valid JSON: ") + e.what());
    }
    check_keys(j, "config", {"backbone", "dataset", "splits", "traces", "support_size", "gbdt", "tau", "theta2",
                             "output_dir"});
    ExperimentConfig c;
    read_opt(j, "backbone", c.backbone, "config");
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, "dataset", {"builder", "path"});
        if (d.contains("builder") && d.contains("path")) config_fail("dataset: give either builder or path");
        if (d.contains("path")) {
            std::string p;
            read_opt(d, "path", p, "dataset");
            c.dataset_path = resolve(p, base_dir);
            c.builder.reset();
        } else if (d.contains("builder")) {
            c.builder = builder_from_json(d.at("builder"));
        }
    }
    if (j.contains("splits")) {
        const auto& s = j.at("splits");
        check_keys(s, "splits", {"fractions", "seeds"});
        read_opt(s, "fractions", c.fractions, "splits");
        read_opt(s, "seeds", c.seeds, "splits");
    }
    if (j.contains("traces")) {
        const auto& t = j.at("traces");
        check_keys(t, "traces", {"synthetic", "manifest"});
        if (t.contains("synthetic") && t.contains("manifest")) config_fail("traces: give either synthetic or manifest");
        if (t.contains("manifest")) {
            std::string p;
            read_opt(t, "manifest", p, "traces");
            c.trace_manifest = resolve(p, base_dir);
            c.synthetic.reset();
        } else if (t.contains("synthetic")) {
            c.synthetic = synthetic_from_json(t.at("synthetic"));
        }
    }
    read_opt(j, "support_size", c.support_size, "config");
    if (j.contains("gbdt")) c.gbdt = gbdt_from_json(j.at("gbdt"));
    read_opt(j, "tau", c.tau, "config");
    read_opt(j, "theta2", c.theta2, "config");
    if (j.contains("output_dir")) {
        std::string p;
        read_opt(j, "output_dir", p, "config");
        c.output_dir = resolve(p, base_dir);
    }
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str(), path.parent_path());
}

std::string config_to_json(const ExperimentConfig& c) {
    ojson j;
    j["backbone"] = c.backbone;
    if (c.builder)
        j["dataset"] = {{"builder", builder_to_json(*c.builder)}};
    else if (c.dataset_path)
        j["dataset"] = {{"path", c.dataset_path->generic_string()}};
    j["splits"] = {{"fractions", c.fractions}, {"seeds", c.seeds}};
    if (c.synthetic)
        j["traces"] = {{"synthetic", synthetic_to_json(*c.synthetic)}};
    else if (c.trace_manifest)
        j["traces"] = {{"manifest", c.trace_manifest->generic_string()}};
    j["support_size"] = c.support_size;
    j["gbdt"] = gbdt_to_json(c.gbdt);
    j["tau"] = c.tau;
    j["theta2"] = c.theta2;
    return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(config_to_json(cfg)); }

// ---- Layout ----

fs::path Layout::split_dir(std::uint64_t seed) const { return root / "splits" / ("seed-" + std::to_string(seed)); }
fs::path Layout::model_dir(std::uint64_t seed) const { return root / "models" / ("seed-" + std::to_string(seed)); }
fs::path Layout::eval_sentinel(std::uint64_t seed) const {
    return root / "models" / ("seed-" + std::to_string(seed) + ".evaluated");
}
fs::path Layout::eval_dir(std::uint64_t seed) const { return root / "eval" / ("seed-" + std::to_string(seed)); }

// ---- commands ----

void cmd_build(const ExperimentConfig& cfg) {
    cfg.validate();
    const Layout layout{cfg.out()};
    fs::create_directories(layout.benchmark_dir());
    std::vector<BenchmarkRecord> records;
    std::vector<fs::path> inputs;
    if (cfg.builder) {
        auto bm = build_benchmark(*cfg.builder);
        save_metadata_jsonl(bm.metadata, metadata_path_for(layout.benchmark()));
        records = std::move(bm.records);
    } else {
        require(*cfg.dataset_path, "build (dataset path from the config)");
        records = load_jsonl(*cfg.dataset_path);
        inputs.push_back(*cfg.dataset_path);
        std::set<std::string> seen;
        for (const auto& r : records)
            if (!seen.insert(r.id).second) throw ValidationError("duplicate record id '" + r.id + "'");
        fs::remove(metadata_path_for(layout.benchmark()));
    }
    if (records.empty()) throw DataError("benchmark has no records");
    save_jsonl(records, layout.benchmark());
    write_text(layout.stats(), stats_to_json(compute_stats(records)).dump(2) + "\n");
    write_provenance(layout.benchmark_dir(), "build", cfg, inputs);
}

void cmd_split(const ExperimentConfig& cfg) {
    cfg.validate();
    const Layout layout{cfg.out()};
    const auto records = load_benchmark(layout);
    for_each_seed(cfg.seeds, [&](std::uint64_t seed) {
        const auto manifest = make_grouped_split(records, cfg.fractions, seed);
        const auto violations = verify_manifest(records, manifest);
        if (!violations.empty())
            throw ProtocolError("split seed " + std::to_string(seed) + ": " + violations.front().subject + ": " +
                                violations.front().detail);
        fs::create_directories(layout.split_dir(seed));
        save_manifest(manifest, layout.split(seed));
        write_provenance(layout.split_dir(seed), "split", cfg, {layout.benchmark()}, {{"seed", seed}});
    });
}

void cmd_synth(const ExperimentConfig& cfg) {
    cfg.validate();
    if (!cfg.synthetic) throw ConfigError("synth needs a synthetic trace source in the config");
    const Layout layout{cfg.out()};
    const auto records = load_benchmark(layout);
    fs::create_directories(layout.traces_dir());
    TraceManifest manifest;
    manifest.backbone = cfg.backbone;
    for (const auto& r : records) {
        const std::string file = r.id + ".ecrt";
        write_trace(generate_synthetic_pair(r, *cfg.synthetic), layout.traces_dir() / file);
        manifest.traces[r.id] = file;
    }
    save_trace_manifest(manifest, layout.trace_manifest());
    write_provenance(layout.traces_dir(), "synth", cfg, {layout.benchmark()});
}

void cmd_extract(const ExperimentConfig& cfg) {
    cfg.validate();
    const Layout layout{cfg.out()};
    const auto records = load_benchmark(layout);
    const fs::path manifest_path = cfg.trace_manifest ? *cfg.trace_manifest : layout.trace_manifest();
    require(manifest_path, cfg.trace_manifest ? "an external extractor (trace manifest from the config)" : "synth");
    const auto manifest = load_trace_manifest(manifest_path);

    FeatureMatrix features;
    std::map<std::string, std::vector<double>> scores;
    std::vector<fs::path> inputs = {layout.benchmark(), manifest_path};
    for (const auto& r : records) {
        auto it = manifest.traces.find(r.id);
        if (it == manifest.traces.end()) throw DataError("trace manifest has no trace for record '" + r.id + "'");
        const fs::path file = manifest_path.parent_path() / it->second;
        PairedTrace tr = read_trace(file);
        inputs.push_back(file);
        if (tr.record_id != r.id)
            throw DataError(file.string() + ": trace is for record '" + tr.record_id + "', expected '" + r.id + "'");
        if (tr.tier == TraceTier::Raw) tr = reduce_raw_trace(tr, cfg.support_size);
        features.append(r.id, pool(tr));
        for (auto m : kAllUncertaintyMethods) scores[std::string(to_string(m))].push_back(uncertainty_score(tr, m).value);
    }
    fs::create_directories(layout.features_dir());
    save_feature_matrix(features, layout.features_bin(), layout.features_index());
    ojson u;
    u["record_ids"] = features.record_ids;
    ojson s;
    for (auto m : kAllUncertaintyMethods) s[std::string(to_string(m))] = scores[std::string(to_string(m))];
    u["scores"] = std::move(s);
    write_text(layout.uncertainty(), u.dump(1) + "\n");
    write_provenance(layout.features_dir(), "extract", cfg, inputs);
}

void cmd_train(const ExperimentConfig& cfg) {
    cfg.validate();
    const Layout layout{cfg.out()};
    const auto records = load_benchmark(layout);
    const auto labels = label_index(records);
    const auto features = load_features(layout);
    const auto uncertainty = load_uncertainty(layout);
    for (auto seed : cfg.seeds) require(layout.split(seed), "split");

    for_each_seed(cfg.seeds, [&](std::uint64_t seed) {
        const auto manifest = load_manifest(layout.split(seed));
        const std::string val_hash = sha256_file(layout.split(seed));
        const auto train_ids = manifest.ids_in(Partition::Train);
        const auto val_ids = manifest.ids_in(Partition::Val);
        const auto x_train = features.select(train_ids);
        const auto x_val = features.select(val_ids);
        const auto y_train = labels_for(train_ids, labels);
        const auto y_val = labels_for(val_ids, labels);
        gbdt::Config gcfg = cfg.gbdt;
        gcfg.seed = seed;

        const fs::path dir = layout.model_dir(seed);
        fs::create_directories(dir);

        auto model = calibrate_ecrt(train_ecrt(x_train, y_train, gcfg), x_val, y_val, cfg.tau, cfg.theta2);
        model.val_manifest_hash = val_hash;
        model.seed = seed;
        save_triage_model(model, dir / "ecrt");

        auto single = train_single_stage(x_train, y_train, gcfg);
        calibrate_single_stage(single, x_val, y_val, cfg.tau);
        single.val_manifest_hash = val_hash;
        single.seed = seed;
        save_single_stage_model(single, dir / "single_stage");

        const auto unsafe = unsafe_of(y_val);
        ojson b;
        b["tau"] = cfg.tau;
        b["val_manifest_hash"] = val_hash;
        ojson thresholds;
        for (auto m : kAllUncertaintyMethods) {
            const std::string name(to_string(m));
            thresholds[name] = calibrate_threshold(scores_for(uncertainty.at(name), val_ids), unsafe, cfg.tau);
        }
        b["theta1"] = std::move(thresholds);
        write_text(dir / "baselines.json", b.dump(2) + "\n");

        write_provenance(dir, "train", cfg,
                         {layout.benchmark(), layout.features_bin(), layout.features_index(), layout.uncertainty(),
                          layout.split(seed)},
                         {{"seed", seed}});
    });
}

void cmd_eval(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Layout layout{cfg.out()};
    for (auto seed : cfg.seeds) {
        require(layout.split(seed), "split");
        require(layout.model_dir(seed), "train");
    }
    std::map<std::uint64_t, std::string> keys;
    for (auto seed : cfg.seeds) {
        keys[seed] = frozen_key(layout, seed);
        const auto sentinel = layout.eval_sentinel(seed);
        if (!force && fs::exists(sentinel)) {
            std::ifstream in(sentinel);
            std::string prior;
            std::getline(in, prior);
            if (prior == keys[seed])
                throw ProtocolError("seed " + std::to_string(seed) +
                                    ": the frozen model was already evaluated on this test partition; "
                                    "pass --force to evaluate again");
        }
    }

    const auto records = load_benchmark(layout);
    const auto labels = label_index(records);
    const auto features = load_features(layout);
    const auto uncertainty = load_uncertainty(layout);

    for_each_seed(cfg.seeds, [&](std::uint64_t seed) {
        const auto manifest = load_manifest(layout.split(seed));
        const std::string split_hash = sha256_file(layout.split(seed));
        const fs::path dir = layout.model_dir(seed);
        const auto model = load_triage_model(dir / "ecrt");
        const auto single = load_single_stage_model(dir / "single_stage");
        const auto baselines = read_json(dir / "baselines.json");
        if (model.val_manifest_hash != split_hash || single.val_manifest_hash != split_hash)
            throw ProtocolError("seed " + std::to_string(seed) +
                                ": models were calibrated against a different split manifest; retrain");

        const auto test_ids = manifest.ids_in(Partition::Test);
        const auto x = features.select(test_ids);
        const auto y = labels_for(test_ids, labels);
        const auto unsafe = unsafe_of(y);
        std::vector<std::uint8_t> gt_gap;
        for (auto l : y)
            if (l != TaskLabel::EAlign) gt_gap.push_back(l == TaskLabel::EGap);

        const auto record_stage1 = [](std::map<std::string, double>& m, const Stage1Metrics& s) {
            m["u_recall"] = s.u_recall;
            m["flag_rate"] = s.flag_rate;
            m["s1_ba"] = s.s1_ba;
        };
        const auto record_stage2 = [](std::map<std::string, double>& m, const Stage2Metrics& s) {
            m["gap_recall"] = s.gap_recall;
            m["contradiction_recall"] = s.contradiction_recall;
            m["s2_ba"] = s.s2_ba;
        };

        ojson methods = ojson::array();
        {
            const auto out = triage_batch(model, x);
            std::vector<std::uint8_t> flagged, pred_gap;
            for (std::size_t i = 0; i < out.size(); ++i) {
                flagged.push_back(out[i].flagged);
                if (unsafe[i]) pred_gap.push_back(out[i].p_gap_given_unsafe >= model.theta2);
            }
            std::map<std::string, double> m;
            record_stage1(m, stage1_metrics(flagged, unsafe));
            record_stage2(m, stage2_metrics(pred_gap, gt_gap));
            methods.push_back(method_entry(
                kEcrtMethod, m,
                gbdt_audit(model.stage1.config,
                           {{"theta1", model.theta1}, {"theta2", model.theta2}, {"tau", model.tau}})));
        }
        {
            std::vector<std::uint8_t> flagged, pred_gap;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const auto s = single_stage_scores(single, x.row(i));
                flagged.push_back(single_stage_unsafe_score(s) >= single.theta1);
                if (unsafe[i])
                    pred_gap.push_back(s[task_index(TaskLabel::EGap)] >= s[task_index(TaskLabel::EConflict)]);
            }
            std::map<std::string, double> m;
            record_stage1(m, stage1_metrics(flagged, unsafe));
            record_stage2(m, stage2_metrics(pred_gap, gt_gap));
            methods.push_back(method_entry(kSingleStageMethod, m,
                                           gbdt_audit(single.heads[0].config,
                                                      {{"theta1", single.theta1}, {"tau", single.tau}})));
        }
        for (auto um : kAllUncertaintyMethods) {
            const std::string name(to_string(um));
            double theta = 0.0;
            try {
                theta = baselines.at("theta1").at(name).get<double>();
            } catch (const nlohmann::json::exception& e) {
                throw DataError("malformed baselines.json: " + std::string(e.what()));
            }
            const auto scores = scores_for(uncertainty.at(name), test_ids);
            std::vector<std::uint8_t> flagged(scores.size());
            for (std::size_t i = 0; i < scores.size(); ++i) flagged[i] = scores[i] >= theta;
            std::map<std::string, double> m;
            record_stage1(m, stage1_metrics(flagged, unsafe));
            methods.push_back(method_entry(display_name(um), m, {{"theta1", theta}, {"tau", cfg.tau}}));
        }

        ojson j;
        j["seed"] = seed;
        j["test_rows"] = test_ids.size();
        j["methods"] = std::move(methods);
        write_text(layout.metrics(seed), j.dump(2) + "\n");
        auto inputs = model_files(layout, seed);
        inputs.insert(inputs.end(), {layout.benchmark(), layout.features_bin(), layout.features_index(),
                                     layout.uncertainty(), layout.split(seed)});
        write_provenance(layout.eval_dir(seed), "eval", cfg, inputs, {{"seed", seed}});
        write_text(layout.eval_sentinel(seed), keys.at(seed) + "\n");
    });
}

void cmd_report(const ExperimentConfig& cfg) {
    cfg.validate();
    const Layout layout{cfg.out()};
    std::vector<std::string> order;
    std::map<std::string, std::vector<SeedReport>> by_method;
    std::vector<fs::path> inputs;
    for (auto seed : cfg.seeds) {
        require(layout.metrics(seed), "eval");
        inputs.push_back(layout.metrics(seed));
        const auto j = read_json(layout.metrics(seed));
        try {
            for (const auto& m : j.at("methods")) {
                const auto name = m.at("method").get<std::string>();
                if (!by_method.count(name)) order.push_back(name);
                SeedReport r;
                r.seed = seed;
                r.metrics = m.at("metrics").get<std::map<std::string, double>>();
                r.audit = m.at("audit").get<std::map<std::string, double>>();
                by_method[name].push_back(std::move(r));
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed " + layout.metrics(seed).string() + ": " + e.what());
        }
    }
    std::vector<EvalReport> reports;
    for (const auto& name : order) {
        if (by_method[name].size() != cfg.seeds.size())
            throw DataError("method '" + name + "' is missing from some seeds' metrics");
        reports.push_back(aggregate_reports(cfg.backbone, name, std::move(by_method[name])));
    }
    write_text(layout.report_json(), reports_to_json(reports));
    write_text(layout.report_csv(), reports_to_csv(reports));
    write_provenance(layout.report_dir(), "report", cfg, inputs);
}

void cmd_run(const ExperimentConfig& cfg, bool force) {
    cmd_build(cfg);
    cmd_split(cfg);
    if (cfg.synthetic) cmd_synth(cfg);
    cmd_extract(cfg);
    cmd_train(cfg);
    cmd_eval(cfg, force);
    cmd_report(cfg);
}

std::vector<EvalReport> load_report(const fs::path& report_json) {
    std::ifstream in(report_json, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + report_json.string() + "; run `ecrt report` first");
    std::stringstream ss;
    ss << in.rdbuf();
    return reports_from_json(ss.str());
}

}  // namespace ecrt
