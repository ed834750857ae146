#include "ecrt/triage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ecrt/error.hpp"

namespace ecrt {

std::vector<double> class_balance_weights(std::span<const std::uint8_t> labels) {
    std::array<std::size_t, 2> count{};
    for (auto y : labels) {
        if (y > 1) throw DataError("class_balance_weights: labels must be 0 or 1");
        count[y]++;
    }
    if (count[0] == 0 || count[1] == 0) throw DataError("class_balance_weights: both classes must be present");
    const auto n = static_cast<double>(labels.size());
    const std::array<double, 2> w = {n / (2.0 * static_cast<double>(count[0])),
                                     n / (2.0 * static_cast<double>(count[1]))};
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = w[labels[i]];
    return out;
}

double calibrate_threshold(std::span<const double> scores, std::span<const std::uint8_t> unsafe, double tau) {
    if (scores.size() != unsafe.size()) throw DataError("calibrate_threshold: score/label length mismatch");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("calibrate_threshold: tau must be in (0, 1]");
    std::vector<double> pos;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw DataError("calibrate_threshold: non-finite score");
        if (unsafe[i]) pos.push_back(scores[i]);
    }
    if (pos.empty()) throw DataError("cannot calibrate recall: no unsafe rows in the calibration set");
    std::sort(pos.begin(), pos.end(), std::greater<>());
    const auto n = static_cast<double>(pos.size());
    std::size_t k = 1;
    while (static_cast<double>(k) / n < tau) ++k;
    // The k-th largest unsafe score is the largest threshold still flagging k
    // unsafe rows; any higher candidate flags at most k - 1.
    return pos[k - 1];
}

gbdt::MatrixView view(const FeatureMatrix& m) { return {std::span<const double>(m.values), m.dim}; }

namespace {

void require_classes(std::span<const TaskLabel> labels, std::size_t rows) {
    if (labels.size() != rows) throw DataError("label count does not match feature rows");
    std::array<bool, 3> present{};
    for (auto l : labels) present[task_index(l)] = true;
    for (TaskLabel t : kAllTasks)
        if (!present[task_index(t)])
            throw DataError("training set has no rows of class " + std::string(to_string(t)));
}

std::vector<std::uint8_t> unsafe_labels(std::span<const TaskLabel> labels) {
    std::vector<std::uint8_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = stage1_of(labels[i]) == SafetyLabel::Unsafe;
    return y;
}

void check_layout(const FeatureMatrix& x, std::uint32_t layout_version, std::size_t n_layers) {
    if (x.layout_version != layout_version || x.n_layers != n_layers)
        throw DataError("feature layout does not match the model layout");
}

}  // namespace

EcrtHeads train_ecrt(const FeatureMatrix& x, std::span<const TaskLabel> labels, const gbdt::Config& cfg) {
    require_classes(labels, x.rows());
    EcrtHeads heads;

    const auto y1 = unsafe_labels(labels);
    heads.stage1 = gbdt::fit(view(x), y1, class_balance_weights(y1), cfg);

    std::vector<double> sub;
    std::vector<std::uint8_t> y2;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == TaskLabel::EAlign) continue;
        const auto r = x.row(i);
        sub.insert(sub.end(), r.begin(), r.end());
        y2.push_back(labels[i] == TaskLabel::EGap);
    }
    heads.stage2_rows = y2.size();
    heads.stage2 = gbdt::fit({sub, x.dim}, y2, class_balance_weights(y2), cfg);
    return heads;
}

TriageModel calibrate_ecrt(EcrtHeads heads, const FeatureMatrix& val, std::span<const TaskLabel> val_labels,
                           double tau, double theta2) {
    if (val_labels.size() != val.rows()) throw DataError("label count does not match feature rows");
    if (!(theta2 >= 0.0 && theta2 <= 1.0)) throw ConfigError("theta2 must be in [0, 1]");
    TriageModel m;
    m.stage1 = std::move(heads.stage1);
    m.stage2 = std::move(heads.stage2);
    m.layout_version = val.layout_version;
    m.n_layers = val.n_layers;
    m.tau = tau;
    m.theta2 = theta2;
    const auto scores = gbdt::predict_proba(m.stage1, view(val));
    m.theta1 = calibrate_threshold(scores, unsafe_labels(val_labels), tau);
    return m;
}

TriageOutput compose(double p_unsafe, double p_gap_given_unsafe, double theta1, double theta2) {
    TriageOutput o;
    o.p_unsafe = p_unsafe;
    o.p_gap_given_unsafe = p_gap_given_unsafe;
    o.p_align = 1.0 - p_unsafe;
    o.p_contradict = p_unsafe * (1.0 - p_gap_given_unsafe);
    o.p_gap = p_unsafe * p_gap_given_unsafe;
    o.flagged = p_unsafe >= theta1;
    if (!o.flagged)
        o.predicted_label = TaskLabel::EAlign;
    else
        o.predicted_label = p_gap_given_unsafe >= theta2 ? TaskLabel::EGap : TaskLabel::EConflict;
    return o;
}

TriageOutput triage_row(const TriageModel& model, std::span<const double> row) {
    if (row.size() != model.stage1.n_features) throw DataError("feature vector dimension does not match model");
    const double p_unsafe = gbdt::sigmoid(model.stage1.margin(row));
    const double p_gap = gbdt::sigmoid(model.stage2.margin(row));
    return compose(p_unsafe, p_gap, model.theta1, model.theta2);
}

TriageOutput triage(const TriageModel& model, const FeatureVector& fv) {
    if (fv.layout_version != model.layout_version || fv.n_layers != model.n_layers)
        throw DataError("feature layout does not match the model layout");
    return triage_row(model, fv.values);
}

std::vector<TriageOutput> triage_batch(const TriageModel& model, const FeatureMatrix& x) {
    check_layout(x, model.layout_version, model.n_layers);
    std::vector<TriageOutput> out;
    out.reserve(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out.push_back(triage_row(model, x.row(i)));
    return out;
}

SingleStageModel train_single_stage(const FeatureMatrix& x, std::span<const TaskLabel> labels,
                                    const gbdt::Config& cfg) {
    require_classes(labels, x.rows());
    SingleStageModel m;
    m.layout_version = x.layout_version;
    m.n_layers = x.n_layers;
    for (TaskLabel c : kAllTasks) {
        std::vector<std::uint8_t> y(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == c;
        m.heads[task_index(c)] = gbdt::fit(view(x), y, class_balance_weights(y), cfg);
    }
    return m;
}

std::array<double, 3> single_stage_scores(const SingleStageModel& model, std::span<const double> row) {
    std::array<double, 3> p{};
    double sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        p[c] = gbdt::sigmoid(model.heads[c].margin(row));
        sum += p[c];
    }
    for (auto& v : p) v /= sum;
    return p;
}

double single_stage_unsafe_score(const std::array<double, 3>& s) noexcept {
    return 1.0 - s[task_index(TaskLabel::EAlign)];
}

TaskLabel single_stage_argmax(const std::array<double, 3>& s) noexcept {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 3; ++c)
        if (s[c] > s[best]) best = c;
    return static_cast<TaskLabel>(best);
}

TaskLabel single_stage_decide(const SingleStageModel& model, const std::array<double, 3>& s) noexcept {
    if (single_stage_unsafe_score(s) < model.theta1) return TaskLabel::EAlign;
    return s[task_index(TaskLabel::EGap)] >= s[task_index(TaskLabel::EConflict)] ? TaskLabel::EGap
                                                                                 : TaskLabel::EConflict;
}

void calibrate_single_stage(SingleStageModel& model, const FeatureMatrix& val,
                            std::span<const TaskLabel> val_labels, double tau) {
    check_layout(val, model.layout_version, model.n_layers);
    if (val_labels.size() != val.rows()) throw DataError("label count does not match feature rows");
    std::vector<double> scores(val.rows());
    for (std::size_t i = 0; i < val.rows(); ++i)
        scores[i] = single_stage_unsafe_score(single_stage_scores(model, val.row(i)));
    model.tau = tau;
    model.theta1 = calibrate_threshold(scores, unsafe_labels(val_labels), tau);
}

namespace {

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed " + path.string() + ": " + e.what());
    }
}

void write_layout(std::uint32_t layout_version, std::size_t n_layers, const std::filesystem::path& dir) {
    nlohmann::ordered_json j;
    j["layout_version"] = layout_version;
    j["n_layers"] = n_layers;
    j["dim"] = feature_dim(n_layers);
    j["feature_names"] = feature_names(n_layers);
    write_json(j, dir / "layout.json");
}

std::pair<std::uint32_t, std::size_t> read_layout(const std::filesystem::path& dir) {
    const auto j = read_json(dir / "layout.json");
    try {
        return {j.at("layout_version").get<std::uint32_t>(), j.at("n_layers").get<std::size_t>()};
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed layout.json: " + std::string(e.what()));
    }
}

}  // namespace

void save_triage_model(const TriageModel& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    gbdt::save_model(m.stage1, dir / "stage1.json");
    gbdt::save_model(m.stage2, dir / "stage2.json");
    nlohmann::ordered_json cal;
    cal["theta1"] = m.theta1;
    cal["theta2"] = m.theta2;
    cal["tau"] = m.tau;
    cal["val_manifest_hash"] = m.val_manifest_hash;
    cal["seed"] = m.seed;
    write_json(cal, dir / "calibration.json");
    write_layout(m.layout_version, m.n_layers, dir);
}

TriageModel load_triage_model(const std::filesystem::path& dir) {
    TriageModel m;
    m.stage1 = gbdt::load_model(dir / "stage1.json");
    m.stage2 = gbdt::load_model(dir / "stage2.json");
    const auto cal = read_json(dir / "calibration.json");
    try {
        m.theta1 = cal.at("theta1").get<double>();
        m.theta2 = cal.at("theta2").get<double>();
        m.tau = cal.at("tau").get<double>();
        m.val_manifest_hash = cal.at("val_manifest_hash").get<std::string>();
        m.seed = cal.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed calibration.json: " + std::string(e.what()));
    }
    std::tie(m.layout_version, m.n_layers) = read_layout(dir);
    if (!(m.theta1 >= 0.0 && m.theta1 <= 1.0) || !(m.theta2 >= 0.0 && m.theta2 <= 1.0) ||
        !(m.tau > 0.0 && m.tau <= 1.0))
        throw ValidationError("calibration.json: thresholds out of range");
    return m;
}

void save_single_stage_model(const SingleStageModel& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (TaskLabel c : kAllTasks)
        gbdt::save_model(m.heads[task_index(c)], dir / ("head_" + std::string(to_string(c)) + ".json"));
    nlohmann::ordered_json cal;
    cal["theta1"] = m.theta1;
    cal["tau"] = m.tau;
    cal["val_manifest_hash"] = m.val_manifest_hash;
    cal["seed"] = m.seed;
    write_json(cal, dir / "calibration.json");
    write_layout(m.layout_version, m.n_layers, dir);
}

SingleStageModel load_single_stage_model(const std::filesystem::path& dir) {
    SingleStageModel m;
    for (TaskLabel c : kAllTasks)
        m.heads[task_index(c)] = gbdt::load_model(dir / ("head_" + std::string(to_string(c)) + ".json"));
    const auto cal = read_json(dir / "calibration.json");
    try {
        m.theta1 = cal.at("theta1").get<double>();
        m.tau = cal.at("tau").get<double>();
        m.val_manifest_hash = cal.at("val_manifest_hash").get<std::string>();
        m.seed = cal.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed calibration.json: " + std::string(e.what()));
    }
    std::tie(m.layout_version, m.n_layers) = read_layout(dir);
    return m;
}

}  // namespace ecrt
