#include "ecrt/gbdt.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ecrt/error.hpp"

namespace ecrt::gbdt {

void Config::validate() const {
    if (n_estimators < 1) throw ConfigError("gbdt: n_estimators must be >= 1");
    if (max_depth < 1) throw ConfigError("gbdt: max_depth must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0))
        throw ConfigError("gbdt: learning_rate must be in (0, 1]");
    if (min_samples_leaf < 1) throw ConfigError("gbdt: min_samples_leaf must be >= 1");
    if (!(l2_leaf_reg >= 0.0) || !std::isfinite(l2_leaf_reg))
        throw ConfigError("gbdt: l2_leaf_reg must be >= 0");
}

double Tree::leaf_value(std::span<const double> row) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
        const Node& n = nodes[i];
        i = static_cast<std::size_t>(row[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
    }
    return nodes[i].value;
}

std::size_t Tree::depth() const {
    std::vector<std::size_t> d(nodes.size(), 0);
    std::size_t best = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        best = std::max(best, d[i]);
        if (!nodes[i].is_leaf()) {
            d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
            d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
        }
    }
    return best;
}

double Model::margin(std::span<const double> row) const {
    double m = base_score;
    for (const auto& t : trees) m += config.learning_rate * t.leaf_value(row);
    return m;
}

void Model::validate() const {
    if (!std::isfinite(base_score)) throw ValidationError("gbdt model: non-finite base score");
    if (trees.size() != config.n_estimators)
        throw ValidationError("gbdt model: tree count does not match n_estimators");
    for (const auto& t : trees) {
        if (t.nodes.empty()) throw ValidationError("gbdt model: empty tree");
        for (std::size_t i = 0; i < t.nodes.size(); ++i) {
            const Node& n = t.nodes[i];
            if (n.is_leaf()) {
                if (!std::isfinite(n.value)) throw ValidationError("gbdt model: non-finite leaf");
                continue;
            }
            if (static_cast<std::size_t>(n.feature) >= n_features)
                throw ValidationError("gbdt model: split feature index out of range");
            const auto sz = static_cast<int>(t.nodes.size());
            if (n.left <= static_cast<int>(i) || n.right <= static_cast<int>(i) || n.left >= sz || n.right >= sz)
                throw ValidationError("gbdt model: malformed child links");
        }
    }
}

double sigmoid(double m) noexcept {
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    const double hi = std::nextafter(1.0, 0.0);
    double p;
    if (m >= 0.0) {
        p = 1.0 / (1.0 + std::exp(-m));
    } else {
        const double e = std::exp(m);
        p = e / (1.0 + e);
    }
    return std::clamp(p, lo, hi);
}

double split_gain(double gl, double hl, double gr, double hr, double lambda) noexcept {
    auto score = [lambda](double g, double h) {
        const double denom = h + lambda;
        return denom > 0.0 ? g * g / denom : 0.0;
    };
    return 0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr));
}

double leaf_weight(double g, double h, double lambda) noexcept {
    const double denom = h + lambda;
    return denom > 0.0 ? -g / denom : 0.0;
}

namespace {

// softplus(m) - y*m, the logistic loss for margin m.
double logistic_loss(double m, double y) {
    const double softplus = std::max(m, 0.0) + std::log1p(std::exp(-std::abs(m)));
    return softplus - y * m;
}

class TreeBuilder {
public:
    TreeBuilder(const std::vector<double>& x, std::size_t n_features,
                const std::vector<std::vector<std::uint32_t>>& sorted, const std::vector<double>& grad,
                const std::vector<double>& hess, const Config& cfg)
        : x_(x), d_(n_features), sorted_(sorted), grad_(grad), hess_(hess), cfg_(cfg),
          in_node_(grad.size(), 0) {}

    Tree build() {
        std::vector<std::uint32_t> all(grad_.size());
        std::iota(all.begin(), all.end(), 0u);
        tree_.nodes.clear();
        grow(all, 0);
        return std::move(tree_);
    }

private:
    struct Split {
        bool found = false;
        std::size_t feature = 0;
        double threshold = 0.0;
        double gain = 0.0;
    };

    double value(std::uint32_t row, std::size_t f) const { return x_[row * d_ + f]; }

    // Rows are kept in ascending index order, so node sums are order-stable.
    int grow(const std::vector<std::uint32_t>& rows, std::size_t depth) {
        double g = 0.0, h = 0.0;
        for (auto r : rows) {
            g += grad_[r];
            h += hess_[r];
        }
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();

        Split best;
        if (depth < cfg_.max_depth && rows.size() >= 2 * cfg_.min_samples_leaf) best = find_split(rows, g, h);
        if (!best.found) {
            tree_.nodes[static_cast<std::size_t>(id)].value = leaf_weight(g, h, cfg_.l2_leaf_reg);
            return id;
        }

        std::vector<std::uint32_t> left, right;
        for (auto r : rows) (value(r, best.feature) < best.threshold ? left : right).push_back(r);
        const int l = grow(left, depth + 1);
        const int rr = grow(right, depth + 1);
        Node& n = tree_.nodes[static_cast<std::size_t>(id)];
        n.feature = static_cast<int>(best.feature);
        n.threshold = best.threshold;
        n.left = l;
        n.right = rr;
        return id;
    }

    // Highest gain wins; near-equal gains (relative 1e-12) keep the earlier
    // candidate, i.e. the lower feature index, then the lower threshold.
    Split find_split(const std::vector<std::uint32_t>& rows, double g_total, double h_total) {
        for (auto r : rows) in_node_[r] = 1;
        Split best;
        const std::size_t n = rows.size();
        std::vector<std::uint32_t> ordered;
        ordered.reserve(n);
        for (std::size_t f = 0; f < d_; ++f) {
            ordered.clear();
            for (auto r : sorted_[f])
                if (in_node_[r]) ordered.push_back(r);
            double gl = 0.0, hl = 0.0;
            for (std::size_t i = 0; i + 1 < n; ++i) {
                gl += grad_[ordered[i]];
                hl += hess_[ordered[i]];
                const double a = value(ordered[i], f);
                const double b = value(ordered[i + 1], f);
                if (!(a < b)) continue;
                const std::size_t n_left = i + 1;
                if (n_left < cfg_.min_samples_leaf || n - n_left < cfg_.min_samples_leaf) continue;
                const double gain = split_gain(gl, hl, g_total - gl, h_total - hl, cfg_.l2_leaf_reg);
                if (!(gain > 0.0)) continue;
                if (best.found && !(gain > best.gain + 1e-12 * best.gain)) continue;
                double thr = a + (b - a) * 0.5;
                if (!(thr > a)) thr = b;
                best = {true, f, thr, gain};
            }
        }
        for (auto r : rows) in_node_[r] = 0;
        return best;
    }

    const std::vector<double>& x_;
    std::size_t d_;
    const std::vector<std::vector<std::uint32_t>>& sorted_;
    const std::vector<double>& grad_;
    const std::vector<double>& hess_;
    const Config& cfg_;
    std::vector<std::uint8_t> in_node_;
    Tree tree_;
};

}  // namespace

Model fit(MatrixView x, std::span<const std::uint8_t> y, std::span<const double> w, const Config& cfg,
          FitDiagnostics* diagnostics) {
    cfg.validate();
    const std::size_t d = x.n_features;
    if (d == 0) throw DataError("gbdt fit: feature dimension must be >= 1");
    if (x.data.size() % d != 0) throw DataError("gbdt fit: feature matrix size is not a multiple of D");
    const std::size_t n = x.rows();
    if (n < 2) throw DataError("gbdt fit: need at least 2 rows");
    if (y.size() != n || w.size() != n) throw DataError("gbdt fit: label/weight length mismatch");
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (y[i] > 1) throw DataError("gbdt fit: labels must be 0 or 1");
        n_pos += y[i];
        if (!(w[i] > 0.0) || !std::isfinite(w[i])) throw DataError("gbdt fit: weights must be positive");
    }
    if (n_pos == 0 || n_pos == n) throw DataError("gbdt fit: degenerate labels (single class)");
    for (double v : x.data)
        if (!std::isfinite(v)) throw DataError("gbdt fit: non-finite feature value");

    // Canonical row order: lexicographic on (features, label, weight).
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    std::sort(perm.begin(), perm.end(), [&](std::uint32_t a, std::uint32_t b) {
        const auto ra = x.row(a), rb = x.row(b);
        for (std::size_t f = 0; f < d; ++f)
            if (ra[f] != rb[f]) return ra[f] < rb[f];
        if (y[a] != y[b]) return y[a] < y[b];
        return w[a] < w[b];
    });
    std::vector<double> xs(n * d), ys(n), ws(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = x.row(perm[i]);
        std::copy(r.begin(), r.end(), xs.begin() + static_cast<std::ptrdiff_t>(i * d));
        ys[i] = y[perm[i]];
        ws[i] = w[perm[i]];
    }

    std::vector<std::vector<std::uint32_t>> sorted(d, std::vector<std::uint32_t>(n));
    for (std::size_t f = 0; f < d; ++f) {
        auto& s = sorted[f];
        std::iota(s.begin(), s.end(), 0u);
        std::stable_sort(s.begin(), s.end(),
                         [&](std::uint32_t a, std::uint32_t b) { return xs[a * d + f] < xs[b * d + f]; });
    }

    double w_pos = 0.0, w_all = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w_all += ws[i];
        if (ys[i] > 0.5) w_pos += ws[i];
    }
    Model model;
    model.config = cfg;
    model.n_features = d;
    model.base_score = std::log(w_pos / (w_all - w_pos));

    std::vector<double> margin(n, model.base_score), grad(n), hess(n);
    auto weighted_loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += ws[i] * logistic_loss(margin[i], ys[i]);
        return s / w_all;
    };
    double prev_loss = weighted_loss();
    if (diagnostics) diagnostics->train_loss.assign(1, prev_loss);

    model.trees.reserve(cfg.n_estimators);
    for (std::size_t round = 0; round < cfg.n_estimators; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = sigmoid(margin[i]);
            grad[i] = ws[i] * (p - ys[i]);
            hess[i] = ws[i] * p * (1.0 - p);
        }
        TreeBuilder builder(xs, d, sorted, grad, hess, cfg);
        Tree tree = builder.build();
        for (std::size_t i = 0; i < n; ++i)
            margin[i] += cfg.learning_rate * tree.leaf_value({xs.data() + i * d, d});
        model.trees.push_back(std::move(tree));

        const double loss = weighted_loss();
        assert(loss <= prev_loss + 1e-12 * std::max(1.0, prev_loss) && "training loss increased");
        prev_loss = loss;
        if (diagnostics) diagnostics->train_loss.push_back(loss);
    }
    return model;
}

std::vector<double> predict_proba(const Model& model, MatrixView x) {
    if (x.n_features != model.n_features)
        throw DataError("gbdt predict: feature dimension " + std::to_string(x.n_features) +
                        " does not match model dimension " + std::to_string(model.n_features));
    const std::size_t n = x.rows();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid(model.margin(x.row(i)));
    return out;
}

namespace {

nlohmann::ordered_json node_to_json(const Tree& t, std::size_t i) {
    const Node& n = t.nodes[i];
    nlohmann::ordered_json j;
    if (n.is_leaf()) {
        j["leaf"] = n.value;
        return j;
    }
    j["feature"] = n.feature;
    j["threshold"] = n.threshold;
    j["left"] = node_to_json(t, static_cast<std::size_t>(n.left));
    j["right"] = node_to_json(t, static_cast<std::size_t>(n.right));
    return j;
}

int node_from_json(const nlohmann::json& j, Tree& t) {
    const int id = static_cast<int>(t.nodes.size());
    t.nodes.emplace_back();
    if (j.contains("leaf")) {
        t.nodes.back().value = j.at("leaf").get<double>();
        return id;
    }
    const int feature = j.at("feature").get<int>();
    if (feature < 0) throw ValidationError("gbdt model: negative split feature");
    const double threshold = j.at("threshold").get<double>();
    const int l = node_from_json(j.at("left"), t);
    const int r = node_from_json(j.at("right"), t);
    Node& n = t.nodes[static_cast<std::size_t>(id)];
    n.feature = feature;
    n.threshold = threshold;
    n.left = l;
    n.right = r;
    return id;
}

}  // namespace

std::string to_json(const Model& m) {
    nlohmann::ordered_json j;
    j["format"] = "ecrt-gbdt";
    j["version"] = 1;
    j["n_features"] = m.n_features;
    j["base_score"] = m.base_score;
    j["config"] = {{"n_estimators", m.config.n_estimators},
                   {"max_depth", m.config.max_depth},
                   {"learning_rate", m.config.learning_rate},
                   {"min_samples_leaf", m.config.min_samples_leaf},
                   {"l2_leaf_reg", m.config.l2_leaf_reg},
                   {"seed", m.config.seed}};
    auto trees = nlohmann::ordered_json::array();
    for (const auto& t : m.trees) trees.push_back(node_to_json(t, 0));
    j["trees"] = std::move(trees);
    return j.dump(1);
}

Model from_json(std::string_view text) {
    Model m;
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.at("format").get<std::string>() != "ecrt-gbdt") throw ValidationError("not an ecrt-gbdt model");
        if (j.at("version").get<int>() != 1) throw ValidationError("unsupported gbdt model version");
        m.n_features = j.at("n_features").get<std::size_t>();
        m.base_score = j.at("base_score").get<double>();
        const auto& c = j.at("config");
        m.config.n_estimators = c.at("n_estimators").get<std::size_t>();
        m.config.max_depth = c.at("max_depth").get<std::size_t>();
        m.config.learning_rate = c.at("learning_rate").get<double>();
        m.config.min_samples_leaf = c.at("min_samples_leaf").get<std::size_t>();
        m.config.l2_leaf_reg = c.at("l2_leaf_reg").get<double>();
        m.config.seed = c.at("seed").get<std::uint64_t>();
        for (const auto& tj : j.at("trees")) {
            Tree t;
            node_from_json(tj, t);
            m.trees.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed gbdt model: ") + e.what());
    }
    m.validate();
    return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << to_json(model) << '\n';
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open model " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

}  // namespace ecrt::gbdt
