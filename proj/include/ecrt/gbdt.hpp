#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ecrt::gbdt {

struct Config {
    std::size_t n_estimators = 160;
    std::size_t max_depth = 4;
    double learning_rate = 0.1;
    std::size_t min_samples_leaf = 5;
    double l2_leaf_reg = 1.0;  // lambda
    std::uint64_t seed = 0;    // reserved; the learner has no stochastic step

    void validate() const;
    friend bool operator==(const Config&, const Config&) = default;
};

struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf value (before learning-rate shrinkage)

    bool is_leaf() const noexcept { return feature < 0; }
    friend bool operator==(const Node&, const Node&) = default;
};

// Rows with x[feature] < threshold go left.
struct Tree {
    std::vector<Node> nodes;  // nodes[0] is the root

    double leaf_value(std::span<const double> row) const;
    std::size_t depth() const;
    friend bool operator==(const Tree&, const Tree&) = default;
};

struct Model {
    Config config;
    std::size_t n_features = 0;
    double base_score = 0.0;  // log-odds of the weighted positive rate
    std::vector<Tree> trees;

    double margin(std::span<const double> row) const;
    // Checks structural invariants; throws ValidationError.
    void validate() const;
    friend bool operator==(const Model&, const Model&) = default;
};

// Row-major N x D view over caller-owned data.
struct MatrixView {
    std::span<const double> data;
    std::size_t n_features = 0;

    std::size_t rows() const noexcept { return n_features == 0 ? 0 : data.size() / n_features; }
    std::span<const double> row(std::size_t i) const { return data.subspan(i * n_features, n_features); }
};

struct FitDiagnostics {
    // Weighted mean log-loss on the training rows: entry 0 at the base score,
    // entry r after round r.
    std::vector<double> train_loss;
};

// Second-order boosting with logistic loss, exact greedy split search and
// per-sample weights. The result depends only on the multiset of
// (row, label, weight) triples, not on their order.
Model fit(MatrixView x, std::span<const std::uint8_t> y, std::span<const double> w, const Config& cfg,
          FitDiagnostics* diagnostics = nullptr);

double sigmoid(double margin) noexcept;  // clamped to the open interval (0, 1)
std::vector<double> predict_proba(const Model& model, MatrixView x);

// Split gain and leaf weight under L2 leaf regularization.
double split_gain(double g_left, double h_left, double g_right, double h_right, double lambda) noexcept;
double leaf_weight(double g, double h, double lambda) noexcept;

std::string to_json(const Model& model);
Model from_json(std::string_view text);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace ecrt::gbdt
