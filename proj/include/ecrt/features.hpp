#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ecrt/trace.hpp"

namespace ecrt {

inline constexpr std::uint32_t kLayoutVersion = 1;
inline constexpr std::size_t kDiscrepancyDims = 9;
inline constexpr double kDeviationEpsilon = 1e-8;

constexpr std::size_t feature_dim(std::size_t n_layers) noexcept {
    return kDiscrepancyDims + 3 * n_layers;
}

// Pooled feature vector, layout version 1:
//   [0, 9)            discrepancy: {l2, linf, logprob shift} x {mean, std, max}
//   [9, 9 + 2L)       deviation: per layer {mean, max} of relative hidden shift
//   [9 + 2L, 9 + 3L)  incoherence: per layer mean KL
struct FeatureVector {
    std::uint32_t layout_version = kLayoutVersion;
    std::size_t n_layers = 0;
    std::vector<double> values;
};

// Token-axis pooling. Values are sorted before summation so the result is
// bit-identical under any permutation of the tokens. std is population std.
struct PooledStats {
    double mean = 0.0;
    double std = 0.0;
    double max = 0.0;
};
PooledStats pool_tokens(std::vector<double> values);

std::array<double, kDiscrepancyDims> discrepancy_features(const PairedTrace& trace);
std::vector<double> deviation_features(const PairedTrace& trace);
std::vector<double> incoherence_features(const PairedTrace& trace);
FeatureVector pool(const PairedTrace& trace);

std::vector<std::string> feature_names(std::size_t n_layers);

// Row-major feature matrix plus the record id of each row.
struct FeatureMatrix {
    std::uint32_t layout_version = kLayoutVersion;
    std::size_t n_layers = 0;
    std::size_t dim = 0;
    std::vector<std::string> record_ids;
    std::vector<double> values;  // rows x dim

    std::size_t rows() const noexcept { return record_ids.size(); }
    std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
    void append(const std::string& record_id, const FeatureVector& fv);
    // Rows for the given ids, in that order. Throws DataError for unknown ids.
    FeatureMatrix select(const std::vector<std::string>& ids) const;
};

// Binary: u32 layout_version, u32 n_layers, u32 rows, u32 dim, then row-major
// little-endian f32. The JSON index beside it maps row -> record id.
// Values are stored as f32, so callers that need train/eval consistency
// should always go through the persisted matrix.
void save_feature_matrix(const FeatureMatrix& m, const std::filesystem::path& bin_path,
                         const std::filesystem::path& index_path);
FeatureMatrix load_feature_matrix(const std::filesystem::path& bin_path,
                                  const std::filesystem::path& index_path);

}  // namespace ecrt
