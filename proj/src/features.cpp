#include "ecrt/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "ecrt/error.hpp"

namespace ecrt {

namespace {

void require_tokens(const PairedTrace& tr) {
    if (tr.n_tokens == 0) throw DataError("trace '" + tr.record_id + "': empty trace");
    if (tr.tier != TraceTier::Reduced)
        throw DataError("trace '" + tr.record_id + "': features need a reduced trace");
}

}  // namespace

PooledStats pool_tokens(std::vector<double> values) {
    if (values.empty()) throw DataError("empty trace");
    std::sort(values.begin(), values.end());
    const auto n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / n), values.back()};
}

std::array<double, kDiscrepancyDims> discrepancy_features(const PairedTrace& tr) {
    require_tokens(tr);
    const std::size_t T = tr.n_tokens, K = tr.support_size;
    std::vector<double> l2(T), linf(T), shift(T);
    for (std::size_t t = 0; t < T; ++t) {
        double sq = 0.0, mx = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double dz = static_cast<double>(tr.final_logits_ctx[tr.tk(t, k)]) -
                              static_cast<double>(tr.final_logits_noctx[tr.tk(t, k)]);
            sq += dz * dz;
            mx = std::max(mx, std::abs(dz));
        }
        l2[t] = std::sqrt(sq);
        linf[t] = mx;
        shift[t] = static_cast<double>(tr.logprob_ctx[t]) - static_cast<double>(tr.logprob_noctx[t]);
    }
    std::array<double, kDiscrepancyDims> out{};
    std::size_t i = 0;
    for (auto* channel : {&l2, &linf, &shift}) {
        const auto s = pool_tokens(std::move(*channel));
        out[i++] = s.mean;
        out[i++] = s.std;
        out[i++] = s.max;
    }
    return out;
}

std::vector<double> deviation_features(const PairedTrace& tr) {
    require_tokens(tr);
    const std::size_t T = tr.n_tokens, L = tr.n_layers;
    std::vector<double> out;
    out.reserve(2 * L);
    std::vector<double> ratio(T);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t t = 0; t < T; ++t)
            ratio[t] = static_cast<double>(tr.delta_hidden_norm[tr.tl(t, l)]) /
                       (static_cast<double>(tr.ctx_hidden_norm[tr.tl(t, l)]) + kDeviationEpsilon);
        const auto s = pool_tokens(ratio);
        out.push_back(s.mean);
        out.push_back(s.max);
    }
    return out;
}

std::vector<double> incoherence_features(const PairedTrace& tr) {
    require_tokens(tr);
    const std::size_t T = tr.n_tokens, L = tr.n_layers;
    std::vector<double> out;
    out.reserve(L);
    std::vector<double> kl(T);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t t = 0; t < T; ++t) kl[t] = tr.kl_layer[tr.tl(t, l)];
        out.push_back(pool_tokens(kl).mean);
    }
    return out;
}

FeatureVector pool(const PairedTrace& tr) {
    validate(tr);
    FeatureVector fv;
    fv.n_layers = tr.n_layers;
    fv.values.reserve(feature_dim(tr.n_layers));
    const auto disc = discrepancy_features(tr);
    fv.values.assign(disc.begin(), disc.end());
    const auto dev = deviation_features(tr);
    fv.values.insert(fv.values.end(), dev.begin(), dev.end());
    const auto inc = incoherence_features(tr);
    fv.values.insert(fv.values.end(), inc.begin(), inc.end());
    for (double v : fv.values)
        if (!std::isfinite(v)) throw DataError("trace '" + tr.record_id + "': non-finite feature");
    return fv;
}

std::vector<std::string> feature_names(std::size_t n_layers) {
    std::vector<std::string> names;
    for (const char* ch : {"dz_l2", "dz_linf", "logprob_shift"})
        for (const char* st : {"mean", "std", "max"}) names.push_back(std::string(ch) + "_" + st);
    for (std::size_t l = 0; l < n_layers; ++l) {
        names.push_back("dev_l" + std::to_string(l) + "_mean");
        names.push_back("dev_l" + std::to_string(l) + "_max");
    }
    for (std::size_t l = 0; l < n_layers; ++l) names.push_back("kl_l" + std::to_string(l) + "_mean");
    return names;
}

void FeatureMatrix::append(const std::string& record_id, const FeatureVector& fv) {
    if (record_ids.empty() && values.empty()) {
        layout_version = fv.layout_version;
        n_layers = fv.n_layers;
        dim = fv.values.size();
    }
    if (fv.layout_version != layout_version || fv.n_layers != n_layers || fv.values.size() != dim)
        throw DataError("feature vector for '" + record_id + "' does not match the matrix layout");
    record_ids.push_back(record_id);
    values.insert(values.end(), fv.values.begin(), fv.values.end());
}

FeatureMatrix FeatureMatrix::select(const std::vector<std::string>& ids) const {
    std::unordered_map<std::string, std::size_t> row_of;
    row_of.reserve(record_ids.size());
    for (std::size_t i = 0; i < record_ids.size(); ++i) row_of.emplace(record_ids[i], i);
    FeatureMatrix out;
    out.layout_version = layout_version;
    out.n_layers = n_layers;
    out.dim = dim;
    out.values.reserve(ids.size() * dim);
    for (const auto& id : ids) {
        auto it = row_of.find(id);
        if (it == row_of.end()) throw DataError("no feature row for record '" + id + "'");
        out.record_ids.push_back(id);
        const auto r = row(it->second);
        out.values.insert(out.values.end(), r.begin(), r.end());
    }
    return out;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                       static_cast<char>(v >> 24)};
    out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated feature file " + path);
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
           (std::uint32_t{b[3]} << 24);
}

}  // namespace

void save_feature_matrix(const FeatureMatrix& m, const std::filesystem::path& bin_path,
                         const std::filesystem::path& index_path) {
    std::ofstream out(bin_path, std::ios::binary);
    if (!out) throw DataError("cannot write " + bin_path.string());
    put_u32(out, m.layout_version);
    put_u32(out, static_cast<std::uint32_t>(m.n_layers));
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.dim));
    for (double v : m.values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));

    nlohmann::ordered_json idx;
    idx["layout_version"] = m.layout_version;
    idx["n_layers"] = m.n_layers;
    idx["dim"] = m.dim;
    idx["feature_names"] = feature_names(m.n_layers);
    idx["rows"] = m.record_ids;
    std::ofstream iout(index_path, std::ios::binary);
    if (!iout) throw DataError("cannot write " + index_path.string());
    iout << idx.dump(1) << '\n';
}

FeatureMatrix load_feature_matrix(const std::filesystem::path& bin_path,
                                  const std::filesystem::path& index_path) {
    std::ifstream in(bin_path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open feature file " + bin_path.string());
    std::ifstream iin(index_path, std::ios::binary);
    if (!iin) throw MissingArtifactError("cannot open feature index " + index_path.string());

    FeatureMatrix m;
    const std::string p = bin_path.string();
    m.layout_version = get_u32(in, p);
    m.n_layers = get_u32(in, p);
    const std::size_t rows = get_u32(in, p);
    m.dim = get_u32(in, p);
    if (m.layout_version != kLayoutVersion)
        throw DataError("unsupported feature layout version " + std::to_string(m.layout_version));
    if (m.dim != feature_dim(m.n_layers)) throw DataError("feature dimension does not match layout in " + p);
    m.values.resize(rows * m.dim);
    for (auto& v : m.values) v = static_cast<double>(std::bit_cast<float>(get_u32(in, p)));

    try {
        const auto idx = nlohmann::json::parse(iin);
        m.record_ids = idx.at("rows").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed feature index " + index_path.string() + ": " + e.what());
    }
    if (m.record_ids.size() != rows) throw DataError("feature index row count does not match " + p);
    return m;
}

}  // namespace ecrt
