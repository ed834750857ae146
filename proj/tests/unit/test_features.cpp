#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "ecrt/features.hpp"
#include "oracles.hpp"

using namespace ecrt;
namespace fs = std::filesystem;

namespace {

// T tokens, K = 2, L layers, all channels zero.
PairedTrace blank(std::size_t T, std::size_t L, std::size_t K = 2) {
    PairedTrace tr;
    tr.record_id = "blank";
    tr.n_tokens = T;
    tr.n_layers = L;
    tr.support_size = K;
    tr.tokens.assign(T, 1);
    tr.logprob_ctx.assign(T, 0.0f);
    tr.logprob_noctx.assign(T, 0.0f);
    tr.final_logits_ctx.assign(T * K, 0.0f);
    tr.final_logits_noctx.assign(T * K, 0.0f);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < K; ++k) tr.restricted_index_sets.push_back(static_cast<std::int32_t>(k));
    tr.delta_hidden_norm.assign(T * L, 0.0f);
    tr.ctx_hidden_norm.assign(T * L, 1.0f);
    tr.kl_layer.assign(T * L, 0.0f);
    return tr;
}

void permute_tokens(PairedTrace& tr, const std::vector<std::size_t>& perm) {
    const auto src = tr;
    const std::size_t K = tr.support_size, L = tr.n_layers;
    for (std::size_t t = 0; t < tr.n_tokens; ++t) {
        const std::size_t s = perm[t];
        tr.tokens[t] = src.tokens[s];
        tr.logprob_ctx[t] = src.logprob_ctx[s];
        tr.logprob_noctx[t] = src.logprob_noctx[s];
        for (std::size_t k = 0; k < K; ++k) {
            tr.final_logits_ctx[t * K + k] = src.final_logits_ctx[s * K + k];
            tr.final_logits_noctx[t * K + k] = src.final_logits_noctx[s * K + k];
            tr.restricted_index_sets[t * K + k] = src.restricted_index_sets[s * K + k];
        }
        for (std::size_t l = 0; l < L; ++l) {
            tr.delta_hidden_norm[t * L + l] = src.delta_hidden_norm[s * L + l];
            tr.ctx_hidden_norm[t * L + l] = src.ctx_hidden_norm[s * L + l];
            tr.kl_layer[t * L + l] = src.kl_layer[s * L + l];
        }
    }
}

}  // namespace

TEST_CASE("discrepancy on a constant 3-4-5 shift") {
    auto tr = blank(2, 2);
    for (std::size_t t = 0; t < 2; ++t) {
        tr.final_logits_ctx[t * 2] = 3.0f;
        tr.final_logits_ctx[t * 2 + 1] = -4.0f;
        tr.logprob_ctx[t] = -0.5f;
        tr.logprob_noctx[t] = -1.0f;
    }
    const auto d = discrepancy_features(tr);
    const std::array<double, 9> want = {5, 0, 5, 4, 0, 4, 0.5, 0, 0.5};
    for (std::size_t i = 0; i < 9; ++i) CHECK(d[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("deviation uses the relative hidden shift per layer") {
    auto tr = blank(2, 2);
    for (std::size_t t = 0; t < 2; ++t) {
        tr.delta_hidden_norm[tr.tl(t, 0)] = 1.0f;
        tr.ctx_hidden_norm[tr.tl(t, 0)] = 2.0f;
        tr.delta_hidden_norm[tr.tl(t, 1)] = 1.0f;
        tr.ctx_hidden_norm[tr.tl(t, 1)] = 0.5f;
    }
    const auto d = deviation_features(tr);
    REQUIRE(d.size() == 4);
    CHECK(d[0] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(d[1] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(d[2] == doctest::Approx(2.0).epsilon(1e-7));
    CHECK(d[3] == doctest::Approx(2.0).epsilon(1e-7));
}

TEST_CASE("incoherence is the token mean of per-layer KL") {
    auto tr = blank(2, 1);
    tr.kl_layer = {0.2f, 0.4f};
    const auto inc = incoherence_features(tr);
    REQUIRE(inc.size() == 1);
    CHECK(inc[0] == doctest::Approx(0.3).epsilon(1e-7));
}

TEST_CASE("dimension and names follow the layout") {
    std::mt19937_64 gen(1);
    const auto fv = pool(oracle::random_trace(gen, 5, 3, 4));
    CHECK(fv.values.size() == 18);
    CHECK(fv.values.size() == feature_dim(3));
    CHECK(fv.layout_version == kLayoutVersion);
    const auto names = feature_names(3);
    CHECK(names.size() == 18);
    CHECK(names.front() == "dz_l2_mean");
    CHECK(names[9] == "dev_l0_mean");
    CHECK(names.back() == "kl_l2_mean");
}

TEST_CASE("a trace with no shift pools to zeros") {
    const auto fv = pool(blank(6, 4));
    for (double v : fv.values) CHECK(v == 0.0);
}

TEST_CASE("pooling is bit-identical under token permutation") {
    std::mt19937_64 gen(2);
    for (int trial = 0; trial < 30; ++trial) {
        auto tr = oracle::random_trace(gen, 13, 4, 6);
        const auto a = pool(tr);
        std::vector<std::size_t> perm(tr.n_tokens);
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), gen);
        permute_tokens(tr, perm);
        const auto b = pool(tr);
        for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);
    }
}

TEST_CASE("scaling logits scales discrepancy; scaling hidden norms leaves deviation") {
    std::mt19937_64 gen(3);
    const auto tr = oracle::random_trace(gen, 9, 3, 5);
    auto scaled = tr;
    for (auto& v : scaled.final_logits_ctx) v *= 2.0f;
    for (auto& v : scaled.final_logits_noctx) v *= 2.0f;
    for (auto& v : scaled.delta_hidden_norm) v *= 4.0f;
    for (auto& v : scaled.ctx_hidden_norm) v *= 4.0f;
    const auto a = discrepancy_features(tr), b = discrepancy_features(scaled);
    for (std::size_t i = 0; i < 6; ++i) CHECK(b[i] == doctest::Approx(2.0 * a[i]).epsilon(1e-6));
    const auto da = deviation_features(tr), db = deviation_features(scaled);
    for (std::size_t i = 0; i < da.size(); ++i) CHECK(db[i] == doctest::Approx(da[i]).epsilon(1e-6));
}

TEST_CASE("pool matches the naive oracle on random traces") {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto tr = oracle::random_trace(gen, 16, 5, 8);
        const auto got = pool(tr).values;
        const auto want = oracle::features(tr);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-6);
    }
}

TEST_CASE("empty and raw traces are rejected") {
    auto tr = blank(0, 2);
    try {
        discrepancy_features(tr);
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("empty trace") != std::string::npos);
    }
    CHECK_THROWS_AS(pool_tokens({}), DataError);
    std::mt19937_64 gen(5);
    CHECK_THROWS_AS(pool(oracle::random_raw(gen, 2, 2, 4, 8)), DataError);
}

TEST_CASE("pool_tokens uses the population std") {
    const auto s = pool_tokens({1.0, 3.0});
    CHECK(s.mean == 2.0);
    CHECK(s.std == 1.0);
    CHECK(s.max == 3.0);
}

TEST_CASE("feature matrix append, select, save and load") {
    std::mt19937_64 gen(6);
    FeatureMatrix m;
    for (int i = 0; i < 5; ++i) m.append("r" + std::to_string(i), pool(oracle::random_trace(gen, 4, 2, 3)));
    CHECK(m.rows() == 5);
    CHECK(m.dim == feature_dim(2));
    CHECK_THROWS_AS(m.append("bad", pool(oracle::random_trace(gen, 4, 3, 3))), DataError);

    const auto sel = m.select({"r3", "r1"});
    CHECK(sel.record_ids == std::vector<std::string>{"r3", "r1"});
    for (std::size_t j = 0; j < m.dim; ++j) CHECK(sel.row(0)[j] == m.row(3)[j]);
    CHECK_THROWS_AS(m.select({"nope"}), DataError);

    const auto dir = fs::temp_directory_path() / "ecrt_test_features";
    fs::create_directories(dir);
    save_feature_matrix(m, dir / "f.bin", dir / "f.index.json");
    const auto back = load_feature_matrix(dir / "f.bin", dir / "f.index.json");
    CHECK(back.record_ids == m.record_ids);
    CHECK(back.dim == m.dim);
    CHECK(back.n_layers == 2);
    for (std::size_t i = 0; i < m.values.size(); ++i)
        CHECK(back.values[i] == static_cast<double>(static_cast<float>(m.values[i])));
    CHECK_THROWS_AS(load_feature_matrix(dir / "missing.bin", dir / "f.index.json"), MissingArtifactError);
}
