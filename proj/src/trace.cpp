#include "ecrt/trace.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <zlib.h>

#include <json.hpp>

#include "ecrt/rng.hpp"

namespace ecrt {

namespace {

[[noreturn]] void fail(TraceErrc code, const std::string& msg) { throw TraceError(code, msg); }

void expect_size(const std::string& id, const char* name, std::size_t got, std::size_t want) {
    if (got != want)
        fail(TraceErrc::DimensionMismatch, "trace '" + id + "': " + name + " has " +
                                               std::to_string(got) + " entries, expected " +
                                               std::to_string(want));
}

void expect_non_negative(const std::string& id, const char* name, const std::vector<float>& v) {
    for (float x : v)
        if (!(x >= 0.0f) || !std::isfinite(x))
            fail(TraceErrc::InvariantViolation,
                 "trace '" + id + "': " + name + " must be finite and >= 0");
}

void expect_finite(const std::string& id, const char* name, const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x))
            fail(TraceErrc::InvariantViolation, "trace '" + id + "': " + name + " must be finite");
}

// log-softmax of logits = U^T h, accumulated in double.
void layer_log_softmax(const float* h, const std::vector<float>& unembedding, std::size_t hidden_dim,
                       std::size_t vocab, std::vector<double>& logits, std::vector<double>& out) {
    logits.assign(vocab, 0.0);
    for (std::size_t i = 0; i < hidden_dim; ++i) {
        const double hi = h[i];
        const float* row = unembedding.data() + i * vocab;
        for (std::size_t v = 0; v < vocab; ++v) logits[v] += hi * static_cast<double>(row[v]);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    const double lse = mx + std::log(sum);
    out.resize(vocab);
    for (std::size_t v = 0; v < vocab; ++v) out[v] = logits[v] - lse;
}

std::vector<std::size_t> ranking(const std::vector<double>& logits) {
    std::vector<std::size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    return idx;
}

}  // namespace

void validate(const PairedTrace& tr) {
    const auto& id = tr.record_id;
    if (id.empty()) fail(TraceErrc::InvariantViolation, "trace has an empty record_id");
    if (tr.n_layers == 0) fail(TraceErrc::InvariantViolation, "trace '" + id + "': n_layers must be >= 1");
    const std::size_t T = tr.n_tokens, L = tr.n_layers, K = tr.support_size;
    expect_size(id, "tokens", tr.tokens.size(), T);
    expect_size(id, "logprob_ctx", tr.logprob_ctx.size(), T);
    expect_size(id, "logprob_noctx", tr.logprob_noctx.size(), T);
    expect_finite(id, "logprob_ctx", tr.logprob_ctx);
    expect_finite(id, "logprob_noctx", tr.logprob_noctx);

    if (tr.tier == TraceTier::Raw) {
        const std::size_t d = tr.hidden_dim, V = tr.vocab_size;
        if (d == 0 || V == 0)
            fail(TraceErrc::InvariantViolation, "trace '" + id + "': raw tier needs hidden_dim and vocab_size");
        expect_size(id, "hidden_ctx", tr.hidden_ctx.size(), T * L * d);
        expect_size(id, "hidden_noctx", tr.hidden_noctx.size(), T * L * d);
        expect_size(id, "unembedding", tr.unembedding.size(), d * V);
        expect_finite(id, "hidden_ctx", tr.hidden_ctx);
        expect_finite(id, "hidden_noctx", tr.hidden_noctx);
        expect_finite(id, "unembedding", tr.unembedding);
        return;
    }

    if (K == 0) fail(TraceErrc::InvariantViolation, "trace '" + id + "': support_size must be >= 1");
    expect_size(id, "final_logits_ctx", tr.final_logits_ctx.size(), T * K);
    expect_size(id, "final_logits_noctx", tr.final_logits_noctx.size(), T * K);
    expect_size(id, "restricted_index_sets", tr.restricted_index_sets.size(), T * K);
    expect_size(id, "delta_hidden_norm", tr.delta_hidden_norm.size(), T * L);
    expect_size(id, "ctx_hidden_norm", tr.ctx_hidden_norm.size(), T * L);
    expect_size(id, "kl_layer", tr.kl_layer.size(), T * L);
    expect_finite(id, "final_logits_ctx", tr.final_logits_ctx);
    expect_finite(id, "final_logits_noctx", tr.final_logits_noctx);
    expect_non_negative(id, "delta_hidden_norm", tr.delta_hidden_norm);
    expect_non_negative(id, "ctx_hidden_norm", tr.ctx_hidden_norm);
    expect_non_negative(id, "kl_layer", tr.kl_layer);
}

PairedTrace make_raw_trace(std::string record_id, std::size_t n_layers, std::size_t hidden_dim,
                           std::size_t vocab_size, ConditionPass ctx, ConditionPass noctx,
                           std::vector<float> unembedding) {
    if (ctx.tokens != noctx.tokens)
        fail(TraceErrc::TeacherForcingMismatch,
             "trace '" + record_id + "': CTX and NOCTX realized token sequences differ");
    PairedTrace tr;
    tr.record_id = std::move(record_id);
    tr.tier = TraceTier::Raw;
    tr.n_tokens = ctx.tokens.size();
    tr.n_layers = n_layers;
    tr.hidden_dim = hidden_dim;
    tr.vocab_size = vocab_size;
    tr.tokens = std::move(ctx.tokens);
    tr.logprob_ctx = std::move(ctx.logprobs);
    tr.logprob_noctx = std::move(noctx.logprobs);
    tr.hidden_ctx = std::move(ctx.hidden);
    tr.hidden_noctx = std::move(noctx.hidden);
    tr.unembedding = std::move(unembedding);
    validate(tr);
    return tr;
}

PairedTrace reduce_raw_trace(const PairedTrace& raw, std::size_t support_size) {
    if (raw.tier == TraceTier::Reduced) return raw;
    validate(raw);
    const std::size_t T = raw.n_tokens, L = raw.n_layers, d = raw.hidden_dim, V = raw.vocab_size;
    const std::size_t K = std::min(support_size, V);
    if (K == 0) fail(TraceErrc::InvariantViolation, "support_size must be >= 1");

    PairedTrace out;
    out.record_id = raw.record_id;
    out.tier = TraceTier::Reduced;
    out.n_tokens = T;
    out.n_layers = L;
    out.support_size = K;
    out.tokens = raw.tokens;
    out.logprob_ctx = raw.logprob_ctx;
    out.logprob_noctx = raw.logprob_noctx;
    out.delta_hidden_norm.resize(T * L);
    out.ctx_hidden_norm.resize(T * L);
    out.kl_layer.resize(T * L);
    out.final_logits_ctx.resize(T * K);
    out.final_logits_noctx.resize(T * K);
    out.restricted_index_sets.resize(T * K);

    std::vector<double> z_ctx, z_noctx, lp_ctx, lp_noctx;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t l = 0; l < L; ++l) {
            const float* hc = raw.hidden_ctx.data() + raw.tld(t, l);
            const float* hn = raw.hidden_noctx.data() + raw.tld(t, l);
            double dsq = 0.0, csq = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double diff = static_cast<double>(hc[i]) - static_cast<double>(hn[i]);
                dsq += diff * diff;
                csq += static_cast<double>(hc[i]) * static_cast<double>(hc[i]);
            }
            out.delta_hidden_norm[out.tl(t, l)] = static_cast<float>(std::sqrt(dsq));
            out.ctx_hidden_norm[out.tl(t, l)] = static_cast<float>(std::sqrt(csq));

            layer_log_softmax(hc, raw.unembedding, d, V, z_ctx, lp_ctx);
            layer_log_softmax(hn, raw.unembedding, d, V, z_noctx, lp_noctx);
            double kl = 0.0;
            for (std::size_t v = 0; v < V; ++v) kl += std::exp(lp_ctx[v]) * (lp_ctx[v] - lp_noctx[v]);
            out.kl_layer[out.tl(t, l)] = static_cast<float>(std::max(0.0, kl));

            if (l + 1 != L) continue;
            const auto rank_ctx = ranking(z_ctx);
            const auto rank_noctx = ranking(z_noctx);
            std::set<std::size_t> support;
            for (std::size_t r = 0; support.size() < K; ++r) {
                support.insert(rank_ctx[r]);
                if (support.size() < K) support.insert(rank_noctx[r]);
            }
            std::size_t k = 0;
            for (std::size_t v : support) {
                out.restricted_index_sets[out.tk(t, k)] = static_cast<std::int32_t>(v);
                out.final_logits_ctx[out.tk(t, k)] = static_cast<float>(z_ctx[v]);
                out.final_logits_noctx[out.tk(t, k)] = static_cast<float>(z_noctx[v]);
                ++k;
            }
        }
    }
    return out;
}

std::array<SignalProfile, 3> SyntheticTraceConfig::default_profiles() {
    SignalProfile align;  // near-zero shifts, peaked distributions
    align.temperature = 0.5;

    SignalProfile conflict;  // large localized logit shift, mid-layer hidden shift
    conflict.logit_local = 4.0;
    conflict.hidden_peak = 0.6;
    conflict.hidden_floor = 0.05;
    conflict.kl_peak = 0.8;
    conflict.kl_floor = 0.02;
    conflict.temperature = 0.5;

    SignalProfile gap;  // diffuse high-entropy finals, small hidden shifts
    gap.logit_diffuse = 0.5;
    gap.hidden_floor = 0.12;
    gap.kl_floor = 0.1;
    gap.temperature = 3.0;
    return {align, conflict, gap};
}

void SyntheticTraceConfig::validate() const {
    if (n_layers < 2) throw ConfigError("synthetic traces need n_layers >= 2");
    if (support_size < 2) throw ConfigError("synthetic traces need support_size >= 2");
    if (vocab_size < support_size) throw ConfigError("vocab_size must be >= support_size");
    if (min_tokens < 1 || max_tokens < min_tokens) throw ConfigError("invalid token count range");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise scale must be >= 0");
    for (const auto& p : profiles)
        if (!(p.temperature > 0.0)) throw ConfigError("profile temperature must be > 0");
}

PairedTrace generate_synthetic_pair(const BenchmarkRecord& record, const SyntheticTraceConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(fnv1a64(record.id) ^ mix_seed(cfg.seed)));
    const SignalProfile& prof = cfg.profiles[task_index(record.task_label)];
    const std::size_t T = cfg.min_tokens + rng.index(cfg.max_tokens - cfg.min_tokens + 1);
    const std::size_t L = cfg.n_layers, K = cfg.support_size;
    // Per-record signal strength; some items carry subtler evidence than others.
    const double strength = 0.5 + rng.uniform();

    PairedTrace tr;
    tr.record_id = record.id;
    tr.tier = TraceTier::Reduced;
    tr.n_tokens = T;
    tr.n_layers = L;
    tr.support_size = K;
    tr.tokens.resize(T);
    tr.logprob_ctx.resize(T);
    tr.logprob_noctx.resize(T);
    tr.final_logits_ctx.resize(T * K);
    tr.final_logits_noctx.resize(T * K);
    tr.restricted_index_sets.resize(T * K);
    tr.delta_hidden_norm.resize(T * L);
    tr.ctx_hidden_norm.resize(T * L);
    tr.kl_layer.resize(T * L);

    const std::size_t n_local = std::max<std::size_t>(1, K / 8);
    std::vector<double> z(K), dz(K);
    std::vector<std::size_t> order(K);
    for (std::size_t t = 0; t < T; ++t) {
        const auto token = static_cast<std::int32_t>(rng.index(cfg.vocab_size));
        tr.tokens[t] = token;
        std::set<std::int32_t> support{token};
        while (support.size() < K) support.insert(static_cast<std::int32_t>(rng.index(cfg.vocab_size)));

        std::size_t k = 0, token_pos = 0;
        for (auto v : support) {
            if (v == token) token_pos = k;
            tr.restricted_index_sets[tr.tk(t, k)] = v;
            z[k] = rng.normal() / prof.temperature;
            ++k;
        }
        z[token_pos] += 2.0 / prof.temperature;

        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span(order));
        for (std::size_t j = 0; j < K; ++j) {
            const double sign = (rng.next() & 1u) ? 1.0 : -1.0;
            dz[j] = strength * prof.logit_diffuse * sign + cfg.noise * rng.normal();
        }
        for (std::size_t j = 0; j < n_local; ++j) {
            const double sign = (rng.next() & 1u) ? 1.0 : -1.0;
            dz[order[j]] += strength * prof.logit_local * sign;
        }

        double mx_c = -INFINITY, mx_n = -INFINITY;
        for (std::size_t j = 0; j < K; ++j) {
            const float zc = static_cast<float>(z[j]);
            const float zn = static_cast<float>(z[j] - dz[j]);
            tr.final_logits_ctx[tr.tk(t, j)] = zc;
            tr.final_logits_noctx[tr.tk(t, j)] = zn;
            mx_c = std::max<double>(mx_c, zc);
            mx_n = std::max<double>(mx_n, zn);
        }
        double sc = 0.0, sn = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            sc += std::exp(tr.final_logits_ctx[tr.tk(t, j)] - mx_c);
            sn += std::exp(tr.final_logits_noctx[tr.tk(t, j)] - mx_n);
        }
        tr.logprob_ctx[t] =
            static_cast<float>(tr.final_logits_ctx[tr.tk(t, token_pos)] - mx_c - std::log(sc));
        tr.logprob_noctx[t] =
            static_cast<float>(tr.final_logits_noctx[tr.tk(t, token_pos)] - mx_n - std::log(sn));

        for (std::size_t l = 0; l < L; ++l) {
            const double depth = static_cast<double>(l) / static_cast<double>(L - 1);
            const double bump = std::exp(-std::pow((depth - 0.5) / 0.2, 2.0));
            const double ctx_norm = 20.0 * (1.0 + depth) * (1.0 + 0.05 * std::abs(rng.normal()));
            const double rel = strength * (prof.hidden_floor + prof.hidden_peak * bump) +
                               cfg.noise * rng.normal();
            const double kl = strength * (prof.kl_floor + prof.kl_peak * bump) + cfg.noise * rng.normal();
            tr.ctx_hidden_norm[tr.tl(t, l)] = static_cast<float>(ctx_norm);
            tr.delta_hidden_norm[tr.tl(t, l)] = static_cast<float>(ctx_norm * std::abs(rel));
            tr.kl_layer[tr.tl(t, l)] = static_cast<float>(std::abs(kl));
        }
    }
    return tr;
}

// ---------------------------------------------------------------------------
// .ecrt binary format
//
//   "ECRT" | u16 version | u32 header_len | header JSON | tensors | u32 crc32
//
// Little-endian throughout. Tensors are f32 or i32, laid out contiguously in
// the order listed by the header. The CRC covers every byte before it.

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'E', 'C', 'R', 'T'};

class Writer {
public:
    void u16(std::uint16_t v) {
        buf_.push_back(static_cast<std::uint8_t>(v));
        buf_.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<std::uint8_t>(v >> s));
    }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void f32s(const std::vector<float>& v) {
        for (float x : v) u32(std::bit_cast<std::uint32_t>(x));
    }
    void i32s(const std::vector<std::int32_t>& v) {
        for (auto x : v) u32(static_cast<std::uint32_t>(x));
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

std::uint32_t load_u32(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

struct TensorSpec {
    const char* name;
    bool is_int;
};

constexpr std::array<TensorSpec, 13> kTensorOrder = {{
    {"tokens_ctx", true},
    {"tokens_noctx", true},
    {"logprob_ctx", false},
    {"logprob_noctx", false},
    {"final_logits_ctx", false},
    {"final_logits_noctx", false},
    {"restricted_index_sets", true},
    {"delta_hidden_norm", false},
    {"ctx_hidden_norm", false},
    {"kl_layer", false},
    {"hidden_ctx", false},
    {"hidden_noctx", false},
    {"unembedding", false},
}};

const std::vector<float>* float_field(const PairedTrace& tr, std::string_view name) {
    if (name == "logprob_ctx") return &tr.logprob_ctx;
    if (name == "logprob_noctx") return &tr.logprob_noctx;
    if (name == "final_logits_ctx") return &tr.final_logits_ctx;
    if (name == "final_logits_noctx") return &tr.final_logits_noctx;
    if (name == "delta_hidden_norm") return &tr.delta_hidden_norm;
    if (name == "ctx_hidden_norm") return &tr.ctx_hidden_norm;
    if (name == "kl_layer") return &tr.kl_layer;
    if (name == "hidden_ctx") return &tr.hidden_ctx;
    if (name == "hidden_noctx") return &tr.hidden_noctx;
    if (name == "unembedding") return &tr.unembedding;
    return nullptr;
}

std::vector<float>* float_field(PairedTrace& tr, std::string_view name) {
    return const_cast<std::vector<float>*>(float_field(static_cast<const PairedTrace&>(tr), name));
}

}  // namespace

std::vector<std::uint8_t> encode_trace(const PairedTrace& tr) {
    validate(tr);
    nlohmann::ordered_json header;
    header["record_id"] = tr.record_id;
    header["tier"] = tr.tier == TraceTier::Raw ? "raw" : "reduced";
    header["n_tokens"] = tr.n_tokens;
    header["n_layers"] = tr.n_layers;
    header["support_size"] = tr.support_size;
    header["hidden_dim"] = tr.hidden_dim;
    header["vocab_size"] = tr.vocab_size;
    auto tensors = nlohmann::ordered_json::array();
    for (const auto& spec : kTensorOrder) {
        std::size_t count;
        if (spec.is_int)
            count = std::string_view(spec.name) == "restricted_index_sets" ? tr.restricted_index_sets.size()
                                                                           : tr.tokens.size();
        else
            count = float_field(tr, spec.name)->size();
        tensors.push_back({{"name", spec.name}, {"dtype", spec.is_int ? "i32" : "f32"}, {"count", count}});
    }
    header["tensors"] = std::move(tensors);
    const std::string htext = header.dump();

    Writer w;
    w.bytes(kMagic);
    w.u16(kTraceFormatVersion);
    w.u32(static_cast<std::uint32_t>(htext.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(htext.data()), htext.size()});
    for (const auto& spec : kTensorOrder) {
        const std::string_view name = spec.name;
        if (name == "tokens_ctx" || name == "tokens_noctx")
            w.i32s(tr.tokens);
        else if (name == "restricted_index_sets")
            w.i32s(tr.restricted_index_sets);
        else
            w.f32s(*float_field(tr, name));
    }
    const std::uint32_t crc = crc32_of(w.buffer());
    w.u32(crc);
    return std::move(w.buffer());
}

PairedTrace decode_trace(std::span<const std::uint8_t> b) {
    if (b.size() < 4) fail(TraceErrc::TruncatedPayload, "truncated payload: missing magic");
    if (!std::equal(kMagic.begin(), kMagic.end(), b.begin()))
        fail(TraceErrc::BadMagic, "not an .ecrt trace (magic mismatch)");
    if (b.size() < 10) fail(TraceErrc::TruncatedPayload, "truncated payload: incomplete preamble");
    const std::uint16_t version = static_cast<std::uint16_t>(b[4] | (b[5] << 8));
    if (version != kTraceFormatVersion)
        fail(TraceErrc::UnsupportedVersion, "unsupported trace version " + std::to_string(version));
    const std::size_t hlen = load_u32(b.data() + 6);
    if (b.size() < 10 + hlen) fail(TraceErrc::TruncatedPayload, "truncated payload: incomplete header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(b.begin() + 10, b.begin() + 10 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        fail(TraceErrc::MalformedHeader, std::string("malformed trace header: ") + e.what());
    }

    PairedTrace tr;
    std::vector<std::pair<std::string, std::size_t>> layout;
    try {
        tr.record_id = header.at("record_id").get<std::string>();
        const auto tier = header.at("tier").get<std::string>();
        if (tier != "raw" && tier != "reduced") fail(TraceErrc::MalformedHeader, "unknown tier '" + tier + "'");
        tr.tier = tier == "raw" ? TraceTier::Raw : TraceTier::Reduced;
        tr.n_tokens = header.at("n_tokens").get<std::size_t>();
        tr.n_layers = header.at("n_layers").get<std::size_t>();
        tr.support_size = header.at("support_size").get<std::size_t>();
        tr.hidden_dim = header.at("hidden_dim").get<std::size_t>();
        tr.vocab_size = header.at("vocab_size").get<std::size_t>();
        for (const auto& t : header.at("tensors"))
            layout.emplace_back(t.at("name").get<std::string>(), t.at("count").get<std::size_t>());
    } catch (const nlohmann::json::exception& e) {
        fail(TraceErrc::MalformedHeader, std::string("malformed trace header: ") + e.what());
    }
    if (layout.size() != kTensorOrder.size())
        fail(TraceErrc::MalformedHeader, "unexpected tensor list in trace header");

    std::size_t payload = 0;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (layout[i].first != kTensorOrder[i].name)
            fail(TraceErrc::MalformedHeader, "unexpected tensor '" + layout[i].first + "'");
        if (layout[i].second > (b.size() / 4)) fail(TraceErrc::TruncatedPayload, "truncated payload");
        payload += layout[i].second * 4;
    }
    const std::size_t expected = 10 + hlen + payload + 4;
    if (b.size() < expected) fail(TraceErrc::TruncatedPayload, "truncated payload");
    if (b.size() > expected) fail(TraceErrc::MalformedHeader, "trailing bytes after trace payload");
    const std::uint32_t stored = load_u32(b.data() + expected - 4);
    if (crc32_of(b.first(expected - 4)) != stored) fail(TraceErrc::ChecksumMismatch, "trace checksum mismatch");

    const std::uint8_t* p = b.data() + 10 + hlen;
    std::vector<std::int32_t> tokens_noctx;
    for (const auto& [name, count] : layout) {
        if (name == "tokens_ctx" || name == "tokens_noctx" || name == "restricted_index_sets") {
            auto& dst = name == "tokens_ctx" ? tr.tokens
                        : name == "tokens_noctx" ? tokens_noctx
                                                 : tr.restricted_index_sets;
            dst.resize(count);
            for (std::size_t i = 0; i < count; ++i, p += 4) dst[i] = static_cast<std::int32_t>(load_u32(p));
        } else {
            auto& dst = *float_field(tr, name);
            dst.resize(count);
            for (std::size_t i = 0; i < count; ++i, p += 4) dst[i] = std::bit_cast<float>(load_u32(p));
        }
    }
    if (tokens_noctx != tr.tokens)
        fail(TraceErrc::TeacherForcingMismatch,
             "trace '" + tr.record_id + "': CTX and NOCTX realized token sequences differ");
    validate(tr);
    return tr;
}

void write_trace(const PairedTrace& trace, const std::filesystem::path& path) {
    const auto bytes = encode_trace(trace);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(TraceErrc::Io, "cannot write trace " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(TraceErrc::Io, "short write on " + path.string());
}

PairedTrace read_trace(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(TraceErrc::Io, "cannot open trace " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_trace(bytes);
    } catch (const TraceError& e) {
        throw TraceError(e.code(), path.string() + ": " + e.what());
    }
}

void save_trace_manifest(const TraceManifest& m, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["backbone"] = m.backbone;
    nlohmann::ordered_json traces = nlohmann::ordered_json::object();
    for (const auto& [id, p] : m.traces) traces[id] = p;
    j["traces"] = std::move(traces);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

TraceManifest load_trace_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open trace manifest " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        TraceManifest m;
        m.backbone = j.value("backbone", std::string{});
        for (const auto& [id, p] : j.at("traces").items()) m.traces[id] = p.get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed trace manifest " + path.string() + ": " + e.what());
    }
}

}  // namespace ecrt
