#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ecrt/benchmark.hpp"
#include "ecrt/error.hpp"

namespace ecrt {

enum class TraceTier : std::uint8_t { Reduced = 0, Raw = 1 };

inline constexpr std::uint16_t kTraceFormatVersion = 1;
inline constexpr std::size_t kDefaultSupportSize = 32;

// Paired CTX/NOCTX teacher-forced probe record.
//
// Per-token arrays have length n_tokens. Per-(token, layer) channels are
// row-major n_tokens x n_layers. Restricted final-layer logits and their
// vocabulary ids are row-major n_tokens x support_size. The RAW tier also
// carries per-condition hidden states (n_tokens x n_layers x hidden_dim) and
// the hidden_dim x vocab_size unembedding; reduce_raw_trace() turns it into
// the REDUCED tier.
struct PairedTrace {
    std::string record_id;
    TraceTier tier = TraceTier::Reduced;
    std::size_t n_tokens = 0;
    std::size_t n_layers = 0;
    std::size_t support_size = 0;

    std::vector<std::int32_t> tokens;
    std::vector<float> logprob_ctx;
    std::vector<float> logprob_noctx;
    std::vector<float> final_logits_ctx;
    std::vector<float> final_logits_noctx;
    std::vector<std::int32_t> restricted_index_sets;
    std::vector<float> delta_hidden_norm;
    std::vector<float> ctx_hidden_norm;
    std::vector<float> kl_layer;

    // RAW tier only.
    std::size_t hidden_dim = 0;
    std::size_t vocab_size = 0;
    std::vector<float> hidden_ctx;
    std::vector<float> hidden_noctx;
    std::vector<float> unembedding;

    std::size_t tl(std::size_t t, std::size_t layer) const noexcept { return t * n_layers + layer; }
    std::size_t tk(std::size_t t, std::size_t k) const noexcept { return t * support_size + k; }
    std::size_t tld(std::size_t t, std::size_t layer) const noexcept {
        return (t * n_layers + layer) * hidden_dim;
    }

    friend bool operator==(const PairedTrace&, const PairedTrace&) = default;
};

enum class TraceErrc {
    Io,
    BadMagic,
    UnsupportedVersion,
    TruncatedPayload,
    ChecksumMismatch,
    MalformedHeader,
    InvariantViolation,
    TeacherForcingMismatch,
    DimensionMismatch,
};

class TraceError : public DataError {
public:
    TraceError(TraceErrc code, const std::string& what) : DataError(what), code_(code) {}
    TraceErrc code() const noexcept { return code_; }

private:
    TraceErrc code_;
};

// Throws TraceError(InvariantViolation / DimensionMismatch) when shapes or
// value ranges are inconsistent.
void validate(const PairedTrace& trace);

// One condition's teacher-forced pass, as captured by an extractor.
struct ConditionPass {
    std::vector<std::int32_t> tokens;
    std::vector<float> logprobs;
    std::vector<float> hidden;  // n_tokens x n_layers x hidden_dim
};

// Builds a RAW trace, rejecting condition pairs whose realized token
// sequences differ.
PairedTrace make_raw_trace(std::string record_id, std::size_t n_layers, std::size_t hidden_dim,
                           std::size_t vocab_size, ConditionPass ctx, ConditionPass noctx,
                           std::vector<float> unembedding);

// RAW -> REDUCED. Per-layer distributions are the unembedding applied to each
// layer's hidden state; kl_layer is KL(CTX || NOCTX). The restricted support
// interleaves the two conditions' final-layer rankings until support_size
// distinct ids are collected. REDUCED inputs are returned unchanged.
PairedTrace reduce_raw_trace(const PairedTrace& raw, std::size_t support_size = kDefaultSupportSize);

// Class-conditional signal shape for the synthetic generator. Magnitudes are
// relative to the matching channel: logits in nats, hidden shifts relative to
// the CTX hidden norm, KL in nats.
struct SignalProfile {
    double logit_local = 0.0;    // shift on a few support entries
    double logit_diffuse = 0.0;  // shift spread over the whole support
    double hidden_peak = 0.0;    // mid-layer bump of the relative hidden shift
    double hidden_floor = 0.0;   // layer-independent relative hidden shift
    double kl_peak = 0.0;
    double kl_floor = 0.0;
    double temperature = 0.5;    // >1 flattens the CTX final distribution
};

struct SyntheticTraceConfig {
    std::size_t min_tokens = 8;
    std::size_t max_tokens = 24;
    std::size_t n_layers = 8;
    std::size_t support_size = kDefaultSupportSize;
    std::size_t vocab_size = 32000;
    std::array<SignalProfile, 3> profiles = default_profiles();
    double noise = 0.05;
    std::uint64_t seed = 0;

    static std::array<SignalProfile, 3> default_profiles();
    void validate() const;
};

PairedTrace generate_synthetic_pair(const BenchmarkRecord& record, const SyntheticTraceConfig& cfg);

std::vector<std::uint8_t> encode_trace(const PairedTrace& trace);
PairedTrace decode_trace(std::span<const std::uint8_t> bytes);
void write_trace(const PairedTrace& trace, const std::filesystem::path& path);
PairedTrace read_trace(const std::filesystem::path& path);

// record_id -> trace file, paths relative to the manifest's directory.
struct TraceManifest {
    std::string backbone;
    std::map<std::string, std::string> traces;
};

void save_trace_manifest(const TraceManifest& m, const std::filesystem::path& path);
TraceManifest load_trace_manifest(const std::filesystem::path& path);

}  // namespace ecrt
