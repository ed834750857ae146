#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ecrt/benchmark.hpp"

namespace ecrt {

enum class Partition : std::uint8_t { Train = 0, Val = 1, Test = 2 };

std::string_view to_string(Partition p) noexcept;
Partition parse_partition(std::string_view s);

inline constexpr std::array<double, 3> kDefaultFractions = {0.70, 0.15, 0.15};

struct SplitManifest {
    std::uint64_t seed = 0;
    std::array<double, 3> fractions = kDefaultFractions;
    std::string group_key = "evidence_id_code";
    std::map<std::string, Partition> assignment;  // record id -> partition

    std::vector<std::string> ids_in(Partition p) const;

    friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

// Grouped stratified three-way split. Whole evidence groups are assigned to
// partitions; the class mix of each partition tracks the global mix.
SplitManifest make_grouped_split(const std::vector<BenchmarkRecord>& records,
                                 const std::array<double, 3>& fractions, std::uint64_t seed);

struct ManifestViolation {
    enum class Kind { GroupLeak, MissingRecord, UnknownRecord };
    Kind kind;
    std::string subject;  // group code or record id
    std::string detail;
};

std::vector<ManifestViolation> verify_manifest(const std::vector<BenchmarkRecord>& records,
                                               const SplitManifest& manifest);

std::string manifest_to_json(const SplitManifest& m);
SplitManifest manifest_from_json(std::string_view text);
void save_manifest(const SplitManifest& m, const std::filesystem::path& path);
SplitManifest load_manifest(const std::filesystem::path& path);

}  // namespace ecrt
