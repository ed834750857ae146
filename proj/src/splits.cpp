#include "ecrt/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ecrt/error.hpp"
#include "ecrt/rng.hpp"

namespace ecrt {

std::string_view to_string(Partition p) noexcept {
    switch (p) {
        case Partition::Train: return "train";
        case Partition::Val: return "val";
        case Partition::Test: return "test";
    }
    return "train";
}

Partition parse_partition(std::string_view s) {
    if (s == "train") return Partition::Train;
    if (s == "val") return Partition::Val;
    if (s == "test") return Partition::Test;
    throw ValidationError("unknown partition '" + std::string(s) + "'");
}

std::vector<std::string> SplitManifest::ids_in(Partition p) const {
    std::vector<std::string> out;
    for (const auto& [id, part] : assignment)
        if (part == p) out.push_back(id);
    return out;
}

namespace {

struct Group {
    std::string code;
    std::size_t size = 0;
    std::array<std::size_t, 3> per_class{};
    std::vector<std::size_t> members;
};

void check_fractions(const std::array<double, 3>& f) {
    double sum = 0.0;
    for (double x : f) {
        if (!(x > 0.0) || !std::isfinite(x)) throw ConfigError("split fractions must be positive");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

}  // namespace

SplitManifest make_grouped_split(const std::vector<BenchmarkRecord>& records,
                                 const std::array<double, 3>& fractions, std::uint64_t seed) {
    check_fractions(fractions);

    std::map<std::string, Group> by_code;
    std::array<std::size_t, 3> global{};
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.evidence_id_code.empty())
            throw ValidationError("record '" + r.id + "': field 'evidence_id_code': must be non-empty");
        auto& g = by_code[r.evidence_id_code];
        g.code = r.evidence_id_code;
        g.size++;
        g.per_class[task_index(r.task_label)]++;
        g.members.push_back(i);
        global[task_index(r.task_label)]++;
    }
    if (by_code.size() < 3) throw DataError("cannot form three partitions: fewer than 3 evidence groups");

    std::vector<Group> groups;
    groups.reserve(by_code.size());
    for (auto& [_, g] : by_code) groups.push_back(std::move(g));

    Rng rng(mix_seed(seed ^ 0x5eed5eedULL));
    // Seeded order among equal-size groups; size-descending overall.
    rng.shuffle(std::span(groups));
    std::stable_sort(groups.begin(), groups.end(),
                     [](const Group& a, const Group& b) { return a.size > b.size; });

    const auto n = static_cast<double>(records.size());
    std::array<std::array<double, 3>, 3> class_target{};
    std::array<double, 3> size_target{};
    for (std::size_t p = 0; p < 3; ++p) {
        size_target[p] = fractions[p] * n;
        for (std::size_t c = 0; c < 3; ++c)
            class_target[p][c] = fractions[p] * static_cast<double>(global[c]);
    }

    std::array<std::array<std::size_t, 3>, 3> cur_class{};
    std::array<std::size_t, 3> cur_size{};
    std::vector<std::size_t> group_partition(groups.size());

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const Group& g = groups[gi];
        std::array<std::size_t, 3> priority = {0, 1, 2};
        rng.shuffle(std::span(priority));

        std::size_t best = 3;
        double best_class = 0.0, best_size = 0.0;
        std::size_t best_rank = 0;
        for (std::size_t rank = 0; rank < 3; ++rank) {
            const std::size_t p = priority[rank];
            double class_deficit = 0.0;
            for (std::size_t c = 0; c < 3; ++c)
                class_deficit += static_cast<double>(g.per_class[c]) *
                                 (class_target[p][c] - static_cast<double>(cur_class[p][c]));
            const double size_deficit = size_target[p] - static_cast<double>(cur_size[p]);
            const bool better = best == 3 || class_deficit > best_class ||
                                (class_deficit == best_class &&
                                 (size_deficit > best_size ||
                                  (size_deficit == best_size && rank < best_rank)));
            if (better) {
                best = p;
                best_class = class_deficit;
                best_size = size_deficit;
                best_rank = rank;
            }
        }
        group_partition[gi] = best;
        cur_size[best] += g.size;
        for (std::size_t c = 0; c < 3; ++c) cur_class[best][c] += g.per_class[c];
    }

    // Every partition must receive at least one group. Take the smallest
    // group (latest in the size-descending order) from the most populated
    // partition that can spare one.
    for (std::size_t p = 0; p < 3; ++p) {
        std::array<std::size_t, 3> n_groups{};
        for (auto gp : group_partition) n_groups[gp]++;
        if (n_groups[p] > 0) continue;
        std::size_t donor = 0;
        for (std::size_t q = 1; q < 3; ++q)
            if (n_groups[q] > n_groups[donor]) donor = q;
        for (std::size_t gi = groups.size(); gi-- > 0;) {
            if (group_partition[gi] == donor) {
                group_partition[gi] = p;
                break;
            }
        }
    }

    SplitManifest m;
    m.seed = seed;
    m.fractions = fractions;
    for (std::size_t gi = 0; gi < groups.size(); ++gi)
        for (auto idx : groups[gi].members)
            m.assignment[records[idx].id] = static_cast<Partition>(group_partition[gi]);
    return m;
}

std::vector<ManifestViolation> verify_manifest(const std::vector<BenchmarkRecord>& records,
                                               const SplitManifest& manifest) {
    std::vector<ManifestViolation> out;
    std::map<std::string, std::set<Partition>> group_parts;
    std::set<std::string> seen;
    for (const auto& r : records) {
        seen.insert(r.id);
        auto it = manifest.assignment.find(r.id);
        if (it == manifest.assignment.end()) {
            out.push_back({ManifestViolation::Kind::MissingRecord, r.id, "record is not assigned"});
            continue;
        }
        group_parts[r.evidence_id_code].insert(it->second);
    }
    for (const auto& [code, parts] : group_parts) {
        if (parts.size() < 2) continue;
        std::string detail = "group appears in";
        for (auto p : parts) detail += " " + std::string(to_string(p));
        out.push_back({ManifestViolation::Kind::GroupLeak, code, detail});
    }
    for (const auto& [id, _] : manifest.assignment)
        if (!seen.contains(id))
            out.push_back({ManifestViolation::Kind::UnknownRecord, id, "assigned id is not in the dataset"});
    return out;
}

std::string manifest_to_json(const SplitManifest& m) {
    nlohmann::ordered_json j;
    j["seed"] = m.seed;
    j["fractions"] = m.fractions;
    j["group_key"] = m.group_key;
    nlohmann::ordered_json assignment = nlohmann::ordered_json::object();
    for (const auto& [id, p] : m.assignment) assignment[id] = to_string(p);
    j["assignment"] = std::move(assignment);
    return j.dump(2);
}

SplitManifest manifest_from_json(std::string_view text) {
    try {
        const auto j = nlohmann::json::parse(text);
        SplitManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.fractions = j.at("fractions").get<std::array<double, 3>>();
        m.group_key = j.at("group_key").get<std::string>();
        for (const auto& [id, p] : j.at("assignment").items())
            m.assignment[id] = parse_partition(p.get<std::string>());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed split manifest: ") + e.what());
    }
}

void save_manifest(const SplitManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << manifest_to_json(m) << '\n';
}

SplitManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open split manifest " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return manifest_from_json(ss.str());
}

}  // namespace ecrt
