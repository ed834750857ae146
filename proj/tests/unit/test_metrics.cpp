#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ecrt/metrics.hpp"
#include "oracles.hpp"

using namespace ecrt;

namespace {

std::vector<std::uint8_t> bits(std::initializer_list<int> v) {
    std::vector<std::uint8_t> out;
    for (int b : v) out.push_back(static_cast<std::uint8_t>(b));
    return out;
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("restricted entropy and max prob") {
    const std::vector<float> flat(16, 1.5f);
    CHECK(restricted_entropy(flat) == doctest::Approx(std::log(16.0)).epsilon(1e-12));
    CHECK(restricted_max_prob(flat) == doctest::Approx(1.0 / 16));
    std::vector<float> peaked(8, 0.0f);
    peaked[3] = 1000.0f;
    CHECK(restricted_entropy(peaked) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(restricted_max_prob(peaked) == doctest::Approx(1.0));
}

TEST_CASE("baseline scores on hand-built traces") {
    std::mt19937_64 gen(1);
    auto tr = oracle::random_trace(gen, 5, 2, 16);
    for (auto& v : tr.logprob_ctx) v = static_cast<float>(-std::log(4.0));
    for (auto& v : tr.final_logits_ctx) v = 0.25f;
    CHECK(uncertainty_score(tr, UncertaintyMethod::Perplexity).value == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(uncertainty_score(tr, UncertaintyMethod::MeanTokenEntropy).value ==
          doctest::Approx(std::log(16.0)).epsilon(1e-9));
    CHECK(uncertainty_score(tr, UncertaintyMethod::LnEntropy).value ==
          doctest::Approx(std::log(16.0)).epsilon(1e-9));
    CHECK(uncertainty_score(tr, UncertaintyMethod::Msp).value == doctest::Approx(-1.0 / 16));

    for (std::size_t t = 0; t < tr.n_tokens; ++t)
        for (std::size_t k = 0; k < 16; ++k) tr.final_logits_ctx[tr.tk(t, k)] = k == 2 ? 500.0f : 0.0f;
    CHECK(uncertainty_score(tr, UncertaintyMethod::Msp).value == doctest::Approx(-1.0));
    CHECK(uncertainty_score(tr, UncertaintyMethod::MeanTokenEntropy).value == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(uncertainty_score(tr, UncertaintyMethod::Perplexity).record_id == tr.record_id);
}

TEST_CASE("baselines ignore the NOCTX channels") {
    std::mt19937_64 gen(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto tr = oracle::random_trace(gen, 7, 3, 5);
        auto other = tr;
        for (auto& v : other.logprob_noctx) v = -9.0f;
        for (auto& v : other.final_logits_noctx) v *= -3.0f;
        for (auto m : kAllUncertaintyMethods)
            CHECK(uncertainty_score(tr, m).value == uncertainty_score(other, m).value);
    }
}

TEST_CASE("baseline names and errors") {
    for (auto m : kAllUncertaintyMethods) CHECK(parse_uncertainty_method(to_string(m)) == m);
    CHECK(display_name(UncertaintyMethod::MeanTokenEntropy) == "MTE");
    CHECK_THROWS_AS(parse_uncertainty_method("entropy"), ConfigError);
    std::mt19937_64 gen(3);
    auto tr = oracle::random_trace(gen, 0, 2, 4);
    CHECK_THROWS_AS(uncertainty_score(tr, UncertaintyMethod::Perplexity), DataError);
}

TEST_CASE("stage-1 metrics") {
    const auto all = stage1_metrics(bits({1, 1, 1, 1}), bits({1, 1, 0, 0}));
    CHECK(all.u_recall == 1.0);
    CHECK(all.flag_rate == 1.0);
    CHECK(all.s1_ba == 0.5);

    const auto perfect = stage1_metrics(bits({1, 0, 1, 0}), bits({1, 0, 1, 0}));
    CHECK(perfect.s1_ba == 1.0);

    // TP 9, FN 1, TN 8, FP 2.
    std::vector<std::uint8_t> f, u;
    for (int i = 0; i < 9; ++i) f.push_back(1), u.push_back(1);
    f.push_back(0), u.push_back(1);
    for (int i = 0; i < 8; ++i) f.push_back(0), u.push_back(0);
    for (int i = 0; i < 2; ++i) f.push_back(1), u.push_back(0);
    const auto m = stage1_metrics(f, u);
    CHECK(m.u_recall == doctest::Approx(0.9));
    CHECK(m.flag_rate == doctest::Approx(11.0 / 20));
    CHECK(m.s1_ba == doctest::Approx(0.85));

    CHECK(stage1_metrics(bits({0, 0, 0}), bits({1, 0, 0})).s1_ba == 0.5);
    CHECK_THROWS_AS(stage1_metrics(bits({1, 0}), bits({1, 1})), DataError);
    CHECK_THROWS_AS(stage1_metrics(bits({1}), bits({1, 0})), DataError);
}

TEST_CASE("stage-2 metrics") {
    const auto m = stage2_metrics(bits({1, 1, 0, 0, 1}), bits({1, 1, 1, 0, 0}));
    CHECK(m.gap_recall == doctest::Approx(2.0 / 3));
    CHECK(m.contradiction_recall == doctest::Approx(0.5));
    CHECK(m.s2_ba == doctest::Approx(0.5 * (2.0 / 3 + 0.5)));
    CHECK(stage2_metrics(bits({1, 1}), bits({1, 0})).s2_ba == 0.5);
    CHECK_THROWS_AS(stage2_metrics(bits({1, 0}), bits({0, 0})), DataError);
}

TEST_CASE("MCQA macro accuracy") {
    const std::vector<TaskLabel> tasks = {TaskLabel::EAlign,     TaskLabel::EAlign,     TaskLabel::EConflict,
                                          TaskLabel::EConflict,  TaskLabel::EConflict,  TaskLabel::EConflict,
                                          TaskLabel::EGap,       TaskLabel::EGap,       TaskLabel::EGap,
                                          TaskLabel::EGap};
    const std::vector<int> gold = {0, 1, 2, 0, 1, 2, 3, 3, 3, 3};
    const std::vector<int> ans = {0, 0, 2, 1, 0, 1, 3, 3, 3, 0};
    const auto m = mcqa_macro_accuracy(ans, gold, tasks);
    CHECK(*m.per_task[0] == 0.5);
    CHECK(*m.per_task[1] == 0.25);
    CHECK(*m.per_task[2] == 0.75);
    CHECK(m.macro == doctest::Approx(0.5));
    CHECK_FALSE(m.missing_class);

    CHECK(mcqa_macro_accuracy(gold, gold, tasks).macro == 1.0);

    // Always answering option 0 against a uniformly spread gold set.
    std::vector<int> g2, a2;
    std::vector<TaskLabel> t2;
    for (int i = 0; i < 12; ++i) {
        g2.push_back(i % 4);
        a2.push_back(0);
        t2.push_back(kAllTasks[static_cast<std::size_t>(i / 4)]);
    }
    // Each class holds gold 0..3 once, so option 0 is right once per class.
    const auto chance = mcqa_macro_accuracy(a2, g2, t2);
    CHECK(chance.macro == doctest::Approx(0.25));

    const std::vector<TaskLabel> only_align = {TaskLabel::EAlign, TaskLabel::EAlign};
    const auto part = mcqa_macro_accuracy(std::vector<int>{0, 1}, std::vector<int>{0, 0}, only_align);
    CHECK(part.missing_class);
    CHECK_FALSE(part.per_task[1].has_value());
    CHECK(part.macro == 0.5);
}

TEST_CASE("aggregation across seeds") {
    SeedReport a{0, {{"s1_ba", 0.84}}, {}}, b{1, {{"s1_ba", 0.86}}, {}};
    const auto rep = aggregate_reports("bb", "M", {a, b});
    CHECK(rep.aggregate.at("s1_ba").mean == doctest::Approx(0.85));
    CHECK(rep.aggregate.at("s1_ba").std == doctest::Approx(0.01));
    CHECK(rep.aggregate.at("s1_ba").min == 0.84);
    CHECK(rep.aggregate.at("s1_ba").max == 0.86);

    const auto single = aggregate_reports("bb", "M", {a});
    CHECK(single.aggregate.at("s1_ba").std == 0.0);

    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<SeedReport> rs;
        std::vector<double> xs;
        for (std::uint64_t s = 0; s < 5; ++s) {
            xs.push_back(ud(gen));
            rs.push_back({s, {{"u_recall", xs.back()}}, {}});
        }
        const auto p = oracle::naive_pool(xs);
        const auto got = aggregate_reports("bb", "M", rs).aggregate.at("u_recall");
        CHECK(got.mean == doctest::Approx(p.mean).epsilon(1e-12));
        CHECK(got.std == doctest::Approx(p.std).epsilon(1e-9));
        CHECK(got.max == p.max);
    }

    SeedReport c{2, {{"u_recall", 0.5}}, {}};
    CHECK_THROWS_AS(aggregate_reports("bb", "M", {a, c}), DataError);
    CHECK_THROWS_AS(aggregate_reports("bb", "M", {}), DataError);
    SeedReport out_of_range{3, {{"s1_ba", 1.2}}, {}};
    CHECK_THROWS_AS(aggregate_reports("bb", "M", {a, out_of_range}), ValidationError);
}

TEST_CASE("report JSON and CSV formats") {
    SeedReport a{0, {{"u_recall", 0.96}, {"flag_rate", 0.5}, {"s1_ba", 0.84}}, {{"theta1", 0.3}}};
    SeedReport b{1, {{"u_recall", 0.94}, {"flag_rate", 0.5}, {"s1_ba", 0.86}}, {{"theta1", 0.4}}};
    const std::vector<EvalReport> reps = {aggregate_reports("toy", "ECRT", {a, b})};

    const auto back = reports_from_json(reports_to_json(reps));
    REQUIRE(back.size() == 1);
    CHECK(back[0].method == "ECRT");
    CHECK(back[0].seeds[1].metrics == b.metrics);
    CHECK(back[0].seeds[0].audit.at("theta1") == 0.3);
    CHECK(back[0].aggregate.at("s1_ba").mean == doctest::Approx(0.85));
    CHECK_THROWS_AS(reports_from_json("[{\"method\": 1}]"), DataError);

    const auto lines = lines_of(reports_to_csv(reps));
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "Backbone,Method,Seed,U-Recall,Flag Rate,S1 BA,Gap Recall,Contradict. Recall,S2 BA");
    CHECK(lines[1] == "toy,ECRT,0,0.9600,0.5000,0.8400,,,");
    CHECK(lines[3] == "toy,ECRT,mean ± std,0.9500 ± 0.0100,0.5000 ± 0.0000,0.8500 ± 0.0100,,,");
}
