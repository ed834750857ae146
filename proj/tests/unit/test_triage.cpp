#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ecrt/triage.hpp"
#include "oracles.hpp"

using namespace ecrt;
namespace fs = std::filesystem;

namespace {

struct Labeled {
    FeatureMatrix x;
    std::vector<TaskLabel> labels;
};

// Features from synthetic traces, n rows per class, interleaved.
Labeled synthetic_features(std::size_t n_per_class, std::uint64_t seed) {
    SyntheticTraceConfig cfg;
    cfg.seed = seed;
    Labeled out;
    for (std::size_t i = 0; i < n_per_class; ++i)
        for (TaskLabel t : kAllTasks) {
            BenchmarkRecord r;
            r.id = std::string(to_string(t)) + "-" + std::to_string(i);
            r.task_label = t;
            out.x.append(r.id, pool(generate_synthetic_pair(r, cfg)));
            out.labels.push_back(t);
        }
    return out;
}

gbdt::Config small_gbdt() {
    gbdt::Config c;
    c.n_estimators = 40;
    c.max_depth = 3;
    return c;
}

}  // namespace

TEST_CASE("class balance weights") {
    const std::vector<std::uint8_t> a = {1, 1, 1, 0};
    const auto wa = class_balance_weights(a);
    CHECK(wa[0] == doctest::Approx(2.0 / 3.0));
    CHECK(wa[2] == doctest::Approx(2.0 / 3.0));
    CHECK(wa[3] == doctest::Approx(2.0));

    for (double w : class_balance_weights(std::vector<std::uint8_t>{0, 1, 0, 1})) CHECK(w == 1.0);

    std::vector<std::uint8_t> c(10, 1);
    c[0] = 0;
    const auto wc = class_balance_weights(c);
    CHECK(wc[1] == doctest::Approx(5.0 / 9.0));
    CHECK(wc[0] == doctest::Approx(5.0));
    double total_pos = 0;
    for (std::size_t i = 1; i < 10; ++i) total_pos += wc[i];
    CHECK(total_pos == doctest::Approx(wc[0]));

    CHECK_THROWS_AS(class_balance_weights(std::vector<std::uint8_t>{1, 1}), DataError);
    CHECK_THROWS_AS(class_balance_weights(std::vector<std::uint8_t>{0, 2}), DataError);
}

TEST_CASE("calibration picks the largest threshold that reaches the target recall") {
    const std::vector<double> s = {0.9, 0.7, 0.6, 0.5, 0.8};
    const std::vector<std::uint8_t> u = {1, 1, 1, 0, 0};
    const double th = calibrate_threshold(s, u, 0.95);
    CHECK(th == 0.6);
    std::size_t flagged = 0;
    for (double v : s) flagged += v >= th;
    CHECK(flagged == 4);

    CHECK(calibrate_threshold(std::vector<double>{0.3}, std::vector<std::uint8_t>{1}, 1.0) == 0.3);

    // Separable scores: the minimum unsafe score, which flags no safe row.
    const std::vector<double> sep = {0.1, 0.2, 0.6, 0.7, 0.95};
    const std::vector<std::uint8_t> usep = {0, 0, 1, 1, 1};
    CHECK(calibrate_threshold(sep, usep, 1.0) == 0.6);
}

TEST_CASE("calibration errors") {
    try {
        calibrate_threshold(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{0, 0}, 0.9);
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("no unsafe rows") != std::string::npos);
    }
    CHECK_THROWS_AS(calibrate_threshold(std::vector<double>{0.1}, std::vector<std::uint8_t>{1}, 0.0), ConfigError);
    CHECK_THROWS_AS(calibrate_threshold(std::vector<double>{0.1}, std::vector<std::uint8_t>{1}, 1.5), ConfigError);
    CHECK_THROWS_AS(calibrate_threshold(std::vector<double>{NAN}, std::vector<std::uint8_t>{1}, 0.5), DataError);
}

TEST_CASE("calibration agrees with candidate enumeration") {
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::uniform_int_distribution<int> coarse(0, 9);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + gen() % 40;
        std::vector<double> s(n);
        std::vector<std::uint8_t> u(n);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
            // Half the trials use coarse scores so ties are common.
            s[i] = trial % 2 ? ud(gen) : coarse(gen) / 10.0;
            u[i] = ud(gen) < 0.5;
            any = any || u[i];
        }
        if (!any) u[0] = 1;
        const double tau = std::vector<double>{0.5, 0.8, 0.9, 0.95, 1.0}[trial % 5];
        CHECK(calibrate_threshold(s, u, tau) == oracle::calibrate(s, u, tau));
    }
}

TEST_CASE("calibrated threshold is non-increasing in tau") {
    std::mt19937_64 gen(2);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::vector<double> s(200);
    std::vector<std::uint8_t> u(200);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = ud(gen);
        u[i] = i % 3 != 0;
    }
    double prev = 2.0;
    for (double tau = 0.05; tau <= 1.0; tau += 0.05) {
        const double th = calibrate_threshold(s, u, tau);
        CHECK(th <= prev);
        prev = th;
    }
}

TEST_CASE("composition") {
    const auto o = compose(0.8, 0.25, 0.5, 0.5);
    CHECK(o.p_align == doctest::Approx(0.2));
    CHECK(o.p_contradict == doctest::Approx(0.6));
    CHECK(o.p_gap == doctest::Approx(0.2));
    CHECK(o.flagged);
    CHECK(o.predicted_label == TaskLabel::EConflict);

    const auto g = compose(0.6, 0.7, 0.5, 0.5);
    CHECK(g.predicted_label == TaskLabel::EGap);

    const auto z = compose(0.0, 0.9, 0.5, 0.5);
    CHECK(z.p_align == 1.0);
    CHECK(z.p_gap == 0.0);
    CHECK(z.p_contradict == 0.0);
    CHECK_FALSE(z.flagged);
    CHECK(z.predicted_label == TaskLabel::EAlign);

    // Thresholds are inclusive.
    CHECK(compose(0.5, 0.5, 0.5, 0.5).predicted_label == TaskLabel::EGap);

    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const auto r = compose(ud(gen), ud(gen), 0.5, 0.5);
        CHECK(r.p_align >= 0.0);
        CHECK(r.p_contradict >= 0.0);
        CHECK(r.p_gap >= 0.0);
        CHECK(r.p_align + r.p_contradict + r.p_gap == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("two-stage training and calibration") {
    const auto train = synthetic_features(60, 11);
    const auto val = synthetic_features(30, 12);

    SUBCASE("stage 2 sees only unsafe rows") {
        const auto heads = train_ecrt(train.x, train.labels, small_gbdt());
        CHECK(heads.stage2_rows == 120);
    }

    SUBCASE("missing class is rejected") {
        FeatureMatrix x;
        std::vector<TaskLabel> l;
        for (std::size_t i = 0; i < train.x.rows(); ++i) {
            if (train.labels[i] == TaskLabel::EGap) continue;
            FeatureVector fv{train.x.layout_version, train.x.n_layers,
                             {train.x.row(i).begin(), train.x.row(i).end()}};
            x.append(train.x.record_ids[i], fv);
            l.push_back(train.labels[i]);
        }
        try {
            train_ecrt(x, l, small_gbdt());
            FAIL("expected an error");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("no rows of class e_gap") != std::string::npos);
        }
    }

    SUBCASE("training separates the synthetic classes") {
        auto model = calibrate_ecrt(train_ecrt(train.x, train.labels, small_gbdt()), val.x, val.labels, 0.95);
        CHECK(model.tau == 0.95);
        const auto out = triage_batch(model, train.x);
        std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const bool unsafe = train.labels[i] != TaskLabel::EAlign;
            const bool flag = out[i].p_unsafe >= 0.5;
            tp += unsafe && flag;
            fn += unsafe && !flag;
            tn += !unsafe && !flag;
            fp += !unsafe && flag;
        }
        const double ba = 0.5 * (double(tp) / double(tp + fn) + double(tn) / double(tn + fp));
        CHECK(ba >= 0.99);

        // Recall on VAL meets the target by construction.
        std::size_t vhit = 0, vpos = 0;
        const auto vout = triage_batch(model, val.x);
        for (std::size_t i = 0; i < vout.size(); ++i)
            if (val.labels[i] != TaskLabel::EAlign) {
                ++vpos;
                vhit += vout[i].flagged;
            }
        CHECK(double(vhit) / double(vpos) >= 0.95);

        // Inference leaves the frozen model untouched.
        const auto before = model;
        triage_batch(model, val.x);
        CHECK(model == before);

        const auto dir = fs::temp_directory_path() / "ecrt_test_triage";
        fs::remove_all(dir);
        save_triage_model(model, dir);
        const auto back = load_triage_model(dir);
        CHECK(back.theta1 == model.theta1);
        CHECK(back.stage1 == model.stage1);
        CHECK(back.stage2 == model.stage2);
        CHECK(back.n_layers == model.n_layers);

        FeatureVector wrong{kLayoutVersion, model.n_layers + 1, std::vector<double>(feature_dim(model.n_layers + 1))};
        CHECK_THROWS_AS(triage(model, wrong), DataError);
        FeatureVector wrong_version{kLayoutVersion + 1, model.n_layers,
                                    std::vector<double>(feature_dim(model.n_layers))};
        CHECK_THROWS_AS(triage(model, wrong_version), DataError);
    }
}

TEST_CASE("single-stage ablation") {
    const auto train = synthetic_features(60, 21);
    const auto val = synthetic_features(30, 22);
    auto m = train_single_stage(train.x, train.labels, small_gbdt());
    calibrate_single_stage(m, val.x, val.labels, 0.95);

    std::size_t correct = 0, vhit = 0, vpos = 0;
    for (std::size_t i = 0; i < train.x.rows(); ++i) {
        const auto s = single_stage_scores(m, train.x.row(i));
        CHECK(s[0] + s[1] + s[2] == doctest::Approx(1.0).epsilon(1e-12));
        correct += single_stage_argmax(s) == train.labels[i];
    }
    CHECK(double(correct) / double(train.x.rows()) >= 0.99);
    for (std::size_t i = 0; i < val.x.rows(); ++i) {
        if (val.labels[i] == TaskLabel::EAlign) continue;
        ++vpos;
        vhit += single_stage_decide(m, single_stage_scores(m, val.x.row(i))) != TaskLabel::EAlign;
    }
    CHECK(double(vhit) / double(vpos) >= 0.95);

    CHECK(single_stage_argmax({0.4, 0.4, 0.2}) == TaskLabel::EAlign);
    CHECK(single_stage_unsafe_score({0.25, 0.5, 0.25}) == 0.75);

    const auto dir = fs::temp_directory_path() / "ecrt_test_single";
    fs::remove_all(dir);
    save_single_stage_model(m, dir);
    const auto back = load_single_stage_model(dir);
    CHECK(back.theta1 == m.theta1);
    for (std::size_t c = 0; c < 3; ++c) CHECK(back.heads[c] == m.heads[c]);
}
