#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ecrt/benchmark.hpp"
#include "ecrt/error.hpp"
#include "ecrt/features.hpp"
#include "ecrt/gbdt.hpp"
#include "ecrt/metrics.hpp"
#include "ecrt/pipeline.hpp"
#include "ecrt/splits.hpp"
#include "ecrt/trace.hpp"
#include "ecrt/triage.hpp"

namespace py = pybind11;
using namespace ecrt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

gbdt::MatrixView matrix_view(const Array& x) {
    if (x.ndim() != 2) throw py::value_error("expected a 2-D feature array");
    return {std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
            static_cast<std::size_t>(x.shape(1))};
}

template <typename T>
std::span<const T> span_of(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), static_cast<std::size_t>(a.size())};
}

Array to_numpy(const std::vector<double>& v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::dict record_to_dict(const BenchmarkRecord& r) {
    py::dict d;
    d["id"] = r.id;
    d["evidence_id_code"] = r.evidence_id_code;
    d["question"] = r.question;
    d["options"] = std::vector<std::string>(r.options.begin(), r.options.end());
    d["context"] = r.context;
    d["evidence"] = r.evidence;
    d["gold_answer"] = r.gold_answer;
    d["task_label"] = std::string(to_string(r.task_label));
    return d;
}

BenchmarkRecord record_from_dict(const py::dict& d) {
    std::string line = py::module_::import("json").attr("dumps")(d).cast<std::string>();
    return parse_jsonl_line(line, "<python>");
}

gbdt::Config gbdt_config(std::size_t n_estimators, std::size_t max_depth, double learning_rate,
                         std::size_t min_samples_leaf, double l2_leaf_reg) {
    gbdt::Config c;
    c.n_estimators = n_estimators;
    c.max_depth = max_depth;
    c.learning_rate = learning_rate;
    c.min_samples_leaf = min_samples_leaf;
    c.l2_leaf_reg = l2_leaf_reg;
    return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Evidence-conditioned reliability triage core";

    auto base = py::register_exception<Error>(m, "EcrtError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    auto data = py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
    py::register_exception<TraceError>(m, "TraceError", data.ptr());

    m.attr("DEFER_OPTION") = std::string(kDeferOption);
    m.attr("LAYOUT_VERSION") = kLayoutVersion;

    // benchmark
    m.def(
        "build_benchmark",
        [](std::size_t total, std::array<double, 3> ratios, std::uint64_t seed, std::size_t evidence_templates) {
            BuilderConfig cfg;
            cfg.total = total;
            cfg.ratios = ratios;
            cfg.seed = seed;
            cfg.evidence_templates = evidence_templates;
            py::list out;
            for (const auto& r : build_benchmark(cfg).records) out.append(record_to_dict(r));
            return out;
        },
        py::arg("total") = 12522, py::arg("ratios") = std::array<double, 3>{0.092, 0.408, 0.500},
        py::arg("seed") = 7, py::arg("evidence_templates") = 0);
    m.def("class_counts", &class_counts, py::arg("total"), py::arg("ratios"));
    m.def(
        "compute_stats",
        [](const std::vector<py::dict>& recs) {
            std::vector<BenchmarkRecord> records;
            for (const auto& d : recs) records.push_back(record_from_dict(d));
            const auto st = compute_stats(records);
            py::dict out;
            out["total"] = st.total;
            for (TaskLabel t : kAllTasks) {
                const auto& c = st.per_class[task_index(t)];
                py::dict cd;
                cd["count"] = c.count;
                cd["ratio"] = c.ratio;
                cd["avg_question_len"] = c.avg_question_len;
                cd["avg_evidence_len"] = c.avg_evidence_len;
                out[py::str(std::string(to_string(t)))] = cd;
            }
            return out;
        },
        py::arg("records"));
    m.def("load_jsonl", [](const std::filesystem::path& p) {
        py::list out;
        for (const auto& r : load_jsonl(p)) out.append(record_to_dict(r));
        return out;
    });

    // splits
    m.def(
        "grouped_split",
        [](const std::vector<py::dict>& recs, std::array<double, 3> fractions, std::uint64_t seed) {
            std::vector<BenchmarkRecord> records;
            for (const auto& d : recs) records.push_back(record_from_dict(d));
            std::map<std::string, std::string> out;
            for (const auto& [id, p] : make_grouped_split(records, fractions, seed).assignment)
                out[id] = std::string(to_string(p));
            return out;
        },
        py::arg("records"), py::arg("fractions") = kDefaultFractions, py::arg("seed") = 0);

    // traces and features
    py::class_<PairedTrace>(m, "PairedTrace")
        .def_readonly("record_id", &PairedTrace::record_id)
        .def_readonly("n_tokens", &PairedTrace::n_tokens)
        .def_readonly("n_layers", &PairedTrace::n_layers)
        .def_readonly("support_size", &PairedTrace::support_size)
        .def_property_readonly("is_raw", [](const PairedTrace& t) { return t.tier == TraceTier::Raw; })
        .def_readonly("logprob_ctx", &PairedTrace::logprob_ctx)
        .def_readonly("logprob_noctx", &PairedTrace::logprob_noctx)
        .def_readonly("kl_layer", &PairedTrace::kl_layer)
        .def_readonly("delta_hidden_norm", &PairedTrace::delta_hidden_norm)
        .def_readonly("ctx_hidden_norm", &PairedTrace::ctx_hidden_norm)
        .def("__eq__", [](const PairedTrace& a, const PairedTrace& b) { return a == b; });

    m.def(
        "synthetic_trace",
        [](const py::dict& record, std::uint64_t seed, double noise, std::size_t n_layers) {
            SyntheticTraceConfig cfg;
            cfg.seed = seed;
            cfg.noise = noise;
            cfg.n_layers = n_layers;
            return generate_synthetic_pair(record_from_dict(record), cfg);
        },
        py::arg("record"), py::arg("seed") = 0, py::arg("noise") = 0.05, py::arg("n_layers") = 8);
    m.def(
        "make_raw_trace",
        [](std::string id, const Array& hidden_ctx, const Array& hidden_noctx, const std::vector<std::int32_t>& tokens,
           const std::vector<float>& logprob_ctx, const std::vector<float>& logprob_noctx, const Array& unembedding) {
            if (hidden_ctx.ndim() != 3 || hidden_noctx.ndim() != 3 || unembedding.ndim() != 2)
                throw py::value_error("hidden states must be (T, L, d) and the unembedding (d, V)");
            const auto L = static_cast<std::size_t>(hidden_ctx.shape(1));
            const auto d = static_cast<std::size_t>(hidden_ctx.shape(2));
            const auto V = static_cast<std::size_t>(unembedding.shape(1));
            ConditionPass ctx{tokens, logprob_ctx, {hidden_ctx.data(), hidden_ctx.data() + hidden_ctx.size()}};
            ConditionPass noctx{tokens, logprob_noctx,
                                {hidden_noctx.data(), hidden_noctx.data() + hidden_noctx.size()}};
            return make_raw_trace(std::move(id), L, d, V, std::move(ctx), std::move(noctx),
                                  {unembedding.data(), unembedding.data() + unembedding.size()});
        },
        py::arg("record_id"), py::arg("hidden_ctx"), py::arg("hidden_noctx"), py::arg("tokens"),
        py::arg("logprob_ctx"), py::arg("logprob_noctx"), py::arg("unembedding"));
    m.def("reduce_raw_trace", &reduce_raw_trace, py::arg("trace"), py::arg("support_size") = kDefaultSupportSize);
    m.def("write_trace", &write_trace, py::arg("trace"), py::arg("path"));
    m.def("read_trace", &read_trace, py::arg("path"));
    m.def("encode_trace", [](const PairedTrace& t) {
        const auto b = encode_trace(t);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
    });
    m.def("decode_trace", [](const py::bytes& b) {
        const std::string s = b;
        return decode_trace({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    });
    m.def("pool", [](const PairedTrace& t) { return to_numpy(pool(t).values); }, py::arg("trace"));
    m.def("feature_names", &feature_names, py::arg("n_layers"));
    m.def(
        "uncertainty_score",
        [](const PairedTrace& t, const std::string& method) {
            return uncertainty_score(t, parse_uncertainty_method(method)).value;
        },
        py::arg("trace"), py::arg("method"));

    // gbdt
    py::class_<gbdt::Model>(m, "GbdtModel")
        .def_readonly("n_features", &gbdt::Model::n_features)
        .def_readonly("base_score", &gbdt::Model::base_score)
        .def_property_readonly("n_trees", [](const gbdt::Model& mdl) { return mdl.trees.size(); })
        .def("predict_proba", [](const gbdt::Model& mdl, const Array& x) {
            return to_numpy(gbdt::predict_proba(mdl, matrix_view(x)));
        })
        .def("to_json", [](const gbdt::Model& mdl) { return gbdt::to_json(mdl); })
        .def_static("from_json", [](const std::string& s) { return gbdt::from_json(s); });
    m.def(
        "fit_gbdt",
        [](const Array& x, const ByteArray& y, std::optional<Array> w, std::size_t n_estimators, std::size_t max_depth,
           double learning_rate, std::size_t min_samples_leaf, double l2_leaf_reg) {
            const auto view = matrix_view(x);
            std::vector<double> weights(view.rows(), 1.0);
            if (w) weights.assign(w->data(), w->data() + w->size());
            py::gil_scoped_release release;
            return gbdt::fit(view, span_of(y), weights,
                             gbdt_config(n_estimators, max_depth, learning_rate, min_samples_leaf, l2_leaf_reg));
        },
        py::arg("x"), py::arg("y"), py::arg("sample_weight") = py::none(), py::arg("n_estimators") = 160,
        py::arg("max_depth") = 4, py::arg("learning_rate") = 0.1, py::arg("min_samples_leaf") = 5,
        py::arg("l2_leaf_reg") = 1.0);

    // triage
    m.def(
        "calibrate_threshold",
        [](const Array& scores, const ByteArray& unsafe, double tau) {
            return calibrate_threshold(span_of(scores), span_of(unsafe), tau);
        },
        py::arg("scores"), py::arg("unsafe"), py::arg("tau") = kDefaultTargetRecall);
    m.def(
        "compose",
        [](double p_unsafe, double p_gap, double theta1, double theta2) {
            const auto o = compose(p_unsafe, p_gap, theta1, theta2);
            py::dict d;
            d["p_align"] = o.p_align;
            d["p_contradict"] = o.p_contradict;
            d["p_gap"] = o.p_gap;
            d["flagged"] = o.flagged;
            d["label"] = std::string(to_string(o.predicted_label));
            return d;
        },
        py::arg("p_unsafe"), py::arg("p_gap_given_unsafe"), py::arg("theta1"), py::arg("theta2") = 0.5);

    // metrics
    m.def(
        "stage1_metrics",
        [](const ByteArray& flagged, const ByteArray& unsafe) {
            const auto s = stage1_metrics(span_of(flagged), span_of(unsafe));
            return py::dict(py::arg("u_recall") = s.u_recall, py::arg("flag_rate") = s.flag_rate,
                            py::arg("s1_ba") = s.s1_ba);
        },
        py::arg("flagged"), py::arg("unsafe"));
    m.def(
        "stage2_metrics",
        [](const ByteArray& pred_gap, const ByteArray& is_gap) {
            const auto s = stage2_metrics(span_of(pred_gap), span_of(is_gap));
            return py::dict(py::arg("gap_recall") = s.gap_recall,
                            py::arg("contradiction_recall") = s.contradiction_recall, py::arg("s2_ba") = s.s2_ba);
        },
        py::arg("predicted_gap"), py::arg("is_gap"));

    // pipeline
    m.def(
        "run_pipeline",
        [](const std::string& config_json, const std::filesystem::path& output_dir, bool force) {
            auto cfg = config_from_json(config_json);
            cfg.output_dir = output_dir;
            py::gil_scoped_release release;
            cmd_run(cfg, force);
        },
        py::arg("config_json"), py::arg("output_dir"), py::arg("force") = false);
    m.def("run_command", [](const std::string& command, const std::string& config_json,
                            const std::filesystem::path& output_dir, bool force) {
        auto cfg = config_from_json(config_json);
        cfg.output_dir = output_dir;
        py::gil_scoped_release release;
        if (command == "build") cmd_build(cfg);
        else if (command == "split") cmd_split(cfg);
        else if (command == "synth") cmd_synth(cfg);
        else if (command == "extract") cmd_extract(cfg);
        else if (command == "train") cmd_train(cfg);
        else if (command == "eval") cmd_eval(cfg, force);
        else if (command == "report") cmd_report(cfg);
        else throw ConfigError("unknown command '" + command + "'");
    }, py::arg("command"), py::arg("config_json"), py::arg("output_dir"), py::arg("force") = false);
}
