#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ttmg/trainer.hpp"

using namespace ttmg;
using namespace ttmg::train;

namespace {

std::string temp_dir(const std::string& tag) {
    const auto dir = std::filesystem::temp_directory_path() / ("ttmg_train_" + tag);
    std::filesystem::remove_all(dir);
    return dir.string();
}

std::string mini_dataset(const std::string& tag) {
    const std::string dir = temp_dir(tag);
    synth::generate_dataset(synth::builtin_specs(), 4, 2, 16, 16, 1234, dir);
    return dir;
}

RunConfig mini_config(const std::string& dataset) {
    RunConfig cfg;
    cfg.seed = 5;
    cfg.dataset_dir = dataset;
    cfg.train_modalities = {0, 1};
    cfg.test_modalities = {0, 1, 2};
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.method = Method::Ttmg;
    cfg.deterministic = true;
    return cfg;
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("method names round trip and gate the right switches") {
    for (const Method m : {Method::Baseline, Method::Ttmg, Method::MaspOnly, Method::MsiwOnly,
                           Method::TtmgNoCon})
        CHECK(method_from_string(method_name(m)) == m);
    CHECK_THROWS_AS(method_from_string("resnet"), ConfigError);

    seg::SegNetConfig base;
    const auto baseline = apply_method(base, Method::Baseline);
    CHECK(baseline.masp_stages.empty());
    const auto ttmg_cfg = apply_method(base, Method::Ttmg);
    CHECK(ttmg_cfg.masp_in_path);
    CHECK(ttmg_cfg.use_con);
    CHECK(ttmg_cfg.use_msiw);
    const auto masp_only = apply_method(base, Method::MaspOnly);
    CHECK(masp_only.masp_in_path);
    CHECK(masp_only.use_con);
    CHECK_FALSE(masp_only.use_msiw);
    const auto msiw_only = apply_method(base, Method::MsiwOnly);
    CHECK_FALSE(msiw_only.masp_in_path);
    CHECK_FALSE(msiw_only.use_con);
    CHECK(msiw_only.use_msiw);
    CHECK_FALSE(msiw_only.masp_stages.empty());
    const auto no_con = apply_method(base, Method::TtmgNoCon);
    CHECK(no_con.masp_in_path);
    CHECK_FALSE(no_con.use_con);
    CHECK_FALSE(no_con.use_msiw);
}

TEST_CASE("cosine schedule hits its endpoints and midpoint") {
    const double lo = 1e-6, hi = 1e-4;
    CHECK(cosine_lr(hi, lo, 0, 31) == doctest::Approx(hi).epsilon(1e-15));
    CHECK(cosine_lr(hi, lo, 30, 31) == doctest::Approx(lo).epsilon(1e-15));
    CHECK(cosine_lr(hi, lo, 15, 31) == doctest::Approx((hi + lo) / 2.0).epsilon(1e-12));
    CHECK(cosine_lr(hi, lo, 0, 1) == hi);
    for (int t = 1; t < 31; ++t) CHECK(cosine_lr(hi, lo, t, 31) < cosine_lr(hi, lo, t - 1, 31));
}

TEST_CASE("adam matches a scalar reference implementation") {
    seg::ParamStore store;
    store.add("x", PlainTensor({1}, {2.0}));
    Adam adam(0.9, 0.999, 1e-8);

    double x_ref = 2.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        Tape tape;
        const seg::BoundParams bound(tape, store, true);
        const Tensor loss = tape.mul(bound.tensor(0), bound.tensor(0));
        tape.backward(loss);
        adam.step(store, bound, tape, 0.1);

        const double g = 2.0 * x_ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        x_ref -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(store.at("x").data[0] == doctest::Approx(x_ref).epsilon(1e-14));
    }
}

TEST_CASE("config validation") {
    RunConfig cfg = mini_config("somewhere");
    CHECK_NOTHROW(cfg.validate());
    RunConfig bad = cfg;
    bad.dataset_dir = "";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.train_modalities = {0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.train_modalities = {0, 0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.lr_end = bad.lr_start;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("worker count respects the environment and determinism") {
    unsetenv("TTMG_THREADS");
    CHECK(worker_count(false) == 1);
    setenv("TTMG_THREADS", "3", 1);
    CHECK(worker_count(false) == 3);
    CHECK(worker_count(true) == 1);
    setenv("TTMG_THREADS", "garbage", 1);
    CHECK(worker_count(false) == 1);
    unsetenv("TTMG_THREADS");
}

TEST_CASE("training runs end to end and reruns byte-identically") {
    const std::string dataset = mini_dataset("run");
    RunConfig cfg = mini_config(dataset);
    cfg.out_dir = temp_dir("run_out_a");
    const TrainResult a = train_run(cfg);

    REQUIRE(a.report.epochs.size() == 2);
    for (const EpochStats& e : a.report.epochs) {
        CHECK(std::isfinite(e.total));
        CHECK(std::isfinite(e.seg));
        REQUIRE(bool(e.cls));
        REQUIRE(bool(e.con));
        REQUIRE(bool(e.msiw));
    }
    // 3 test modalities x 2 images; modalities 0/1 were trained on
    REQUIRE(a.report.eval.rows.size() == 6);
    CHECK(a.report.eval.seen_count == 4);
    CHECK(a.report.eval.unseen_count == 2);
    for (const EvalRow& r : a.report.eval.rows) {
        CHECK(r.dsc >= 0.0);
        CHECK(r.dsc <= 1.0);
        CHECK(r.miou >= 0.0);
        CHECK(r.miou <= 1.0);
        CHECK(r.split == "test");
    }
    CHECK(a.report.wall_time_sec == 0.0);

    double seen_dsc = 0.0;
    int seen_n = 0;
    for (const EvalRow& r : a.report.eval.rows)
        if (r.seen) {
            seen_dsc += r.dsc;
            ++seen_n;
        }
    CHECK(a.report.eval.seen_dsc == doctest::Approx(seen_dsc / seen_n).epsilon(1e-15));

    RunConfig cfg_b = cfg;
    cfg_b.out_dir = temp_dir("run_out_b");
    const TrainResult b = train_run(cfg_b);
    CHECK(file_bytes(cfg.out_dir + "/checkpoint.bin") ==
          file_bytes(cfg_b.out_dir + "/checkpoint.bin"));
    RunReport ra = a.report, rb = b.report;
    ra.config.out_dir = rb.config.out_dir = "";
    CHECK(report_to_json(ra) == report_to_json(rb));

    const seg::ParamStore loaded = seg::load_checkpoint(cfg.out_dir + "/checkpoint.bin");
    for (const auto& name : a.params.order())
        CHECK(loaded.at(name).data == a.params.at(name).data);
}

TEST_CASE("baseline reports omit the stage losses") {
    const std::string dataset = mini_dataset("base");
    RunConfig cfg = mini_config(dataset);
    cfg.method = Method::Baseline;
    cfg.epochs = 1;
    const TrainResult r = train_run(cfg);
    REQUIRE(r.report.epochs.size() == 1);
    CHECK_FALSE(r.report.epochs[0].cls.has_value());
    CHECK_FALSE(r.report.epochs[0].con.has_value());
    CHECK_FALSE(r.report.epochs[0].msiw.has_value());
    const std::string js = report_to_json(r.report);
    CHECK(js.find("\"cls\"") == std::string::npos);
    CHECK(js.find("\"con\"") == std::string::npos);
    CHECK(js.find("\"msiw\"") == std::string::npos);
    CHECK_FALSE(r.params.has("masp1.cls_w"));
}

TEST_CASE("reports round trip through JSON") {
    const std::string dataset = mini_dataset("json");
    RunConfig cfg = mini_config(dataset);
    cfg.epochs = 1;
    cfg.method = Method::MsiwOnly;
    const TrainResult r = train_run(cfg);
    const std::string text = report_to_json(r.report);
    const RunReport back = report_from_json(text);
    CHECK(back == r.report);
    CHECK(report_to_json(back) == text);
    CHECK_THROWS_AS(report_from_json("{\"config\": 3}"), FormatError);
    CHECK_THROWS_AS(report_from_json("not json"), FormatError);
}

TEST_CASE("missing training modality raises ConfigError") {
    const std::string dataset = mini_dataset("missing");
    RunConfig cfg = mini_config(dataset);
    cfg.train_modalities = {0, 7};
    CHECK_THROWS_AS(train_run(cfg), ConfigError);
}

TEST_CASE("non-finite losses abort with NumericalError") {
    const std::string dataset = mini_dataset("nan");
    RunConfig cfg = mini_config(dataset);
    cfg.lr_start = std::numeric_limits<double>::infinity();
    cfg.epochs = 3;
    CHECK_THROWS_AS(train_run(cfg), NumericalError);
}

TEST_CASE("evaluate filters by split and modality") {
    const std::string dataset = mini_dataset("eval");
    const auto entries = synth::load_dataset(dataset);
    seg::SegNetConfig net = apply_method(seg::SegNetConfig{}, Method::Baseline);
    net.num_modalities = 2;
    const seg::ParamStore params = seg::init_params(net, 3);

    const EvalSummary none = evaluate(params, net, entries, {0, 1}, {}, "test");
    CHECK(none.rows.empty());
    CHECK(none.seen_dsc == 0.0);

    const EvalSummary test_split = evaluate(params, net, entries, {0, 1}, {2}, "test");
    CHECK(test_split.rows.size() == 2);
    CHECK(test_split.unseen_count == 2);
    CHECK(test_split.seen_count == 0);

    const EvalSummary train_split = evaluate(params, net, entries, {0, 1}, {0}, "train");
    CHECK(train_split.rows.size() == 4);
    for (const EvalRow& r : train_split.rows) CHECK(r.split == "train");

    const EvalSummary all_split = evaluate(params, net, entries, {0, 1}, {0}, "all");
    CHECK(all_split.rows.size() == 6);

    CHECK_THROWS_AS(evaluate(params, net, entries, {0, 1}, {0}, "validation"), ConfigError);

    // Worker partitioning must not change the row order or the scores.
    const EvalSummary serial = evaluate(params, net, entries, {0, 1}, {0, 1, 2, 3}, "all", 1);
    const EvalSummary parallel = evaluate(params, net, entries, {0, 1}, {0, 1, 2, 3}, "all", 4);
    CHECK(serial == parallel);
}

TEST_CASE("eval CSV lists one line per row plus the header") {
    const std::string dataset = mini_dataset("csv");
    const auto entries = synth::load_dataset(dataset);
    seg::SegNetConfig net = apply_method(seg::SegNetConfig{}, Method::Baseline);
    net.num_modalities = 2;
    const seg::ParamStore params = seg::init_params(net, 3);
    const EvalSummary summary = evaluate(params, net, entries, {0, 1}, {0, 2}, "test");

    const std::string path = temp_dir("csv_out") + ".csv";
    write_eval_csv(path, summary);
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "path,modality,split,seen,dsc,miou");
    size_t rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == summary.rows.size());

    const EvalSummary empty = evaluate(params, net, entries, {0, 1}, {}, "test");
    const std::string empty_path = temp_dir("csv_empty") + ".csv";
    write_eval_csv(empty_path, empty);
    std::ifstream ein(empty_path);
    REQUIRE(std::getline(ein, line));
    CHECK(line == "path,modality,split,seen,dsc,miou");
    CHECK_FALSE(std::getline(ein, line));
}
