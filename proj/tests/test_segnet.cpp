#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ttmg/rng.hpp"
#include "ttmg/segnet.hpp"

using namespace ttmg;
using namespace ttmg::seg;

namespace {

SegNetConfig micro_config() {
    SegNetConfig cfg;
    cfg.stage_channels = {4, 8};
    cfg.masp_stages = {1, 2};
    cfg.num_modalities = 2;
    cfg.k_m = 2;
    cfg.kmeans_k = 2;
    cfg.kmeans_s = 1;
    return cfg;
}

PlainTensor random_image(Rng& rng, int c, int h, int w) {
    PlainTensor img({c, h, w});
    for (double& v : img.data) v = rng.uniform();
    return img;
}

std::vector<uint8_t> random_mask(Rng& rng, int h, int w, double p) {
    std::vector<uint8_t> m(static_cast<size_t>(h) * w);
    for (auto& v : m) v = rng.uniform() < p ? 1 : 0;
    return m;
}

// Scalar re-implementation of the weighted losses, kept deliberately naive.
double seg_loss_ref(const std::vector<double>& logits, const std::vector<uint8_t>& gt, int h,
                    int w, bool weight_map) {
    std::vector<double> wv(gt.size(), 1.0);
    if (weight_map) {
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double pool = 0.0;
                for (int di = -7; di <= 7; ++di)
                    for (int dj = -7; dj <= 7; ++dj) {
                        const int si = i + di, sj = j + dj;
                        if (si >= 0 && si < h && sj >= 0 && sj < w)
                            pool += gt[static_cast<size_t>(si) * w + sj];
                    }
                pool /= 225.0;
                const double g = gt[static_cast<size_t>(i) * w + j];
                wv[static_cast<size_t>(i) * w + j] = 1.0 + 5.0 * std::abs(pool - g);
            }
    }
    double bce_num = 0.0, wsum = 0.0, inter = 0.0, uni = 0.0;
    for (size_t p = 0; p < gt.size(); ++p) {
        const double prob = 1.0 / (1.0 + std::exp(-logits[p]));
        const double g = gt[p];
        const double lp = std::log(std::max(prob, 1e-12));
        const double lq = std::log(std::max(1.0 - prob, 1e-12));
        bce_num += wv[p] * -(g * lp + (1.0 - g) * lq);
        wsum += wv[p];
        inter += wv[p] * prob * g;
        uni += wv[p] * (prob + g - prob * g);
    }
    return 1.0 - inter / std::max(uni, 1e-12) + bce_num / wsum;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("config validation rejects malformed setups") {
    CHECK_NOTHROW(SegNetConfig{}.validate());
    CHECK_NOTHROW(micro_config().validate());
    SegNetConfig bad = micro_config();
    bad.stage_channels = {};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.masp_stages = {0, 1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.masp_stages = {1, 3};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.masp_stages = {2, 1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.num_modalities = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.kmeans_s = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("init_params lays out every stage and is seed-deterministic") {
    const SegNetConfig cfg; // defaults: [8,16,32,32], stages {1,2}
    const ParamStore a = init_params(cfg, 5);
    const ParamStore b = init_params(cfg, 5);
    const ParamStore c = init_params(cfg, 6);
    CHECK(a.order() == b.order());
    CHECK(a.at("enc1.w").shape == Shape{8, 3, 3, 3});
    CHECK(a.at("enc2.w").shape == Shape{16, 8, 3, 3});
    CHECK(a.at("enc4.w").shape == Shape{32, 32, 3, 3});
    CHECK(a.at("masp1.cls_w").shape == Shape{8, 2});
    CHECK(a.at("masp2.mu_bank").shape == Shape{2, 8, 16});
    CHECK(a.at("dec4.w").shape == Shape{32, 32, 3, 3});
    CHECK(a.at("dec1.w").shape == Shape{8, 8, 3, 3});
    CHECK(a.at("head.w").shape == Shape{1, 8, 3, 3});
    CHECK_FALSE(a.has("masp3.cls_w"));
    CHECK(a.at("enc1.w").data == b.at("enc1.w").data);
    CHECK(a.at("enc1.w").data != c.at("enc1.w").data);
    for (const auto& name : a.order())
        for (double v : a.at(name).data) CHECK(std::isfinite(v));
}

TEST_CASE("forward produces full-resolution logits and obeys mode") {
    const SegNetConfig cfg;
    const ParamStore store = init_params(cfg, 11);
    Rng rng(3);
    const PlainTensor img = random_image(rng, 3, 32, 32);

    Tape train_tape;
    const BoundParams bound(train_tape, store, true);
    const Tensor x = train_tape.constant(img.shape, img.data);
    const ForwardOutput out = forward(train_tape, x, bound, cfg, Mode::Train, 1, 99);
    CHECK(out.logits.shape == Shape{1, 32, 32});
    CHECK(out.stages == std::vector<int>{1, 2});
    CHECK(out.stage_outputs.size() == 2);
    CHECK(out.stage_cls.size() == 2);
    CHECK(out.stage_con.size() == 2);
    CHECK(out.stage_msiw.size() == 2);
    CHECK(out.stage_masks.size() == 2);

    Tape infer_tape = Tape::inference();
    const BoundParams frozen(infer_tape, store, false);
    const Tensor xi = infer_tape.constant(img.shape, img.data);
    const ForwardOutput io = forward(infer_tape, xi, frozen, cfg, Mode::Infer);
    CHECK(io.stage_cls.empty());
    CHECK(io.stage_con.empty());
    CHECK(io.stage_msiw.empty());
    CHECK(io.stage_outputs.size() == 2);
    CHECK(infer_tape.op_count() == 0);

    const ForwardOutput io2 = forward(infer_tape, xi, frozen, cfg, Mode::Infer);
    CHECK(io.logits.data == io2.logits.data);

    CHECK_THROWS_AS(forward(train_tape, train_tape.constant({1, 32, 32}, std::vector<double>(1024, 0.0)),
                            bound, cfg, Mode::Infer),
                    ShapeError);
    CHECK_THROWS_AS(forward(train_tape, train_tape.constant({3, 24, 24}, std::vector<double>(1728, 0.0)),
                            bound, cfg, Mode::Infer),
                    ShapeError);
    CHECK_THROWS_AS(forward(train_tape, x, bound, cfg, Mode::Train, -1), DomainError);
    CHECK_THROWS_AS(forward(train_tape, x, bound, cfg, Mode::Train, 2), DomainError);
}

TEST_CASE("empty projection set reduces to a plain encoder-decoder") {
    SegNetConfig cfg;
    cfg.masp_stages = {};
    const ParamStore store = init_params(cfg, 21);
    CHECK_FALSE(store.has("masp1.cls_w"));
    Rng rng(4);
    const PlainTensor img = random_image(rng, 3, 16, 16);
    const auto gt = random_mask(rng, 16, 16, 0.3);

    Tape tape;
    const BoundParams bound(tape, store, true);
    const Tensor x = tape.constant(img.shape, img.data);
    const ForwardOutput out = forward(tape, x, bound, cfg, Mode::Train, 0);
    CHECK(out.stages.empty());
    CHECK(out.stage_cls.empty());
    const Tensor lt = total_loss(tape, out, gt, cfg);
    const Tensor ls = seg_loss(tape, out.logits, gt, cfg.seg_weight_map).total;
    CHECK(lt.data == ls.data);
}

TEST_CASE("forward matches the hand-chained module pipeline bitwise") {
    const SegNetConfig cfg = micro_config();
    const ParamStore store = init_params(cfg, 31);
    Rng rng(5);
    const PlainTensor img = random_image(rng, 3, 8, 8);
    const int label = 1;
    const uint64_t kseed = 123;

    Tape ta;
    const BoundParams pa(ta, store, true);
    const ForwardOutput out =
        forward(ta, ta.constant(img.shape, img.data), pa, cfg, Mode::Train, label, kseed);

    Tape tb;
    const BoundParams pb(tb, store, true);
    Tensor cur = tb.constant(img.shape, img.data);
    std::vector<Tensor> cls, con, msiw_losses;
    for (int l = 1; l <= 2; ++l) {
        const std::string e = "enc" + std::to_string(l), m = "masp" + std::to_string(l);
        cur = tb.avg_pool2x2(tb.relu(tb.conv2d(cur, pb.at(e + ".w"), pb.at(e + ".b"))));
        const masp::Output mo =
            masp::forward(tb, cur, pb.at(m + ".cls_w"), pb.at(m + ".cls_b"),
                          pb.at(m + ".mu_bank"), pb.at(m + ".sigma_bank"), cfg.epsilon, false);
        cls.push_back(masp::cls_loss(tb, mo.probs, label));
        con.push_back(masp::content_loss(tb, mo.f_norm, mo.f_modal));
        const msiw::ForwardResult r =
            msiw::forward(tb, cur, mo.f_modal, mo.f_masp, cfg.kmeans_k, cfg.kmeans_s,
                          derive_seed(kseed, static_cast<uint64_t>(l)), cfg.epsilon);
        msiw_losses.push_back(r.loss);
        cur = mo.f_masp;
    }
    cur = tb.relu(tb.conv2d(tb.upsample2x(cur), pb.at("dec2.w"), pb.at("dec2.b")));
    cur = tb.relu(tb.conv2d(tb.upsample2x(cur), pb.at("dec1.w"), pb.at("dec1.b")));
    const Tensor logits = tb.conv2d(cur, pb.at("head.w"), pb.at("head.b"));

    CHECK(out.logits.data == logits.data);
    for (int l = 0; l < 2; ++l) {
        CHECK(out.stage_cls[l].data == cls[l].data);
        CHECK(out.stage_con[l].data == con[l].data);
        CHECK(out.stage_msiw[l].data == msiw_losses[l].data);
    }
}

TEST_CASE("seg_loss analytic cases") {
    Rng rng(6);
    const int h = 8, w = 8;
    const auto gt = random_mask(rng, h, w, 0.4);

    Tape t;
    std::vector<double> sharp(static_cast<size_t>(h) * w);
    for (size_t p = 0; p < sharp.size(); ++p) sharp[p] = gt[p] ? 30.0 : -30.0;
    const SegLoss perfect = seg_loss(t, t.constant({1, h, w}, sharp), gt, true);
    CHECK(perfect.total.scalar() < 1e-6);

    // Uniform zero logits, half foreground, uniform weights: the BCE term
    // is exactly ln 2 and the IoU term is 1 - (N/4)/(3N/4) = 2/3.
    std::vector<uint8_t> half(static_cast<size_t>(h) * w, 0);
    for (size_t p = 0; p < half.size() / 2; ++p) half[p] = 1;
    const SegLoss uniform =
        seg_loss(t, t.constant({1, h, w}, std::vector<double>(half.size(), 0.0)), half, false);
    CHECK(uniform.bce.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(uniform.iou.scalar() == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    for (int trial = 0; trial < 10; ++trial) {
        const auto g4 = random_mask(rng, 4, 4, 0.5);
        std::vector<double> lv(16);
        for (double& v : lv) v = rng.normal() * 2.0;
        for (const bool wm : {false, true}) {
            const SegLoss loss = seg_loss(t, t.constant({1, 4, 4}, lv), g4, wm);
            CHECK(std::abs(loss.total.scalar() - seg_loss_ref(lv, g4, 4, 4, wm)) < 1e-10);
        }
    }

    CHECK_THROWS_AS(seg_loss(t, t.constant({2, 2, 2}, std::vector<double>(8, 0.0)),
                             std::vector<uint8_t>(4, 0), true),
                    ShapeError);
    CHECK_THROWS_AS(seg_loss(t, t.constant({1, 2, 2}, std::vector<double>(4, 0.0)),
                             std::vector<uint8_t>(5, 0), true),
                    ShapeError);
}

TEST_CASE("total_loss averages stage terms and rejects infer outputs") {
    Rng rng(7);
    const int h = 8, w = 8;
    const auto gt = random_mask(rng, h, w, 0.4);
    std::vector<double> lv(static_cast<size_t>(h) * w);
    for (double& v : lv) v = rng.normal();

    Tape t;
    ForwardOutput out;
    out.mode = Mode::Train;
    out.logits = t.constant({1, h, w}, lv);
    out.stages = {1, 2};
    out.stage_cls = {t.constant({1}, {0.2}), t.constant({1}, {0.4})};
    out.stage_con = {t.constant({1}, {0.3}), t.constant({1}, {0.1})};
    out.stage_msiw = {t.constant({1}, {0.1}), t.constant({1}, {0.1})};
    SegNetConfig cfg;
    const double seg = seg_loss(t, out.logits, gt, cfg.seg_weight_map).total.scalar();
    const double total = total_loss(t, out, gt, cfg).scalar();
    CHECK(total == doctest::Approx(seg + 0.6).epsilon(1e-12));

    out.mode = Mode::Infer;
    CHECK_THROWS_AS(total_loss(t, out, gt, cfg), StateError);
}

TEST_CASE("predict applies the strict threshold") {
    SegNetConfig cfg;
    cfg.masp_stages = {};
    ParamStore store = init_params(cfg, 41);
    for (const auto& name : store.order())
        for (double& v : store.at(name).data) v = 0.0;

    PlainTensor img({3, 16, 16});
    for (double& v : img.data) v = 0.5;
    // Zero weights give logits exactly 0 everywhere; the strict rule maps
    // the tie to background.
    auto mask = predict(img, store, cfg);
    for (uint8_t v : mask) CHECK(v == 0);
    store.at("head.b").data[0] = 30.0;
    mask = predict(img, store, cfg);
    for (uint8_t v : mask) CHECK(v == 1);
    store.at("head.b").data[0] = -30.0;
    mask = predict(img, store, cfg);
    for (uint8_t v : mask) CHECK(v == 0);
}

TEST_CASE("training on one batch drives the segmentation loss down") {
    SegNetConfig cfg;
    cfg.masp_stages = {};
    cfg.stage_channels = {4, 8};
    ParamStore store = init_params(cfg, 51);
    Rng rng(8);
    const PlainTensor img = random_image(rng, 3, 16, 16);
    std::vector<uint8_t> gt(256, 0);
    for (int i = 4; i < 12; ++i)
        for (int j = 4; j < 12; ++j) gt[static_cast<size_t>(i) * 16 + j] = 1;

    double first = 0.0, last = 0.0;
    for (int step = 0; step < 50; ++step) {
        Tape t;
        const BoundParams bound(t, store, true);
        const ForwardOutput out =
            forward(t, t.constant(img.shape, img.data), bound, cfg, Mode::Train, 0);
        const Tensor loss = total_loss(t, out, gt, cfg);
        if (step == 0) first = loss.scalar();
        last = loss.scalar();
        REQUIRE(std::isfinite(last));
        t.backward(loss);
        for (size_t i = 0; i < bound.size(); ++i) {
            const auto& g = t.grad(bound.tensor(i));
            auto& v = store.at(bound.order()[i]).data;
            for (size_t p = 0; p < v.size(); ++p) v[p] -= 1e-3 * g[p];
        }
    }
    CHECK(last < first);
}

TEST_CASE("checkpoints round trip bit-exactly") {
    const SegNetConfig cfg = micro_config();
    const ParamStore store = init_params(cfg, 61);
    const std::string path = temp_path("ttmg_ckpt_test.bin");
    save_checkpoint(path, store);
    const ParamStore loaded = load_checkpoint(path);
    REQUIRE(loaded.order() == store.order());
    for (const auto& name : store.order()) {
        CHECK(loaded.at(name).shape == store.at(name).shape);
        CHECK(loaded.at(name).data == store.at(name).data);
    }

    CHECK_THROWS_AS(load_checkpoint(temp_path("ttmg_ckpt_missing.bin")), IoError);

    const std::string bad_magic = temp_path("ttmg_ckpt_magic.bin");
    std::ofstream(bad_magic, std::ios::binary) << "NOPE" << std::string(8, '\0');
    CHECK_THROWS_AS(load_checkpoint(bad_magic), FormatError);

    // Bump the version byte: readers must refuse rather than misparse.
    std::vector<char> bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    bytes[4] = 2;
    const std::string bad_version = temp_path("ttmg_ckpt_version.bin");
    std::ofstream(bad_version, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(bad_version), FormatError);

    const std::string truncated = temp_path("ttmg_ckpt_trunc.bin");
    std::ofstream(truncated, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(truncated), FormatError);

    const std::string trailing = temp_path("ttmg_ckpt_trail.bin");
    bytes[4] = 1;
    bytes.push_back('x');
    std::ofstream(trailing, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(trailing), FormatError);
}

TEST_CASE("gradient check covers the whole training objective") {
    const SegNetConfig cfg = micro_config();
    const ParamStore store = init_params(cfg, 71);
    Rng rng(9);
    const PlainTensor img = random_image(rng, 3, 8, 8);
    const auto gt = random_mask(rng, 8, 8, 0.4);
    const int label = 0;
    const uint64_t kseed = 7;

    // The clustering output is data-dependent and therefore discontinuous;
    // the check runs against masks captured from the unperturbed forward.
    std::vector<msiw::VarianceMask> masks;
    {
        Tape t;
        const BoundParams bound(t, store, true);
        const ForwardOutput out =
            forward(t, t.constant(img.shape, img.data), bound, cfg, Mode::Train, label, kseed);
        masks = out.stage_masks;
        REQUIRE(masks.size() == 2);
    }

    std::vector<PlainTensor> inputs;
    std::vector<std::string> names;
    for (const auto& name : store.order()) {
        names.push_back(name);
        inputs.push_back(store.at(name));
    }
    const double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& xs) {
            const BoundParams bound(names, xs);
            const ForwardOutput out = forward(t, t.constant(img.shape, img.data), bound, cfg,
                                              Mode::Train, label, kseed, &masks);
            return total_loss(t, out, gt, cfg);
        },
        inputs);
    CHECK(err < 1e-6);
}
