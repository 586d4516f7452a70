#include "ttmg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ttmg/metrics.hpp"
#include "ttmg/rng.hpp"

namespace ttmg::train {

namespace {

constexpr const char* kVersion = "ttmg-0.1.0";
constexpr double kPi = 3.14159265358979323846;

using json = nlohmann::json;

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

json net_to_json(const seg::SegNetConfig& n) {
    return json{{"in_channels", n.in_channels},
                {"stage_channels", n.stage_channels},
                {"masp_stages", n.masp_stages},
                {"num_modalities", n.num_modalities},
                {"k_m", n.k_m},
                {"kmeans_k", n.kmeans_k},
                {"kmeans_s", n.kmeans_s},
                {"epsilon", n.epsilon},
                {"hard_projection", n.hard_projection},
                {"seg_weight_map", n.seg_weight_map},
                {"trunk_feed", trunk_feed_name(n.trunk_feed)},
                {"use_con", n.use_con},
                {"use_msiw", n.use_msiw}};
}

seg::SegNetConfig net_from_json(const json& j) {
    seg::SegNetConfig n;
    n.in_channels = j.at("in_channels").get<int>();
    n.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    n.masp_stages = j.at("masp_stages").get<std::vector<int>>();
    n.num_modalities = j.at("num_modalities").get<int>();
    n.k_m = j.at("k_m").get<int>();
    n.kmeans_k = j.at("kmeans_k").get<int>();
    n.kmeans_s = j.at("kmeans_s").get<int>();
    n.epsilon = j.at("epsilon").get<double>();
    n.hard_projection = j.at("hard_projection").get<bool>();
    n.seg_weight_map = j.at("seg_weight_map").get<bool>();
    n.trunk_feed = trunk_feed_from_string(j.at("trunk_feed").get<std::string>());
    n.use_con = j.at("use_con").get<bool>();
    n.use_msiw = j.at("use_msiw").get<bool>();
    return n;
}

} // namespace

Method method_from_string(const std::string& name) {
    if (name == "baseline") return Method::Baseline;
    if (name == "ttmg") return Method::Ttmg;
    if (name == "masp_only") return Method::MaspOnly;
    if (name == "msiw_only") return Method::MsiwOnly;
    if (name == "ttmg_no_con") return Method::TtmgNoCon;
    throw ConfigError("unknown method: " + name);
}

std::string method_name(Method m) {
    switch (m) {
    case Method::Baseline: return "baseline";
    case Method::Ttmg: return "ttmg";
    case Method::MaspOnly: return "masp_only";
    case Method::MsiwOnly: return "msiw_only";
    case Method::TtmgNoCon: return "ttmg_no_con";
    }
    throw ConfigError("unknown method enum value");
}

seg::SegNetConfig apply_method(seg::SegNetConfig net, Method m) {
    switch (m) {
    case Method::Baseline:
        net.masp_stages.clear();
        net.trunk_feed = seg::TrunkFeed::Raw;
        net.use_con = false;
        net.use_msiw = false;
        break;
    case Method::TtmgNoCon:
        net.trunk_feed = seg::TrunkFeed::Projected;
        net.use_con = false;
        net.use_msiw = false;
        break;
    case Method::MaspOnly:
        net.trunk_feed = seg::TrunkFeed::Projected;
        net.use_con = true;
        net.use_msiw = false;
        break;
    case Method::MsiwOnly:
        // Whitening without the modality-aware restyle: the trunk still gets
        // instance-normalized features (whitening presupposes normalization),
        // the projections exist only as covariance views for the loss.
        net.trunk_feed = seg::TrunkFeed::Normalized;
        net.use_con = false;
        net.use_msiw = true;
        break;
    case Method::Ttmg:
        net.trunk_feed = seg::TrunkFeed::Projected;
        net.use_con = true;
        net.use_msiw = true;
        break;
    }
    return net;
}

void RunConfig::validate() const {
    if (dataset_dir.empty()) throw ConfigError("dataset_dir must be set");
    if (train_modalities.size() < 2) throw ConfigError("need at least two training modalities");
    std::set<int> uniq(train_modalities.begin(), train_modalities.end());
    if (uniq.size() != train_modalities.size())
        throw ConfigError("duplicate training modality ids");
    if (!(lr_start > lr_end && lr_end > 0.0))
        throw ConfigError("learning rates must satisfy lr_start > lr_end > 0");
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0))
        throw ConfigError("adam betas must lie in (0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
}

double cosine_lr(double lr_start, double lr_end, int epoch, int epochs) {
    if (epochs <= 1) return lr_start;
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(kPi * t));
}

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(seg::ParamStore& params, const seg::BoundParams& bound, const Tape& tape,
                double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < bound.size(); ++i) {
        const std::string& name = bound.order()[i];
        const std::vector<double>& g = tape.grad(bound.tensor(i));
        std::vector<double>& value = params.at(name).data;
        std::vector<double>& m = m_[name];
        std::vector<double>& v = v_[name];
        if (m.empty()) m.assign(value.size(), 0.0);
        if (v.empty()) v.assign(value.size(), 0.0);
        for (size_t p = 0; p < value.size(); ++p) {
            m[p] = beta1_ * m[p] + (1.0 - beta1_) * g[p];
            v[p] = beta2_ * v[p] + (1.0 - beta2_) * g[p] * g[p];
            value[p] -= lr * (m[p] / bc1) / (std::sqrt(v[p] / bc2) + eps_);
        }
    }
}

int worker_count(bool deterministic) {
    if (deterministic) return 1;
    const char* env = std::getenv("TTMG_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n > 0 ? n : 1;
}

namespace {

struct ItemLoss {
    double total = 0.0, seg = 0.0, cls = 0.0, con = 0.0, msiw = 0.0;
};

double stage_mean(const std::vector<Tensor>& vs) {
    double sum = 0.0;
    for (const Tensor& v : vs) sum += v.data[0];
    return vs.empty() ? 0.0 : sum / static_cast<double>(vs.size());
}

} // namespace

TrainResult train_run(const RunConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    const std::vector<synth::DatasetEntry> entries = synth::load_dataset(cfg.dataset_dir);
    std::map<int, int> label_of;
    for (size_t i = 0; i < cfg.train_modalities.size(); ++i)
        label_of[cfg.train_modalities[i]] = static_cast<int>(i);
    std::vector<size_t> train_idx;
    std::map<int, int> counts;
    for (size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].split != "train") continue;
        const int mod = entries[i].sample.modality;
        if (!label_of.count(mod)) continue;
        train_idx.push_back(i);
        ++counts[mod];
    }
    for (int mod : cfg.train_modalities)
        if (counts[mod] == 0)
            throw ConfigError("modality " + std::to_string(mod) +
                              " has no training samples in the manifest");

    seg::SegNetConfig net = apply_method(cfg.net, cfg.method);
    net.num_modalities = static_cast<int>(cfg.train_modalities.size());
    seg::ParamStore params = seg::init_params(net, cfg.seed);
    Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    RunReport report;
    report.config = cfg;
    report.version = kVersion;

    const bool has_stages = !net.masp_stages.empty();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.lr_start, cfg.lr_end, epoch, cfg.epochs);
        std::vector<size_t> order = train_idx;
        Rng shuffle_rng(derive_seed(cfg.seed, 0x53484600ULL, static_cast<uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        ItemLoss epoch_sum;
        size_t items = 0;
        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
            const size_t bend = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
            Tape tape;
            const seg::BoundParams bound(tape, params, true);
            Tensor acc = tape.full({1}, 0.0);
            for (size_t ii = b; ii < bend; ++ii) {
                const size_t idx = order[ii];
                synth::Sample s = entries[idx].sample;
                if (cfg.augment) {
                    Rng arng(derive_seed(cfg.seed, 0xA46D0000ULL | static_cast<uint64_t>(epoch),
                                         static_cast<uint64_t>(idx)));
                    s = synth::augment(s, arng);
                }
                const Tensor x = tape.constant(s.image.shape, s.image.data);
                const seg::ForwardOutput out = seg::forward(
                    tape, x, bound, net, seg::Mode::Train, label_of.at(s.modality),
                    derive_seed(cfg.seed, 0x4B4D0000ULL, static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(idx)));
                // Same composition as total_loss, kept apart so the report
                // can carry the individual terms.
                const seg::SegLoss sl = seg::seg_loss(tape, out.logits, s.mask, net.seg_weight_map);
                Tensor item = sl.total;
                if (!out.stages.empty()) {
                    Tensor stage_acc = tape.full({1}, 0.0);
                    for (const Tensor& v : out.stage_cls) stage_acc = tape.add(stage_acc, v);
                    for (const Tensor& v : out.stage_con) stage_acc = tape.add(stage_acc, v);
                    for (const Tensor& v : out.stage_msiw) stage_acc = tape.add(stage_acc, v);
                    item = tape.add(
                        item, tape.mul_scalar(stage_acc, 1.0 / static_cast<double>(out.stages.size())));
                }
                acc = tape.add(acc, item);
                epoch_sum.total += item.data[0];
                epoch_sum.seg += sl.total.data[0];
                epoch_sum.cls += stage_mean(out.stage_cls);
                epoch_sum.con += stage_mean(out.stage_con);
                epoch_sum.msiw += stage_mean(out.stage_msiw);
                ++items;
            }
            const Tensor mean_loss =
                tape.mul_scalar(acc, 1.0 / static_cast<double>(bend - b));
            if (!std::isfinite(mean_loss.data[0]))
                throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                                     ", step " + std::to_string(b / cfg.batch_size));
            tape.backward(mean_loss);
            adam.step(params, bound, tape, lr);
        }

        EpochStats stats;
        const double n = static_cast<double>(items);
        stats.total = epoch_sum.total / n;
        stats.seg = epoch_sum.seg / n;
        if (has_stages) {
            stats.cls = epoch_sum.cls / n;
            if (net.use_con) stats.con = epoch_sum.con / n;
            if (net.use_msiw) stats.msiw = epoch_sum.msiw / n;
        }
        report.epochs.push_back(stats);

        if (!cfg.out_dir.empty()) {
            for (const auto& name : params.order())
                for (double v : params.at(name).data)
                    if (!std::isfinite(v))
                        throw NumericalError("non-finite parameter " + name + " after epoch " +
                                             std::to_string(epoch) + "; checkpoint not written");
            std::error_code ec;
            std::filesystem::create_directories(cfg.out_dir, ec);
            if (ec) throw IoError("cannot create " + cfg.out_dir);
            seg::save_checkpoint(cfg.out_dir + "/checkpoint.bin", params);
        }
    }

    report.eval = evaluate(params, net, entries, cfg.train_modalities, cfg.test_modalities,
                           "test", worker_count(cfg.deterministic));
    const auto t1 = std::chrono::steady_clock::now();
    report.wall_time_sec =
        cfg.deterministic ? 0.0 : std::chrono::duration<double>(t1 - t0).count();
    return TrainResult{std::move(params), std::move(report)};
}

EvalSummary evaluate(const seg::ParamStore& params, const seg::SegNetConfig& net,
                     const std::vector<synth::DatasetEntry>& entries,
                     const std::vector<int>& train_modalities,
                     const std::vector<int>& test_modalities, const std::string& split,
                     int workers) {
    if (split != "test" && split != "train" && split != "all")
        throw ConfigError("split must be test, train or all");
    const std::set<int> want(test_modalities.begin(), test_modalities.end());
    const std::set<int> seen(train_modalities.begin(), train_modalities.end());
    std::vector<const synth::DatasetEntry*> targets;
    for (const auto& e : entries)
        if ((split == "all" || e.split == split) && want.count(e.sample.modality))
            targets.push_back(&e);

    EvalSummary summary;
    summary.rows.resize(targets.size());
    const auto score = [&](size_t i) {
        const synth::DatasetEntry& e = *targets[i];
        const std::vector<uint8_t> pred = seg::predict(e.sample.image, params, net);
        const Confusion c = confusion(pred, e.sample.mask);
        EvalRow row;
        row.path = e.path;
        row.modality = e.sample.modality;
        row.split = e.split;
        row.seen = seen.count(e.sample.modality) != 0;
        row.dsc = dsc(c);
        row.miou = miou(c);
        summary.rows[i] = std::move(row);
    };
    const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(targets.size())));
    if (n_workers <= 1) {
        for (size_t i = 0; i < targets.size(); ++i) score(i);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < n_workers; ++w)
            pool.emplace_back([&, w] {
                for (size_t i = static_cast<size_t>(w); i < targets.size();
                     i += static_cast<size_t>(n_workers))
                    score(i);
            });
        for (auto& th : pool) th.join();
    }

    for (const EvalRow& row : summary.rows) {
        if (row.seen) {
            ++summary.seen_count;
            summary.seen_dsc += row.dsc;
            summary.seen_miou += row.miou;
        } else {
            ++summary.unseen_count;
            summary.unseen_dsc += row.dsc;
            summary.unseen_miou += row.miou;
        }
    }
    if (summary.seen_count > 0) {
        summary.seen_dsc /= summary.seen_count;
        summary.seen_miou /= summary.seen_count;
    }
    if (summary.unseen_count > 0) {
        summary.unseen_dsc /= summary.unseen_count;
        summary.unseen_miou /= summary.unseen_count;
    }
    return summary;
}

std::string report_to_json(const RunReport& report) {
    const RunConfig& c = report.config;
    json j;
    j["config"] = json{{"seed", c.seed},
                       {"dataset_dir", c.dataset_dir},
                       {"train_modalities", c.train_modalities},
                       {"test_modalities", c.test_modalities},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr_start", c.lr_start},
                       {"lr_end", c.lr_end},
                       {"adam",
                        json{{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}},
                       {"method", method_name(c.method)},
                       {"deterministic", c.deterministic},
                       {"augment", c.augment},
                       {"out_dir", c.out_dir},
                       {"net", net_to_json(c.net)}};
    j["epochs"] = json::array();
    for (const EpochStats& e : report.epochs) {
        json je{{"total", e.total}, {"seg", e.seg}};
        if (e.cls) je["cls"] = *e.cls;
        if (e.con) je["con"] = *e.con;
        if (e.msiw) je["msiw"] = *e.msiw;
        j["epochs"].push_back(std::move(je));
    }
    json rows = json::array();
    for (const EvalRow& r : report.eval.rows)
        rows.push_back(json{{"path", r.path},
                            {"modality", r.modality},
                            {"split", r.split},
                            {"seen", r.seen},
                            {"dsc", r.dsc},
                            {"miou", r.miou}});
    j["eval"] = json{{"rows", std::move(rows)},
                     {"seen_count", report.eval.seen_count},
                     {"unseen_count", report.eval.unseen_count},
                     {"seen_dsc", report.eval.seen_dsc},
                     {"seen_miou", report.eval.seen_miou},
                     {"unseen_dsc", report.eval.unseen_dsc},
                     {"unseen_miou", report.eval.unseen_miou}};
    j["wall_time_sec"] = report.wall_time_sec;
    j["version"] = report.version;
    return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        RunReport report;
        const json& jc = j.at("config");
        RunConfig& c = report.config;
        c.seed = jc.at("seed").get<uint64_t>();
        c.dataset_dir = jc.at("dataset_dir").get<std::string>();
        c.train_modalities = jc.at("train_modalities").get<std::vector<int>>();
        c.test_modalities = jc.at("test_modalities").get<std::vector<int>>();
        c.epochs = jc.at("epochs").get<int>();
        c.batch_size = jc.at("batch_size").get<int>();
        c.lr_start = jc.at("lr_start").get<double>();
        c.lr_end = jc.at("lr_end").get<double>();
        c.adam_beta1 = jc.at("adam").at("beta1").get<double>();
        c.adam_beta2 = jc.at("adam").at("beta2").get<double>();
        c.adam_eps = jc.at("adam").at("eps").get<double>();
        c.method = method_from_string(jc.at("method").get<std::string>());
        c.deterministic = jc.at("deterministic").get<bool>();
        c.augment = jc.at("augment").get<bool>();
        c.out_dir = jc.at("out_dir").get<std::string>();
        c.net = net_from_json(jc.at("net"));
        for (const json& je : j.at("epochs")) {
            EpochStats e;
            e.total = je.at("total").get<double>();
            e.seg = je.at("seg").get<double>();
            if (je.contains("cls")) e.cls = je.at("cls").get<double>();
            if (je.contains("con")) e.con = je.at("con").get<double>();
            if (je.contains("msiw")) e.msiw = je.at("msiw").get<double>();
            report.epochs.push_back(e);
        }
        const json& jv = j.at("eval");
        for (const json& jr : jv.at("rows")) {
            EvalRow r;
            r.path = jr.at("path").get<std::string>();
            r.modality = jr.at("modality").get<int>();
            r.split = jr.at("split").get<std::string>();
            r.seen = jr.at("seen").get<bool>();
            r.dsc = jr.at("dsc").get<double>();
            r.miou = jr.at("miou").get<double>();
            report.eval.rows.push_back(std::move(r));
        }
        report.eval.seen_count = jv.at("seen_count").get<int>();
        report.eval.unseen_count = jv.at("unseen_count").get<int>();
        report.eval.seen_dsc = jv.at("seen_dsc").get<double>();
        report.eval.seen_miou = jv.at("seen_miou").get<double>();
        report.eval.unseen_dsc = jv.at("unseen_dsc").get<double>();
        report.eval.unseen_miou = jv.at("unseen_miou").get<double>();
        report.wall_time_sec = j.at("wall_time_sec").get<double>();
        report.version = j.at("version").get<std::string>();
        return report;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad report JSON: ") + e.what());
    }
}

void write_eval_csv(const std::string& path, const EvalSummary& summary) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "path,modality,split,seen,dsc,miou\n";
    for (const EvalRow& r : summary.rows)
        out << r.path << "," << r.modality << "," << r.split << "," << (r.seen ? 1 : 0) << ","
            << format_double(r.dsc) << "," << format_double(r.miou) << "\n";
    if (!out) throw IoError("write failed for " + path);
}

} // namespace ttmg::train
