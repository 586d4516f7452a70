#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ttmg/segnet.hpp"
#include "ttmg/synthdata.hpp"

namespace ttmg::train {

// Ablation axis: which parts of the projection/whitening machinery run.
enum class Method { Baseline, Ttmg, MaspOnly, MsiwOnly, TtmgNoCon };

Method method_from_string(const std::string& name); // ConfigError on unknown
std::string method_name(Method m);

// Translate a method into the per-component switches on the net config.
// baseline strips the projection stages entirely; msiw_only keeps the
// projection machinery as a loss-only side branch off the trunk.
seg::SegNetConfig apply_method(seg::SegNetConfig net, Method m);

struct RunConfig {
    uint64_t seed = 1;
    std::string dataset_dir;
    std::vector<int> train_modalities; // the seen set; M = its size
    std::vector<int> test_modalities;  // evaluated after training (seen + unseen)
    int epochs = 30;
    int batch_size = 8;
    double lr_start = 1e-4;
    double lr_end = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    Method method = Method::Ttmg;
    seg::SegNetConfig net;
    bool deterministic = false; // serial execution, wall time pinned to 0
    bool augment = true;
    std::string out_dir; // checkpoint target; empty keeps everything in memory

    void validate() const; // ConfigError on violation

    bool operator==(const RunConfig&) const = default;
};

// Loss means over one epoch's steps; stage terms only exist when the
// method computes them.
struct EpochStats {
    double total = 0.0;
    double seg = 0.0;
    std::optional<double> cls;
    std::optional<double> con;
    std::optional<double> msiw;

    bool operator==(const EpochStats&) const = default;
};

struct EvalRow {
    std::string path;
    int modality = 0;
    std::string split;
    bool seen = false;
    double dsc = 0.0;
    double miou = 0.0;

    bool operator==(const EvalRow&) const = default;
};

struct EvalSummary {
    std::vector<EvalRow> rows;
    int seen_count = 0;
    int unseen_count = 0;
    double seen_dsc = 0.0; // group means; 0 when the group is empty
    double seen_miou = 0.0;
    double unseen_dsc = 0.0;
    double unseen_miou = 0.0;

    bool operator==(const EvalSummary&) const = default;
};

struct RunReport {
    RunConfig config;
    std::vector<EpochStats> epochs;
    EvalSummary eval;
    double wall_time_sec = 0.0;
    std::string version;

    bool operator==(const RunReport&) const = default;
};

// lr(t) = lr_end + (lr_start - lr_end)/2 * (1 + cos(pi * t / T)), T = epochs-1.
double cosine_lr(double lr_start, double lr_end, int epoch, int epochs);

// Decoupled first/second moment running averages with bias correction.
class Adam {
public:
    Adam(double beta1, double beta2, double eps);
    void step(seg::ParamStore& params, const seg::BoundParams& bound, const Tape& tape,
              double lr);

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// worker count for parallel sections: TTMG_THREADS env var, floor 1;
// deterministic mode forces 1
int worker_count(bool deterministic);

struct TrainResult {
    seg::ParamStore params;
    RunReport report;
};

TrainResult train_run(const RunConfig& cfg);

// Segment every test-split entry whose modality is listed, scoring DSC and
// mIoU per image; seen = modality in train_modalities.
EvalSummary evaluate(const seg::ParamStore& params, const seg::SegNetConfig& net,
                     const std::vector<synth::DatasetEntry>& entries,
                     const std::vector<int>& train_modalities,
                     const std::vector<int>& test_modalities,
                     const std::string& split = "test", int workers = 1);

std::string report_to_json(const RunReport& report);
RunReport report_from_json(const std::string& text); // FormatError on bad input

void write_eval_csv(const std::string& path, const EvalSummary& summary);

} // namespace ttmg::train
