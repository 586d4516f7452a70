#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ttmg/masp.hpp"
#include "ttmg/msiw.hpp"
#include "ttmg/tensor.hpp"

namespace ttmg::seg {

// What a hooked encoder stage hands to the next stage.
enum class TrunkFeed { Projected, Normalized, Raw };

// Encoder-decoder with per-stage style projection hooks. Each encoder stage
// is conv3x3 -> relu -> avg2x2; stages listed in masp_stages run the
// projection and (in train mode) collect the stage losses. The decoder
// mirrors the encoder with nearest upsampling, no skip connections.
struct SegNetConfig {
    int in_channels = 3;
    std::vector<int> stage_channels{8, 16, 32, 32};
    std::vector<int> masp_stages{1, 2}; // 1-indexed encoder stages
    int num_modalities = 2;
    int k_m = 8;       // style bases per modality
    int kmeans_k = 3;  // clusters over variance values
    int kmeans_s = 1;  // first cluster index counted as high-variance
    double epsilon = 1e-6;
    bool hard_projection = false;
    bool seg_weight_map = true;
    // Ablation switches. The hooked stages can forward the projected map,
    // the instance-normalized map (whitening without the modality-aware
    // restyle), or the raw stage output with the projection machinery as a
    // pure loss branch; the content and whitening terms toggle independently.
    TrunkFeed trunk_feed = TrunkFeed::Projected;
    bool use_con = true;
    bool use_msiw = true;

    void validate() const; // ConfigError on violation

    bool operator==(const SegNetConfig&) const = default;
};

// Named parameter buffers with a stable iteration order.
class ParamStore {
public:
    void add(const std::string& name, PlainTensor value);
    PlainTensor& at(const std::string& name);
    const PlainTensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<std::string>& order() const { return order_; }
    size_t size() const { return order_.size(); }

private:
    std::vector<std::string> order_;
    std::map<std::string, PlainTensor> values_;
};

ParamStore init_params(const SegNetConfig& cfg, uint64_t seed);

// Parameters bound to one tape as leaves, so a batch of forwards shares the
// same gradient buffers.
class BoundParams {
public:
    BoundParams(Tape& t, const ParamStore& store, bool requires_grad);
    // Adopt already-bound leaves (gradient checking supplies its own).
    BoundParams(std::vector<std::string> names, std::vector<Tensor> tensors);
    const Tensor& at(const std::string& name) const;
    const std::vector<std::string>& order() const { return order_; }
    const Tensor& tensor(size_t i) const { return tensors_[i]; }
    size_t size() const { return order_.size(); }

private:
    std::vector<std::string> order_;
    std::vector<Tensor> tensors_;
    std::map<std::string, size_t> index_;
};

enum class Mode { Train, Infer };

struct ForwardOutput {
    Tensor logits;                         // (1,H,W)
    std::vector<int> stages;               // projection stages that ran
    std::vector<masp::Output> stage_outputs;
    std::vector<Tensor> stage_cls;         // train mode, one per stage
    std::vector<Tensor> stage_con;         // train mode + use_con
    std::vector<Tensor> stage_msiw;        // train mode + use_msiw
    std::vector<msiw::VarianceMask> stage_masks; // masks behind stage_msiw
    Mode mode = Mode::Infer;
};

// In train mode `label` is the sample's modality index (drives the
// classification loss) and kmeans_seed feeds the per-stage clustering.
// frozen_masks, when given, bypass the clustering and reuse the supplied
// per-stage masks; gradient checking needs the mask held constant.
ForwardOutput forward(Tape& t, const Tensor& image, const BoundParams& params,
                      const SegNetConfig& cfg, Mode mode, int label = -1,
                      uint64_t kmeans_seed = 0,
                      const std::vector<msiw::VarianceMask>* frozen_masks = nullptr);

struct SegLoss {
    Tensor total; // iou + bce
    Tensor iou;
    Tensor bce;
};

// Weighted IoU + weighted BCE on sigmoid(logits). Pixel weights are
// 1 + 5*|avgpool15x15(gt) - gt| when weight_map is set, else 1.
SegLoss seg_loss(Tape& t, const Tensor& logits, const std::vector<uint8_t>& gt,
                 bool weight_map = true);

// L_seg plus the mean over projection stages of (cls + con + whitening).
// Disabled terms contribute nothing. Train-mode outputs only.
Tensor total_loss(Tape& t, const ForwardOutput& out, const std::vector<uint8_t>& gt,
                  const SegNetConfig& cfg);

// sigmoid(logit) > 0.5, so a logit of exactly 0 maps to background.
std::vector<uint8_t> predict(const PlainTensor& image, const ParamStore& params,
                             const SegNetConfig& cfg);

// Checkpoint layout: "TTMG", format version u32 LE, parameter count u32,
// then per parameter: name length u16, name bytes, rank u8, dims u32 each,
// payload f64 LE.
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

} // namespace ttmg::seg
