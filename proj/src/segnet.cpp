#include "ttmg/segnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "ttmg/rng.hpp"

namespace ttmg::seg {

namespace {

bool stages_sorted_unique_in_range(const std::vector<int>& stages, int max_stage) {
    for (size_t i = 0; i < stages.size(); ++i) {
        if (stages[i] < 1 || stages[i] > max_stage) return false;
        if (i > 0 && stages[i] <= stages[i - 1]) return false;
    }
    return true;
}

PlainTensor normal_init(Rng& rng, Shape shape, double stddev, double mean = 0.0) {
    PlainTensor t(std::move(shape));
    for (double& v : t.data) v = mean + stddev * rng.normal();
    return t;
}

// Pixel weights 1 + 5*|avgpool15x15(gt) - gt| via an integral image; the
// pool divides by the full 225-cell window (zero padding at the borders).
std::vector<double> boundary_weights(const std::vector<uint8_t>& gt, int h, int w) {
    std::vector<double> integral(static_cast<size_t>(h + 1) * (w + 1), 0.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            integral[static_cast<size_t>(i + 1) * (w + 1) + (j + 1)] =
                (gt[static_cast<size_t>(i) * w + j] ? 1.0 : 0.0) +
                integral[static_cast<size_t>(i) * (w + 1) + (j + 1)] +
                integral[static_cast<size_t>(i + 1) * (w + 1) + j] -
                integral[static_cast<size_t>(i) * (w + 1) + j];
    std::vector<double> weights(static_cast<size_t>(h) * w);
    const int r = 7;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const int i0 = std::max(0, i - r), i1 = std::min(h, i + r + 1);
            const int j0 = std::max(0, j - r), j1 = std::min(w, j + r + 1);
            const double sum = integral[static_cast<size_t>(i1) * (w + 1) + j1] -
                               integral[static_cast<size_t>(i0) * (w + 1) + j1] -
                               integral[static_cast<size_t>(i1) * (w + 1) + j0] +
                               integral[static_cast<size_t>(i0) * (w + 1) + j0];
            const double g = gt[static_cast<size_t>(i) * w + j] ? 1.0 : 0.0;
            weights[static_cast<size_t>(i) * w + j] = 1.0 + 5.0 * std::abs(sum / 225.0 - g);
        }
    }
    return weights;
}

void write_bytes(std::ofstream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u16(std::ofstream& out, uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>(v >> 8)};
    write_bytes(out, b, 2);
}

void write_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(out, b, 4);
}

void write_f64(std::ofstream& out, double d) {
    const uint64_t v = std::bit_cast<uint64_t>(d);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(out, b, 8);
}

void read_bytes(std::ifstream& in, void* p, size_t n, const std::string& path) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in) throw FormatError("truncated checkpoint " + path);
}

uint16_t read_u16(std::ifstream& in, const std::string& path) {
    unsigned char b[2];
    read_bytes(in, b, 2, path);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    read_bytes(in, b, 4, path);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

double read_f64(std::ifstream& in, const std::string& path) {
    unsigned char b[8];
    read_bytes(in, b, 8, path);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(v);
}

} // namespace

void SegNetConfig::validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (stage_channels.empty()) throw ConfigError("stage_channels must not be empty");
    for (int c : stage_channels)
        if (c < 1) throw ConfigError("stage channel counts must be positive");
    if (!stages_sorted_unique_in_range(masp_stages, static_cast<int>(stage_channels.size())))
        throw ConfigError("masp_stages must be sorted, unique and within 1..num_stages");
    if (num_modalities < 2) throw ConfigError("need at least two modalities");
    if (k_m < 1) throw ConfigError("k_m must be positive");
    if (kmeans_k < 1) throw ConfigError("kmeans_k must be positive");
    if (kmeans_s < 1) throw ConfigError("kmeans_s must be positive");
    if (epsilon <= 0.0) throw ConfigError("epsilon must be positive");
}

void ParamStore::add(const std::string& name, PlainTensor value) {
    if (values_.count(name)) throw ConfigError("duplicate parameter " + name);
    if (value.data.size() != static_cast<size_t>(shape_numel(value.shape)))
        throw ShapeError("parameter data does not match its shape: " + name);
    order_.push_back(name);
    values_.emplace(name, std::move(value));
}

PlainTensor& ParamStore::at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
}

const PlainTensor& ParamStore::at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
}

bool ParamStore::has(const std::string& name) const { return values_.count(name) != 0; }

ParamStore init_params(const SegNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x70617261));
    ParamStore store;
    const auto& ch = cfg.stage_channels;
    const int stages = static_cast<int>(ch.size());
    for (int i = 0; i < stages; ++i) {
        const int in = i == 0 ? cfg.in_channels : ch[i - 1];
        const std::string tag = "enc" + std::to_string(i + 1);
        store.add(tag + ".w", normal_init(rng, {ch[i], in, 3, 3}, std::sqrt(2.0 / (in * 9.0))));
        store.add(tag + ".b", PlainTensor({ch[i]}));
        if (std::find(cfg.masp_stages.begin(), cfg.masp_stages.end(), i + 1) !=
            cfg.masp_stages.end()) {
            const std::string mt = "masp" + std::to_string(i + 1);
            store.add(mt + ".cls_w", normal_init(rng, {ch[i], cfg.num_modalities}, 0.01));
            store.add(mt + ".cls_b", PlainTensor({cfg.num_modalities}));
            store.add(mt + ".mu_bank",
                      normal_init(rng, {cfg.num_modalities, cfg.k_m, ch[i]}, 0.1));
            store.add(mt + ".sigma_bank",
                      normal_init(rng, {cfg.num_modalities, cfg.k_m, ch[i]}, 0.1, 1.0));
        }
    }
    for (int j = stages - 1; j >= 0; --j) {
        const int out = j > 0 ? ch[j - 1] : ch[0];
        const std::string tag = "dec" + std::to_string(j + 1);
        store.add(tag + ".w", normal_init(rng, {out, ch[j], 3, 3}, std::sqrt(2.0 / (ch[j] * 9.0))));
        store.add(tag + ".b", PlainTensor({out}));
    }
    store.add("head.w", normal_init(rng, {1, ch[0], 3, 3}, std::sqrt(2.0 / (ch[0] * 9.0))));
    store.add("head.b", PlainTensor({1}));
    return store;
}

BoundParams::BoundParams(Tape& t, const ParamStore& store, bool requires_grad) {
    for (const std::string& name : store.order()) {
        const PlainTensor& p = store.at(name);
        index_[name] = tensors_.size();
        order_.push_back(name);
        tensors_.push_back(t.leaf(p.shape, p.data, requires_grad));
    }
}

BoundParams::BoundParams(std::vector<std::string> names, std::vector<Tensor> tensors)
    : order_(std::move(names)), tensors_(std::move(tensors)) {
    if (order_.size() != tensors_.size())
        throw ShapeError("bound parameter names and tensors disagree");
    for (size_t i = 0; i < order_.size(); ++i) index_[order_[i]] = i;
}

const Tensor& BoundParams::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return tensors_[it->second];
}

ForwardOutput forward(Tape& t, const Tensor& image, const BoundParams& params,
                      const SegNetConfig& cfg, Mode mode, int label, uint64_t kmeans_seed,
                      const std::vector<msiw::VarianceMask>* frozen_masks) {
    cfg.validate();
    const int stages = static_cast<int>(cfg.stage_channels.size());
    if (image.shape.size() != 3 || image.shape[0] != cfg.in_channels)
        throw ShapeError("image must be (" + std::to_string(cfg.in_channels) + ",H,W), got " +
                         shape_str(image.shape));
    const int down = 1 << stages;
    if (image.shape[1] % down != 0 || image.shape[2] % down != 0 || image.shape[1] < down ||
        image.shape[2] < down)
        throw ShapeError("spatial dims must be positive multiples of " + std::to_string(down));
    const bool train = mode == Mode::Train;
    if (train && (label < 0 || label >= cfg.num_modalities))
        throw DomainError("train mode needs a modality label in [0, M)");
    const bool want_msiw = train && cfg.use_msiw && !cfg.masp_stages.empty();
    if (frozen_masks && want_msiw && frozen_masks->size() != cfg.masp_stages.size())
        throw ConfigError("frozen mask count does not match the projection stages");

    ForwardOutput out;
    out.mode = mode;
    Tensor cur = image;
    for (int i = 0; i < stages; ++i) {
        const std::string tag = "enc" + std::to_string(i + 1);
        cur = t.avg_pool2x2(t.relu(t.conv2d(cur, params.at(tag + ".w"), params.at(tag + ".b"))));
        const bool hooked = std::find(cfg.masp_stages.begin(), cfg.masp_stages.end(), i + 1) !=
                            cfg.masp_stages.end();
        if (!hooked) continue;
        const std::string mt = "masp" + std::to_string(i + 1);
        masp::Output mo =
            masp::forward(t, cur, params.at(mt + ".cls_w"), params.at(mt + ".cls_b"),
                          params.at(mt + ".mu_bank"), params.at(mt + ".sigma_bank"),
                          cfg.epsilon, cfg.hard_projection);
        out.stages.push_back(i + 1);
        if (train) {
            out.stage_cls.push_back(masp::cls_loss(t, mo.probs, label));
            if (cfg.use_con)
                out.stage_con.push_back(masp::content_loss(t, mo.f_norm, mo.f_modal));
            if (cfg.use_msiw) {
                if (frozen_masks) {
                    const msiw::VarianceMask& mask = (*frozen_masks)[out.stages.size() - 1];
                    std::vector<Tensor> lambdas;
                    lambdas.push_back(msiw::covariance(t, cur, cfg.epsilon));
                    for (const Tensor& fm : mo.f_modal)
                        lambdas.push_back(msiw::covariance(t, fm, cfg.epsilon));
                    lambdas.push_back(msiw::covariance(t, mo.f_masp, cfg.epsilon));
                    out.stage_msiw.push_back(msiw::msiw_loss(t, lambdas, mask));
                    out.stage_masks.push_back(mask);
                } else {
                    msiw::ForwardResult r =
                        msiw::forward(t, cur, mo.f_modal, mo.f_masp, cfg.kmeans_k, cfg.kmeans_s,
                                      derive_seed(kmeans_seed, static_cast<uint64_t>(i + 1)),
                                      cfg.epsilon);
                    out.stage_msiw.push_back(r.loss);
                    out.stage_masks.push_back(std::move(r.mask));
                }
            }
        }
        if (cfg.trunk_feed == TrunkFeed::Projected) cur = mo.f_masp;
        else if (cfg.trunk_feed == TrunkFeed::Normalized) cur = mo.f_norm;
        out.stage_outputs.push_back(std::move(mo));
    }
    for (int j = stages - 1; j >= 0; --j) {
        const std::string tag = "dec" + std::to_string(j + 1);
        cur = t.relu(t.conv2d(t.upsample2x(cur), params.at(tag + ".w"), params.at(tag + ".b")));
    }
    out.logits = t.conv2d(cur, params.at("head.w"), params.at("head.b"));
    return out;
}

SegLoss seg_loss(Tape& t, const Tensor& logits, const std::vector<uint8_t>& gt,
                 bool weight_map) {
    if (logits.shape.size() != 3 || logits.shape[0] != 1)
        throw ShapeError("logits must be (1,H,W), got " + shape_str(logits.shape));
    const int h = logits.shape[1], w = logits.shape[2];
    if (gt.size() != static_cast<size_t>(h) * w)
        throw ShapeError("ground truth size does not match the logits");

    std::vector<double> gv(gt.size());
    for (size_t p = 0; p < gt.size(); ++p) gv[p] = gt[p] ? 1.0 : 0.0;
    const Tensor g = t.constant({1, h, w}, gv);
    const Tensor wmap = weight_map ? t.constant({1, h, w}, boundary_weights(gt, h, w))
                                   : t.full({1, h, w}, 1.0);

    const Tensor p = t.sigmoid(logits);
    const Tensor one = t.full({1, h, w}, 1.0);
    const Tensor log_p = t.log(t.clamp_min(p, 1e-12));
    const Tensor log_q = t.log(t.clamp_min(t.sub(one, p), 1e-12));
    const Tensor bce_map =
        t.mul_scalar(t.add(t.mul(g, log_p), t.mul(t.sub(one, g), log_q)), -1.0);
    const Tensor wsum = t.reduce_all(ReduceOp::Sum, wmap);
    const Tensor bce = t.div(t.reduce_all(ReduceOp::Sum, t.mul(wmap, bce_map)), wsum);

    const Tensor inter = t.reduce_all(ReduceOp::Sum, t.mul(wmap, t.mul(p, g)));
    const Tensor uni = t.reduce_all(
        ReduceOp::Sum, t.mul(wmap, t.sub(t.add(p, g), t.mul(p, g))));
    const Tensor iou = t.sub(t.full({1}, 1.0), t.div(inter, t.clamp_min(uni, 1e-12)));

    SegLoss loss;
    loss.iou = iou;
    loss.bce = bce;
    loss.total = t.add(iou, bce);
    return loss;
}

Tensor total_loss(Tape& t, const ForwardOutput& out, const std::vector<uint8_t>& gt,
                  const SegNetConfig& cfg) {
    if (out.mode != Mode::Train) throw StateError("total_loss needs a train-mode forward");
    Tensor loss = seg_loss(t, out.logits, gt, cfg.seg_weight_map).total;
    const size_t n_stages = out.stages.size();
    if (n_stages == 0) return loss;
    Tensor acc = t.full({1}, 0.0);
    for (const Tensor& v : out.stage_cls) acc = t.add(acc, v);
    for (const Tensor& v : out.stage_con) acc = t.add(acc, v);
    for (const Tensor& v : out.stage_msiw) acc = t.add(acc, v);
    return t.add(loss, t.mul_scalar(acc, 1.0 / static_cast<double>(n_stages)));
}

std::vector<uint8_t> predict(const PlainTensor& image, const ParamStore& params,
                             const SegNetConfig& cfg) {
    Tape t = Tape::inference();
    const BoundParams bound(t, params, false);
    const Tensor x = t.constant(image.shape, image.data);
    const ForwardOutput out = forward(t, x, bound, cfg, Mode::Infer);
    std::vector<uint8_t> mask(out.logits.data.size());
    for (size_t p = 0; p < mask.size(); ++p) mask[p] = out.logits.data[p] > 0.0 ? 1 : 0;
    return mask;
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    write_bytes(out, "TTMG", 4);
    write_u32(out, 1u);
    write_u32(out, static_cast<uint32_t>(params.size()));
    for (const std::string& name : params.order()) {
        const PlainTensor& p = params.at(name);
        if (name.size() > 0xffff) throw ConfigError("parameter name too long: " + name);
        write_u16(out, static_cast<uint16_t>(name.size()));
        write_bytes(out, name.data(), name.size());
        out.put(static_cast<char>(p.shape.size()));
        for (int d : p.shape) write_u32(out, static_cast<uint32_t>(d));
        for (double v : p.data) write_f64(out, v);
    }
    if (!out) throw IoError("write failed for " + path);
}

ParamStore load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    char magic[4];
    read_bytes(in, magic, 4, path);
    if (std::string(magic, 4) != "TTMG") throw FormatError("bad magic in " + path);
    const uint32_t version = read_u32(in, path);
    if (version != 1u) throw FormatError("unsupported checkpoint version in " + path);
    const uint32_t count = read_u32(in, path);
    ParamStore store;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = read_u16(in, path);
        std::string name(name_len, '\0');
        read_bytes(in, name.data(), name_len, path);
        const int rank = in.get();
        if (rank < 0 || rank > 8) throw FormatError("bad parameter rank in " + path);
        Shape shape(static_cast<size_t>(rank));
        int64_t numel = 1;
        for (int& d : shape) {
            const uint32_t v = read_u32(in, path);
            if (v == 0 || v > (1u << 24)) throw FormatError("bad dimension in " + path);
            d = static_cast<int>(v);
            numel *= d;
        }
        PlainTensor p;
        p.shape = std::move(shape);
        p.data.resize(static_cast<size_t>(numel));
        for (double& v : p.data) v = read_f64(in, path);
        store.add(name, std::move(p));
    }
    if (in.get() != std::ifstream::traits_type::eof())
        throw FormatError("trailing bytes in " + path);
    return store;
}

} // namespace ttmg::seg
