#include "ttmg/masp.hpp"

#include <algorithm>
#include <cmath>

namespace ttmg::masp {

namespace {

double plain_l2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// cosine with the norm product floored, so scaling either argument by c > 0
// changes nothing
Tensor cosine(Tape& t, const Tensor& a, const Tensor& b) {
    Tensor dot = t.reduce_all(ReduceOp::Sum, t.mul(a, b));
    Tensor na = t.reduce_all(ReduceOp::L2, a);
    Tensor nb = t.reduce_all(ReduceOp::L2, b);
    return t.div(dot, t.clamp_min(t.mul(na, nb), 1e-12));
}

} // namespace

Tensor classify(Tape& t, const Tensor& f, const Tensor& w, const Tensor& b) {
    if (f.shape.size() != 3) throw ShapeError("classify: feature map must be (C,H,W)");
    if (w.shape.size() != 2 || w.shape[0] != f.shape[0])
        throw ShapeError("classify: weight rows must match feature channels");
    int m = w.shape[1];
    if (b.shape.size() != 1 || b.shape[0] != m)
        throw ShapeError("classify: bias length must match modality count");
    Tensor gap = t.reshape(t.global_avg_pool(f), {1, f.shape[0]});
    Tensor logits = t.add(t.matmul(gap, w), b);
    return t.reshape(t.softmax(logits, 1), {m});
}

std::pair<Tensor, Tensor> mine_style(Tape& t, const Tensor& f) {
    if (f.shape.size() != 3) throw ShapeError("mine_style: feature map must be (C,H,W)");
    int c = f.shape[0];
    Tensor mu = t.reshape(t.reduce(ReduceOp::Mean, f, {1, 2}), {c});
    Tensor sigma = t.sqrt(t.reshape(t.reduce(ReduceOp::Var, f, {1, 2}), {c}));
    return {mu, sigma};
}

Tensor instance_normalize(Tape& t, const Tensor& f, const Tensor& mu, const Tensor& sigma,
                          double eps) {
    int c = f.shape[0];
    Tensor mu3 = t.reshape(mu, {c, 1, 1});
    Tensor sig3 = t.reshape(sigma, {c, 1, 1});
    return t.div(t.sub(f, mu3), t.add_scalar(sig3, eps));
}

std::pair<Tensor, Tensor> recalibrate(Tape& t, const Tensor& mu, const Tensor& sigma,
                                      const Tensor& mu_bases, const Tensor& sigma_bases) {
    if (mu_bases.shape.size() != 2 || sigma_bases.shape.size() != 2)
        throw ShapeError("recalibrate: bases must be (K,C)");
    int k = mu_bases.shape[0], c = mu_bases.shape[1];
    if (mu.shape != Shape{c} || sigma.shape != Shape{c} ||
        sigma_bases.shape != Shape{k, c})
        throw ShapeError("recalibrate: style/bases dimensions disagree");
    if (plain_l2(mu.data) == 0.0 || plain_l2(sigma.data) == 0.0)
        throw NumericalError("recalibrate: zero-norm style vector");

    std::vector<Tensor> sims;
    sims.reserve(k);
    for (int i = 0; i < k; ++i) {
        Tensor mb = t.index_select(mu_bases, i);
        Tensor sb = t.index_select(sigma_bases, i);
        if (plain_l2(mb.data) == 0.0 || plain_l2(sb.data) == 0.0)
            throw NumericalError("recalibrate: zero-norm style basis");
        sims.push_back(t.add(cosine(t, mu, mb), cosine(t, sigma, sb)));
    }
    Tensor weights = t.softmax(t.concat0(sims), 0);          // (K)
    Tensor wrow = t.reshape(weights, {1, k});
    Tensor mu_m = t.reshape(t.matmul(wrow, mu_bases), {c});
    Tensor sigma_m = t.reshape(t.matmul(wrow, sigma_bases), {c});
    return {mu_m, sigma_m};
}

std::pair<std::vector<Tensor>, Tensor> project(
    Tape& t, const Tensor& f_norm, const std::vector<std::pair<Tensor, Tensor>>& styles,
    const Tensor& probs, bool hard) {
    size_t m = styles.size();
    if (m == 0) throw ShapeError("project: no styles");
    if (probs.shape != Shape{static_cast<int>(m)})
        throw ShapeError("project: probs length must match style count");
    int c = f_norm.shape[0];

    std::vector<Tensor> f_modal;
    f_modal.reserve(m);
    for (const auto& [mu_m, sigma_m] : styles) {
        Tensor sig3 = t.reshape(t.clamp_min(sigma_m, 1e-6), {c, 1, 1});
        Tensor mu3 = t.reshape(mu_m, {c, 1, 1});
        f_modal.push_back(t.add(t.mul(f_norm, sig3), mu3));
    }

    Tensor f_masp;
    if (hard) {
        size_t best = 0;
        for (size_t i = 1; i < m; ++i)
            if (probs.data[i] > probs.data[best]) best = i;
        f_masp = f_modal[best];
    } else {
        for (size_t i = 0; i < m; ++i) {
            Tensor term = t.mul(f_modal[i], t.index_select(probs, static_cast<int>(i)));
            f_masp = i == 0 ? term : t.add(f_masp, term);
        }
    }
    return {std::move(f_modal), f_masp};
}

Tensor content_loss(Tape& t, const Tensor& f_norm, const std::vector<Tensor>& f_modal) {
    size_t m = f_modal.size();
    if (m == 0) throw ShapeError("content_loss: no modality maps");
    if (plain_l2(f_norm.data) == 0.0)
        throw NumericalError("content_loss: zero-norm normalized features");
    int64_t n = f_norm.numel();
    Tensor fn = t.reshape(f_norm, {static_cast<int>(n)});
    std::vector<Tensor> zs;
    zs.reserve(m);
    for (const auto& fm : f_modal) {
        if (plain_l2(fm.data) == 0.0)
            throw NumericalError("content_loss: zero-norm modality features");
        zs.push_back(cosine(t, fn, t.reshape(fm, {static_cast<int>(n)})));
    }
    Tensor sm = t.softmax(t.concat0(zs), 0);
    return t.mul_scalar(t.reduce_all(ReduceOp::Sum, t.log(sm)),
                        -1.0 / static_cast<double>(m));
}

Tensor cls_loss(Tape& t, const Tensor& probs, int label) {
    if (probs.shape.size() != 1) throw ShapeError("cls_loss: probs must be a vector");
    if (label < 0 || label >= probs.shape[0]) throw DomainError("cls_loss: label out of range");
    Tensor p = t.index_select(probs, label);
    return t.mul_scalar(t.log(t.add_scalar(p, 1e-12)), -1.0);
}

Output forward(Tape& t, const Tensor& f, const Tensor& w, const Tensor& b,
               const Tensor& mu_bases, const Tensor& sigma_bases, double eps, bool hard) {
    if (mu_bases.shape.size() != 3 || sigma_bases.shape != mu_bases.shape)
        throw ShapeError("forward: bases must be (M,K,C)");
    int m = w.shape.size() == 2 ? w.shape[1] : -1;
    if (mu_bases.shape[0] != m || mu_bases.shape[2] != f.shape[0])
        throw ShapeError("forward: bases disagree with classifier/features");

    Output out;
    out.probs = classify(t, f, w, b);
    std::tie(out.mu, out.sigma) = mine_style(t, f);
    out.f_norm = instance_normalize(t, f, out.mu, out.sigma, eps);

    std::vector<std::pair<Tensor, Tensor>> styles;
    styles.reserve(m);
    for (int i = 0; i < m; ++i)
        styles.push_back(recalibrate(t, out.mu, out.sigma, t.index_select(mu_bases, i),
                                     t.index_select(sigma_bases, i)));
    std::tie(out.f_modal, out.f_masp) = project(t, out.f_norm, styles, out.probs, hard);
    return out;
}

} // namespace ttmg::masp
