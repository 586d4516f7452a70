#include "ttmg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace ttmg {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

double Tensor::scalar() const {
    if (numel() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(shape));
    return data[0];
}

namespace {

void validate_shape(const Shape& s) {
    for (int d : s)
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
}

#ifndef NDEBUG
void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericalError(std::string("non-finite value produced by ") + op);
}
#define TTMG_CHECK_FINITE(v, op) check_finite(v, op)
#else
#define TTMG_CHECK_FINITE(v, op) ((void)(v), (void)(op))
#endif

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int da = i < r - ra ? 1 : a[i - (r - ra)];
        int db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// strides of `in` laid out against the (right-aligned) out shape; 0 where
// the input dimension is broadcast
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    auto ist = row_major_strides(in);
    size_t r = out.size(), ri = in.size();
    std::vector<int64_t> st(r, 0);
    for (size_t i = 0; i < ri; ++i) {
        size_t oi = r - ri + i;
        st[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : ist[i];
    }
    return st;
}

// Walks every element of `out`, calling f(io, ia, ib) with flat indices into
// out, a, b respectively.
template <class F>
void broadcast_walk(const Shape& os, const Shape& as, const Shape& bs, F&& f) {
    int64_t n = shape_numel(os);
    size_t r = os.size();
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    auto sa = broadcast_strides(as, os);
    auto sb = broadcast_strides(bs, os);
    std::vector<int> coord(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t io = 0; io < n; ++io) {
        f(io, ia, ib);
        for (size_t d = r; d-- > 0;) {
            ++coord[d];
            ia += sa[d];
            ib += sb[d];
            if (coord[d] < os[d]) break;
            coord[d] = 0;
            ia -= sa[d] * os[d];
            ib -= sb[d] * os[d];
        }
    }
}

} // namespace

int Tape::new_node(const Shape& shape, bool is_leaf, bool requires_grad) {
    nodes_.push_back(NodeInfo{shape, is_leaf, requires_grad});
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("leaf: data length does not match shape " + shape_str(shape));
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(data);
    t.requires_grad = requires_grad && recording_;
    t.node = t.requires_grad ? new_node(t.shape, true, true) : -1;
    return t;
}

Tensor Tape::constant(Shape shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), false);
}

Tensor Tape::full(Shape shape, double value) {
    validate_shape(shape);
    std::vector<double> d(shape_numel(shape), value);
    return constant(std::move(shape), std::move(d));
}

Tensor Tape::make_result(Shape shape, std::vector<double> data,
                         const std::vector<int>& input_nodes, BackwardFn back) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(data);
    bool any_input = false;
    for (int n : input_nodes)
        if (n >= 0) any_input = true;
    if (recording_ && any_input) {
        t.node = new_node(t.shape, false, false);
        OpRecord op;
        op.out = t.node;
        for (int n : input_nodes)
            if (n >= 0) op.ins.push_back(n);
        op.back = std::move(back);
        ops_.push_back(std::move(op));
    }
    return t;
}

Tensor Tape::record_custom(Shape out_shape, std::vector<double> out_data,
                           const std::vector<int>& input_nodes, BackwardFn back) {
    validate_shape(out_shape);
    if (shape_numel(out_shape) != static_cast<int64_t>(out_data.size()))
        throw ShapeError("record_custom: data/shape mismatch");
    return make_result(std::move(out_shape), std::move(out_data), input_nodes, std::move(back));
}

// ---------------------------------------------------------------------------
// elementwise

namespace {
enum class BinKind { Add, Sub, Mul, Div };
}

static Tensor binary_op(Tape& t, const Tensor& a, const Tensor& b, BinKind kind,
                        const char* name) {
    Shape os = broadcast_shape(a.shape, b.shape);
    std::vector<double> out(shape_numel(os));
    bool flat = shape_eq(a.shape, b.shape) && shape_eq(a.shape, os);
    const auto& ad = a.data;
    const auto& bd = b.data;
    if (flat) {
        int64_t n = static_cast<int64_t>(out.size());
        switch (kind) {
            case BinKind::Add: for (int64_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i]; break;
            case BinKind::Sub: for (int64_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i]; break;
            case BinKind::Mul: for (int64_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i]; break;
            case BinKind::Div: for (int64_t i = 0; i < n; ++i) out[i] = ad[i] / bd[i]; break;
        }
    } else {
        broadcast_walk(os, a.shape, b.shape, [&](int64_t io, int64_t ia, int64_t ib) {
            switch (kind) {
                case BinKind::Add: out[io] = ad[ia] + bd[ib]; break;
                case BinKind::Sub: out[io] = ad[ia] - bd[ib]; break;
                case BinKind::Mul: out[io] = ad[ia] * bd[ib]; break;
                case BinKind::Div: out[io] = ad[ia] / bd[ib]; break;
            }
        });
    }
    TTMG_CHECK_FINITE(out, name);

    int an = a.node, bn = b.node;
    Shape as = a.shape, bs = b.shape;
    std::vector<double> acap, bcap;
    if (kind == BinKind::Mul || kind == BinKind::Div) {
        acap = a.data;
        bcap = b.data;
    }
    return t.record_custom(
        os, std::move(out), {an, bn},
        [kind, os, as, bs, an, bn, acap = std::move(acap),
         bcap = std::move(bcap)](Tape& tp, const std::vector<double>& g) {
            double* ga = an >= 0 ? tp.grad_buf(an).data() : nullptr;
            double* gb = bn >= 0 ? tp.grad_buf(bn).data() : nullptr;
            broadcast_walk(os, as, bs, [&](int64_t io, int64_t ia, int64_t ib) {
                double gv = g[io];
                switch (kind) {
                    case BinKind::Add:
                        if (ga) ga[ia] += gv;
                        if (gb) gb[ib] += gv;
                        break;
                    case BinKind::Sub:
                        if (ga) ga[ia] += gv;
                        if (gb) gb[ib] -= gv;
                        break;
                    case BinKind::Mul:
                        if (ga) ga[ia] += gv * bcap[ib];
                        if (gb) gb[ib] += gv * acap[ia];
                        break;
                    case BinKind::Div:
                        if (ga) ga[ia] += gv / bcap[ib];
                        if (gb) gb[ib] -= gv * acap[ia] / (bcap[ib] * bcap[ib]);
                        break;
                }
            });
        });
}

Tensor Tape::add(const Tensor& a, const Tensor& b) { return binary_op(*this, a, b, BinKind::Add, "add"); }
Tensor Tape::sub(const Tensor& a, const Tensor& b) { return binary_op(*this, a, b, BinKind::Sub, "sub"); }
Tensor Tape::mul(const Tensor& a, const Tensor& b) { return binary_op(*this, a, b, BinKind::Mul, "mul"); }
Tensor Tape::div(const Tensor& a, const Tensor& b) { return binary_op(*this, a, b, BinKind::Div, "div"); }

namespace {
// unary op: out = f(x), backward factor df(x_i, y_i)
template <class FwdF, class BwdF>
Tensor unary_op(Tape& t, const Tensor& x, const char* name, FwdF&& fwd, BwdF&& bwd_factor,
                bool capture_out) {
    std::vector<double> out(x.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.data[i]);
    TTMG_CHECK_FINITE(out, name);
    int xn = x.node;
    std::vector<double> xcap = x.data;
    std::vector<double> ycap;
    if (capture_out) ycap = out;
    auto bf = bwd_factor;
    return t.record_custom(x.shape, std::move(out), {xn},
                           [xn, xcap = std::move(xcap), ycap = std::move(ycap), bf](
                               Tape& tp, const std::vector<double>& g) {
                               auto& gx = tp.grad_buf(xn);
                               for (size_t i = 0; i < g.size(); ++i)
                                   gx[i] += g[i] * bf(xcap[i], ycap.empty() ? 0.0 : ycap[i]);
                           });
}
} // namespace

Tensor Tape::exp(const Tensor& x) {
    return unary_op(*this, x, "exp", [](double v) { return std::exp(v); },
                    [](double, double y) { return y; }, true);
}

Tensor Tape::log(const Tensor& x) {
    for (double v : x.data)
        if (v <= 0.0) throw DomainError("log of non-positive value");
    return unary_op(*this, x, "log", [](double v) { return std::log(v); },
                    [](double xv, double) { return 1.0 / xv; }, false);
}

Tensor Tape::relu(const Tensor& x) {
    return unary_op(*this, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; }, false);
}

Tensor Tape::sigmoid(const Tensor& x) {
    auto sig = [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
    };
    return unary_op(*this, x, "sigmoid", sig,
                    [](double, double y) { return y * (1.0 - y); }, true);
}

Tensor Tape::abs(const Tensor& x) {
    return unary_op(*this, x, "abs", [](double v) { return std::fabs(v); },
                    [](double xv, double) { return xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0); },
                    false);
}

Tensor Tape::sqrt(const Tensor& x) {
    for (double v : x.data)
        if (v < 0.0) throw DomainError("sqrt of negative value");
    // derivative guard keeps var->std chains finite when a channel is constant
    return unary_op(*this, x, "sqrt", [](double v) { return std::sqrt(v); },
                    [](double, double y) { return 0.5 / std::max(y, 1e-12); }, true);
}

Tensor Tape::clamp_min(const Tensor& x, double floor) {
    return unary_op(*this, x, "clamp_min",
                    [floor](double v) { return v < floor ? floor : v; },
                    [floor](double xv, double) { return xv >= floor ? 1.0 : 0.0; }, false);
}

Tensor Tape::add_scalar(const Tensor& x, double c) {
    return unary_op(*this, x, "add_scalar", [c](double v) { return v + c; },
                    [](double, double) { return 1.0; }, false);
}

Tensor Tape::mul_scalar(const Tensor& x, double c) {
    return unary_op(*this, x, "mul_scalar", [c](double v) { return v * c; },
                    [c](double, double) { return c; }, false);
}

Tensor Tape::elementwise(EwOp op, const Tensor& a, const Tensor* b) {
    auto need = [&](const char* n) {
        if (!b) throw ShapeError(std::string("elementwise ") + n + " requires two operands");
        return *b;
    };
    switch (op) {
        case EwOp::Add: return add(a, need("add"));
        case EwOp::Sub: return sub(a, need("sub"));
        case EwOp::Mul: return mul(a, need("mul"));
        case EwOp::Div: return div(a, need("div"));
        case EwOp::Exp: return exp(a);
        case EwOp::Log: return log(a);
        case EwOp::Relu: return relu(a);
        case EwOp::Sigmoid: return sigmoid(a);
        case EwOp::Abs: return abs(a);
    }
    throw ConfigError("unknown elementwise op");
}

// ---------------------------------------------------------------------------
// matmul

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2)
        throw ShapeError("matmul requires 2-D operands");
    int M = a.shape[0], K = a.shape[1], K2 = b.shape[0], N = b.shape[1];
    if (K != K2)
        throw ShapeError("matmul inner dimensions " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    std::vector<double> out(static_cast<size_t>(M) * N, 0.0);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            double av = a.data[static_cast<size_t>(i) * K + k];
            const double* brow = &b.data[static_cast<size_t>(k) * N];
            double* orow = &out[static_cast<size_t>(i) * N];
            for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    TTMG_CHECK_FINITE(out, "matmul");

    int an = a.node, bn = b.node;
    std::vector<double> acap = a.data, bcap = b.data;
    return record_custom(
        {M, N}, std::move(out), {an, bn},
        [=, acap = std::move(acap), bcap = std::move(bcap)](Tape& tp,
                                                            const std::vector<double>& g) {
            if (an >= 0) {
                auto& ga = tp.grad_buf(an); // dA = dC * B^T
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        const double* grow = &g[static_cast<size_t>(i) * N];
                        const double* brow = &bcap[static_cast<size_t>(k) * N];
                        double s = 0.0;
                        for (int j = 0; j < N; ++j) s += grow[j] * brow[j];
                        ga[static_cast<size_t>(i) * K + k] += s;
                    }
            }
            if (bn >= 0) {
                auto& gb = tp.grad_buf(bn); // dB = A^T * dC
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        double av = acap[static_cast<size_t>(i) * K + k];
                        const double* grow = &g[static_cast<size_t>(i) * N];
                        double* gbrow = &gb[static_cast<size_t>(k) * N];
                        for (int j = 0; j < N; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d: 3x3 cross-correlation, stride 1, zero pad 1

namespace {

// y[i, :] += correlate(x row si, kernel row [k0 k1 k2])
inline void corr_row(double* y, const double* x, int w, double k0, double k1, double k2) {
    if (w == 1) {
        y[0] += k1 * x[0];
        return;
    }
    y[0] += k1 * x[0] + k2 * x[1];
    for (int j = 1; j < w - 1; ++j) y[j] += k0 * x[j - 1] + k1 * x[j] + k2 * x[j + 1];
    y[w - 1] += k0 * x[w - 2] + k1 * x[w - 1];
}

} // namespace

Tensor Tape::conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.shape.size() != 3) throw ShapeError("conv2d input must be (C,H,W)");
    if (kernel.shape.size() != 4 || kernel.shape[2] != 3 || kernel.shape[3] != 3)
        throw ShapeError("conv2d kernel must be (C_out,C_in,3,3)");
    int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
    int cout = kernel.shape[0];
    if (kernel.shape[1] != cin) throw ShapeError("conv2d kernel C_in mismatch");
    if (bias.shape.size() != 1 || bias.shape[0] != cout)
        throw ShapeError("conv2d bias must be (C_out)");

    size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(static_cast<size_t>(cout) * plane);
    for (int co = 0; co < cout; ++co) {
        double* yo = &out[co * plane];
        std::fill(yo, yo + plane, bias.data[co]);
        for (int ci = 0; ci < cin; ++ci) {
            const double* xi = &x.data[ci * plane];
            const double* kk = &kernel.data[(static_cast<size_t>(co) * cin + ci) * 9];
            for (int i = 0; i < h; ++i) {
                double* yrow = yo + static_cast<size_t>(i) * w;
                for (int di = -1; di <= 1; ++di) {
                    int si = i + di;
                    if (si < 0 || si >= h) continue;
                    const double* xrow = xi + static_cast<size_t>(si) * w;
                    const double* kr = kk + (di + 1) * 3;
                    corr_row(yrow, xrow, w, kr[0], kr[1], kr[2]);
                }
            }
        }
    }
    TTMG_CHECK_FINITE(out, "conv2d");

    int xn = x.node, kn = kernel.node, bn = bias.node;
    std::vector<double> xcap = x.data, kcap = kernel.data;
    return record_custom(
        {cout, h, w}, std::move(out), {xn, kn, bn},
        [=, xcap = std::move(xcap), kcap = std::move(kcap)](Tape& tp,
                                                            const std::vector<double>& g) {
            if (bn >= 0) {
                auto& gb = tp.grad_buf(bn);
                for (int co = 0; co < cout; ++co) {
                    const double* grow = &g[co * plane];
                    double s = 0.0;
                    for (size_t p = 0; p < plane; ++p) s += grow[p];
                    gb[co] += s;
                }
            }
            if (xn >= 0) {
                auto& gx = tp.grad_buf(xn);
                // dx = full correlation of g with the flipped kernel
                for (int co = 0; co < cout; ++co) {
                    const double* go = &g[co * plane];
                    for (int ci = 0; ci < cin; ++ci) {
                        double* gxi = &gx[ci * plane];
                        const double* kk = &kcap[(static_cast<size_t>(co) * cin + ci) * 9];
                        for (int i = 0; i < h; ++i) {
                            const double* grow = go + static_cast<size_t>(i) * w;
                            for (int di = -1; di <= 1; ++di) {
                                int si = i + di;
                                if (si < 0 || si >= h) continue;
                                double* gxrow = gxi + static_cast<size_t>(si) * w;
                                const double* kr = kk + (di + 1) * 3;
                                // reversed taps: d x[si,sj] += k[dj] * g[i, sj-dj]
                                corr_row(gxrow, grow, w, kr[2], kr[1], kr[0]);
                            }
                        }
                    }
                }
            }
            if (kn >= 0) {
                auto& gk = tp.grad_buf(kn);
                for (int co = 0; co < cout; ++co) {
                    const double* go = &g[co * plane];
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* xi = &xcap[ci * plane];
                        double* gkk = &gk[(static_cast<size_t>(co) * cin + ci) * 9];
                        for (int di = -1; di <= 1; ++di)
                            for (int dj = -1; dj <= 1; ++dj) {
                                double s = 0.0;
                                int i0 = std::max(0, -di), i1 = std::min(h, h - di);
                                int j0 = std::max(0, -dj), j1 = std::min(w, w - dj);
                                for (int i = i0; i < i1; ++i) {
                                    const double* grow = go + static_cast<size_t>(i) * w;
                                    const double* xrow =
                                        xi + static_cast<size_t>(i + di) * w + dj;
                                    for (int j = j0; j < j1; ++j) s += grow[j] * xrow[j];
                                }
                                gkk[(di + 1) * 3 + (dj + 1)] += s;
                            }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions

namespace {

// walks input elements, calling f(i_in, i_out) with the out index having
// reduced axes pinned to 0 (keepdims layout)
template <class F>
void reduce_walk(const Shape& in, const std::vector<char>& reduced, F&& f) {
    size_t r = in.size();
    auto ist = row_major_strides(in);
    Shape oshape(in);
    for (size_t d = 0; d < r; ++d)
        if (reduced[d]) oshape[d] = 1;
    auto ost_full = row_major_strides(oshape);
    std::vector<int64_t> ost(r);
    for (size_t d = 0; d < r; ++d) ost[d] = reduced[d] ? 0 : ost_full[d];

    int64_t n = shape_numel(in);
    std::vector<int> coord(r, 0);
    int64_t io = 0;
    for (int64_t ii = 0; ii < n; ++ii) {
        f(ii, io);
        for (size_t d = r; d-- > 0;) {
            ++coord[d];
            io += ost[d];
            if (coord[d] < in[d]) break;
            coord[d] = 0;
            io -= ost[d] * in[d];
        }
    }
}

} // namespace

Tensor Tape::reduce(ReduceOp op, const Tensor& x, const std::vector<int>& axes) {
    if (axes.empty()) throw DomainError("reduce: empty axis set");
    size_t r = x.shape.size();
    std::vector<char> reduced(r, 0);
    for (int a : axes) {
        if (a < 0 || static_cast<size_t>(a) >= r)
            throw DomainError("reduce: axis out of range");
        if (reduced[a]) throw DomainError("reduce: duplicate axis");
        reduced[a] = 1;
    }
    Shape os(x.shape);
    int64_t count = 1;
    for (size_t d = 0; d < r; ++d)
        if (reduced[d]) {
            count *= os[d];
            os[d] = 1;
        }
    int64_t on = shape_numel(os);

    std::vector<double> out(on, 0.0);
    std::vector<double> mean_cache; // for Var backward
    switch (op) {
        case ReduceOp::Sum:
        case ReduceOp::Mean:
            reduce_walk(x.shape, reduced, [&](int64_t ii, int64_t io) { out[io] += x.data[ii]; });
            if (op == ReduceOp::Mean)
                for (auto& v : out) v /= static_cast<double>(count);
            break;
        case ReduceOp::Var: {
            std::vector<double> mean(on, 0.0);
            reduce_walk(x.shape, reduced, [&](int64_t ii, int64_t io) { mean[io] += x.data[ii]; });
            for (auto& v : mean) v /= static_cast<double>(count);
            reduce_walk(x.shape, reduced, [&](int64_t ii, int64_t io) {
                double d = x.data[ii] - mean[io];
                out[io] += d * d;
            });
            for (auto& v : out) v /= static_cast<double>(count);
            mean_cache = std::move(mean);
            break;
        }
        case ReduceOp::L1:
            reduce_walk(x.shape, reduced,
                        [&](int64_t ii, int64_t io) { out[io] += std::fabs(x.data[ii]); });
            break;
        case ReduceOp::L2:
            reduce_walk(x.shape, reduced, [&](int64_t ii, int64_t io) {
                out[io] += x.data[ii] * x.data[ii];
            });
            for (auto& v : out) v = std::sqrt(v);
            break;
    }
    TTMG_CHECK_FINITE(out, "reduce");

    int xn = x.node;
    Shape xs = x.shape;
    std::vector<double> xcap;
    std::vector<double> ocap;
    if (op == ReduceOp::Var || op == ReduceOp::L1 || op == ReduceOp::L2) xcap = x.data;
    if (op == ReduceOp::L2) ocap = out;
    double cnt = static_cast<double>(count);
    return record_custom(
        os, std::move(out), {xn},
        [=, xcap = std::move(xcap), ocap = std::move(ocap),
         mean_cache = std::move(mean_cache)](Tape& tp, const std::vector<double>& g) {
            auto& gx = tp.grad_buf(xn);
            switch (op) {
                case ReduceOp::Sum:
                    reduce_walk(xs, reduced, [&](int64_t ii, int64_t io) { gx[ii] += g[io]; });
                    break;
                case ReduceOp::Mean:
                    reduce_walk(xs, reduced,
                                [&](int64_t ii, int64_t io) { gx[ii] += g[io] / cnt; });
                    break;
                case ReduceOp::Var:
                    reduce_walk(xs, reduced, [&](int64_t ii, int64_t io) {
                        gx[ii] += g[io] * 2.0 / cnt * (xcap[ii] - mean_cache[io]);
                    });
                    break;
                case ReduceOp::L1:
                    reduce_walk(xs, reduced, [&](int64_t ii, int64_t io) {
                        double s = xcap[ii] > 0.0 ? 1.0 : (xcap[ii] < 0.0 ? -1.0 : 0.0);
                        gx[ii] += g[io] * s;
                    });
                    break;
                case ReduceOp::L2:
                    reduce_walk(xs, reduced, [&](int64_t ii, int64_t io) {
                        gx[ii] += g[io] * xcap[ii] / std::max(ocap[io], 1e-12);
                    });
                    break;
            }
        });
}

Tensor Tape::reduce_all(ReduceOp op, const Tensor& x) {
    std::vector<int> axes(x.shape.size());
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return reshape(reduce(op, x, axes), {1});
}

// ---------------------------------------------------------------------------
// softmax

Tensor Tape::softmax(const Tensor& x, int axis) {
    size_t r = x.shape.size();
    if (axis < 0 || static_cast<size_t>(axis) >= r) throw DomainError("softmax: bad axis");
    int64_t outer = 1, inner = 1, n = x.shape[axis];
    for (int d = 0; d < axis; ++d) outer *= x.shape[d];
    for (size_t d = axis + 1; d < r; ++d) inner *= x.shape[d];

    std::vector<double> out(x.data.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            int64_t base = o * n * inner + i;
            double mx = -1e308;
            for (int64_t a = 0; a < n; ++a) mx = std::max(mx, x.data[base + a * inner]);
            double sum = 0.0;
            for (int64_t a = 0; a < n; ++a) {
                double e = std::exp(x.data[base + a * inner] - mx);
                out[base + a * inner] = e;
                sum += e;
            }
            for (int64_t a = 0; a < n; ++a) out[base + a * inner] /= sum;
        }
    TTMG_CHECK_FINITE(out, "softmax");

    int xn = x.node;
    std::vector<double> ycap = out;
    return record_custom(x.shape, std::move(out), {xn},
                         [=, ycap = std::move(ycap)](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (int64_t o = 0; o < outer; ++o)
                                 for (int64_t i = 0; i < inner; ++i) {
                                     int64_t base = o * n * inner + i;
                                     double dot = 0.0;
                                     for (int64_t a = 0; a < n; ++a)
                                         dot += g[base + a * inner] * ycap[base + a * inner];
                                     for (int64_t a = 0; a < n; ++a) {
                                         int64_t ix = base + a * inner;
                                         gx[ix] += ycap[ix] * (g[ix] - dot);
                                     }
                                 }
                         });
}

// ---------------------------------------------------------------------------
// pooling

Tensor Tape::global_avg_pool(const Tensor& x) {
    if (x.shape.size() != 3) throw ShapeError("global_avg_pool input must be (C,H,W)");
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(c, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        const double* p = &x.data[ch * plane];
        double s = 0.0;
        for (size_t i = 0; i < plane; ++i) s += p[i];
        out[ch] = s / static_cast<double>(plane);
    }
    int xn = x.node;
    return record_custom({c}, std::move(out), {xn},
                         [=](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (int ch = 0; ch < c; ++ch) {
                                 double gv = g[ch] / static_cast<double>(plane);
                                 double* p = &gx[ch * plane];
                                 for (size_t i = 0; i < plane; ++i) p[i] += gv;
                             }
                         });
}

Tensor Tape::avg_pool2x2(const Tensor& x) {
    if (x.shape.size() != 3) throw ShapeError("avg_pool2x2 input must be (C,H,W)");
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("avg_pool2x2: spatial dims must be even");
    int oh = h / 2, ow = w / 2;
    std::vector<double> out(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                const double* p = &x.data[(static_cast<size_t>(ch) * h + 2 * i) * w + 2 * j];
                out[(static_cast<size_t>(ch) * oh + i) * ow + j] =
                    0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
            }
    int xn = x.node;
    return record_custom({c, oh, ow}, std::move(out), {xn},
                         [=](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (int ch = 0; ch < c; ++ch)
                                 for (int i = 0; i < oh; ++i)
                                     for (int j = 0; j < ow; ++j) {
                                         double gv =
                                             0.25 *
                                             g[(static_cast<size_t>(ch) * oh + i) * ow + j];
                                         double* p =
                                             &gx[(static_cast<size_t>(ch) * h + 2 * i) * w +
                                                 2 * j];
                                         p[0] += gv;
                                         p[1] += gv;
                                         p[w] += gv;
                                         p[w + 1] += gv;
                                     }
                         });
}

Tensor Tape::upsample2x(const Tensor& x) {
    if (x.shape.size() != 3) throw ShapeError("upsample2x input must be (C,H,W)");
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    int oh = 2 * h, ow = 2 * w;
    std::vector<double> out(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < oh; ++i) {
            const double* src = &x.data[(static_cast<size_t>(ch) * h + i / 2) * w];
            double* dst = &out[(static_cast<size_t>(ch) * oh + i) * ow];
            for (int j = 0; j < ow; ++j) dst[j] = src[j / 2];
        }
    int xn = x.node;
    return record_custom({c, oh, ow}, std::move(out), {xn},
                         [=](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (int ch = 0; ch < c; ++ch)
                                 for (int i = 0; i < oh; ++i) {
                                     double* dst = &gx[(static_cast<size_t>(ch) * h + i / 2) * w];
                                     const double* src =
                                         &g[(static_cast<size_t>(ch) * oh + i) * ow];
                                     for (int j = 0; j < ow; ++j) dst[j / 2] += src[j];
                                 }
                         });
}

Tensor Tape::pool(PoolOp op, const Tensor& x) {
    switch (op) {
        case PoolOp::GlobalAvg: return global_avg_pool(x);
        case PoolOp::Avg2x2: return avg_pool2x2(x);
        case PoolOp::NearestUpsample2x: return upsample2x(x);
    }
    throw ConfigError("unknown pool op");
}

// ---------------------------------------------------------------------------
// shape ops

Tensor Tape::reshape(const Tensor& x, Shape new_shape) {
    validate_shape(new_shape);
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape) + " -> " +
                         shape_str(new_shape));
    int xn = x.node;
    std::vector<double> out = x.data;
    return record_custom(std::move(new_shape), std::move(out), {xn},
                         [xn](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

Tensor Tape::transpose(const Tensor& x) {
    if (x.shape.size() != 2) throw ShapeError("transpose requires a 2-D tensor");
    int m = x.shape[0], n = x.shape[1];
    std::vector<double> out(x.data.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = x.data[static_cast<size_t>(i) * n + j];
    int xn = x.node;
    return record_custom({n, m}, std::move(out), {xn},
                         [=](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (int i = 0; i < m; ++i)
                                 for (int j = 0; j < n; ++j)
                                     gx[static_cast<size_t>(i) * n + j] +=
                                         g[static_cast<size_t>(j) * m + i];
                         });
}

Tensor Tape::index_select(const Tensor& x, int i) {
    if (x.shape.empty()) throw ShapeError("index_select on scalar");
    if (i < 0 || i >= x.shape[0]) throw ShapeError("index_select: index out of range");
    Shape os(x.shape.begin() + 1, x.shape.end());
    if (os.empty()) os = {1};
    int64_t stride = shape_numel(os);
    std::vector<double> out(x.data.begin() + i * stride, x.data.begin() + (i + 1) * stride);
    int xn = x.node;
    return record_custom(os, std::move(out), {xn},
                         [=](Tape& tp, const std::vector<double>& g) {
                             auto& gx = tp.grad_buf(xn);
                             for (int64_t k = 0; k < stride; ++k) gx[i * stride + k] += g[k];
                         });
}

Tensor Tape::concat0(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat0 of zero tensors");
    Shape trailing(xs[0].shape.begin() + 1, xs[0].shape.end());
    int total = 0;
    for (const auto& x : xs) {
        if (x.shape.empty()) throw ShapeError("concat0 of scalar");
        Shape tr(x.shape.begin() + 1, x.shape.end());
        if (tr != trailing) throw ShapeError("concat0: trailing dims differ");
        total += x.shape[0];
    }
    Shape os;
    os.push_back(total);
    os.insert(os.end(), trailing.begin(), trailing.end());
    std::vector<double> out;
    out.reserve(shape_numel(os));
    std::vector<int> nodes;
    std::vector<int64_t> sizes;
    for (const auto& x : xs) {
        out.insert(out.end(), x.data.begin(), x.data.end());
        nodes.push_back(x.node);
        sizes.push_back(x.numel());
    }
    return record_custom(os, std::move(out), nodes,
                         [nodes, sizes](Tape& tp, const std::vector<double>& g) {
                             int64_t off = 0;
                             for (size_t k = 0; k < nodes.size(); ++k) {
                                 if (nodes[k] >= 0) {
                                     auto& gx = tp.grad_buf(nodes[k]);
                                     for (int64_t i = 0; i < sizes[k]; ++i)
                                         gx[i] += g[off + i];
                                 }
                                 off += sizes[k];
                             }
                         });
}

// ---------------------------------------------------------------------------
// backward

std::vector<double>& Tape::grad_buf(int node) {
    if (node < 0 || static_cast<size_t>(node) >= nodes_.size())
        throw StateError("grad_buf: bad node id");
    if (!grad_set_[node]) {
        grads_[node].assign(shape_numel(nodes_[node].shape), 0.0);
        grad_set_[node] = 1;
    }
    return grads_[node];
}

bool Tape::grad_present(int node) const {
    return node >= 0 && static_cast<size_t>(node) < grad_set_.size() && grad_set_[node];
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
    grads_.assign(nodes_.size(), {});
    grad_set_.assign(nodes_.size(), 0);
    if (loss.node >= 0) {
        grad_buf(loss.node)[0] = 1.0;
        for (size_t k = ops_.size(); k-- > 0;) {
            const OpRecord& op = ops_[k];
            if (grad_set_[op.out]) op.back(*this, grads_[op.out]);
        }
    }
    // every requires_grad leaf ends with a buffer, zeros if disconnected
    for (size_t n = 0; n < nodes_.size(); ++n)
        if (nodes_[n].is_leaf && nodes_[n].requires_grad && !grad_set_[n])
            grad_buf(static_cast<int>(n));
}

const std::vector<double>& Tape::grad(const Tensor& t) const {
    if (!grad_present(t.node)) throw StateError("grad: no gradient recorded for tensor");
    return grads_[t.node];
}

bool Tape::has_grad(const Tensor& t) const { return grad_present(t.node); }

std::vector<std::pair<int, const std::vector<double>*>> Tape::gradient_map() const {
    std::vector<std::pair<int, const std::vector<double>*>> m;
    for (size_t n = 0; n < nodes_.size(); ++n)
        if (nodes_[n].is_leaf && nodes_[n].requires_grad && grad_set_[n])
            m.emplace_back(static_cast<int>(n), &grads_[n]);
    return m;
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

double grad_check(const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
                  std::vector<PlainTensor> inputs, double h) {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& p : inputs) leaves.push_back(tape.leaf(p.shape, p.data, true));
    Tensor loss = f(tape, leaves);
    if (loss.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));

    auto eval = [&](const std::vector<PlainTensor>& pts) {
        Tape t = Tape::inference();
        std::vector<Tensor> ls;
        ls.reserve(pts.size());
        for (const auto& p : pts) ls.push_back(t.leaf(p.shape, p.data, false));
        return f(t, ls).scalar();
    };

    double max_rel = 0.0;
    for (size_t vi = 0; vi < inputs.size(); ++vi) {
        for (size_t i = 0; i < inputs[vi].data.size(); ++i) {
            double orig = inputs[vi].data[i];
            inputs[vi].data[i] = orig + h;
            double fp = eval(inputs);
            inputs[vi].data[i] = orig - h;
            double fm = eval(inputs);
            inputs[vi].data[i] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[vi][i];
            double rel = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace ttmg
