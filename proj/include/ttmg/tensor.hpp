#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ttmg/common.hpp"

namespace ttmg {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);
std::string shape_str(const Shape& s);

// Dense f64 tensor, row-major. Value-semantic: copying copies the buffer.
// `node` ties the tensor to a position on the tape that produced it; -1
// means no gradient flows through it.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    int node = -1;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool on_tape() const { return node >= 0; }
    double scalar() const;
};

enum class EwOp { Add, Sub, Mul, Div, Exp, Log, Relu, Sigmoid, Abs };
enum class ReduceOp { Mean, Var, Sum, L1, L2 };
enum class PoolOp { GlobalAvg, Avg2x2, NearestUpsample2x };

// Reverse-mode tape: a Wengert list of recorded operations. Ops append in
// execution order, so the list is already topologically sorted; backward()
// walks it in reverse. One tape per execution context.
class Tape {
public:
    Tape() = default;

    static Tape inference() {
        Tape t;
        t.recording_ = false;
        return t;
    }

    bool recording() const { return recording_; }
    size_t op_count() const { return ops_.size(); }
    size_t node_count() const { return nodes_.size(); }

    Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = true);
    Tensor constant(Shape shape, std::vector<double> data);
    Tensor full(Shape shape, double value);

    // elementwise, trailing-dimension broadcasting for binary ops
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor div(const Tensor& a, const Tensor& b);
    Tensor exp(const Tensor& x);
    Tensor log(const Tensor& x);
    Tensor relu(const Tensor& x);
    Tensor sigmoid(const Tensor& x);
    Tensor abs(const Tensor& x);
    Tensor sqrt(const Tensor& x);
    Tensor clamp_min(const Tensor& x, double floor);
    Tensor add_scalar(const Tensor& x, double c);
    Tensor mul_scalar(const Tensor& x, double c);
    Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b = nullptr);

    Tensor matmul(const Tensor& a, const Tensor& b);

    // 3x3 cross-correlation, stride 1, zero padding 1 (same spatial size)
    Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

    // reductions keep reduced axes as size-1 dims; Var is population (/N)
    Tensor reduce(ReduceOp op, const Tensor& x, const std::vector<int>& axes);
    Tensor reduce_all(ReduceOp op, const Tensor& x); // -> shape {1}

    Tensor softmax(const Tensor& x, int axis);

    Tensor global_avg_pool(const Tensor& x); // (C,H,W) -> (C)
    Tensor avg_pool2x2(const Tensor& x);     // (C,H,W) -> (C,H/2,W/2)
    Tensor upsample2x(const Tensor& x);      // (C,H,W) -> (C,2H,2W), nearest
    Tensor pool(PoolOp op, const Tensor& x);

    Tensor reshape(const Tensor& x, Shape new_shape);
    Tensor transpose(const Tensor& x);            // 2-D
    Tensor index_select(const Tensor& x, int i);  // along axis 0
    Tensor concat0(const std::vector<Tensor>& xs);

    // Extension point: register an output with precomputed values and an
    // arbitrary backward rule. All built-in ops go through the same path.
    using BackwardFn = std::function<void(Tape&, const std::vector<double>& dout)>;
    Tensor record_custom(Shape out_shape, std::vector<double> out_data,
                         const std::vector<int>& input_nodes, BackwardFn back);

    // Reverse sweep from a scalar loss. Deterministic: same tape, bit-equal
    // gradients. Every requires_grad leaf gets a buffer (zeros if unused).
    void backward(const Tensor& loss);

    const std::vector<double>& grad(const Tensor& t) const;
    bool has_grad(const Tensor& t) const;
    // node id -> gradient buffer, for all requires_grad leaves
    std::vector<std::pair<int, const std::vector<double>*>> gradient_map() const;

    // gradient accumulation helpers for backward closures
    std::vector<double>& grad_buf(int node);
    bool grad_present(int node) const;

private:
    struct NodeInfo {
        Shape shape;
        bool is_leaf = false;
        bool requires_grad = false;
    };
    struct OpRecord {
        int out = -1;
        std::vector<int> ins;
        BackwardFn back;
    };

    int new_node(const Shape& shape, bool is_leaf, bool requires_grad);
    Tensor make_result(Shape shape, std::vector<double> data,
                       const std::vector<int>& input_nodes, BackwardFn back);

    bool recording_ = true;
    std::vector<NodeInfo> nodes_;
    std::vector<OpRecord> ops_;
    std::vector<std::vector<double>> grads_;
    std::vector<char> grad_set_;
};

// Central finite differences against the tape gradient.
// f must be a pure function of its inputs. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|); returns the max.
struct PlainTensor {
    Shape shape;
    std::vector<double> data;

    PlainTensor() = default;
    explicit PlainTensor(Shape s)
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0) {}
    PlainTensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}
};

double grad_check(const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
                  std::vector<PlainTensor> inputs, double h = 1e-5);

} // namespace ttmg
