#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "expresscount/params.hpp"
#include "expresscount/tensor.hpp"

namespace expresscount::ad {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const std::vector<int>& shape() const { return value().shape; }
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking them
// backwards is a valid topological order. A tape built with grad disabled
// records values only.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    // Differentiable leaf owned by the tape (gradient checks, input grads).
    Var leaf(Tensor value);
    // Parameter leaf referencing store storage. Frozen parameters and tapes
    // without grad yield constants.
    Var param(const ParamStore& store, const std::string& name);

    void backward(Var root);
    // Adds this tape's parameter gradients into `grads` (keys created lazily).
    void accumulate_param_grads(GradStore& grads) const;

    const Tensor& value(int id) const;
    const Tensor& grad(Var v) const;
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    bool grad_enabled() const { return grad_enabled_; }
    bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.data.empty(); }
    std::size_t size() const { return nodes_.size(); }

    // Op construction. requires_grad is derived from `inputs`.
    Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var push(Tensor value, std::span<const Var> inputs, BackwardFn fn);
    // Gradient buffer for a node, zero-initialised on first access.
    Tensor& grad_mut(int id);

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
        std::string param_name;
    };
    std::deque<Node> nodes_;
    std::unordered_map<std::string, int> param_nodes_;
    bool grad_enabled_;
};

// --- linear algebra -------------------------------------------------------
Var matmul(Var a, Var b);     // [n,k] x [k,m]
Var matmul_nt(Var a, Var b);  // [n,k] x [m,k]^T
Var transpose(Var a);         // 2-D
Var linear(Var x, Var w, Var b);  // x[n,in] w[in,out] + b[out]

// --- elementwise ----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var scale_by(Var a, Var s);           // s has one element
Var add_row(Var a, Var row);          // a[n,m] + row[m]
Var mul_row(Var a, Var row);          // a[n,m] * row[m] per column
Var mul_col(Var a, Var col);          // a[n,m] * col[n] per row
Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var abs(Var a);
Var square(Var a);
Var add_scalar(Var a, double s);

// --- reductions & reshaping -----------------------------------------------
Var sum(Var a);    // -> [1]
Var mean(Var a);   // -> [1]
Var reshape(Var a, std::vector<int> shape);
Var concat_rows(std::span<const Var> parts);  // 2-D, equal cols
Var slice_rows(Var a, int begin, int count);
Var gather_rows(Var table, std::span<const int> ids);
Var stop_gradient(Var a);

// --- neural network blocks ------------------------------------------------
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Scaled dot-product attention over `n_heads` column groups. key_mask[j] false
// removes key j from every softmax.
Var multi_head_attention(Var q, Var k, Var v, int n_heads, std::span<const std::uint8_t> key_mask);
// x[C,H,W], w[O,C,k,k], b[O] -> [O,Ho,Wo]
Var conv2d(Var x, Var w, Var b, int stride, int pad);

// Clamps box rows (x, y, h, w) so that x + w <= 1 and y + h <= 1; the
// backward pass is straight-through.
Var clamp_boxes(Var boxes);

} // namespace expresscount::ad
