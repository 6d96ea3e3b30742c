#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "bsim/tensor.hpp"

namespace bsim {

class Tape;

/// Lightweight handle to a node on a tape. Copyable; identity is (tape, id).
struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is by
/// construction a topological order of the (acyclic) graph; backward walks
/// it in reverse. One training step owns one tape; a tape is single-writer.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant(double v) { return leaf(Tensor::scalar(v), false); }

    /// Seeds the (scalar) root with gradient 1 and accumulates gradients
    /// into every node that requires them. Leaves not on any path to the
    /// root keep their zero gradient. Throws ShapeError for non-scalar roots.
    void backward(Var root);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    size_t size() const { return nodes_.size(); }

    // -- implementation surface used by the op builders --
    struct Node {
        Tensor value;
        Tensor grad;  // allocated (zero) iff requires_grad
        bool requires_grad = false;
        std::function<void(Tape&, int32_t)> backprop;  // (tape, own id)
    };
    Var emplace(Tensor value, bool requires_grad, std::function<void(Tape&, int32_t)> backprop);
    Node& node(int32_t id) { return nodes_[id]; }

private:
    std::vector<Node> nodes_;
};

// ---- differentiable ops ----
Var add(Var a, Var b);               // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);               // elementwise
Var div(Var a, Var b);               // elementwise
Var add_rowvec(Var a, Var row);      // [N x D] + [D]
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var neg(Var a);
Var matmul(Var a, Var b);            // [m x k][k x n]; 1-D b treated as column
Var matmul_nt(Var a, Var b);         // a * b^T, both [.. x k]
Var relu(Var a);                     // subgradient at 0 is 0
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sum(Var a);                      // -> scalar
Var mean(Var a);                     // -> scalar
Var dot(Var a, Var b);               // flat inner product -> scalar
Var l2normalize_rows(Var a, double eps = kEpsNorm);  // 1-D input = one row
Var layernorm_rows(Var a, double eps = 1e-5);
Var group_mean_rows(Var a, int64_t group);  // [(M*G) x D] -> [M x D]
Var row(Var a, int64_t i);           // [N x D] -> [D]
Var at(Var a, int64_t i, int64_t j); // -> scalar
Var gather(Var a, std::vector<int64_t> flat_indices);  // -> [k]
Var concat(Var a, Var b);            // 1-D concatenation
Var stack_scalars(std::span<const Var> xs);            // -> [k]

/// log(sum(exp(v))) over a 1-D node, computed with max subtraction.
/// The subtracted max is detached; the gradient is exactly softmax(v).
Var logsumexp(Var v);

/// Cosine similarity of two vectors as a graph node.
Var cosine(Var a, Var b, double eps = kEpsNorm);

}  // namespace bsim
