#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taskspace/rng.hpp"
#include "taskspace/tensor.hpp"

namespace taskspace {

/// Reverse-mode tape over tensor-granular ops. Creation order is a valid
/// topological order (ops only consume already-recorded nodes), so backward
/// is a single reverse sweep that visits each node exactly once.
///
/// A tape and its tensors are confined to one thread; independent tapes may
/// run concurrently.
class GradTape {
public:
    using Var = std::int32_t;

    enum class Reduction { mean, sum };

    explicit GradTape(bool tracing = true) : tracing_(tracing) {}

    bool tracing() const { return tracing_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Constant input; never receives a gradient.
    Var leaf(Tensor value);

    /// Trainable leaf. `name` is carried into gradient error messages.
    Var param(Tensor value, std::string name);

    // elementwise / linear algebra
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var matmul(Var a, Var b);     // [m,k]x[k,n] -> [m,n]
    Var matmul_nt(Var a, Var b);  // [m,k]x[n,k]^T -> [m,n]
    Var add_row_bias(Var x, Var bias);
    Var reduce_sum(Var x);

    // neural-net ops
    Var gather_rows(Var matrix, std::vector<std::int32_t> row_ids);
    Var layer_norm(Var x, Var gain, Var bias);
    Var gelu(Var x);
    Var relu(Var x);
    Var softmax_rows(Var x);
    Var causal_mask(Var scores);  // square; entries above the diagonal -> -inf

    /// Multi-head causal self-attention over packed segments.
    /// q/k/v are [N,d]; seg_offsets (size S+1) delimits segments in the row
    /// dimension; attention never crosses a segment boundary.
    Var causal_attention(Var q, Var k, Var v, std::vector<std::int32_t> seg_offsets, int n_heads);

    /// Token-level cross-entropy over logits [N,V] against targets [N].
    /// A target of -1 skips that row (it contributes neither loss nor count).
    Var cross_entropy(Var logits, std::vector<std::int32_t> targets, Reduction reduction);

    /// Inverted dropout; identity when rate == 0.
    Var dropout(Var x, double rate, Rng& rng);

    const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
    bool has_grad(Var v) const { return !nodes_[static_cast<std::size_t>(v)].grad.data.empty(); }
    const Tensor& grad(Var v) const;

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
    /// Errors: non-scalar loss; non-finite loss; non-finite gradient on any
    /// param (the error names the parameter).
    void backward(Var loss);

private:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until first accumulation
        bool requires_grad = false;
        bool is_param = false;
        std::string param_name;
        std::function<void(GradTape&)> backprop;  // empty for leaves / non-traced
    };

    Var push(Tensor value, bool requires_grad, std::function<void(GradTape&)> backprop);
    bool wants_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].requires_grad; }
    Tensor& grad_buffer(Var v);
    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v)]; }

    bool tracing_;
    std::vector<Node> nodes_;
};

/// Max over `coords` of |analytic[i] - central_difference_i| / (|analytic[i]| + 1e-12),
/// where the central difference perturbs theta[i] by +/- h. f must be
/// evaluable (and finite) at every probe point; h must be > 0.
double finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> theta, const std::vector<double>& analytic,
                         std::span<const std::size_t> coords, double h);

}  // namespace taskspace
