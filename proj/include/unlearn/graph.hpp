#pragma once

#include <functional>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Graph: a single-use reverse-mode autodiff tape over Tensors. One graph is
// built per training step, backward() runs once, then the graph is dropped.
// Node evaluation order is creation order, so gradients are bitwise
// reproducible run to run.
// ---------------------------------------------------------------------------

struct ValueId {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

class Graph {
public:
    ValueId input(Tensor v, bool requires_grad);
    ValueId constant(Tensor v) { return input(std::move(v), false); }

    // --- tower ops ---
    // x: (N,Cin,H,W), w: (Cout,Cin,k,k), b: (Cout); zero padding `pad`.
    ValueId conv2d(ValueId x, ValueId w, ValueId b, int stride, int pad);
    // Eval-mode batchnorm: normalizes with the provided (frozen) statistics.
    ValueId batchnorm_eval(ValueId x, ValueId gamma, ValueId beta, const Tensor& running_mean,
                           const Tensor& running_var, real eps);
    // Train-mode batchnorm: normalizes with batch statistics; the per-channel
    // batch mean/var are exposed for running-stat updates outside the graph.
    ValueId batchnorm_batch(ValueId x, ValueId gamma, ValueId beta, real eps,
                            Tensor* out_batch_mean, Tensor* out_batch_var);
    ValueId relu(ValueId x);
    ValueId global_avg_pool(ValueId x);  // (N,C,H,W) -> (N,C)
    ValueId linear(ValueId x, ValueId w, ValueId b);  // (N,in) x (out,in)^T + b
    ValueId embedding_rows(ValueId table, std::vector<int> ids);  // (V,d) -> (M,d)
    ValueId l2_normalize_rows(ValueId x);

    // --- similarity / loss ops ---
    ValueId matmul_nt(ValueId a, ValueId b);   // (N,d) x (M,d)^T -> (N,M)
    ValueId matmul_nn(ValueId a, ValueId b);   // (N,k) x (k,M)   -> (N,M)
    ValueId transpose2d(ValueId x);
    ValueId rowwise_dot(ValueId a, ValueId b);  // (N,d),(N,d) -> (N)
    ValueId rowwise_l2(ValueId x);              // (N,d) -> (N), zero-guarded
    ValueId cross_entropy_rows(ValueId logits, std::vector<int> targets);  // mean CE

    // --- statistics ops (per channel over N,H,W) ---
    ValueId channel_mean(ValueId x);  // (N,C,H,W) -> (C)
    ValueId channel_var(ValueId x);   // biased variance, (N,C,H,W) -> (C)
    ValueId vec_l2(ValueId x);        // Euclidean norm of all entries -> scalar

    // --- elementwise / reductions ---
    ValueId add(ValueId a, ValueId b);
    ValueId sub(ValueId a, ValueId b);
    ValueId mul(ValueId a, ValueId b);
    ValueId scale(ValueId x, real s);
    ValueId mean_all(ValueId x);
    ValueId sum_all(ValueId x);
    ValueId clamp01(ValueId x);                 // pixel clipping, mask gradient
    ValueId clamp_scalar(ValueId x, real lo, real hi);
    ValueId reshape(ValueId x, std::vector<int> shape);

    const Tensor& value(ValueId id) const { return nodes_[static_cast<size_t>(id.idx)].val; }
    const Tensor& grad(ValueId id) const { return nodes_[static_cast<size_t>(id.idx)].grad; }
    bool requires_grad(ValueId id) const {
        return nodes_[static_cast<size_t>(id.idx)].requires_grad;
    }
    size_t size() const { return nodes_.size(); }

    // Backpropagates from a scalar node; gradients accumulate into every node
    // with requires_grad reachable from it.
    void backward(ValueId scalar_loss);

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Graph&)> back;  // empty for leaves
    };

    Node& node(ValueId id) { return nodes_[static_cast<size_t>(id.idx)]; }
    const Node& node(ValueId id) const { return nodes_[static_cast<size_t>(id.idx)]; }
    ValueId make(Tensor val, bool requires_grad, std::function<void(Graph&)> back);
    Tensor& grad_buf(ValueId id);

    std::vector<Node> nodes_;
};

}  // namespace unlearn
