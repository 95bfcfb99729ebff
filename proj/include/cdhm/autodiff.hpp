#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cdhm/tensor.hpp"

namespace cdhm {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape. Nodes are recorded in evaluation order; backward()
/// walks them in reverse. One tape per optimization step; cleared afterwards.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated on demand during backward
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;  // accumulates into parent grads
        bool requires_grad = false;
    };

    Var leaf(Tensor value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var record(Tensor value, std::vector<int> parents,
               std::function<void(Tape&, int)> backward) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        for (int p : n.parents)
            if (nodes_[static_cast<size_t>(p)].requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    /// Gradient of the last backward() root w.r.t. node v (zeros if unused).
    const Tensor& grad(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        ensure_grad(n);
        return n.grad;
    }
    Tensor& grad_ref(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        ensure_grad(n);
        return n.grad;
    }

    /// Seeds d(root)/d(root) = 1 and propagates. Root must be scalar.
    void backward(Var root) {
        Node& r = nodes_[static_cast<size_t>(root.id)];
        if (r.value.size() != 1)
            throw std::invalid_argument("backward: root must be a scalar");
        ensure_grad(r);
        r.grad[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || !n.backward) continue;
            if (n.grad.empty()) continue;  // not on any path from the root
            n.backward(*this, i);
        }
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    void ensure_grad(Node& n) {
        if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor(n.value.shape());
    }

    std::vector<Node> nodes_;
};

// ---- elementwise / shape ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var one_minus(Var a);  // 1 - a
Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var tanh_op(Var a);
Var sigmoid(Var a);
Var exp_op(Var a);
Var reshape(Var a, std::vector<int64_t> shape);
Var concat_cols(const std::vector<Var>& xs);        // [N,Di] -> [N, sum Di]
Var slice_cols(Var x, int64_t start, int64_t len);  // [N,D] -> [N,len]
Var sum_all(Var a);
Var mean_all(Var a);
Var add_rows(Var a, Var b);  // [N,D] + broadcast [D]

// ---- affine / conv / norm ----
Var linear(Var x, Var w, Var b);  // x:[N,I] w:[O,I] b:[O] -> [N,O]
Var conv2d(Var x, Var w, Var b, int stride, int pad);            // x:[N,C,H,W] w:[Co,Ci,K,K]
Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad);  // w:[Ci,Co,K,K]
Var conv1d(Var x, Var w, Var b, int stride, int pad);            // x:[N,C,L] w:[Co,Ci,K]

/// Batch statistics when `training`, frozen running statistics otherwise.
/// Updates running_mean/var in place during training (momentum blend).
Var batch_norm2d(Var x, Var gamma, Var beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum = 0.1,
                 double eps = 1e-5);

Var global_avg_pool2d(Var x);  // [N,C,H,W] -> [N,C]
Var global_avg_pool1d(Var x);  // [N,C,L] -> [N,C]
Var softmax_rows(Var x);       // [N,C]

/// mean + exp(0.5*logvar) * noise, with noise a constant tensor.
Var reparameterize_op(Var mean, Var logvar, const Tensor& noise);

// ---- fused objective nodes (analytic backward, oracle-tested) ----

/// Sum over dims of KL(N(mq,e^lq) || N(mp,e^lp)) per row, averaged over rows.
Var kl_diag_mean(Var mq, Var lq, Var mp, Var lp);

/// 0.5 * mean squared error over all elements.
Var half_mse(Var pred, Var target);

/// Multi-bandwidth RBF MMD between row sets xs:[Ns,D], xt:[Nt,D].
/// Diagonal terms included exactly as the estimator is written.
Var mmd_rbf(Var xs, Var xt, const std::vector<double>& bandwidths);

/// -(1/N) sum log p[i, label[i]] with probabilities clamped at 1e-12.
/// Increments *clamp_events when the clamp engages.
Var nll_onehot(Var probs, const std::vector<int>& labels,
               long* clamp_events = nullptr);

}  // namespace cdhm
