#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "uda/tensor.hpp"

namespace uda {

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Tensor& grad_out)> backward_fn;
};

/// Handle to a node of the dynamic computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    void zero_grad() { node_->grad = Tensor(); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
    friend Var make_op(Tensor, std::vector<Var>, std::function<void(const Tensor&)>);
};

/// Builds a graph node; the backward closure receives d(root)/d(output).
/// When grad mode is off or no input requires a gradient, the result is a
/// constant leaf and the closure is dropped.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward_fn);

/// Returns the gradient buffer of `v` (zero-initialised), or nullptr if `v`
/// does not require a gradient.
Tensor* grad_sink(const Var& v);

/// Reverse-mode sweep from a scalar root. Intermediate nodes release their
/// closures afterwards; leaf gradients accumulate.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Running statistics owned by a batch-norm layer.
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    Real momentum = 0.1;
    Real eps = 1e-5;
};

namespace ops {

Var add(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
/// x: [B, ...], pos: shape of x without the leading axis.
Var add_broadcast(const Var& x, const Var& pos);

/// x: [..., in], weight: [out, in], bias: [out] or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

/// x: [B, Ci, H, W], weight: [Co, Ci, k, k], bias: [Co] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

/// Per-channel normalisation of [B, C, H, W]. Training mode uses batch
/// statistics and updates `state`; eval mode reads the running statistics.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training);

/// Normalises over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-6);

Var relu(const Var& x);
Var gelu(const Var& x);

/// qkv: [B, N, 3D] packed as (q | k | v); returns [B, N, D].
Var self_attention(const Var& qkv, int num_heads);

/// [B, N, D] with N = h*w  ->  [B, D, h, w].
Var tokens_to_map(const Var& tokens, int h, int w);
/// [B, D, h, w]  ->  [B, h*w, D].
Var map_to_tokens(const Var& map);

Var upsample_nearest(const Var& x, int factor);
/// Bilinear resampling with half-pixel centres (align_corners = false).
Var resize_bilinear(const Var& x, int out_h, int out_w);

/// Mean over non-ignored pixels of weight * (-log softmax[label]).
/// logits: [B, C, H, W]; labels, weights: [B, H, W].
Var weighted_cross_entropy(const Var& logits, const LabelTensor& labels, const Tensor& weights, int ignore_index);

/// Mean over grid positions of (1 - cosine similarity). Both [B, N, D];
/// the reference is a constant.
Var cosine_distance(const Var& student, const Tensor& reference, Real eps = 1e-8);

/// Scalar <x, w> for a constant w of the same shape.
Var dot_const(const Var& x, const Tensor& w);

Var sum_scalars(std::span<const Var> terms);

}  // namespace ops

}  // namespace uda
