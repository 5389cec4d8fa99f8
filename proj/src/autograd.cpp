#include "uda/autograd.hpp"

#include <unordered_set>

namespace uda {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward_fn) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(value);
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (const auto& in : inputs)
        if (in.requires_grad()) out.node_->inputs.push_back(in.node());
    out.node_->backward_fn = std::move(backward_fn);
    return out;
}

Tensor* grad_sink(const Var& v) {
    if (!v.requires_grad()) return nullptr;
    Node& n = *v.node();
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return &n.grad;
}

void backward(const Var& root) {
    if (!root.defined()) throw std::invalid_argument("backward on undefined variable");
    if (root.value().numel() != 1) throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad = Tensor(root.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(n->grad);
    }
    for (Node* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->inputs.clear();
            n->grad = Tensor();
        }
    }
}

}  // namespace uda
