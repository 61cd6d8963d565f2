#include "dehaze/autograd.hpp"

#include "dehaze/error.hpp"

namespace dehaze {

Tape::Node& Tape::node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw InternalError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw InternalError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
    Node n;
    n.external_value = &p.value;
    if (grad_enabled_ && p.trainable) {
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
        n.external_grad = &p.grad;
        n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        for (Var v : inputs) {
            if (v.valid() && node(v).requires_grad) {
                n.requires_grad = true;
                break;
            }
        }
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const {
    const Node& n = node(v);
    return n.external_value ? *n.external_value : n.value;
}

bool Tape::requires_grad(Var v) const { return v.valid() && node(v).requires_grad; }

Tensor& Tape::grad_buffer(Var v) {
    Node& n = node(v);
    if (n.external_grad) return *n.external_grad;
    if (n.grad.empty() && value(v).size() > 0) n.grad = Tensor(value(v).shape());
    return n.grad;
}

const Tensor* Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.external_grad) return n.external_grad;
    return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var root) {
    if (!grad_enabled_) throw InternalError("backward() on a tape recorded without gradients");
    if (value(root).size() != 1) throw InternalError("backward() root must be a scalar");
    if (!node(root).requires_grad) return;
    grad_buffer(root)[0] += 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
        // Move the gradient out so the closure can accumulate into other nodes
        // without aliasing; intermediate gradients are not needed afterwards.
        const Tensor g = std::move(n.grad);
        n.grad = Tensor();
        n.backward(*this, Var{id}, g);
    }
}

}  // namespace dehaze
