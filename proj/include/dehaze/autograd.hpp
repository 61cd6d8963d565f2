#pragma once

// Minimal reverse-mode differentiation over whole tensors.
//
// A Tape records each operation's output value together with a closure that
// maps the output gradient back onto the inputs. backward() walks the tape in
// reverse. Parameters are referenced, not copied: their gradients accumulate
// directly into Parameter::grad.

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "dehaze/tensor.hpp"

namespace dehaze {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    /// Receives the tape, the node's own handle and its output gradient.
    using BackwardFn = std::function<void(Tape&, Var self, const Tensor& grad_out)>;

    /// With grad disabled nothing is retained for backward (inference mode).
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var constant(Tensor value);
    /// Leaf whose gradient is kept on the tape (read it back via grad()).
    Var input(Tensor value);
    Var param(Parameter& p);

    /// Appends an operation result. `fn` is dropped when none of `inputs`
    /// requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    /// Gradient accumulator for v, zero-allocated on first use.
    Tensor& grad_buffer(Var v);
    /// Null when no gradient reached v.
    const Tensor* grad(Var v) const;

    /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
    void backward(Var root);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        const Tensor* external_value = nullptr;
        Tensor grad;
        Tensor* external_grad = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Node& node(Var v);
    const Node& node(Var v) const;

    // deque: values handed out by value() stay valid while recording.
    std::deque<Node> nodes_;
    bool grad_enabled_;
};

}  // namespace dehaze
