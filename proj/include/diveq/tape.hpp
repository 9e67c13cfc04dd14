// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense tensors.
//
// A Tape records one forward pass as an ordered list of nodes; each node
// holds its forward value and a pullback mapping the node's cotangent to
// cotangent contributions on its parents. Tapes are single-use: re-running
// a forward pass means building a fresh tape. Construction and backward
// are single-threaded per tape; independent tapes may run on separate
// threads.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "diveq/tensor.hpp"

namespace diveq::ad {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor& value() const;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Gradient-tracked leaf.
    Var input(Tensor value);
    // Untracked leaf; never receives cotangent.
    Var constant(Tensor value);

    std::size_t size() const { return nodes_.size(); }
    const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
    bool tracked(std::size_t id) const { return nodes_[id].tracked; }

    // Reverse sweep from `output` with seed cotangent 1 (scalar outputs) or
    // an explicit seed of matching shape. Cotangents of leaves are then
    // available through grad(). Calling backward on an empty tape, or
    // grad() before backward, is a usage error.
    void backward(Var output);
    void backward(Var output, const Tensor& seed);
    Tensor grad(Var v) const;
    bool backward_ran() const { return backward_ran_; }

    // Node emission; used by the op free functions below.
    using Pullback = std::function<void(Tape&, const Tensor& upstream)>;
    Var emit(const char* op, Tensor value, bool tracked, Pullback pb);
    void accumulate(std::size_t id, const Tensor& contribution);
    void accumulate_at(std::size_t id, std::size_t flat_index, double v);
    void ensure_grad(std::size_t id);
    Tensor* grad_slot(std::size_t id);

private:
    struct Node {
        Tensor value;
        bool tracked = false;
        Pullback pullback;  // empty for leaves and untracked results
        const char* op = "leaf";
    };

    // Deque keeps references from value_of() stable while nodes are
    // appended mid-expression.
    std::deque<Node> nodes_;
    std::vector<Tensor> grads_;
    bool backward_ran_ = false;
};

inline const Tensor& Var::value() const { return tape->value_of(id); }

// -- Elementwise and structural primitives ----------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var square(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
// x*ln(x) with the continuous extension 0 at x = 0; inputs must be >= 0.
Var xlogx(Var a);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var l2norm(Var a);   // sqrt(sum of squares) over all elements
Var sqnorm(Var a);   // sum of squares over all elements

// Row-wise ops on N x D operands.
Var row_l2norm(Var a);            // -> length-N
Var row_sqnorm(Var a);            // -> length-N
Var row_scale(Var s, Var m);      // s: N, m: N x D -> s_n * m_{nd}
Var add_rowvec(Var m, Var v);     // m: N x D, v: D
Var col_mean(Var m);              // N x K -> K

Var matmul(Var a, Var b);
Var softmax_rows(Var a);
// Pairwise squared Euclidean distances: x (N x D), c (K x D) -> N x K.
Var pairwise_sqdist(Var x, Var c);
Var gather_rows(Var m, std::vector<std::size_t> indices);

// Forward value is `hard_value`; the pullback passes cotangents unchanged
// to `soft`. This is the hard-forward / soft-backward splice used by the
// quantizers.
Var straight_through(Var soft, Tensor hard_value);

// Applies a fixed (gradient-opaque) D x D matrix to each row of x.
Var frozen_rows_matvec(std::vector<Tensor> mats, Var x);

// Identity in the forward pass; contributes exactly zero cotangent to its
// input.
Var stop_gradient(Var a);

// Denominator guard shared by div/norm pullbacks.
inline constexpr double kDenomEpsilon = 1e-12;

}  // namespace diveq::ad
