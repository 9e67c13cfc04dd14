// SPDX-License-Identifier: Apache-2.0

#include "diveq/tape.hpp"

#include <algorithm>
#include <cmath>

#include "diveq/errors.hpp"

namespace diveq::ad {

namespace {

void check_finite(const char* op, const Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.data[i])) {
            throw numeric_error(std::string(op) + ": non-finite value at flat index " +
                                std::to_string(i));
        }
    }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw shape_error(std::string(op) + ": shape mismatch " + a.shape_str() +
                          " vs " + b.shape_str());
    }
}

void require_same_tape(const char* op, Var a, Var b) {
    if (a.tape != b.tape) {
        throw shape_error(std::string(op) + ": operands on different tapes");
    }
}

void require_matrix(const char* op, const Tensor& t) {
    if (t.rank() != 2) {
        throw shape_error(std::string(op) + ": expected a matrix, got " + t.shape_str());
    }
}

double guarded(double denom) {
    return denom >= 0.0 ? denom + kDenomEpsilon : denom - kDenomEpsilon;
}

}  // namespace

Var Tape::input(Tensor value) {
    check_finite("input", value);
    nodes_.push_back(Node{std::move(value), true, nullptr, "input"});
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
    check_finite("constant", value);
    nodes_.push_back(Node{std::move(value), false, nullptr, "constant"});
    return Var{this, nodes_.size() - 1};
}

Var Tape::emit(const char* op, Tensor value, bool tracked, Pullback pb) {
    check_finite(op, value);
    nodes_.push_back(Node{std::move(value), tracked, tracked ? std::move(pb) : nullptr, op});
    return Var{this, nodes_.size() - 1};
}

void Tape::ensure_grad(std::size_t id) {
    if (grads_[id].data.empty()) {
        grads_[id] = Tensor(nodes_[id].value.shape, 0.0);
    }
}

Tensor* Tape::grad_slot(std::size_t id) {
    if (!nodes_[id].tracked) return nullptr;
    ensure_grad(id);
    return &grads_[id];
}

void Tape::accumulate(std::size_t id, const Tensor& contribution) {
    Tensor* g = grad_slot(id);
    if (!g) return;
    for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += contribution.data[i];
}

void Tape::accumulate_at(std::size_t id, std::size_t flat_index, double v) {
    Tensor* g = grad_slot(id);
    if (!g) return;
    g->data[flat_index] += v;
}

void Tape::backward(Var output) {
    if (output.tape != this || nodes_.empty()) {
        throw std::logic_error("backward: no forward pass recorded on this tape");
    }
    const Tensor& out = nodes_[output.id].value;
    if (!out.is_scalar()) {
        throw shape_error("backward: implicit seed requires a scalar output, got " +
                          out.shape_str());
    }
    backward(output, Tensor::scalar(1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
    if (output.tape != this || nodes_.empty() || output.id >= nodes_.size()) {
        throw std::logic_error("backward: no forward pass recorded on this tape");
    }
    require_same_shape("backward seed", seed, nodes_[output.id].value);
    grads_.assign(nodes_.size(), Tensor());
    grads_[output.id] = seed;
    for (std::size_t i = output.id + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (!node.pullback || grads_[i].data.empty()) continue;
        node.pullback(*this, grads_[i]);
    }
    backward_ran_ = true;
}

Tensor Tape::grad(Var v) const {
    if (!backward_ran_) {
        throw std::logic_error("grad: backward has not run on this tape");
    }
    if (v.tape != this || v.id >= nodes_.size()) {
        throw std::logic_error("grad: variable does not belong to this tape");
    }
    if (v.id < grads_.size() && !grads_[v.id].data.empty()) return grads_[v.id];
    return Tensor(nodes_[v.id].value.shape, 0.0);
}

// -- op implementations ------------------------------------------------------

namespace {

// Shorthand for a unary elementwise op: out_i = f(a_i), da_i += dfda_i * g_i.
template <typename F, typename DF>
Var elementwise(const char* op, Var a, F f, DF dfda) {
    const Tensor& av = a.value();
    Tensor out(av.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = f(av.data[i]);
    const std::size_t aid = a.id;
    return a.tape->emit(op, std::move(out), a.tape->tracked(aid),
                        [aid, dfda](Tape& t, const Tensor& g) {
                            const Tensor& av2 = t.value_of(aid);
                            Tensor* slot = t.grad_slot(aid);
                            if (!slot) return;
                            for (std::size_t i = 0; i < g.numel(); ++i) {
                                slot->data[i] += dfda(av2.data[i]) * g.data[i];
                            }
                        });
}

}  // namespace

Var add(Var a, Var b) {
    require_same_tape("add", a, b);
    require_same_shape("add", a.value(), b.value());
    Tensor out(a.value().shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = a.value().data[i] + b.value().data[i];
    const std::size_t aid = a.id, bid = b.id;
    const bool tracked = a.tape->tracked(aid) || a.tape->tracked(bid);
    return a.tape->emit("add", std::move(out), tracked, [aid, bid](Tape& t, const Tensor& g) {
        t.accumulate(aid, g);
        t.accumulate(bid, g);
    });
}

Var sub(Var a, Var b) {
    require_same_tape("sub", a, b);
    require_same_shape("sub", a.value(), b.value());
    Tensor out(a.value().shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = a.value().data[i] - b.value().data[i];
    const std::size_t aid = a.id, bid = b.id;
    const bool tracked = a.tape->tracked(aid) || a.tape->tracked(bid);
    return a.tape->emit("sub", std::move(out), tracked, [aid, bid](Tape& t, const Tensor& g) {
        t.accumulate(aid, g);
        if (Tensor* slot = t.grad_slot(bid)) {
            for (std::size_t i = 0; i < g.numel(); ++i) slot->data[i] -= g.data[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same_tape("mul", a, b);
    require_same_shape("mul", a.value(), b.value());
    Tensor out(a.value().shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = a.value().data[i] * b.value().data[i];
    const std::size_t aid = a.id, bid = b.id;
    const bool tracked = a.tape->tracked(aid) || a.tape->tracked(bid);
    return a.tape->emit("mul", std::move(out), tracked, [aid, bid](Tape& t, const Tensor& g) {
        const Tensor& av = t.value_of(aid);
        const Tensor& bv = t.value_of(bid);
        if (Tensor* slot = t.grad_slot(aid)) {
            for (std::size_t i = 0; i < g.numel(); ++i) slot->data[i] += bv.data[i] * g.data[i];
        }
        if (Tensor* slot = t.grad_slot(bid)) {
            for (std::size_t i = 0; i < g.numel(); ++i) slot->data[i] += av.data[i] * g.data[i];
        }
    });
}

Var div(Var a, Var b) {
    require_same_tape("div", a, b);
    require_same_shape("div", a.value(), b.value());
    Tensor out(a.value().shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = a.value().data[i] / guarded(b.value().data[i]);
    const std::size_t aid = a.id, bid = b.id;
    const bool tracked = a.tape->tracked(aid) || a.tape->tracked(bid);
    return a.tape->emit("div", std::move(out), tracked, [aid, bid](Tape& t, const Tensor& g) {
        const Tensor& av = t.value_of(aid);
        const Tensor& bv = t.value_of(bid);
        if (Tensor* slot = t.grad_slot(aid)) {
            for (std::size_t i = 0; i < g.numel(); ++i)
                slot->data[i] += g.data[i] / guarded(bv.data[i]);
        }
        if (Tensor* slot = t.grad_slot(bid)) {
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const double d = guarded(bv.data[i]);
                slot->data[i] -= g.data[i] * av.data[i] / (d * d);
            }
        }
    });
}

Var scale(Var a, double s) {
    Tensor out(a.value().shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = s * a.value().data[i];
    const std::size_t aid = a.id;
    return a.tape->emit("scale", std::move(out), a.tape->tracked(aid),
                        [aid, s](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                for (std::size_t i = 0; i < g.numel(); ++i)
                                    slot->data[i] += s * g.data[i];
                            }
                        });
}

Var square(Var a) {
    return elementwise(
        "square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var exp(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = std::exp(av.data[i]);
    const std::size_t aid = a.id;
    Tensor y = out;  // forward value reused by the pullback
    return a.tape->emit("exp", std::move(out), a.tape->tracked(aid),
                        [aid, y = std::move(y)](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                for (std::size_t i = 0; i < g.numel(); ++i)
                                    slot->data[i] += y.data[i] * g.data[i];
                            }
                        });
}

Var log(Var a) {
    return elementwise(
        "log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var tanh(Var a) {
    return elementwise(
        "tanh", a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double y = std::tanh(x);
            return 1.0 - y * y;
        });
}

Var relu(Var a) {
    return elementwise(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var xlogx(Var a) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.numel(); ++i) {
        if (av.data[i] < 0.0) {
            throw numeric_error("xlogx: negative input at flat index " + std::to_string(i));
        }
    }
    return elementwise(
        "xlogx", a, [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; },
        [](double x) { return x > 0.0 ? std::log(x) + 1.0 : 0.0; });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    const std::size_t aid = a.id;
    return a.tape->emit("sum", Tensor::scalar(s), a.tape->tracked(aid),
                        [aid](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                for (double& v : slot->data) v += g.data[0];
                            }
                        });
}

Var mean(Var a) {
    const std::size_t n = a.value().numel();
    if (n == 0) throw shape_error("mean: empty tensor");
    double s = 0.0;
    for (double v : a.value().data) s += v;
    const std::size_t aid = a.id;
    const double inv = 1.0 / static_cast<double>(n);
    return a.tape->emit("mean", Tensor::scalar(s * inv), a.tape->tracked(aid),
                        [aid, inv](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                for (double& v : slot->data) v += inv * g.data[0];
                            }
                        });
}

Var sqnorm(Var a) {
    double s = 0.0;
    for (double v : a.value().data) s += v * v;
    const std::size_t aid = a.id;
    return a.tape->emit("sqnorm", Tensor::scalar(s), a.tape->tracked(aid),
                        [aid](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                const Tensor& av = t.value_of(aid);
                                for (std::size_t i = 0; i < av.numel(); ++i)
                                    slot->data[i] += 2.0 * av.data[i] * g.data[0];
                            }
                        });
}

Var l2norm(Var a) {
    double s = 0.0;
    for (double v : a.value().data) s += v * v;
    const double r = std::sqrt(s);
    const std::size_t aid = a.id;
    return a.tape->emit("l2norm", Tensor::scalar(r), a.tape->tracked(aid),
                        [aid, r](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                const Tensor& av = t.value_of(aid);
                                const double inv = 1.0 / (r + kDenomEpsilon);
                                for (std::size_t i = 0; i < av.numel(); ++i)
                                    slot->data[i] += av.data[i] * inv * g.data[0];
                            }
                        });
}

Var row_sqnorm(Var a) {
    require_matrix("row_sqnorm", a.value());
    const Tensor& av = a.value();
    const std::size_t n = av.rows(), d = av.cols();
    Tensor out({n});
    for (std::size_t r = 0; r < n; ++r) out.data[r] = dot(av.row(r), av.row(r), d);
    const std::size_t aid = a.id;
    return a.tape->emit("row_sqnorm", std::move(out), a.tape->tracked(aid),
                        [aid, n, d](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                const Tensor& av2 = t.value_of(aid);
                                for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t c = 0; c < d; ++c)
                                        slot->data[r * d + c] +=
                                            2.0 * av2.data[r * d + c] * g.data[r];
                            }
                        });
}

Var row_l2norm(Var a) {
    require_matrix("row_l2norm", a.value());
    const Tensor& av = a.value();
    const std::size_t n = av.rows(), d = av.cols();
    Tensor out({n});
    for (std::size_t r = 0; r < n; ++r) out.data[r] = norm(av.row(r), d);
    const std::size_t aid = a.id;
    return a.tape->emit(
        "row_l2norm", std::move(out), a.tape->tracked(aid),
        [aid, n, d](Tape& t, const Tensor& g) {
            if (Tensor* slot = t.grad_slot(aid)) {
                const Tensor& av2 = t.value_of(aid);
                for (std::size_t r = 0; r < n; ++r) {
                    const double inv = 1.0 / (norm(av2.row(r), d) + kDenomEpsilon);
                    for (std::size_t c = 0; c < d; ++c)
                        slot->data[r * d + c] += av2.data[r * d + c] * inv * g.data[r];
                }
            }
        });
}

Var row_scale(Var s, Var m) {
    require_same_tape("row_scale", s, m);
    require_matrix("row_scale", m.value());
    const Tensor& sv = s.value();
    const Tensor& mv = m.value();
    if (sv.rank() != 1 || sv.numel() != mv.rows()) {
        throw shape_error("row_scale: scale " + sv.shape_str() + " vs matrix " +
                          mv.shape_str());
    }
    const std::size_t n = mv.rows(), d = mv.cols();
    Tensor out({n, d});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = sv.data[r] * mv.data[r * d + c];
    const std::size_t sid = s.id, mid = m.id;
    const bool tracked = s.tape->tracked(sid) || s.tape->tracked(mid);
    return s.tape->emit(
        "row_scale", std::move(out), tracked, [sid, mid, n, d](Tape& t, const Tensor& g) {
            const Tensor& sv2 = t.value_of(sid);
            const Tensor& mv2 = t.value_of(mid);
            if (Tensor* slot = t.grad_slot(sid)) {
                for (std::size_t r = 0; r < n; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c)
                        acc += g.data[r * d + c] * mv2.data[r * d + c];
                    slot->data[r] += acc;
                }
            }
            if (Tensor* slot = t.grad_slot(mid)) {
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c)
                        slot->data[r * d + c] += sv2.data[r] * g.data[r * d + c];
            }
        });
}

Var add_rowvec(Var m, Var v) {
    require_same_tape("add_rowvec", m, v);
    require_matrix("add_rowvec", m.value());
    const Tensor& mv = m.value();
    const Tensor& vv = v.value();
    if (vv.numel() != mv.cols()) {
        throw shape_error("add_rowvec: vector " + vv.shape_str() + " vs matrix " +
                          mv.shape_str());
    }
    const std::size_t n = mv.rows(), d = mv.cols();
    Tensor out({n, d});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = mv.data[r * d + c] + vv.data[c];
    const std::size_t mid = m.id, vid = v.id;
    const bool tracked = m.tape->tracked(mid) || m.tape->tracked(vid);
    return m.tape->emit("add_rowvec", std::move(out), tracked,
                        [mid, vid, n, d](Tape& t, const Tensor& g) {
                            t.accumulate(mid, g);
                            if (Tensor* slot = t.grad_slot(vid)) {
                                for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t c = 0; c < d; ++c)
                                        slot->data[c] += g.data[r * d + c];
                            }
                        });
}

Var col_mean(Var m) {
    require_matrix("col_mean", m.value());
    const Tensor& mv = m.value();
    const std::size_t n = mv.rows(), d = mv.cols();
    if (n == 0) throw shape_error("col_mean: empty matrix");
    Tensor out({d});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out.data[c] += mv.data[r * d + c];
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t c = 0; c < d; ++c) out.data[c] *= inv;
    const std::size_t mid = m.id;
    return m.tape->emit("col_mean", std::move(out), m.tape->tracked(mid),
                        [mid, n, d, inv](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(mid)) {
                                for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t c = 0; c < d; ++c)
                                        slot->data[r * d + c] += inv * g.data[c];
                            }
                        });
}

Var matmul(Var a, Var b) {
    require_same_tape("matmul", a, b);
    require_matrix("matmul", a.value());
    require_matrix("matmul", b.value());
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw shape_error("matmul: " + av.shape_str() + " x " + bv.shape_str());
    }
    const std::size_t n = av.rows(), k = av.cols(), p = bv.cols();
    Tensor out({n, p});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double aij = av.data[i * k + j];
            for (std::size_t c = 0; c < p; ++c) out.data[i * p + c] += aij * bv.data[j * p + c];
        }
    const std::size_t aid = a.id, bid = b.id;
    const bool tracked = a.tape->tracked(aid) || a.tape->tracked(bid);
    return a.tape->emit(
        "matmul", std::move(out), tracked, [aid, bid, n, k, p](Tape& t, const Tensor& g) {
            const Tensor& av2 = t.value_of(aid);
            const Tensor& bv2 = t.value_of(bid);
            if (Tensor* slot = t.grad_slot(aid)) {
                // dA = g @ B^T
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < p; ++c)
                            acc += g.data[i * p + c] * bv2.data[j * p + c];
                        slot->data[i * k + j] += acc;
                    }
            }
            if (Tensor* slot = t.grad_slot(bid)) {
                // dB = A^T @ g
                for (std::size_t j = 0; j < k; ++j)
                    for (std::size_t c = 0; c < p; ++c) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < n; ++i)
                            acc += av2.data[i * k + j] * g.data[i * p + c];
                        slot->data[j * p + c] += acc;
                    }
            }
        });
}

Var softmax_rows(Var a) {
    require_matrix("softmax", a.value());
    const Tensor& av = a.value();
    const std::size_t n = av.rows(), k = av.cols();
    Tensor out({n, k});
    for (std::size_t r = 0; r < n; ++r) {
        double mx = av.data[r * k];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, av.data[r * k + c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            out.data[r * k + c] = std::exp(av.data[r * k + c] - mx);
            denom += out.data[r * k + c];
        }
        for (std::size_t c = 0; c < k; ++c) out.data[r * k + c] /= denom;
    }
    const std::size_t aid = a.id;
    Tensor y = out;  // forward value reused by the pullback
    return a.tape->emit("softmax", std::move(out), a.tape->tracked(aid),
                        [aid, y = std::move(y), n, k](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(aid)) {
                                for (std::size_t r = 0; r < n; ++r) {
                                    double inner = 0.0;
                                    for (std::size_t c = 0; c < k; ++c)
                                        inner += g.data[r * k + c] * y.data[r * k + c];
                                    for (std::size_t c = 0; c < k; ++c)
                                        slot->data[r * k + c] +=
                                            y.data[r * k + c] * (g.data[r * k + c] - inner);
                                }
                            }
                        });
}

Var pairwise_sqdist(Var x, Var c) {
    require_same_tape("pairwise_sqdist", x, c);
    require_matrix("pairwise_sqdist", x.value());
    require_matrix("pairwise_sqdist", c.value());
    const Tensor& xv = x.value();
    const Tensor& cv = c.value();
    if (xv.cols() != cv.cols()) {
        throw shape_error("pairwise_sqdist: " + xv.shape_str() + " vs " + cv.shape_str());
    }
    const std::size_t n = xv.rows(), k = cv.rows(), d = xv.cols();
    Tensor out({n, k});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
            out.data[i * k + j] = squared_distance(xv.row(i), cv.row(j), d);
    const std::size_t xid = x.id, cid = c.id;
    const bool tracked = x.tape->tracked(xid) || x.tape->tracked(cid);
    return x.tape->emit(
        "pairwise_sqdist", std::move(out), tracked,
        [xid, cid, n, k, d](Tape& t, const Tensor& g) {
            const Tensor& xv2 = t.value_of(xid);
            const Tensor& cv2 = t.value_of(cid);
            Tensor* xs = t.grad_slot(xid);
            Tensor* cs = t.grad_slot(cid);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    const double gij = g.data[i * k + j];
                    if (gij == 0.0) continue;
                    for (std::size_t e = 0; e < d; ++e) {
                        const double diff = xv2.data[i * d + e] - cv2.data[j * d + e];
                        if (xs) xs->data[i * d + e] += 2.0 * diff * gij;
                        if (cs) cs->data[j * d + e] -= 2.0 * diff * gij;
                    }
                }
        });
}

Var gather_rows(Var m, std::vector<std::size_t> indices) {
    require_matrix("gather_rows", m.value());
    const Tensor& mv = m.value();
    const std::size_t d = mv.cols();
    Tensor out({indices.size(), d});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= mv.rows()) {
            throw shape_error("gather_rows: index " + std::to_string(indices[r]) +
                              " out of range for " + mv.shape_str());
        }
        std::copy_n(mv.row(indices[r]), d, out.row(r));
    }
    const std::size_t mid = m.id;
    return m.tape->emit("gather_rows", std::move(out), m.tape->tracked(mid),
                        [mid, indices = std::move(indices), d](Tape& t, const Tensor& g) {
                            if (Tensor* slot = t.grad_slot(mid)) {
                                for (std::size_t r = 0; r < indices.size(); ++r)
                                    for (std::size_t c = 0; c < d; ++c)
                                        slot->data[indices[r] * d + c] += g.data[r * d + c];
                            }
                        });
}

Var straight_through(Var soft, Tensor hard_value) {
    require_same_shape("straight_through", soft.value(), hard_value);
    const std::size_t sid = soft.id;
    return soft.tape->emit("straight_through", std::move(hard_value),
                           soft.tape->tracked(sid),
                           [sid](Tape& t, const Tensor& g) { t.accumulate(sid, g); });
}

Var frozen_rows_matvec(std::vector<Tensor> mats, Var x) {
    require_matrix("frozen_rows_matvec", x.value());
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), d = xv.cols();
    if (mats.size() != n) {
        throw shape_error("frozen_rows_matvec: " + std::to_string(mats.size()) +
                          " matrices for " + std::to_string(n) + " rows");
    }
    for (const Tensor& m : mats) {
        if (m.rank() != 2 || m.rows() != d || m.cols() != d) {
            throw shape_error("frozen_rows_matvec: matrix " + m.shape_str() +
                              " does not match row width " + std::to_string(d));
        }
    }
    Tensor out({n, d});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) out.data[r * d + i] = dot(mats[r].row(i), xv.row(r), d);
    const std::size_t xid = x.id;
    return x.tape->emit(
        "frozen_rows_matvec", std::move(out), x.tape->tracked(xid),
        [xid, mats = std::move(mats), n, d](Tape& t, const Tensor& g) {
            if (Tensor* slot = t.grad_slot(xid)) {
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < d; ++i) {
                        // dx_r = A_r^T g_r
                        double acc = 0.0;
                        for (std::size_t j = 0; j < d; ++j)
                            acc += mats[r].data[j * d + i] * g.data[r * d + j];
                        slot->data[r * d + i] += acc;
                    }
            }
        });
}

Var stop_gradient(Var a) {
    Tensor copy = a.value();
    return a.tape->emit("stop_gradient", std::move(copy), false, nullptr);
}

}  // namespace diveq::ad
