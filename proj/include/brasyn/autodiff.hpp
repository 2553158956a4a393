#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace brasyn::ad {

// Reverse-mode tape over Tensor<T>. Graphs are built define-by-run; each op
// returns a new node holding the output value plus a closure that pushes the
// output gradient into its inputs. Creation order (seq) gives a valid
// topological order for the backward sweep.

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline thread_local bool grad_enabled = true;
inline thread_local std::uint64_t seq_counter = 0;
} // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // lazily sized
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<Var<T>> inputs;
    std::function<void(Node<T>&)> backprop;

    Tensor<T>& ensure_grad() {
        if (grad.size() != value.size()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
    void zero_grad() {
        if (grad.size()) grad.fill(T(0));
    }
};

template <class T>
Var<T> make_var(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->seq = ++detail::seq_counter;
    return n;
}

template <class T>
Var<T> constant(Tensor<T> v) {
    return make_var(std::move(v), false);
}

template <class T>
Var<T> param(Tensor<T> v) {
    return make_var(std::move(v), true);
}

template <class T>
Var<T> make_op(Tensor<T> out, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backprop) {
    bool req = false;
    if (detail::grad_enabled)
        for (const auto& in : inputs)
            if (in->requires_grad) { req = true; break; }
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(out);
    n->requires_grad = req;
    n->seq = ++detail::seq_counter;
    if (req) {
        n->inputs = std::move(inputs);
        n->backprop = std::move(backprop);
    }
    return n;
}

// Cut the tape: same value, no history.
template <class T>
Var<T> detach(const Var<T>& x) {
    return constant(Tensor<T>(x->value));
}

template <class T>
void backward(const Var<T>& root) {
    BRASYN_CHECK(root->requires_grad,
                 "backward: root does not require grad (no parameters on the tape?)");
    root->ensure_grad().fill(T(1));

    // Collect the reachable subgraph, then run in descending creation order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs)
            if (in->requires_grad && seen.insert(in.get()).second)
                stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
    for (Node<T>* n : order)
        if (n->backprop) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// GEMM bridge (Eigen). C[m,n] = op(A) * op(B), optionally accumulating.
// ---------------------------------------------------------------------------

template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a = false, bool trans_b = false,
          bool accumulate = false) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;
    MMap C(c, Eigen::Index(m), Eigen::Index(n));
    auto run = [&](const auto& A, const auto& B) {
        if (accumulate)
            C.noalias() += A * B;
        else
            C.noalias() = A * B;
    };
    if (!trans_a && !trans_b)
        run(CMap(a, Eigen::Index(m), Eigen::Index(k)), CMap(b, Eigen::Index(k), Eigen::Index(n)));
    else if (trans_a && !trans_b)
        run(CMap(a, Eigen::Index(k), Eigen::Index(m)).transpose(), CMap(b, Eigen::Index(k), Eigen::Index(n)));
    else if (!trans_a && trans_b)
        run(CMap(a, Eigen::Index(m), Eigen::Index(k)), CMap(b, Eigen::Index(n), Eigen::Index(k)).transpose());
    else
        run(CMap(a, Eigen::Index(k), Eigen::Index(m)).transpose(), CMap(b, Eigen::Index(n), Eigen::Index(k)).transpose());
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void axpy(Tensor<T>& dst, const Tensor<T>& src, T alpha = T(1)) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

template <class T, class Fwd, class Bwd>
Var<T> unary_op(const Var<T>& x, Fwd fwd, Bwd bwd) {
    Tensor<T> out(x->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x->value[i]);
    return make_op<T>(std::move(out), {x}, [bwd](Node<T>& n) {
        auto& xin = *n.inputs[0];
        if (!xin.requires_grad) return;
        auto& g = xin.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += bwd(xin.value[i], n.value[i]) * n.grad[i];
    });
}

} // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    BRASYN_CHECK(a->value.same_shape(b->value), "add: shape mismatch ",
                 shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        for (int k = 0; k < 2; ++k)
            if (n.inputs[k]->requires_grad)
                detail::axpy(n.inputs[k]->ensure_grad(), n.grad);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    BRASYN_CHECK(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        if (n.inputs[0]->requires_grad) detail::axpy(n.inputs[0]->ensure_grad(), n.grad);
        if (n.inputs[1]->requires_grad) detail::axpy(n.inputs[1]->ensure_grad(), n.grad, T(-1));
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    BRASYN_CHECK(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        auto &A = *n.inputs[0], &B = *n.inputs[1];
        if (A.requires_grad) {
            auto& g = A.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += B.value[i] * n.grad[i];
        }
        if (B.requires_grad) {
            auto& g = B.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += A.value[i] * n.grad[i];
        }
    });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    BRASYN_CHECK(a->value.same_shape(b->value), "div: shape mismatch");
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] / b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        auto &A = *n.inputs[0], &B = *n.inputs[1];
        if (A.requires_grad) {
            auto& g = A.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / B.value[i];
        }
        if (B.requires_grad) {
            auto& g = B.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= n.grad[i] * A.value[i] / (B.value[i] * B.value[i]);
        }
    });
}

template <class T>
Var<T> neg(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    return detail::unary_op(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
    return detail::unary_op(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> abs(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return std::abs(v); },
                            [](T v, T) { return v >= T(0) ? T(1) : T(-1); });
}

template <class T>
Var<T> exp(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return std::exp(v); },
                            [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return std::log(v); },
                            [](T v, T) { return T(1) / v; });
}

template <class T>
Var<T> sqrt(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return std::sqrt(v); },
                            [](T, T y) { return T(0.5) / y; });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return std::tanh(v); },
                            [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                            [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return v > T(0) ? v : T(0); },
                            [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
    return detail::unary_op(x, [slope](T v) { return v > T(0) ? v : slope * v; },
                            [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> square(const Var<T>& x) {
    return detail::unary_op(x, [](T v) { return v * v; },
                            [](T v, T) { return T(2) * v; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& x) {
    Tensor<T> out(Shape{1});
    double s = 0;
    for (std::size_t i = 0; i < x->value.size(); ++i) s += double(x->value[i]);
    out[0] = T(s);
    return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
        auto& xin = *n.inputs[0];
        if (!xin.requires_grad) return;
        auto& g = xin.ensure_grad();
        const T go = n.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
    });
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
    const std::size_t n = x->value.size();
    BRASYN_CHECK(n > 0, "mean of empty tensor");
    return scale(sum_all(x), T(1) / T(n));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x->value.reshaped(std::move(shape));
    return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
        auto& xin = *n.inputs[0];
        if (!xin.requires_grad) return;
        detail::axpy(xin.ensure_grad(), n.grad); // layouts identical
    });
}

// out[m,n] = a[m,k] * b[k,n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    BRASYN_CHECK(a->value.ndim() == 2 && b->value.ndim() == 2 &&
                     a->value.dim(1) == b->value.dim(0),
                 "matmul: incompatible shapes ", shape_str(a->value.shape()),
                 " x ", shape_str(b->value.shape()));
    const std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor<T> out(Shape{m, n});
    gemm(a->value.data(), b->value.data(), out.data(), m, k, n);
    return make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& n_) {
        auto &A = *n_.inputs[0], &B = *n_.inputs[1];
        if (A.requires_grad)
            gemm(n_.grad.data(), B.value.data(), A.ensure_grad().data(), m, n, k,
                 false, true, true);
        if (B.requires_grad)
            gemm(A.value.data(), n_.grad.data(), B.ensure_grad().data(), k, m, n,
                 true, false, true);
    });
}

} // namespace brasyn::ad
