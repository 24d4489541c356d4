#pragma once

// Differentiable n-d array with a define-by-run tape. 32-bit elements for
// training (Array), 64-bit for verification (Array64). All kernels are
// deterministic: fixed accumulation order, fixed parallel partition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "vare/common.hpp"

namespace vare {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {
inline uint64_t& node_seq_counter() {
    thread_local uint64_t c = 0;
    return c;
}
inline bool& grad_enabled_flag() {
    thread_local bool f = true;
    return f;
}
}  // namespace detail

// Disables tape recording in scope (teacher forwards, sampling).
struct NoGrad {
    bool prev;
    NoGrad() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGrad() { detail::grad_enabled_flag() = prev; }
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily, same shape as value
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    uint64_t seq = detail::node_seq_counter()++;

    int64_t numel() const { return int64_t(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
class ArrayT {
public:
    ArrayT() = default;
    explicit ArrayT(NodePtr<T> n) : node_(std::move(n)) {}

    static ArrayT zeros(Shape s) { return filled(std::move(s), T(0)); }

    static ArrayT filled(Shape s, T v) {
        auto n = std::make_shared<Node<T>>();
        n->value.assign(size_t(shape_numel(s)), v);
        n->shape = std::move(s);
        return ArrayT(n);
    }

    static ArrayT scalar(T v) { return filled({}, v); }

    static ArrayT from(Shape s, std::vector<T> v) {
        if (int64_t(v.size()) != shape_numel(s))
            throw ShapeError("Array::from: " + std::to_string(v.size()) + " elements for shape " + shape_str(s));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(s);
        n->value = std::move(v);
        return ArrayT(n);
    }

    static ArrayT randn(Shape s, Rng& rng, T stddev) {
        auto a = zeros(std::move(s));
        for (auto& x : a.values()) x = T(rng.normal()) * stddev;
        return a;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return node_->numel(); }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    T item() const {
        if (node_->numel() != 1) throw ShapeError("item: array is not scalar, shape " + shape_str(node_->shape));
        return node_->value[0];
    }

    ArrayT& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    NodePtr<T> node() const { return node_; }

private:
    NodePtr<T> node_;
};

using Array = ArrayT<float>;
using Array64 = ArrayT<double>;

// ---------------------------------------------------------------------------
// Tape: the reverse-topological record of one backward pass. Rebuilt per call
// (define-by-run). Intermediate grads are cleared before replay so repeated
// passes over zeroed leaves are idempotent.
// ---------------------------------------------------------------------------

template <typename T>
struct Tape {
    Node<T>* root = nullptr;
    std::vector<Node<T>*> order;  // descending seq = reverse topological

    static Tape from(const NodePtr<T>& root) {
        Tape t;
        t.root = root.get();
        std::vector<Node<T>*> stack{root.get()};
        std::vector<const Node<T>*> seen;
        auto mark = [&](Node<T>* n) {
            auto it = std::lower_bound(seen.begin(), seen.end(), n);
            if (it != seen.end() && *it == n) return false;
            seen.insert(it, n);
            return true;
        };
        mark(root.get());
        while (!stack.empty()) {
            Node<T>* n = stack.back();
            stack.pop_back();
            t.order.push_back(n);
            for (auto& p : n->parents)
                if (p->requires_grad && mark(p.get())) stack.push_back(p.get());
        }
        std::sort(t.order.begin(), t.order.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
        return t;
    }

    void backward() {
        for (Node<T>* n : order)
            if (!n->parents.empty()) n->grad.assign(n->value.size(), T(0));
        root->ensure_grad();
        std::fill(root->grad.begin(), root->grad.end(), T(0));
        root->grad[0] = T(1);
        for (Node<T>* n : order)
            if (n->backward_fn) n->backward_fn(*n);
    }
};

template <typename T>
void backward(const ArrayT<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.node()->requires_grad) return;
    Tape<T>::from(loss.node()).backward();
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
ArrayT<T> fresh(Shape s, const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->value.resize(size_t(shape_numel(s)));
    n->shape = std::move(s);
    n->op = op;
    return ArrayT<T>(n);
}

template <typename T>
void attach(const ArrayT<T>& out, std::initializer_list<NodePtr<T>> parents,
            std::function<void(Node<T>&)> fn) {
    if (!grad_enabled()) return;
    bool any = false;
    for (auto& p : parents) any = any || p->requires_grad;
    if (!any) return;
    auto n = out.node();
    n->requires_grad = true;
    n->parents.assign(parents);
    n->backward_fn = std::move(fn);
}

// rhs broadcast: equal shape, trailing-suffix shape, or scalar.
enum class Bcast { Equal, Suffix, Scalar };

template <typename T>
Bcast bcast_mode(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return Bcast::Equal;
    if (shape_numel(b) == 1) return Bcast::Scalar;
    if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - b.size())) return Bcast::Suffix;
    shape_fail(op, a, b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
ArrayT<T> add(const ArrayT<T>& a, const ArrayT<T>& b) {
    auto mode = detail::bcast_mode<T>("add", a.shape(), b.shape());
    auto out = detail::fresh<T>(a.shape(), "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    const int64_t n = a.size(), bn = b.size();
    if (mode == detail::Bcast::Equal) {
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    } else if (mode == detail::Bcast::Scalar) {
        const T s = bv[0];
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + s;
    } else {
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i % bn];
    }
    detail::attach<T>(out, {a.node(), b.node()}, [mode, bn](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const int64_t n = self.numel();
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            if (mode == detail::Bcast::Equal) {
                for (int64_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i];
            } else if (mode == detail::Bcast::Scalar) {
                T s = 0;
                for (int64_t i = 0; i < n; ++i) s += self.grad[i];
                pb.grad[0] += s;
            } else {
                for (int64_t i = 0; i < n; ++i) pb.grad[i % bn] += self.grad[i];
            }
        }
    });
    return out;
}

template <typename T>
ArrayT<T> mul(const ArrayT<T>& a, const ArrayT<T>& b) {
    auto mode = detail::bcast_mode<T>("mul", a.shape(), b.shape());
    auto out = detail::fresh<T>(a.shape(), "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    const int64_t n = a.size(), bn = b.size();
    if (mode == detail::Bcast::Equal) {
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
    } else if (mode == detail::Bcast::Scalar) {
        const T s = bv[0];
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * s;
    } else {
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i % bn];
    }
    detail::attach<T>(out, {a.node(), b.node()}, [mode, bn](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const int64_t n = self.numel();
        if (pa.requires_grad) {
            pa.ensure_grad();
            if (mode == detail::Bcast::Equal) {
                for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * pb.value[i];
            } else if (mode == detail::Bcast::Scalar) {
                const T s = pb.value[0];
                for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * s;
            } else {
                for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * pb.value[i % bn];
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            if (mode == detail::Bcast::Equal) {
                for (int64_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i] * pa.value[i];
            } else if (mode == detail::Bcast::Scalar) {
                T s = 0;
                for (int64_t i = 0; i < n; ++i) s += self.grad[i] * pa.value[i];
                pb.grad[0] += s;
            } else {
                for (int64_t i = 0; i < n; ++i) pb.grad[i % bn] += self.grad[i] * pa.value[i];
            }
        }
    });
    return out;
}

template <typename T>
ArrayT<T> scale(const ArrayT<T>& a, T c) {
    auto out = detail::fresh<T>(a.shape(), "scale");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] * c;
    detail::attach<T>(out, {a.node()}, [c](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] * c;
    });
    return out;
}

template <typename T>
ArrayT<T> add_const(const ArrayT<T>& a, T c) {
    auto out = detail::fresh<T>(a.shape(), "add_const");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] + c;
    detail::attach<T>(out, {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i];
    });
    return out;
}

template <typename T>
ArrayT<T> sub(const ArrayT<T>& a, const ArrayT<T>& b) {
    return add(a, scale(b, T(-1)));
}

template <typename T>
ArrayT<T> sigmoid(const ArrayT<T>& a) {
    auto out = detail::fresh<T>(a.shape(), "sigmoid");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < a.size(); ++i) {
        const T x = av[i];
        ov[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                          : std::exp(x) / (T(1) + std::exp(x));
    }
    detail::attach<T>(out, {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) {
            const T s = self.value[i];
            p.grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
    return out;
}

template <typename T>
ArrayT<T> log(const ArrayT<T>& a) {
    auto out = detail::fresh<T>(a.shape(), "log");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < a.size(); ++i) {
        if (!(av[i] > T(0)))
            throw DomainError("log: non-positive input " + std::to_string(double(av[i])) +
                              " at flat index " + std::to_string(i) + " (clamp first)");
        ov[i] = std::log(av[i]);
    }
    detail::attach<T>(out, {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] / p.value[i];
    });
    return out;
}

template <typename T>
ArrayT<T> exp(const ArrayT<T>& a) {
    auto out = detail::fresh<T>(a.shape(), "exp");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < a.size(); ++i) ov[i] = std::exp(av[i]);
    detail::attach<T>(out, {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] * self.value[i];
    });
    return out;
}

template <typename T>
ArrayT<T> clamp(const ArrayT<T>& a, T lo, T hi) {
    auto out = detail::fresh<T>(a.shape(), "clamp");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < a.size(); ++i) ov[i] = std::min(hi, std::max(lo, av[i]));
    detail::attach<T>(out, {a.node()}, [lo, hi](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) {
            const T x = p.value[i];
            if (x > lo && x < hi) p.grad[i] += self.grad[i];
        }
    });
    return out;
}

template <typename T>
ArrayT<T> stop_gradient(const ArrayT<T>& a) {
    auto out = detail::fresh<T>(a.shape(), "stop_gradient");
    out.values() = a.values();
    return out;  // no parents: adjoint flow ends here
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
ArrayT<T> sum(const ArrayT<T>& a) {
    auto out = detail::fresh<T>({}, "sum");
    double acc = 0;  // double accumulator, fixed order
    for (T v : a.values()) acc += double(v);
    out.values()[0] = T(acc);
    detail::attach<T>(out, {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T g = self.grad[0];
        for (auto& gi : p.grad) gi += g;
    });
    return out;
}

template <typename T>
ArrayT<T> mean(const ArrayT<T>& a) {
    const int64_t n = a.size();
    if (n == 0) throw ShapeError("mean: empty array");
    return scale(sum(a), T(1) / T(n));
}

// Reduction over one axis, removing it.
template <typename T>
ArrayT<T> sum_axis(const ArrayT<T>& a, int axis) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= int(s.size())) throw ShapeError("sum_axis: axis out of range for " + shape_str(s));
    Shape os;
    for (int i = 0; i < int(s.size()); ++i)
        if (i != axis) os.push_back(s[i]);
    auto out = detail::fresh<T>(os, "sum_axis");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < int(s.size()); ++i) inner *= s[i];
    const int64_t ax = s[axis];
    const auto& av = a.values();
    auto& ov = out.values();
    std::fill(ov.begin(), ov.end(), T(0));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < ax; ++k) {
            const T* src = av.data() + (o * ax + k) * inner;
            T* dst = ov.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    detail::attach<T>(out, {a.node()}, [outer, inner, ax](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t k = 0; k < ax; ++k) {
                T* dst = p.grad.data() + (o * ax + k) * inner;
                const T* src = self.grad.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    return out;
}

template <typename T>
ArrayT<T> mean_axis(const ArrayT<T>& a, int axis) {
    return scale(sum_axis(a, axis), T(1) / T(a.shape()[axis]));
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

template <typename T>
ArrayT<T> softmax_last(const ArrayT<T>& a) {
    const Shape& s = a.shape();
    if (s.empty()) throw ShapeError("softmax_last: scalar input");
    const int64_t d = s.back();
    const int64_t rows = a.size() / d;
    auto out = detail::fresh<T>(s, "softmax_last");
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * d;
        T* y = ov.data() + r * d;
        T m = x[0];
        for (int64_t i = 1; i < d; ++i) m = std::max(m, x[i]);
        T z = 0;
        for (int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        const T inv = T(1) / z;
        for (int64_t i = 0; i < d; ++i) y[i] *= inv;
    }
    detail::attach<T>(out, {a.node()}, [d, rows](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * d;
            const T* g = self.grad.data() + r * d;
            T* dst = p.grad.data() + r * d;
            T dot = 0;
            for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
            for (int64_t i = 0; i < d; ++i) dst[i] += y[i] * (g[i] - dot);
        }
    });
    return out;
}

// Layer normalization over the last axis with learned gain/bias of shape [d].
template <typename T>
ArrayT<T> layer_norm(const ArrayT<T>& x, const ArrayT<T>& gain, const ArrayT<T>& bias, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("layer_norm: scalar input");
    const int64_t d = s.back();
    if (gain.size() != d) shape_fail("layer_norm(gain)", s, gain.shape());
    if (bias.size() != d) shape_fail("layer_norm(bias)", s, bias.shape());
    const int64_t rows = x.size() / d;
    auto out = detail::fresh<T>(s, "layer_norm");
    auto xhat = std::make_shared<std::vector<T>>(size_t(x.size()));
    auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    auto& ov = out.values();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = xv.data() + r * d;
        T mu = 0;
        for (int64_t i = 0; i < d; ++i) mu += xp[i];
        mu /= T(d);
        T var = 0;
        for (int64_t i = 0; i < d; ++i) {
            const T c = xp[i] - mu;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        T* xh = xhat->data() + r * d;
        T* y = ov.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            xh[i] = (xp[i] - mu) * is;
            y[i] = xh[i] * gv[i] + bv[i];
        }
    }
    detail::attach<T>(out, {x.node(), gain.node(), bias.node()},
                      [d, rows, xhat, inv_std](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* g = self.grad.data() + r * d;
            const T* xh = xhat->data() + r * d;
            if (pg.requires_grad)
                for (int64_t i = 0; i < d; ++i) pg.grad[i] += g[i] * xh[i];
            if (pb.requires_grad)
                for (int64_t i = 0; i < d; ++i) pb.grad[i] += g[i];
            if (px.requires_grad) {
                const T is = (*inv_std)[r];
                T mean_gh = 0, mean_ghx = 0;
                for (int64_t i = 0; i < d; ++i) {
                    const T gh = g[i] * pg.value[i];
                    mean_gh += gh;
                    mean_ghx += gh * xh[i];
                }
                mean_gh /= T(d);
                mean_ghx /= T(d);
                T* dst = px.grad.data() + r * d;
                for (int64_t i = 0; i < d; ++i) {
                    const T gh = g[i] * pg.value[i];
                    dst[i] += is * (gh - mean_gh - xh[i] * mean_ghx);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul kernels (parallel over rows, deterministic partition)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void mm_nn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
    const int64_t grain = std::max<int64_t>(1, 131072 / std::max<int64_t>(1, K * N));
    parallel_for(M, grain, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            T* c = C + i * N;
            if (!accumulate)
                for (int64_t j = 0; j < N; ++j) c[j] = T(0);
            const T* a = A + i * K;
            for (int64_t k = 0; k < K; ++k) {
                const T av = a[k];
                const T* b = B + k * N;
                for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    });
}

// C[M,N] += A[M,K] * B^T where B is [N,K]
template <typename T>
void mm_nt(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
    parallel_for(M, 1, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const T* a = A + i * K;
            T* c = C + i * N;
            for (int64_t j = 0; j < N; ++j) {
                const T* b = B + j * K;
                T acc = 0;
                for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
                c[j] += acc;
            }
        }
    });
}

// C[K,N] += A^T * B where A is [M,K], B is [M,N]. Streams A/B row-wise and
// keeps C hot; two fixed halves reduced in order so results stay
// deterministic under threading.
template <typename T>
void mm_tn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
    auto accumulate_rows = [&](T* dst, int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const T* a = A + i * K;
            const T* b = B + i * N;
            for (int64_t k = 0; k < K; ++k) {
                const T av = a[k];
                if (av == T(0)) continue;
                T* c = dst + k * N;
                for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    };
    const int64_t kn = K * N;
    if (thread_count() < 2 || M < 64 || kn > (1 << 20)) {
        accumulate_rows(C, 0, M);
        return;
    }
    const int64_t mid = M / 2;
    std::vector<T> partial(static_cast<size_t>(kn), T(0));
    bool used[2] = {false, false};
    parallel_for(2, 1, [&](int64_t h0, int64_t h1) {
        for (int64_t h = h0; h < h1; ++h) {
            if (h == 0) {
                accumulate_rows(C, 0, mid);
                used[0] = true;
            } else {
                accumulate_rows(partial.data(), mid, M);
                used[1] = true;
            }
        }
    });
    (void)used;
    for (int64_t i = 0; i < kn; ++i) C[i] += partial[i];
}

}  // namespace detail

template <typename T>
ArrayT<T> matmul(const ArrayT<T>& a, const ArrayT<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_fail("matmul", sa, sb);
    const int64_t M = sa[0], K = sa[1], N = sb[1];
    auto out = detail::fresh<T>({int(M), int(N)}, "matmul");
    detail::mm_nn(a.values().data(), b.values().data(), out.values().data(), M, K, N, false);
    detail::attach<T>(out, {a.node(), b.node()}, [M, K, N](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            detail::mm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), M, N, K);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            detail::mm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), M, K, N);
        }
    });
    return out;
}

// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N]
template <typename T>
ArrayT<T> bmm(const ArrayT<T>& a, const ArrayT<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) shape_fail("bmm", sa, sb);
    const int64_t B = sa[0], M = sa[1], K = sa[2], N = sb[2];
    auto out = detail::fresh<T>({int(B), int(M), int(N)}, "bmm");
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    T* op = out.values().data();
    parallel_for(B, 1, [&](int64_t b0, int64_t b1) {
        for (int64_t i = b0; i < b1; ++i)
            detail::mm_nn(ap + i * M * K, bp + i * K * N, op + i * M * N, M, K, N, false);
    });
    detail::attach<T>(out, {a.node(), b.node()}, [B, M, K, N](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        parallel_for(B, 1, [&](int64_t b0, int64_t b1) {
            for (int64_t i = b0; i < b1; ++i) {
                const T* g = self.grad.data() + i * M * N;
                if (pa.requires_grad)
                    detail::mm_nt(g, pb.value.data() + i * K * N, pa.grad.data() + i * M * K, M, N, K);
                if (pb.requires_grad)
                    detail::mm_tn(pa.value.data() + i * M * K, g, pb.grad.data() + i * K * N, M, K, N);
            }
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// movement ops
// ---------------------------------------------------------------------------

template <typename T>
ArrayT<T> reshape(const ArrayT<T>& a, Shape s) {
    if (shape_numel(s) != a.size()) shape_fail("reshape", a.shape(), s);
    auto out = detail::fresh<T>(std::move(s), "reshape");
    out.values() = a.values();
    detail::attach<T>(out, {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i];
    });
    return out;
}

namespace detail {
inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}
}  // namespace detail

// Generalized transpose: materialized axis permutation.
template <typename T>
ArrayT<T> permute(const ArrayT<T>& a, const std::vector<int>& perm) {
    const Shape& s = a.shape();
    if (perm.size() != s.size()) throw ShapeError("permute: rank mismatch for " + shape_str(s));
    Shape os(s.size());
    for (size_t i = 0; i < perm.size(); ++i) os[i] = s[size_t(perm[i])];
    auto out = detail::fresh<T>(os, "permute");
    const auto in_st = detail::row_major_strides(s);
    std::vector<int64_t> gather_st(s.size());  // stride into input per output axis
    for (size_t i = 0; i < perm.size(); ++i) gather_st[i] = in_st[size_t(perm[i])];
    const auto& av = a.values();
    auto& ov = out.values();
    const int rank = int(s.size());
    std::vector<int64_t> idx(size_t(rank), 0);
    int64_t src = 0;
    for (int64_t o = 0; o < a.size(); ++o) {
        ov[o] = av[src];
        for (int ax = rank - 1; ax >= 0; --ax) {
            if (++idx[ax] < os[ax]) {
                src += gather_st[ax];
                break;
            }
            src -= gather_st[ax] * (os[ax] - 1);
            idx[ax] = 0;
        }
    }
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
    detail::attach<T>(out, {a.node()}, [os, gather_st, rank](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        std::vector<int64_t> idx(size_t(rank), 0);
        int64_t src = 0;
        for (int64_t o = 0; o < self.numel(); ++o) {
            p.grad[src] += self.grad[o];
            for (int ax = rank - 1; ax >= 0; --ax) {
                if (++idx[ax] < os[ax]) {
                    src += gather_st[ax];
                    break;
                }
                src -= gather_st[ax] * (os[ax] - 1);
                idx[ax] = 0;
            }
        }
    });
    return out;
}

template <typename T>
ArrayT<T> transpose(const ArrayT<T>& a) {
    if (a.shape().size() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

template <typename T>
ArrayT<T> concat(const std::vector<ArrayT<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= int(s0.size())) throw ShapeError("concat: axis out of range for " + shape_str(s0));
    Shape os = s0;
    os[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) shape_fail("concat", s0, s);
        for (int i = 0; i < int(s.size()); ++i)
            if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s);
        os[axis] += s[axis];
    }
    auto out = detail::fresh<T>(os, "concat");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[i];
    for (int i = axis + 1; i < int(os.size()); ++i) inner *= os[i];
    auto& ov = out.values();
    std::vector<int64_t> axle(parts.size());
    {
        int64_t off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const int64_t ax = parts[pi].shape()[axis];
            axle[pi] = ax;
            const auto& pv = parts[pi].values();
            for (int64_t o = 0; o < outer; ++o)
                std::copy(pv.data() + o * ax * inner, pv.data() + (o + 1) * ax * inner,
                          ov.data() + (o * os[axis] + off) * inner);
            off += ax;
        }
    }
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parts) any = any || p.node()->requires_grad;
        if (any) {
            auto n = out.node();
            n->requires_grad = true;
            for (const auto& p : parts) n->parents.push_back(p.node());
            const int64_t total_ax = os[axis];
            n->backward_fn = [outer, inner, axle, total_ax](Node<T>& self) {
                int64_t off = 0;
                for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                    auto& p = *self.parents[pi];
                    const int64_t ax = axle[pi];
                    if (p.requires_grad) {
                        p.ensure_grad();
                        for (int64_t o = 0; o < outer; ++o) {
                            const T* src = self.grad.data() + (o * total_ax + off) * inner;
                            T* dst = p.grad.data() + o * ax * inner;
                            for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                        }
                    }
                    off += ax;
                }
            };
        }
    }
    return out;
}

// Hyperrectangle slice: out = a[starts[i] : starts[i]+lens[i]] per axis.
template <typename T>
ArrayT<T> slice(const ArrayT<T>& a, const std::vector<int>& starts, const std::vector<int>& lens) {
    const Shape& s = a.shape();
    if (starts.size() != s.size() || lens.size() != s.size())
        throw ShapeError("slice: rank mismatch for " + shape_str(s));
    Shape os(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (starts[i] < 0 || lens[i] < 0 || starts[i] + lens[i] > s[i])
            throw ShapeError("slice: range [" + std::to_string(starts[i]) + "," +
                             std::to_string(starts[i] + lens[i]) + ") out of bounds for axis " +
                             std::to_string(i) + " of " + shape_str(s));
        os[i] = lens[i];
    }
    auto out = detail::fresh<T>(os, "slice");
    const auto in_st = detail::row_major_strides(s);
    const int rank = int(s.size());
    int64_t base = 0;
    for (int i = 0; i < rank; ++i) base += int64_t(starts[i]) * in_st[i];
    const auto& av = a.values();
    auto& ov = out.values();
    std::vector<int64_t> idx(size_t(rank), 0);
    int64_t src = base;
    for (int64_t o = 0; o < out.size(); ++o) {
        ov[o] = av[src];
        for (int ax = rank - 1; ax >= 0; --ax) {
            if (++idx[ax] < os[ax]) {
                src += in_st[ax];
                break;
            }
            src -= in_st[ax] * (os[ax] - 1);
            idx[ax] = 0;
        }
    }
    detail::attach<T>(out, {a.node()}, [os, in_st, base, rank](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        std::vector<int64_t> idx(size_t(rank), 0);
        int64_t src = base;
        for (int64_t o = 0; o < self.numel(); ++o) {
            p.grad[src] += self.grad[o];
            for (int ax = rank - 1; ax >= 0; --ax) {
                if (++idx[ax] < os[ax]) {
                    src += in_st[ax];
                    break;
                }
                src -= in_st[ax] * (os[ax] - 1);
                idx[ax] = 0;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
ArrayT<T> embedding(const ArrayT<T>& table, const std::vector<int>& ids) {
    const Shape& ts = table.shape();
    if (ts.size() != 2) throw ShapeError("embedding: table must be rank-2, got " + shape_str(ts));
    const int V = ts[0], D = ts[1];
    for (int id : ids)
        if (id < 0 || id >= V)
            throw ShapeError("embedding: id " + std::to_string(id) + " out of vocabulary " + std::to_string(V));
    auto out = detail::fresh<T>({int(ids.size()), D}, "embedding");
    const auto& tv = table.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tv.data() + int64_t(ids[i]) * D, tv.data() + int64_t(ids[i] + 1) * D, ov.data() + int64_t(i) * D);
    detail::attach<T>(out, {table.node()}, [ids, D](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const T* g = self.grad.data() + int64_t(i) * D;
            T* dst = p.grad.data() + int64_t(ids[i]) * D;
            for (int j = 0; j < D; ++j) dst[j] += g[j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// 2-D resize on [H,W,C] arrays (half-pixel centers; reproduces constants)
// ---------------------------------------------------------------------------

namespace detail {

struct LinTap {
    int i0, i1;
    double w0, w1;
};

inline LinTap bilinear_tap(int dst, int src_extent, int dst_extent) {
    double x = (double(dst) + 0.5) * double(src_extent) / double(dst_extent) - 0.5;
    if (x < 0) x = 0;
    if (x > src_extent - 1) x = double(src_extent - 1);
    int i0 = int(std::floor(x));
    int i1 = std::min(i0 + 1, src_extent - 1);
    double f = x - double(i0);
    return {i0, i1, 1.0 - f, f};
}

inline int nearest_tap(int dst, int src_extent, int dst_extent) {
    double x = (double(dst) + 0.5) * double(src_extent) / double(dst_extent) - 0.5;
    int i = int(std::lround(x));
    return std::min(std::max(i, 0), src_extent - 1);
}

}  // namespace detail

template <typename T>
ArrayT<T> resize_bilinear(const ArrayT<T>& a, int H2, int W2) {
    const Shape& s = a.shape();
    if (s.size() != 3) throw ShapeError("resize_bilinear: expected [H,W,C], got " + shape_str(s));
    const int H = s[0], W = s[1], C = s[2];
    auto out = detail::fresh<T>({H2, W2, C}, "resize_bilinear");
    std::vector<detail::LinTap> rt(static_cast<size_t>(H2));
    std::vector<detail::LinTap> ct(static_cast<size_t>(W2));
    for (int r = 0; r < H2; ++r) rt[r] = detail::bilinear_tap(r, H, H2);
    for (int c = 0; c < W2; ++c) ct[c] = detail::bilinear_tap(c, W, W2);
    const auto& av = a.values();
    auto& ov = out.values();
    for (int r = 0; r < H2; ++r)
        for (int c = 0; c < W2; ++c) {
            const auto& tr = rt[r];
            const auto& tc = ct[c];
            T* y = ov.data() + (int64_t(r) * W2 + c) * C;
            const T* p00 = av.data() + (int64_t(tr.i0) * W + tc.i0) * C;
            const T* p01 = av.data() + (int64_t(tr.i0) * W + tc.i1) * C;
            const T* p10 = av.data() + (int64_t(tr.i1) * W + tc.i0) * C;
            const T* p11 = av.data() + (int64_t(tr.i1) * W + tc.i1) * C;
            for (int k = 0; k < C; ++k)
                y[k] = T(tr.w0 * (tc.w0 * p00[k] + tc.w1 * p01[k]) +
                         tr.w1 * (tc.w0 * p10[k] + tc.w1 * p11[k]));
        }
    detail::attach<T>(out, {a.node()}, [rt, ct, H2, W2, W, C](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int r = 0; r < H2; ++r)
            for (int c = 0; c < W2; ++c) {
                const auto& tr = rt[size_t(r)];
                const auto& tc = ct[size_t(c)];
                const T* g = self.grad.data() + (int64_t(r) * W2 + c) * C;
                T* g00 = p.grad.data() + (int64_t(tr.i0) * W + tc.i0) * C;
                T* g01 = p.grad.data() + (int64_t(tr.i0) * W + tc.i1) * C;
                T* g10 = p.grad.data() + (int64_t(tr.i1) * W + tc.i0) * C;
                T* g11 = p.grad.data() + (int64_t(tr.i1) * W + tc.i1) * C;
                for (int k = 0; k < C; ++k) {
                    g00[k] += T(tr.w0 * tc.w0) * g[k];
                    g01[k] += T(tr.w0 * tc.w1) * g[k];
                    g10[k] += T(tr.w1 * tc.w0) * g[k];
                    g11[k] += T(tr.w1 * tc.w1) * g[k];
                }
            }
    });
    return out;
}

template <typename T>
ArrayT<T> resize_nearest(const ArrayT<T>& a, int H2, int W2) {
    const Shape& s = a.shape();
    if (s.size() != 3) throw ShapeError("resize_nearest: expected [H,W,C], got " + shape_str(s));
    const int H = s[0], W = s[1], C = s[2];
    auto out = detail::fresh<T>({H2, W2, C}, "resize_nearest");
    std::vector<int> rt(static_cast<size_t>(H2));
    std::vector<int> ct(static_cast<size_t>(W2));
    for (int r = 0; r < H2; ++r) rt[r] = detail::nearest_tap(r, H, H2);
    for (int c = 0; c < W2; ++c) ct[c] = detail::nearest_tap(c, W, W2);
    const auto& av = a.values();
    auto& ov = out.values();
    for (int r = 0; r < H2; ++r)
        for (int c = 0; c < W2; ++c)
            std::copy(av.data() + (int64_t(rt[r]) * W + ct[c]) * C,
                      av.data() + (int64_t(rt[r]) * W + ct[c]) * C + C,
                      ov.data() + (int64_t(r) * W2 + c) * C);
    detail::attach<T>(out, {a.node()}, [rt, ct, H2, W2, W, C](Node<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int r = 0; r < H2; ++r)
            for (int c = 0; c < W2; ++c) {
                const T* g = self.grad.data() + (int64_t(r) * W2 + c) * C;
                T* dst = p.grad.data() + (int64_t(rt[size_t(r)]) * W + ct[size_t(c)]) * C;
                for (int k = 0; k < C; ++k) dst[k] += g[k];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// scaled dot-product attention (composite; mask is additive, broadcast over
// the leading batch axis). Returns the post-softmax weights alongside the
// output so callers can record them.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionOut {
    ArrayT<T> out;   // [B, Tq, dh]
    ArrayT<T> attn;  // [B, Tq, Tk]
};

template <typename T>
AttentionOut<T> attention(const ArrayT<T>& q, const ArrayT<T>& k, const ArrayT<T>& v,
                          const ArrayT<T>& additive_mask) {
    const Shape& sq = q.shape();
    const Shape& sk = k.shape();
    if (sq.size() != 3 || sk.size() != 3) shape_fail("attention", sq, sk);
    const int dh = sq[2];
    auto scores = bmm(q, permute(k, {0, 2, 1}));
    scores = scale(scores, T(1) / T(std::sqrt(double(dh))));
    if (additive_mask.defined()) scores = add(scores, additive_mask);
    auto attn = softmax_last(scores);
    auto out = bmm(attn, v);
    return {out, attn};
}

// Fused multi-head attention over packed projections: q [B*Tq, D],
// k/v [B*Tk, D], heads laid out as column blocks of width D/H. The additive
// mask may be [Tq,Tk] (shared), [B,Tq,Tk] or [B*H,Tq,Tk]. One primitive with
// a hand-written adjoint; avoids materializing per-head permutes.
template <typename T>
ArrayT<T> multihead_attention(const ArrayT<T>& q, const ArrayT<T>& k, const ArrayT<T>& v,
                              const ArrayT<T>& mask, int B, int H) {
    const Shape& sq = q.shape();
    const Shape& sk = k.shape();
    const Shape& sv = v.shape();
    if (sq.size() != 2 || sk.size() != 2 || sv != sk) shape_fail("multihead_attention", sq, sk);
    const int D = sq[1];
    if (D % H != 0 || sq[0] % B != 0 || sk[0] % B != 0)
        throw ShapeError("multihead_attention: inconsistent batch/heads for " + shape_str(sq));
    const int Tq = sq[0] / B, Tk = sk[0] / B, dh = D / H;
    int mask_mode = 0;  // 0:none 1:[Tq,Tk] 2:[B,Tq,Tk] 3:[B*H,Tq,Tk]
    if (mask.defined()) {
        const int64_t mn = mask.size();
        if (mn == int64_t(Tq) * Tk) mask_mode = 1;
        else if (mn == int64_t(B) * Tq * Tk) mask_mode = 2;
        else if (mn == int64_t(B) * H * Tq * Tk) mask_mode = 3;
        else shape_fail("multihead_attention(mask)", sq, mask.shape());
    }

    auto out = detail::fresh<T>({B * Tq, D}, "multihead_attention");
    auto weights = std::make_shared<std::vector<T>>(size_t(B) * H * Tq * Tk);
    const T* qp = q.values().data();
    const T* kp = k.values().data();
    const T* vp = v.values().data();
    const T* mp = mask.defined() ? mask.values().data() : nullptr;
    T* op = out.values().data();
    std::fill(out.values().begin(), out.values().end(), T(0));
    const T inv_sqrt = T(1) / T(std::sqrt(double(dh)));

    auto mask_base = [=](int b, int h) -> const T* {
        if (mask_mode == 0) return nullptr;
        if (mask_mode == 1) return mp;
        if (mask_mode == 2) return mp + size_t(b) * Tq * Tk;
        return mp + (size_t(b) * H + h) * Tq * Tk;
    };

    parallel_for(int64_t(B) * H, 1, [&](int64_t i0, int64_t i1) {
        for (int64_t bh = i0; bh < i1; ++bh) {
            const int b = int(bh / H), h = int(bh % H);
            const T* mb = mask_base(b, h);
            T* P = weights->data() + size_t(bh) * Tq * Tk;
            for (int tq = 0; tq < Tq; ++tq) {
                const T* qrow = qp + (size_t(b) * Tq + tq) * D + size_t(h) * dh;
                T* prow = P + size_t(tq) * Tk;
                T mx = std::numeric_limits<T>::lowest();
                for (int tk = 0; tk < Tk; ++tk) {
                    const T* krow = kp + (size_t(b) * Tk + tk) * D + size_t(h) * dh;
                    T s = 0;
                    for (int d0 = 0; d0 < dh; ++d0) s += qrow[d0] * krow[d0];
                    s *= inv_sqrt;
                    if (mb) s += mb[size_t(tq) * Tk + tk];
                    prow[tk] = s;
                    mx = std::max(mx, s);
                }
                T z = 0;
                for (int tk = 0; tk < Tk; ++tk) {
                    prow[tk] = std::exp(prow[tk] - mx);
                    z += prow[tk];
                }
                const T invz = T(1) / z;
                T* orow = op + (size_t(b) * Tq + tq) * D + size_t(h) * dh;
                for (int tk = 0; tk < Tk; ++tk) {
                    prow[tk] *= invz;
                    const T w = prow[tk];
                    const T* vrow = vp + (size_t(b) * Tk + tk) * D + size_t(h) * dh;
                    for (int d0 = 0; d0 < dh; ++d0) orow[d0] += w * vrow[d0];
                }
            }
        }
    });

    detail::attach<T>(out, {q.node(), k.node(), v.node()},
                      [weights, B, H, Tq, Tk, dh, D, inv_sqrt](Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        // (b,h) pairs touch disjoint row-block x column-block regions
        parallel_for(int64_t(B) * H, 1, [&](int64_t i0, int64_t i1) {
            std::vector<T> dP(static_cast<size_t>(Tk));
            for (int64_t bh = i0; bh < i1; ++bh) {
                const int b = int(bh / H), h = int(bh % H);
                const T* P = weights->data() + size_t(bh) * Tq * Tk;
                for (int tq = 0; tq < Tq; ++tq) {
                    const T* go = self.grad.data() + (size_t(b) * Tq + tq) * D + size_t(h) * dh;
                    const T* prow = P + size_t(tq) * Tk;
                    // dP = dO . V^T ; dV += P^T dO
                    T dot = 0;
                    for (int tk = 0; tk < Tk; ++tk) {
                        const size_t vrow = (size_t(b) * Tk + tk) * D + size_t(h) * dh;
                        T acc = 0;
                        for (int d0 = 0; d0 < dh; ++d0) acc += go[d0] * pv.value[vrow + d0];
                        dP[size_t(tk)] = acc;
                        dot += acc * prow[tk];
                        if (pv.requires_grad) {
                            T* gv = pv.grad.data() + vrow;
                            const T w = prow[tk];
                            for (int d0 = 0; d0 < dh; ++d0) gv[d0] += w * go[d0];
                        }
                    }
                    // dS = P (dP - dot); dQ += dS K / sqrt(dh); dK += dS^T Q / sqrt(dh)
                    const size_t qrow = (size_t(b) * Tq + tq) * D + size_t(h) * dh;
                    for (int tk = 0; tk < Tk; ++tk) {
                        const T ds = prow[tk] * (dP[size_t(tk)] - dot) * inv_sqrt;
                        const size_t krow = (size_t(b) * Tk + tk) * D + size_t(h) * dh;
                        if (pq.requires_grad) {
                            T* gq = pq.grad.data() + qrow;
                            for (int d0 = 0; d0 < dh; ++d0) gq[d0] += ds * pk.value[krow + d0];
                        }
                        if (pk.requires_grad) {
                            T* gk = pk.grad.data() + krow;
                            for (int d0 = 0; d0 < dh; ++d0) gk[d0] += ds * pq.value[qrow + d0];
                        }
                    }
                }
            }
        });
    });
    return out;
}

}  // namespace vare
