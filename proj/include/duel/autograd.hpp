#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a shared handle to a graph node. Ops record a backward closure only
// when gradient recording is enabled and at least one input requires a
// gradient, so inference passes build no graph at all.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "duel/tensor.hpp"

namespace duel::ag {

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_enabled_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buf() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
    bool is_leaf() const { return !backward_fn; }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return n;
}

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad) {
    auto n = constant(std::move(value));
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> make_op(Tensor<T> out, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(out);
    if (!grad_enabled()) return n;
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (!any) return n;
    n->requires_grad = true;
    n->parents = std::move(inputs);
    n->backward_fn = std::move(fn);
    return n;
}

/// Accumulates d(root)/d(node) into every reachable node that requires a gradient.
template <typename T>
void backward(const Var<T>& root) {
    require(root->value.numel() == 1, ErrorKind::shape, "backward root must be a scalar");
    if (!root->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<const Node<T>*> visited{root.get()};
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
    while (!stack.empty()) {
        Node<T>* n = stack.back().first;
        std::size_t& i = stack.back().second;
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->grad_buf()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->is_leaf() || n->grad.empty()) continue;
        n->backward_fn(*n);
        // Consumers already ran; the intermediate gradient is dead.
        n->grad = Tensor<T>();
    }
}

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Tensor<T>* grad_of(const Var<T>& v) {
    return v->requires_grad ? &v->grad_buf() : nullptr;
}

inline void check(bool ok, const std::string& what) { require(ok, ErrorKind::shape, what); }

template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo, T* col) {
    const std::int64_t plane = ho * wo;
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
                T* row = col + ((ci * k + ky) * k + kx) * plane;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    T* dst = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* src = x + (ci * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im(const T* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo, T* x) {
    const std::int64_t plane = ho * wo;
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((ci * k + ky) * k + kx) * plane;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (ci * h + iy) * w;
                    const T* src = row + oy * wo;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check(a->value.shape() == b->value.shape(),
                  "add: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        for (const auto* p : {&a, &b})
            if (auto* g = detail::grad_of(*p))
                for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check(a->value.shape() == b->value.shape(), "mul: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (auto* g = detail::grad_of(a))
            for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * b->value[i];
        if (auto* g = detail::grad_of(b))
            for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * a->value[i];
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a->value;
    for (auto& v : out.vec()) v *= s;
    return make_op<T>(std::move(out), {a}, [a, s](Node<T>& n) {
        auto& g = a->grad_buf();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& v : out.vec()) v = v / (T(1) + std::exp(-v));
    return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        auto& g = a->grad_buf();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T x = a->value[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            g[i] += n.grad[i] * s * (T(1) + x * (T(1) - s));
        }
    });
}

/// x[N,C,...] + e[N|1,C] broadcast over trailing axes.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& e) {
    const auto& xs = x->value.shape();
    detail::check(xs.size() >= 2 && e->value.rank() == 2 && e->value.dim(1) == xs[1] &&
                      (e->value.dim(0) == 1 || e->value.dim(0) == xs[0]),
                  "add_channel_bias: " + shape_str(xs) + " + " + shape_str(e->value.shape()));
    const std::int64_t n = xs[0], c = xs[1], s = x->value.numel() / (n * c);
    const bool bcast = e->value.dim(0) == 1;
    Tensor<T> out = x->value;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const T b = e->value[(bcast ? 0 : i) * c + j];
            T* p = out.data() + (i * c + j) * s;
            for (std::int64_t k = 0; k < s; ++k) p[k] += b;
        }
    return make_op<T>(std::move(out), {x, e}, [x, e, n, c, s, bcast](Node<T>& node) {
        if (auto* g = detail::grad_of(x))
            for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += node.grad[i];
        if (auto* g = detail::grad_of(e))
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < c; ++j) {
                    const T* p = node.grad.data() + (i * c + j) * s;
                    T acc = 0;
                    for (std::int64_t k = 0; k < s; ++k) acc += p[k];
                    (*g)[(bcast ? 0 : i) * c + j] += acc;
                }
    });
}

/// x * (1 + s) + b with per-(sample, channel) s, b of shape [1 or N, C].
template <typename T>
Var<T> scale_shift(const Var<T>& x, const Var<T>& s, const Var<T>& b) {
    const auto& xs = x->value.shape();
    for (const auto* e : {&s, &b})
        detail::check(xs.size() >= 2 && (*e)->value.rank() == 2 && (*e)->value.dim(1) == xs[1] &&
                          ((*e)->value.dim(0) == 1 || (*e)->value.dim(0) == xs[0]),
                      "scale_shift: " + shape_str(xs) + " with " + shape_str((*e)->value.shape()));
    const std::int64_t n = xs[0], c = xs[1], sp = x->value.numel() / (n * c);
    const bool sb = s->value.dim(0) == 1, bb = b->value.dim(0) == 1;
    Tensor<T> out(xs);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const T g = T(1) + s->value[(sb ? 0 : i) * c + j], o = b->value[(bb ? 0 : i) * c + j];
            const T* px = x->value.data() + (i * c + j) * sp;
            T* po = out.data() + (i * c + j) * sp;
            for (std::int64_t k = 0; k < sp; ++k) po[k] = px[k] * g + o;
        }
    return make_op<T>(std::move(out), {x, s, b}, [x, s, b, n, c, sp, sb, bb](Node<T>& node) {
        auto* gx = detail::grad_of(x);
        auto* gs = detail::grad_of(s);
        auto* gb = detail::grad_of(b);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
                const T g = T(1) + s->value[(sb ? 0 : i) * c + j];
                const T* pg = node.grad.data() + (i * c + j) * sp;
                const T* px = x->value.data() + (i * c + j) * sp;
                T acc_s = 0, acc_b = 0;
                for (std::int64_t k = 0; k < sp; ++k) {
                    if (gx) (*gx)[(i * c + j) * sp + k] += pg[k] * g;
                    acc_s += pg[k] * px[k];
                    acc_b += pg[k];
                }
                if (gs) (*gs)[(sb ? 0 : i) * c + j] += acc_s;
                if (gb) (*gb)[(bb ? 0 : i) * c + j] += acc_b;
            }
    });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a->value.reshaped(std::move(shape));
    return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        auto& g = a->grad_buf();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

namespace detail {

/// Calls fn(input_index, output_index) for every element of a tensor of shape `s`
/// permuted so that output axis k is input axis axes[k].
template <typename Fn>
void for_each_permuted(const Shape& s, const std::vector<std::size_t>& axes, Fn&& fn) {
    const std::size_t r = s.size();
    Shape os(r);
    for (std::size_t k = 0; k < r; ++k) os[k] = s[axes[k]];
    std::vector<std::int64_t> out_stride(r, 1);
    for (std::size_t k = r; k-- > 1;) out_stride[k - 1] = out_stride[k] * os[k];
    std::vector<std::int64_t> step(r);
    for (std::size_t k = 0; k < r; ++k) step[axes[k]] = out_stride[k];
    std::vector<std::int64_t> idx(r, 0);
    const std::int64_t total = shape_numel(s);
    std::int64_t o = 0;
    for (std::int64_t i = 0; i < total; ++i) {
        fn(i, o);
        for (std::size_t k = r; k-- > 0;) {
            ++idx[k];
            o += step[k];
            if (idx[k] < s[k]) break;
            o -= step[k] * s[k];
            idx[k] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& in, const std::vector<std::size_t>& axes) {
    Shape os(in.rank());
    for (std::size_t k = 0; k < in.rank(); ++k) os[k] = in.dim(axes[k]);
    Tensor<T> out(os);
    detail::for_each_permuted(in.shape(), axes, [&](std::int64_t i, std::int64_t o) { out[o] = in[i]; });
    return out;
}

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> axes) {
    detail::check(axes.size() == a->value.rank(), "permute: axis count");
    Tensor<T> out = permute_tensor(a->value, axes);
    return make_op<T>(std::move(out), {a}, [a, axes](Node<T>& n) {
        auto& g = a->grad_buf();
        detail::for_each_permuted(a->value.shape(), axes,
                                  [&](std::int64_t i, std::int64_t o) { g[i] += n.grad[o]; });
    });
}

/// [N,C,H,W] -> [N,H*W,C]
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    const auto s = x->value.shape();
    detail::check(s.size() == 4, "to_tokens expects NCHW");
    return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

/// [N,H*W,C] -> [N,C,H,W]
template <typename T>
Var<T> from_tokens(const Var<T>& t, std::int64_t h, std::int64_t w) {
    const auto s = t->value.shape();
    detail::check(s.size() == 3 && s[1] == h * w, "from_tokens: token count");
    return permute(reshape(t, {s[0], h, w, s[2]}), {0, 3, 1, 2});
}

template <typename T>
Var<T> slice0(const Var<T>& a, std::int64_t begin, std::int64_t end) {
    Tensor<T> out = a->value.slice0(begin, end);
    const std::int64_t inner = a->value.numel() / a->value.dim(0);
    return make_op<T>(std::move(out), {a}, [a, begin, inner](Node<T>& n) {
        auto& g = a->grad_buf();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[begin * inner + i] += n.grad[i];
    });
}

template <typename T>
Var<T> concat0(const std::vector<Var<T>>& parts) {
    std::vector<Tensor<T>> values;
    for (const auto& p : parts) values.push_back(p->value);
    Tensor<T> out = duel::concat0(values);
    return make_op<T>(std::move(out), parts, [parts](Node<T>& n) {
        std::int64_t offset = 0;
        for (const auto& p : parts) {
            if (auto* g = detail::grad_of(p))
                for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[offset + i];
            offset += p->value.numel();
        }
    });
}

/// Channel concat of [N,Ca,H,W] and [N|1,Cb,H,W]; a batch-1 second operand is broadcast.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& as = a->value.shape();
    const auto& bs = b->value.shape();
    detail::check(as.size() == 4 && bs.size() == 4 && as[2] == bs[2] && as[3] == bs[3] &&
                      (bs[0] == as[0] || bs[0] == 1),
                  "concat_channels: " + shape_str(as) + " with " + shape_str(bs));
    const std::int64_t n = as[0], ca = as[1], cb = bs[1], s = as[2] * as[3];
    const bool bcast = bs[0] == 1 && n != 1;
    Tensor<T> out({n, ca + cb, as[2], as[3]});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a->value.data() + i * ca * s, ca * s, out.data() + i * (ca + cb) * s);
        std::copy_n(b->value.data() + (bcast ? 0 : i) * cb * s, cb * s,
                    out.data() + (i * (ca + cb) + ca) * s);
    }
    return make_op<T>(std::move(out), {a, b}, [a, b, n, ca, cb, s, bcast](Node<T>& node) {
        if (auto* g = detail::grad_of(a))
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t k = 0; k < ca * s; ++k)
                    (*g)[i * ca * s + k] += node.grad[i * (ca + cb) * s + k];
        if (auto* g = detail::grad_of(b))
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t k = 0; k < cb * s; ++k)
                    (*g)[(bcast ? 0 : i) * cb * s + k] += node.grad[(i * (ca + cb) + ca) * s + k];
    });
}

/// Nearest-neighbour 2x upsampling of NCHW.
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const auto& s = x->value.shape();
    detail::check(s.size() == 4, "upsample2x expects NCHW");
    const std::int64_t nc = s[0] * s[1], h = s[2], w = s[3];
    Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
    for (std::int64_t p = 0; p < nc; ++p)
        for (std::int64_t y = 0; y < 2 * h; ++y)
            for (std::int64_t xx = 0; xx < 2 * w; ++xx)
                out[(p * 2 * h + y) * 2 * w + xx] = x->value[(p * h + y / 2) * w + xx / 2];
    return make_op<T>(std::move(out), {x}, [x, nc, h, w](Node<T>& n) {
        auto& g = x->grad_buf();
        for (std::int64_t p = 0; p < nc; ++p)
            for (std::int64_t y = 0; y < 2 * h; ++y)
                for (std::int64_t xx = 0; xx < 2 * w; ++xx)
                    g[(p * h + y / 2) * w + xx / 2] += n.grad[(p * 2 * h + y) * 2 * w + xx];
    });
}

// ---------------------------------------------------------------------------
// Learned layers

/// 2-D convolution, weight [Cout,Cin,k,k], bias [Cout], square kernel.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
    const auto& xs = x->value.shape();
    const auto& ws = weight->value.shape();
    detail::check(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3],
                  "conv2d: input " + shape_str(xs) + " weight " + shape_str(ws));
    detail::check(bias->value.numel() == ws[0], "conv2d: bias length");
    const std::int64_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    const std::int64_t cout = ws[0], k = ws[2];
    const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
    const std::int64_t wo = (w + 2 * pad - k) / stride + 1;
    detail::check(ho > 0 && wo > 0, "conv2d: empty output");
    const std::int64_t kk = cin * k * k, plane = ho * wo;
    const bool direct = k == 1 && stride == 1 && pad == 0;
    Tensor<T> out({n, cout, ho, wo});
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(kk * plane));
    detail::CMapR<T> wm(weight->value.data(), cout, kk);
    for (std::int64_t i = 0; i < n; ++i) {
        const T* xin = x->value.data() + i * cin * h * w;
        if (!direct) detail::im2col(xin, cin, h, w, k, stride, pad, ho, wo, col.data());
        detail::CMapR<T> cm(direct ? xin : col.data(), kk, plane);
        detail::MapR<T> y(out.data() + i * cout * plane, cout, plane);
        y.noalias() = wm * cm;
        for (std::int64_t c = 0; c < cout; ++c) y.row(c).array() += bias->value[c];
    }
    return make_op<T>(std::move(out), {x, weight, bias}, [=](Node<T>& node) {
        Tensor<T>* gx = detail::grad_of(x);
        Tensor<T>* gw = detail::grad_of(weight);
        Tensor<T>* gb = detail::grad_of(bias);
        std::vector<T> colb(direct ? 0 : static_cast<std::size_t>(kk * plane));
        detail::CMapR<T> wmb(weight->value.data(), cout, kk);
        for (std::int64_t i = 0; i < n; ++i) {
            detail::CMapR<T> dy(node.grad.data() + i * cout * plane, cout, plane);
            if (gb)
                for (std::int64_t c = 0; c < cout; ++c) (*gb)[c] += dy.row(c).sum();
            const T* xin = x->value.data() + i * cin * h * w;
            if (gw) {
                if (!direct) detail::im2col(xin, cin, h, w, k, stride, pad, ho, wo, colb.data());
                detail::CMapR<T> cm(direct ? xin : colb.data(), kk, plane);
                detail::MapR<T> dw(gw->data(), cout, kk);
                dw.noalias() += dy * cm.transpose();
            }
            if (gx) {
                T* dxin = gx->data() + i * cin * h * w;
                if (direct) {
                    detail::MapR<T> dx(dxin, cin, plane);
                    dx.noalias() += wmb.transpose() * dy;
                } else {
                    detail::MapR<T> dc(colb.data(), kk, plane);
                    dc.noalias() = wmb.transpose() * dy;
                    detail::col2im(colb.data(), cin, h, w, k, stride, pad, ho, wo, dxin);
                }
            }
        }
    });
}

/// Group normalization over NC... with per-channel affine.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups,
                  T eps = T(1e-5)) {
    const auto& xs = x->value.shape();
    detail::check(xs.size() >= 2 && xs[1] % groups == 0, "group_norm: channels not divisible");
    const std::int64_t n = xs[0], c = xs[1], s = x->value.numel() / (n * c);
    const std::int64_t cg = c / groups, m = cg * s;
    Tensor<T> out(xs);
    Tensor<T> xhat(xs);
    std::vector<T> rstd(static_cast<std::size_t>(n * groups));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t g = 0; g < groups; ++g) {
            const T* p = x->value.data() + (i * c + g * cg) * s;
            T mean = 0;
            for (std::int64_t k = 0; k < m; ++k) mean += p[k];
            mean /= T(m);
            T var = 0;
            for (std::int64_t k = 0; k < m; ++k) var += (p[k] - mean) * (p[k] - mean);
            var /= T(m);
            const T r = T(1) / std::sqrt(var + eps);
            rstd[i * groups + g] = r;
            for (std::int64_t cc = 0; cc < cg; ++cc) {
                const std::int64_t ch = g * cg + cc;
                const std::int64_t base = (i * c + ch) * s;
                for (std::int64_t k = 0; k < s; ++k) {
                    const T xh = (x->value[base + k] - mean) * r;
                    xhat[base + k] = xh;
                    out[base + k] = xh * gamma->value[ch] + beta->value[ch];
                }
            }
        }
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& node) {
        Tensor<T>* gx = detail::grad_of(x);
        Tensor<T>* gg = detail::grad_of(gamma);
        Tensor<T>* gb = detail::grad_of(beta);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t g = 0; g < groups; ++g) {
                T sum_d = 0, sum_dx = 0;
                for (std::int64_t cc = 0; cc < cg; ++cc) {
                    const std::int64_t ch = g * cg + cc;
                    const std::int64_t base = (i * c + ch) * s;
                    T acc_g = 0, acc_b = 0;
                    for (std::int64_t k = 0; k < s; ++k) {
                        const T dy = node.grad[base + k];
                        acc_g += dy * xhat[base + k];
                        acc_b += dy;
                        const T d = dy * gamma->value[ch];
                        sum_d += d;
                        sum_dx += d * xhat[base + k];
                    }
                    if (gg) (*gg)[ch] += acc_g;
                    if (gb) (*gb)[ch] += acc_b;
                }
                if (!gx) continue;
                const T r = rstd[i * groups + g];
                for (std::int64_t cc = 0; cc < cg; ++cc) {
                    const std::int64_t ch = g * cg + cc;
                    const std::int64_t base = (i * c + ch) * s;
                    for (std::int64_t k = 0; k < s; ++k) {
                        const T d = node.grad[base + k] * gamma->value[ch];
                        (*gx)[base + k] +=
                            r / T(m) * (T(m) * d - sum_d - xhat[base + k] * sum_dx);
                    }
                }
            }
    });
}

/// x[..., Din] * W[Din,Dout] + b[Dout]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const auto& ws = weight->value.shape();
    detail::check(ws.size() == 2 && x->value.rank() >= 1 && x->value.shape().back() == ws[0],
                  "linear: input " + shape_str(x->value.shape()) + " weight " + shape_str(ws));
    const std::int64_t din = ws[0], dout = ws[1], rows = x->value.numel() / din;
    const bool has_bias = bias != nullptr;
    Shape os = x->value.shape();
    os.back() = dout;
    Tensor<T> out(os);
    detail::CMapR<T> xm(x->value.data(), rows, din);
    detail::CMapR<T> wm(weight->value.data(), din, dout);
    detail::MapR<T> y(out.data(), rows, dout);
    y.noalias() = xm * wm;
    if (has_bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->value.data(), dout);
        y.rowwise() += bv;
    }
    std::vector<Var<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_op<T>(std::move(out), std::move(inputs), [=](Node<T>& node) {
        detail::CMapR<T> dy(node.grad.data(), rows, dout);
        if (auto* g = detail::grad_of(x)) {
            detail::MapR<T> dx(g->data(), rows, din);
            dx.noalias() += dy * detail::CMapR<T>(weight->value.data(), din, dout).transpose();
        }
        if (auto* g = detail::grad_of(weight)) {
            detail::MapR<T> dw(g->data(), din, dout);
            dw.noalias() += detail::CMapR<T>(x->value.data(), rows, din).transpose() * dy;
        }
        if (has_bias)
            if (auto* g = detail::grad_of(bias))
                for (std::int64_t j = 0; j < dout; ++j) (*g)[j] += dy.col(j).sum();
    });
}

/// Multi-head scaled dot-product attention.
///
/// q [B,nq,D], k [Bk,nk,D], v [Bk,nk,Dv] with Bk in {1,B}; heads split D and Dv
/// into contiguous slices. Returns [B,nq,Dv].
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                            Tensor<T>* probs_out) {
    detail::check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: rank-3 operands");
    const std::int64_t b = q.dim(0), nq = q.dim(1), d = q.dim(2);
    const std::int64_t bk = k.dim(0), nk = k.dim(1), dv = v.dim(2);
    detail::check(k.dim(2) == d && v.dim(0) == bk && v.dim(1) == nk && (bk == b || bk == 1),
                  "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                      shape_str(v.shape()));
    detail::check(heads > 0 && d % heads == 0 && dv % heads == 0, "attention: heads must divide width");
    const std::int64_t dh = d / heads, dvh = dv / heads;
    const T sc = T(1) / std::sqrt(T(dh));
    Tensor<T> out({b, nq, dv});
    Tensor<T> probs({b, heads, nq, nk});
    for (std::int64_t i = 0; i < b; ++i) {
        const std::int64_t ik = bk == 1 ? 0 : i;
        for (std::int64_t h = 0; h < heads; ++h) {
            detail::CSMapR<T> qh(q.data() + i * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
            detail::CSMapR<T> kh(k.data() + ik * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
            detail::CSMapR<T> vh(v.data() + ik * nk * dv + h * dvh, nk, dvh, Eigen::OuterStride<>(dv));
            detail::MapR<T> p(probs.data() + (i * heads + h) * nq * nk, nq, nk);
            p.noalias() = (qh * kh.transpose()) * sc;
            for (std::int64_t r = 0; r < nq; ++r) {
                auto row = p.row(r);
                const T mx = row.maxCoeff();
                row = (row.array() - mx).exp();
                row /= row.sum();
            }
            detail::SMapR<T> oh(out.data() + i * nq * dv + h * dvh, nq, dvh, Eigen::OuterStride<>(dv));
            oh.noalias() = p * vh;
        }
    }
    if (probs_out) *probs_out = std::move(probs);
    return out;
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    Tensor<T> probs;
    Tensor<T> out = attention_forward(q->value, k->value, v->value, heads,
                                      grad_enabled() ? &probs : nullptr);
    return make_op<T>(std::move(out), {q, k, v}, [q, k, v, heads, probs = std::move(probs)](Node<T>& node) {
        const std::int64_t b = q->value.dim(0), nq = q->value.dim(1), d = q->value.dim(2);
        const std::int64_t bk = k->value.dim(0), nk = k->value.dim(1), dv = v->value.dim(2);
        const std::int64_t dh = d / heads, dvh = dv / heads;
        const T sc = T(1) / std::sqrt(T(dh));
        Tensor<T>* gq = detail::grad_of(q);
        Tensor<T>* gk = detail::grad_of(k);
        Tensor<T>* gv = detail::grad_of(v);
        detail::MatR<T> dp(nq, nk);
        for (std::int64_t i = 0; i < b; ++i) {
            const std::int64_t ik = bk == 1 ? 0 : i;
            for (std::int64_t h = 0; h < heads; ++h) {
                detail::CMapR<T> p(probs.data() + (i * heads + h) * nq * nk, nq, nk);
                detail::CSMapR<T> doh(node.grad.data() + i * nq * dv + h * dvh, nq, dvh,
                                      Eigen::OuterStride<>(dv));
                detail::CSMapR<T> vh(v->value.data() + ik * nk * dv + h * dvh, nk, dvh,
                                     Eigen::OuterStride<>(dv));
                if (gv) {
                    detail::SMapR<T> dvm(gv->data() + ik * nk * dv + h * dvh, nk, dvh,
                                         Eigen::OuterStride<>(dv));
                    dvm.noalias() += p.transpose() * doh;
                }
                if (!gq && !gk) continue;
                dp.noalias() = doh * vh.transpose();
                for (std::int64_t r = 0; r < nq; ++r) {
                    const T dot = (dp.row(r).array() * p.row(r).array()).sum();
                    dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
                }
                dp *= sc;
                if (gq) {
                    detail::CSMapR<T> kh(k->value.data() + ik * nk * d + h * dh, nk, dh,
                                         Eigen::OuterStride<>(d));
                    detail::SMapR<T> dq(gq->data() + i * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
                    dq.noalias() += dp * kh;
                }
                if (gk) {
                    detail::CSMapR<T> qh(q->value.data() + i * nq * d + h * dh, nq, dh,
                                         Eigen::OuterStride<>(d));
                    detail::SMapR<T> dk(gk->data() + ik * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
                    dk.noalias() += dp.transpose() * qh;
                }
            }
        }
    });
}

/// out = m1*a1 + m2*a2 + (1-m1-m2)*s for per-token weights m [B,n] over [B,n,C].
template <typename T>
Var<T> mask_mix(const Var<T>& a1, const Var<T>& a2, const Var<T>& s, const Tensor<T>& m1,
                const Tensor<T>& m2) {
    const auto& sh = s->value.shape();
    detail::check(sh.size() == 3 && a1->value.shape() == sh && a2->value.shape() == sh,
                  "mask_mix: operand shapes");
    detail::check(m1.numel() == sh[0] * sh[1] && m2.numel() == sh[0] * sh[1],
                  "mask_mix: mask has " + std::to_string(m1.numel()) + " weights for " +
                      std::to_string(sh[0] * sh[1]) + " tokens");
    const std::int64_t tokens = sh[0] * sh[1], c = sh[2];
    Tensor<T> out(sh);
    for (std::int64_t t = 0; t < tokens; ++t) {
        const T w1 = m1[t], w2 = m2[t], w0 = T(1) - (w1 + w2);
        for (std::int64_t j = 0; j < c; ++j) {
            const std::int64_t i = t * c + j;
            out[i] = (w1 * a1->value[i] + w2 * a2->value[i]) + w0 * s->value[i];
        }
    }
    return make_op<T>(std::move(out), {a1, a2, s}, [a1, a2, s, m1, m2, tokens, c](Node<T>& node) {
        Tensor<T>* g1 = detail::grad_of(a1);
        Tensor<T>* g2 = detail::grad_of(a2);
        Tensor<T>* gs = detail::grad_of(s);
        for (std::int64_t t = 0; t < tokens; ++t) {
            const T w1 = m1[t], w2 = m2[t], w0 = T(1) - (w1 + w2);
            for (std::int64_t j = 0; j < c; ++j) {
                const std::int64_t i = t * c + j;
                const T g = node.grad[i];
                if (g1) (*g1)[i] += w1 * g;
                if (g2) (*g2)[i] += w2 * g;
                if (gs) (*gs)[i] += w0 * g;
            }
        }
    });
}

/// Row gather from table [V,P]; returns [L,P].
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<std::int64_t>& ids) {
    const std::int64_t vocab = table->value.dim(0), p = table->value.dim(1);
    const std::int64_t len = static_cast<std::int64_t>(ids.size());
    Tensor<T> out({len, p});
    for (std::int64_t i = 0; i < len; ++i) {
        detail::check(0 <= ids[i] && ids[i] < vocab, "embedding: id out of range");
        std::copy_n(table->value.data() + ids[i] * p, p, out.data() + i * p);
    }
    return make_op<T>(std::move(out), {table}, [table, ids, p](Node<T>& node) {
        auto& g = table->grad_buf();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::int64_t j = 0; j < p; ++j) g[ids[i] * p + j] += node.grad[i * p + j];
    });
}

/// Mean over the leading axis of [L,P]; returns [1,P].
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
    const std::int64_t l = x->value.dim(0), p = x->value.dim(1);
    Tensor<T> out({1, p});
    for (std::int64_t i = 0; i < l; ++i)
        for (std::int64_t j = 0; j < p; ++j) out[j] += x->value[i * p + j] / T(l);
    return make_op<T>(std::move(out), {x}, [x, l, p](Node<T>& node) {
        auto& g = x->grad_buf();
        for (std::int64_t i = 0; i < l; ++i)
            for (std::int64_t j = 0; j < p; ++j) g[i * p + j] += node.grad[j] / T(l);
    });
}

// ---------------------------------------------------------------------------
// Reductions

/// Mean squared error against a constant target; scalar [1].
template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
    detail::check(pred->value.shape() == target.shape(),
                  "mse: " + shape_str(pred->value.shape()) + " vs " + shape_str(target.shape()));
    const std::int64_t m = target.numel();
    T acc = 0;
    for (std::int64_t i = 0; i < m; ++i) {
        const T d = pred->value[i] - target[i];
        acc += d * d;
    }
    Tensor<T> out({1}, acc / T(m));
    return make_op<T>(std::move(out), {pred}, [pred, target, m](Node<T>& node) {
        auto& g = pred->grad_buf();
        const T k = T(2) * node.grad[0] / T(m);
        for (std::int64_t i = 0; i < m; ++i) g[i] += k * (pred->value[i] - target[i]);
    });
}

/// sum(x * w) for a constant weight tensor; scalar [1].
template <typename T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& w) {
    detail::check(x->value.shape() == w.shape(), "dot_const: shape mismatch");
    T acc = 0;
    for (std::int64_t i = 0; i < w.numel(); ++i) acc += x->value[i] * w[i];
    return make_op<T>(Tensor<T>({1}, acc), {x}, [x, w](Node<T>& node) {
        auto& g = x->grad_buf();
        for (std::int64_t i = 0; i < w.numel(); ++i) g[i] += node.grad[0] * w[i];
    });
}

}  // namespace duel::ag
