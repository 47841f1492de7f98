#ifndef MEDLORD_AUTOGRAD_HPP
#define MEDLORD_AUTOGRAD_HPP

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "medlord/tensor.hpp"

namespace medlord {

// Tape-free reverse-mode autodiff: every op returns a Node holding its value
// and a closure that scatters the node's gradient into its parents. backward()
// walks the graph from the loss in reverse topological order. With grad
// recording off, ops drop parents/closures so intermediates free eagerly.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor::zeros(value.dims);
        return grad;
    }
};

struct Ctx {
    bool grad = true;
};

inline Var make_leaf(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline Var make_op(Ctx& ctx, Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (ctx.grad) {
        bool need = false;
        for (const auto& p : parents) need = need || p->requires_grad;
        if (need) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(fn);
        }
    }
    return n;
}

inline void backward(const Var& loss) {
    require(loss->value.numel() == 1, ErrorKind::shape_mismatch, "backward: loss must be scalar");
    // iterative post-order DFS for a reverse topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad.fill(1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

// ----- elementwise ops -----

inline Var add(Ctx& ctx, Var a, Var b) {
    require(a->value.same_shape(b->value), ErrorKind::shape_mismatch, "add: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_op(ctx, std::move(out), {a, b}, [](Node& n) {
        for (int pi = 0; pi < 2; ++pi) {
            if (!n.parents[pi]->requires_grad) continue;
            Tensor& g = n.parents[pi]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var sub(Ctx& ctx, Var a, Var b) {
    require(a->value.same_shape(b->value), ErrorKind::shape_mismatch, "sub: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_op(ctx, std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(Ctx& ctx, Var a, Var b) {
    require(a->value.same_shape(b->value), ErrorKind::shape_mismatch, "mul: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_op(ctx, std::move(out), {a, b}, [](Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

inline Var scale(Ctx& ctx, Var a, float s) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= s;
    return make_op(ctx, std::move(out), {a}, [s](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
    });
}

inline Var add_scalar(Ctx& ctx, Var a, float s) {
    Tensor out = a->value;
    for (auto& v : out.data) v += s;
    return make_op(ctx, std::move(out), {a}, [](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

inline Var silu(Ctx& ctx, Var x) {
    Tensor out = x->value;
    for (auto& v : out.data) v = v / (1.0f + std::exp(-v));
    return make_op(ctx, std::move(out), {x}, [](Node& n) {
        const Tensor& xv = n.parents[0]->value;
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            float s = 1.0f / (1.0f + std::exp(-xv[i]));
            g[i] += n.grad[i] * s * (1.0f + xv[i] * (1.0f - s));
        }
    });
}

inline Var relu(Ctx& ctx, Var x) {
    Tensor out = x->value;
    for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
    return make_op(ctx, std::move(out), {x}, [](Node& n) {
        const Tensor& xv = n.parents[0]->value;
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (xv[i] > 0.0f) g[i] += n.grad[i];
    });
}

inline Var leaky_relu(Ctx& ctx, Var x, float alpha = 0.2f) {
    Tensor out = x->value;
    for (auto& v : out.data) v = v > 0.0f ? v : alpha * v;
    return make_op(ctx, std::move(out), {x}, [alpha](Node& n) {
        const Tensor& xv = n.parents[0]->value;
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * (xv[i] > 0.0f ? 1.0f : alpha);
    });
}

inline Var tanh_op(Ctx& ctx, Var x) {
    Tensor out = x->value;
    for (auto& v : out.data) v = std::tanh(v);
    return make_op(ctx, std::move(out), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            float y = n.value[i];
            g[i] += n.grad[i] * (1.0f - y * y);
        }
    });
}

// detached copy; gradients stop here
inline Var stop_grad(const Var& x) { return make_leaf(x->value, false); }

// ----- shape ops -----

// concatenate two 5D tensors (B,C,D,H,W) along the channel dim
inline Var concat_ch(Ctx& ctx, Var a, Var b) {
    const auto& da = a->value.dims;
    const auto& db = b->value.dims;
    require(da.size() == 5 && db.size() == 5, ErrorKind::shape_mismatch, "concat_ch: rank must be 5");
    for (size_t i : {size_t{0}, size_t{2}, size_t{3}, size_t{4}})
        require(da[i] == db[i], ErrorKind::shape_mismatch, "concat_ch: non-channel dims differ");
    const int64_t B = da[0], Ca = da[1], Cb = db[1], S = da[2] * da[3] * da[4];
    Tensor out({B, Ca + Cb, da[2], da[3], da[4]});
    for (int64_t bi = 0; bi < B; ++bi) {
        std::copy_n(&a->value[bi * Ca * S], Ca * S, &out[bi * (Ca + Cb) * S]);
        std::copy_n(&b->value[bi * Cb * S], Cb * S, &out[bi * (Ca + Cb) * S + Ca * S]);
    }
    return make_op(ctx, std::move(out), {a, b}, [B, Ca, Cb, S](Node& n) {
        for (int64_t bi = 0; bi < B; ++bi) {
            if (n.parents[0]->requires_grad) {
                Tensor& g = n.parents[0]->ensure_grad();
                const float* src = &n.grad[bi * (Ca + Cb) * S];
                float* dst = &g[bi * Ca * S];
                for (int64_t i = 0; i < Ca * S; ++i) dst[i] += src[i];
            }
            if (n.parents[1]->requires_grad) {
                Tensor& g = n.parents[1]->ensure_grad();
                const float* src = &n.grad[bi * (Ca + Cb) * S + Ca * S];
                float* dst = &g[bi * Cb * S];
                for (int64_t i = 0; i < Cb * S; ++i) dst[i] += src[i];
            }
        }
    });
}

// ----- reductions and losses -----

inline Var mean_all(Ctx& ctx, Var x) {
    Tensor out({1});
    out[0] = tensor_mean(x->value);
    const float inv = 1.0f / static_cast<float>(x->value.numel());
    return make_op(ctx, std::move(out), {x}, [inv](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        const float gs = n.grad[0] * inv;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += gs;
    });
}

inline Var sum_all(Ctx& ctx, Var x) {
    Tensor out({1});
    double s = 0.0;
    for (float v : x->value.data) s += v;
    out[0] = static_cast<float>(s);
    return make_op(ctx, std::move(out), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        const float gs = n.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += gs;
    });
}

// mean absolute error; d/da sign(a-b), zero at exact equality
inline Var l1_loss(Ctx& ctx, Var a, Var b) {
    require(a->value.same_shape(b->value), ErrorKind::shape_mismatch, "l1_loss: shape mismatch");
    Tensor out({1});
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += std::fabs(a->value[i] - b->value[i]);
    out[0] = static_cast<float>(s / static_cast<double>(a->value.numel()));
    const float inv = 1.0f / static_cast<float>(a->value.numel());
    return make_op(ctx, std::move(out), {a, b}, [inv](Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        const float gs = n.grad[0] * inv;
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) {
                float d = av[i] - bv[i];
                g[i] += gs * (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f));
            }
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) {
                float d = av[i] - bv[i];
                g[i] -= gs * (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f));
            }
        }
    });
}

inline Var mse_loss(Ctx& ctx, Var a, Var b) {
    require(a->value.same_shape(b->value), ErrorKind::shape_mismatch, "mse_loss: shape mismatch");
    Tensor out({1});
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) {
        double d = static_cast<double>(a->value[i]) - b->value[i];
        s += d * d;
    }
    out[0] = static_cast<float>(s / static_cast<double>(a->value.numel()));
    const float inv = 2.0f / static_cast<float>(a->value.numel());
    return make_op(ctx, std::move(out), {a, b}, [inv](Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        const float gs = n.grad[0] * inv;
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += gs * (av[i] - bv[i]);
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= gs * (av[i] - bv[i]);
        }
    });
}

} // namespace medlord

#endif
