#ifndef MEDLORD_NN_HPP
#define MEDLORD_NN_HPP

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "medlord/autograd.hpp"
#include "medlord/rng.hpp"

namespace medlord {

using MatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ----- conv3d -----
// Activations are (B, C, D, H, W) with W fastest; kernels are
// (Co, Ci, kd, kh, kw). Forward is im2col + GEMM; backward recomputes the
// column buffer, does two GEMMs, and scatter-adds via col2im.

struct ConvGeom {
    std::array<int64_t, 3> k{3, 3, 3}; // kd, kh, kw
    std::array<int64_t, 3> s{1, 1, 1};
    std::array<int64_t, 3> p{1, 1, 1};

    std::array<int64_t, 3> out_shape(std::array<int64_t, 3> in) const {
        std::array<int64_t, 3> o{};
        for (int a = 0; a < 3; ++a) o[a] = (in[a] + 2 * p[a] - k[a]) / s[a] + 1;
        return o;
    }
};

namespace detail {

inline void im2col(const float* x, int64_t Ci, std::array<int64_t, 3> in,
                   std::array<int64_t, 3> out, const ConvGeom& g, float* col) {
    const int64_t D = in[0], H = in[1], W = in[2];
    const int64_t k3 = g.k[0] * g.k[1] * g.k[2];
    const int64_t cols = Ci * k3;
    int64_t row = 0;
    for (int64_t od = 0; od < out[0]; ++od) {
        const int64_t d0 = od * g.s[0] - g.p[0];
        for (int64_t oh = 0; oh < out[1]; ++oh) {
            const int64_t h0 = oh * g.s[1] - g.p[1];
            for (int64_t ow = 0; ow < out[2]; ++ow, ++row) {
                const int64_t w0 = ow * g.s[2] - g.p[2];
                float* dst = col + row * cols;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const float* xc = x + ci * D * H * W;
                    for (int64_t kd = 0; kd < g.k[0]; ++kd) {
                        const int64_t d = d0 + kd;
                        for (int64_t kh = 0; kh < g.k[1]; ++kh) {
                            const int64_t h = h0 + kh;
                            if (d < 0 || d >= D || h < 0 || h >= H) {
                                for (int64_t kw = 0; kw < g.k[2]; ++kw) *dst++ = 0.0f;
                                continue;
                            }
                            const float* src = xc + (d * H + h) * W;
                            for (int64_t kw = 0; kw < g.k[2]; ++kw) {
                                const int64_t w = w0 + kw;
                                *dst++ = (w >= 0 && w < W) ? src[w] : 0.0f;
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const float* col, int64_t Ci, std::array<int64_t, 3> in,
                       std::array<int64_t, 3> out, const ConvGeom& g, float* dx) {
    const int64_t D = in[0], H = in[1], W = in[2];
    const int64_t k3 = g.k[0] * g.k[1] * g.k[2];
    const int64_t cols = Ci * k3;
    int64_t row = 0;
    for (int64_t od = 0; od < out[0]; ++od) {
        const int64_t d0 = od * g.s[0] - g.p[0];
        for (int64_t oh = 0; oh < out[1]; ++oh) {
            const int64_t h0 = oh * g.s[1] - g.p[1];
            for (int64_t ow = 0; ow < out[2]; ++ow, ++row) {
                const int64_t w0 = ow * g.s[2] - g.p[2];
                const float* src = col + row * cols;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    float* xc = dx + ci * D * H * W;
                    for (int64_t kd = 0; kd < g.k[0]; ++kd) {
                        const int64_t d = d0 + kd;
                        for (int64_t kh = 0; kh < g.k[1]; ++kh) {
                            const int64_t h = h0 + kh;
                            if (d < 0 || d >= D || h < 0 || h >= H) {
                                src += g.k[2];
                                continue;
                            }
                            float* dst = xc + (d * H + h) * W;
                            for (int64_t kw = 0; kw < g.k[2]; ++kw) {
                                const int64_t w = w0 + kw;
                                if (w >= 0 && w < W) dst[w] += src[kw];
                            }
                            src += g.k[2];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

inline Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeom& g) {
    require(x.rank() == 5, ErrorKind::shape_mismatch, "conv3d: input must be (B,C,D,H,W)");
    const int64_t B = x.dims[0], Ci = x.dims[1];
    require(w.rank() == 5 && w.dims[1] == Ci && w.dims[2] == g.k[0] && w.dims[3] == g.k[1] &&
                w.dims[4] == g.k[2],
            ErrorKind::shape_mismatch, "conv3d: kernel shape mismatch");
    const int64_t Co = w.dims[0];
    const std::array<int64_t, 3> in{x.dims[2], x.dims[3], x.dims[4]};
    const auto out = g.out_shape(in);
    for (int a = 0; a < 3; ++a)
        require(out[a] >= 1, ErrorKind::shape_mismatch, "conv3d: output extent would be empty");

    const int64_t rows = out[0] * out[1] * out[2];
    const int64_t cols = Ci * g.k[0] * g.k[1] * g.k[2];
    Tensor y({B, Co, out[0], out[1], out[2]});
    std::vector<float> col(static_cast<size_t>(rows * cols));
    std::vector<float> ybuf(static_cast<size_t>(rows * Co));
    ConstMatMap wm(w.data.data(), Co, cols);
    for (int64_t bi = 0; bi < B; ++bi) {
        detail::im2col(&x[bi * Ci * in[0] * in[1] * in[2]], Ci, in, out, g, col.data());
        ConstMatMap cm(col.data(), rows, cols);
        MatMap ym(ybuf.data(), rows, Co);
        ym.noalias() = cm * wm.transpose();
        // transpose (rows, Co) -> channel-major output, fusing the bias
        float* yb = &y[bi * Co * rows];
        for (int64_t co = 0; co < Co; ++co) {
            const float bias = b.numel() ? b[co] : 0.0f;
            for (int64_t r = 0; r < rows; ++r) yb[co * rows + r] = ybuf[r * Co + co] + bias;
        }
    }
    return y;
}

inline Var conv3d(Ctx& ctx, Var x, Var w, Var b, ConvGeom g) {
    Tensor y = conv3d_forward(x->value, w->value, b->value, g);
    const auto ydims = y.dims;
    return make_op(ctx, std::move(y), {x, w, b}, [g, ydims](Node& n) {
        const Tensor& xv = n.parents[0]->value;
        const Tensor& wv = n.parents[1]->value;
        const int64_t B = xv.dims[0], Ci = xv.dims[1], Co = wv.dims[0];
        const std::array<int64_t, 3> in{xv.dims[2], xv.dims[3], xv.dims[4]};
        const std::array<int64_t, 3> out{ydims[2], ydims[3], ydims[4]};
        const int64_t rows = out[0] * out[1] * out[2];
        const int64_t cols = Ci * g.k[0] * g.k[1] * g.k[2];

        const bool need_x = n.parents[0]->requires_grad;
        const bool need_w = n.parents[1]->requires_grad;
        const bool need_b = n.parents[2]->requires_grad;

        std::vector<float> col(static_cast<size_t>(rows * cols));
        std::vector<float> gybuf(static_cast<size_t>(rows * Co));
        std::vector<float> gcol(need_x ? static_cast<size_t>(rows * cols) : 0);
        ConstMatMap wm(wv.data.data(), Co, cols);
        for (int64_t bi = 0; bi < B; ++bi) {
            // gradient w.r.t. output, token-major (rows, Co)
            const float* gy = &n.grad[bi * Co * rows];
            for (int64_t co = 0; co < Co; ++co)
                for (int64_t r = 0; r < rows; ++r) gybuf[r * Co + co] = gy[co * rows + r];
            ConstMatMap gym(gybuf.data(), rows, Co);

            if (need_w || need_b) {
                if (need_w) {
                    detail::im2col(&xv[bi * Ci * in[0] * in[1] * in[2]], Ci, in, out, g, col.data());
                    ConstMatMap cm(col.data(), rows, cols);
                    MatMap gwm(n.parents[1]->ensure_grad().data.data(), Co, cols);
                    gwm.noalias() += gym.transpose() * cm;
                }
                if (need_b) {
                    Tensor& gb = n.parents[2]->ensure_grad();
                    for (int64_t co = 0; co < Co; ++co) {
                        double s = 0.0;
                        for (int64_t r = 0; r < rows; ++r) s += gy[co * rows + r];
                        gb[co] += static_cast<float>(s);
                    }
                }
            }
            if (need_x) {
                MatMap gcm(gcol.data(), rows, cols);
                gcm.noalias() = gym * wm;
                Tensor& gx = n.parents[0]->ensure_grad();
                detail::col2im_add(gcol.data(), Ci, in, out, g, &gx[bi * Ci * in[0] * in[1] * in[2]]);
            }
        }
    });
}

// ----- group norm -----

inline Var group_norm(Ctx& ctx, Var x, Var gamma, Var beta, int64_t groups, float eps = 1e-5f) {
    const auto& d = x->value.dims;
    require(d.size() == 5, ErrorKind::shape_mismatch, "group_norm: input must be (B,C,D,H,W)");
    const int64_t B = d[0], C = d[1], S = d[2] * d[3] * d[4];
    require(C % groups == 0, ErrorKind::shape_mismatch, "group_norm: C not divisible by groups");
    require(gamma->value.numel() == C && beta->value.numel() == C, ErrorKind::shape_mismatch,
            "group_norm: affine params must have C entries");
    const int64_t cpg = C / groups;
    const int64_t n = cpg * S;

    Tensor y(x->value.dims);
    std::vector<float> mean(static_cast<size_t>(B * groups)), invstd(static_cast<size_t>(B * groups));
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t gi = 0; gi < groups; ++gi) {
            const float* xp = &x->value[(bi * C + gi * cpg) * S];
            double m = 0.0;
            for (int64_t i = 0; i < n; ++i) m += xp[i];
            m /= static_cast<double>(n);
            double v = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double dv = xp[i] - m;
                v += dv * dv;
            }
            v /= static_cast<double>(n);
            const float mu = static_cast<float>(m);
            const float is = 1.0f / std::sqrt(static_cast<float>(v) + eps);
            mean[bi * groups + gi] = mu;
            invstd[bi * groups + gi] = is;
            float* yp = &y[(bi * C + gi * cpg) * S];
            for (int64_t c = 0; c < cpg; ++c) {
                const float ga = gamma->value[gi * cpg + c];
                const float be = beta->value[gi * cpg + c];
                for (int64_t i = 0; i < S; ++i)
                    yp[c * S + i] = (xp[c * S + i] - mu) * is * ga + be;
            }
        }

    return make_op(ctx, std::move(y), {x, gamma, beta},
                   [B, C, S, groups, cpg, n, mean = std::move(mean), invstd = std::move(invstd)](Node& nd) {
        const Tensor& xv = nd.parents[0]->value;
        const Tensor& gav = nd.parents[1]->value;
        const bool need_x = nd.parents[0]->requires_grad;
        const bool need_g = nd.parents[1]->requires_grad;
        const bool need_b = nd.parents[2]->requires_grad;
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t gi = 0; gi < groups; ++gi) {
                const float mu = mean[bi * groups + gi];
                const float is = invstd[bi * groups + gi];
                const float* xp = &xv[(bi * C + gi * cpg) * S];
                const float* gp = &nd.grad[(bi * C + gi * cpg) * S];
                // per-group reductions over dxhat and dxhat*xhat
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int64_t c = 0; c < cpg; ++c) {
                    const float ga = gav[gi * cpg + c];
                    for (int64_t i = 0; i < S; ++i) {
                        const float xhat = (xp[c * S + i] - mu) * is;
                        const float dxhat = gp[c * S + i] * ga;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
                    }
                }
                if (need_g || need_b) {
                    for (int64_t c = 0; c < cpg; ++c) {
                        double sg = 0.0, sb = 0.0;
                        for (int64_t i = 0; i < S; ++i) {
                            const float xhat = (xp[c * S + i] - mu) * is;
                            sg += static_cast<double>(gp[c * S + i]) * xhat;
                            sb += gp[c * S + i];
                        }
                        if (need_g) nd.parents[1]->ensure_grad()[gi * cpg + c] += static_cast<float>(sg);
                        if (need_b) nd.parents[2]->ensure_grad()[gi * cpg + c] += static_cast<float>(sb);
                    }
                }
                if (need_x) {
                    Tensor& gx = nd.parents[0]->ensure_grad();
                    float* gxp = &gx[(bi * C + gi * cpg) * S];
                    const float inv_n = 1.0f / static_cast<float>(n);
                    const float sd = static_cast<float>(sum_dxhat);
                    const float sdx = static_cast<float>(sum_dxhat_xhat);
                    for (int64_t c = 0; c < cpg; ++c) {
                        const float ga = gav[gi * cpg + c];
                        for (int64_t i = 0; i < S; ++i) {
                            const float xhat = (xp[c * S + i] - mu) * is;
                            const float dxhat = gp[c * S + i] * ga;
                            gxp[c * S + i] +=
                                is * inv_n * (static_cast<float>(n) * dxhat - sd - xhat * sdx);
                        }
                    }
                }
            }
    });
}

// ----- linear -----

inline Var linear(Ctx& ctx, Var x, Var w, Var b) {
    const auto& d = x->value.dims;
    require(d.size() == 2, ErrorKind::shape_mismatch, "linear: input must be (B,F)");
    const int64_t B = d[0], F = d[1], O = w->value.dims[0];
    require(w->value.dims[1] == F, ErrorKind::shape_mismatch, "linear: weight shape mismatch");
    Tensor y({B, O});
    ConstMatMap xm(x->value.data.data(), B, F);
    ConstMatMap wm(w->value.data.data(), O, F);
    MatMap ym(y.data.data(), B, O);
    ym.noalias() = xm * wm.transpose();
    if (b->value.numel())
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t o = 0; o < O; ++o) y[bi * O + o] += b->value[o];
    return make_op(ctx, std::move(y), {x, w, b}, [B, F, O](Node& n) {
        ConstMatMap gym(n.grad.data.data(), B, O);
        if (n.parents[0]->requires_grad) {
            ConstMatMap wm(n.parents[1]->value.data.data(), O, F);
            MatMap gxm(n.parents[0]->ensure_grad().data.data(), B, F);
            gxm.noalias() += gym * wm;
        }
        if (n.parents[1]->requires_grad) {
            ConstMatMap xm(n.parents[0]->value.data.data(), B, F);
            MatMap gwm(n.parents[1]->ensure_grad().data.data(), O, F);
            gwm.noalias() += gym.transpose() * xm;
        }
        if (n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->ensure_grad();
            for (int64_t o = 0; o < O; ++o) {
                double s = 0.0;
                for (int64_t bi = 0; bi < B; ++bi) s += n.grad[bi * O + o];
                gb[o] += static_cast<float>(s);
            }
        }
    });
}

// add a per-sample channel vector (B,C) across all spatial positions
inline Var add_channel_bias(Ctx& ctx, Var x, Var v) {
    const auto& d = x->value.dims;
    require(d.size() == 5 && v->value.rank() == 2 && v->value.dims[0] == d[0] &&
                v->value.dims[1] == d[1],
            ErrorKind::shape_mismatch, "add_channel_bias: expected (B,C,D,H,W) + (B,C)");
    const int64_t B = d[0], C = d[1], S = d[2] * d[3] * d[4];
    Tensor y = x->value;
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t c = 0; c < C; ++c) {
            const float bias = v->value[bi * C + c];
            float* yp = &y[(bi * C + c) * S];
            for (int64_t i = 0; i < S; ++i) yp[i] += bias;
        }
    return make_op(ctx, std::move(y), {x, v}, [B, C, S](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (int64_t bi = 0; bi < B; ++bi)
                for (int64_t c = 0; c < C; ++c) {
                    double s = 0.0;
                    const float* gp = &n.grad[(bi * C + c) * S];
                    for (int64_t i = 0; i < S; ++i) s += gp[i];
                    g[bi * C + c] += static_cast<float>(s);
                }
        }
    });
}

// ----- up/down sampling -----

inline Var nearest_upsample2(Ctx& ctx, Var x) {
    const auto& d = x->value.dims;
    require(d.size() == 5, ErrorKind::shape_mismatch, "nearest_upsample2: input must be (B,C,D,H,W)");
    const int64_t B = d[0], C = d[1], D = d[2], H = d[3], W = d[4];
    Tensor y({B, C, 2 * D, 2 * H, 2 * W});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const float* xp = &x->value[bc * D * H * W];
        float* yp = &y[bc * 8 * D * H * W];
        for (int64_t dd = 0; dd < 2 * D; ++dd)
            for (int64_t hh = 0; hh < 2 * H; ++hh) {
                const float* row = xp + ((dd / 2) * H + hh / 2) * W;
                float* out = yp + (dd * 2 * H + hh) * 2 * W;
                for (int64_t ww = 0; ww < W; ++ww) {
                    out[2 * ww] = row[ww];
                    out[2 * ww + 1] = row[ww];
                }
            }
    }
    return make_op(ctx, std::move(y), {x}, [B, C, D, H, W](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            float* gx = &g[bc * D * H * W];
            const float* gy = &n.grad[bc * 8 * D * H * W];
            for (int64_t dd = 0; dd < 2 * D; ++dd)
                for (int64_t hh = 0; hh < 2 * H; ++hh) {
                    float* row = gx + ((dd / 2) * H + hh / 2) * W;
                    const float* src = gy + (dd * 2 * H + hh) * 2 * W;
                    for (int64_t ww = 0; ww < W; ++ww) row[ww] += src[2 * ww] + src[2 * ww + 1];
                }
        }
    });
}

// ----- chunked attention -----
// Exact softmax attention with streaming log-sum-exp over key chunks: the
// transient score buffer is (S_q x chunk), never (S_q x S_k). Saves per-row
// LSE so the backward pass can rebuild probabilities chunk by chunk.

inline Tensor attention_chunked_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                        int64_t chunk, Tensor* lse_out = nullptr) {
    require(q.rank() == 4 && k.rank() == 4 && v.rank() == 4, ErrorKind::shape_mismatch,
            "attention: tensors must be (B,H,S,Dh)");
    require(chunk >= 1, ErrorKind::config, "attention: chunk must be >= 1");
    const int64_t B = q.dims[0], Hh = q.dims[1], Sq = q.dims[2], Dh = q.dims[3];
    const int64_t Sk = k.dims[2];
    require(k.dims[0] == B && k.dims[1] == Hh && k.dims[3] == Dh && v.same_shape(k),
            ErrorKind::shape_mismatch, "attention: q/k/v shape mismatch");
    const float scl = 1.0f / std::sqrt(static_cast<float>(Dh));

    Tensor out({B, Hh, Sq, Dh});
    Tensor lse({B, Hh, Sq});
    std::vector<float> scores(static_cast<size_t>(Sq * std::min(chunk, Sk)));
    std::vector<float> mrow(static_cast<size_t>(Sq)), lrow(static_cast<size_t>(Sq));
    std::vector<float> acc(static_cast<size_t>(Sq * Dh));

    for (int64_t bh = 0; bh < B * Hh; ++bh) {
        const float* qp = &q[bh * Sq * Dh];
        const float* kp = &k[bh * Sk * Dh];
        const float* vp = &v[bh * Sk * Dh];
        std::fill(mrow.begin(), mrow.end(), -std::numeric_limits<float>::infinity());
        std::fill(lrow.begin(), lrow.end(), 0.0f);
        std::fill(acc.begin(), acc.end(), 0.0f);
        ConstMatMap qm(qp, Sq, Dh);
        for (int64_t c0 = 0; c0 < Sk; c0 += chunk) {
            const int64_t cn = std::min(chunk, Sk - c0);
            ConstMatMap km(kp + c0 * Dh, cn, Dh);
            ConstMatMap vm(vp + c0 * Dh, cn, Dh);
            MatMap sm(scores.data(), Sq, cn);
            sm.noalias() = qm * km.transpose() * scl;
            MatMap am(acc.data(), Sq, Dh);
            for (int64_t r = 0; r < Sq; ++r) {
                float* srow = scores.data() + r * cn;
                float mloc = -std::numeric_limits<float>::infinity();
                for (int64_t j = 0; j < cn; ++j) mloc = std::max(mloc, srow[j]);
                const float mnew = std::max(mrow[r], mloc);
                const float corr = (mrow[r] == -std::numeric_limits<float>::infinity())
                                       ? 0.0f
                                       : std::exp(mrow[r] - mnew);
                float psum = 0.0f;
                for (int64_t j = 0; j < cn; ++j) {
                    srow[j] = std::exp(srow[j] - mnew);
                    psum += srow[j];
                }
                lrow[r] = lrow[r] * corr + psum;
                if (corr != 1.0f)
                    for (int64_t dh = 0; dh < Dh; ++dh) acc[r * Dh + dh] *= corr;
                mrow[r] = mnew;
            }
            ConstMatMap pm(scores.data(), Sq, cn);
            am.noalias() += pm * vm;
        }
        float* op = &out[bh * Sq * Dh];
        for (int64_t r = 0; r < Sq; ++r) {
            const float inv = 1.0f / lrow[r];
            for (int64_t dh = 0; dh < Dh; ++dh) op[r * Dh + dh] = acc[r * Dh + dh] * inv;
            lse[bh * Sq + r] = mrow[r] + std::log(lrow[r]);
        }
    }
    if (lse_out) *lse_out = std::move(lse);
    return out;
}

inline Var attention_chunked(Ctx& ctx, Var q, Var k, Var v, int64_t chunk) {
    Tensor lse;
    Tensor out = attention_chunked_forward(q->value, k->value, v->value, chunk, &lse);
    return make_op(ctx, std::move(out), {q, k, v}, [chunk, lse = std::move(lse)](Node& n) {
        const Tensor& qv = n.parents[0]->value;
        const Tensor& kv = n.parents[1]->value;
        const Tensor& vv = n.parents[2]->value;
        const int64_t B = qv.dims[0], Hh = qv.dims[1], Sq = qv.dims[2], Dh = qv.dims[3];
        const int64_t Sk = kv.dims[2];
        const float scl = 1.0f / std::sqrt(static_cast<float>(Dh));
        Tensor& gq = n.parents[0]->ensure_grad();
        Tensor& gk = n.parents[1]->ensure_grad();
        Tensor& gv = n.parents[2]->ensure_grad();

        std::vector<float> prob(static_cast<size_t>(Sq * std::min(chunk, Sk)));
        std::vector<float> dp(static_cast<size_t>(Sq * std::min(chunk, Sk)));
        std::vector<float> drow(static_cast<size_t>(Sq));
        for (int64_t bh = 0; bh < B * Hh; ++bh) {
            const float* qp = &qv[bh * Sq * Dh];
            const float* kp = &kv[bh * Sk * Dh];
            const float* vp = &vv[bh * Sk * Dh];
            const float* op = &n.value[bh * Sq * Dh];
            const float* gop = &n.grad[bh * Sq * Dh];
            const float* lsep = &lse[bh * Sq];
            // D_r = dO_r . O_r
            for (int64_t r = 0; r < Sq; ++r) {
                double s = 0.0;
                for (int64_t dh = 0; dh < Dh; ++dh)
                    s += static_cast<double>(gop[r * Dh + dh]) * op[r * Dh + dh];
                drow[r] = static_cast<float>(s);
            }
            ConstMatMap qm(qp, Sq, Dh);
            ConstMatMap gom(gop, Sq, Dh);
            MatMap gqm(&gq[bh * Sq * Dh], Sq, Dh);
            for (int64_t c0 = 0; c0 < Sk; c0 += chunk) {
                const int64_t cn = std::min(chunk, Sk - c0);
                ConstMatMap km(kp + c0 * Dh, cn, Dh);
                ConstMatMap vm(vp + c0 * Dh, cn, Dh);
                MatMap pm(prob.data(), Sq, cn);
                pm.noalias() = qm * km.transpose() * scl;
                for (int64_t r = 0; r < Sq; ++r)
                    for (int64_t j = 0; j < cn; ++j)
                        prob[r * cn + j] = std::exp(prob[r * cn + j] - lsep[r]);
                // dV_chunk += P^T dO
                MatMap gvm(&gv[(bh * Sk + c0) * Dh], cn, Dh);
                gvm.noalias() += pm.transpose() * gom;
                // dS = P * (dO V^T - D) * scale
                MatMap dpm(dp.data(), Sq, cn);
                dpm.noalias() = gom * vm.transpose();
                for (int64_t r = 0; r < Sq; ++r)
                    for (int64_t j = 0; j < cn; ++j)
                        dp[r * cn + j] = prob[r * cn + j] * (dp[r * cn + j] - drow[r]) * scl;
                gqm.noalias() += dpm * km;
                MatMap gkm(&gk[(bh * Sk + c0) * Dh], cn, Dh);
                gkm.noalias() += dpm.transpose() * qm;
            }
        }
    });
}

// reinterpret one third of a fused qkv conv output as (B, heads, S, Dh)
inline Var split_heads(Ctx& ctx, Var x, int which, int64_t heads, int64_t head_dim) {
    const auto& d = x->value.dims;
    require(d.size() == 5, ErrorKind::shape_mismatch, "split_heads: input must be (B,3C,D,H,W)");
    const int64_t B = d[0], C3 = d[1], S = d[2] * d[3] * d[4];
    const int64_t C = heads * head_dim;
    require(C3 == 3 * C, ErrorKind::shape_mismatch, "split_heads: channel dim must be 3*heads*head_dim");
    Tensor y({B, heads, S, head_dim});
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t dh = 0; dh < head_dim; ++dh) {
                const float* src = &x->value[(bi * C3 + which * C + h * head_dim + dh) * S];
                float* dst = &y[((bi * heads + h) * S) * head_dim + dh];
                for (int64_t s = 0; s < S; ++s) dst[s * head_dim] = src[s];
            }
    return make_op(ctx, std::move(y), {x}, [which, heads, head_dim, B, C3, C, S](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t dh = 0; dh < head_dim; ++dh) {
                    float* dst = &g[(bi * C3 + which * C + h * head_dim + dh) * S];
                    const float* src = &n.grad[((bi * heads + h) * S) * head_dim + dh];
                    for (int64_t s = 0; s < S; ++s) dst[s] += src[s * head_dim];
                }
    });
}

// (B, heads, S, Dh) back to (B, C, D, H, W)
inline Var merge_heads(Ctx& ctx, Var x, std::array<int64_t, 3> spatial) {
    const auto& d = x->value.dims;
    require(d.size() == 4, ErrorKind::shape_mismatch, "merge_heads: input must be (B,H,S,Dh)");
    const int64_t B = d[0], heads = d[1], S = d[2], head_dim = d[3];
    require(S == spatial[0] * spatial[1] * spatial[2], ErrorKind::shape_mismatch,
            "merge_heads: token count mismatch");
    const int64_t C = heads * head_dim;
    Tensor y({B, C, spatial[0], spatial[1], spatial[2]});
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t dh = 0; dh < head_dim; ++dh) {
                const float* src = &x->value[((bi * heads + h) * S) * head_dim + dh];
                float* dst = &y[(bi * C + h * head_dim + dh) * S];
                for (int64_t s = 0; s < S; ++s) dst[s] = src[s * head_dim];
            }
    return make_op(ctx, std::move(y), {x}, [B, heads, head_dim, C, S](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t dh = 0; dh < head_dim; ++dh) {
                    float* dst = &g[((bi * heads + h) * S) * head_dim + dh];
                    const float* src = &n.grad[(bi * C + h * head_dim + dh) * S];
                    for (int64_t s = 0; s < S; ++s) dst[s * head_dim] += src[s];
                }
    });
}

// ----- timestep embedding -----

inline Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim, int64_t max_period = 10000) {
    const int64_t half = dim / 2;
    Tensor e({static_cast<int64_t>(t.size()), dim});
    for (size_t bi = 0; bi < t.size(); ++bi)
        for (int64_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(static_cast<double>(max_period)) *
                                         static_cast<double>(i) / static_cast<double>(half));
            const double arg = static_cast<double>(t[bi]) * freq;
            e[bi * dim + i] = static_cast<float>(std::sin(arg));
            e[bi * dim + half + i] = static_cast<float>(std::cos(arg));
        }
    return e;
}

// ----- parameters and modules -----

struct ParamStore {
    struct Item {
        std::string name;
        Var var;
        bool decay; // weight decay applies (conv/linear weights only)
    };
    std::vector<Item> items;

    Var add(const std::string& name, Tensor init, bool decay) {
        for (const auto& it : items)
            require(it.name != name, ErrorKind::config, "ParamStore: duplicate parameter " + name);
        Var v = make_leaf(std::move(init), true);
        items.push_back({name, v, decay});
        return v;
    }

    Var find(const std::string& name) const {
        for (const auto& it : items)
            if (it.name == name) return it.var;
        fail(ErrorKind::config, "ParamStore: unknown parameter " + name);
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& it : items) n += it.var->value.numel();
        return n;
    }

    uint64_t digest() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& it : items) {
            h = fnv1a64(it.name, h);
            h = tensor_digest(it.var->value, h);
        }
        return h;
    }

    void zero_grad() {
        for (auto& it : items)
            if (it.var->grad.numel()) it.var->grad.fill(0.0f);
    }
};

struct Conv3dLayer {
    Var w, b;
    ConvGeom geom;

    Conv3dLayer() = default;
    Conv3dLayer(ParamStore& ps, const std::string& name, Rng& rng, int64_t ci, int64_t co,
                ConvGeom g, bool zero_init = false)
        : geom(g) {
        const int64_t fan_in = ci * g.k[0] * g.k[1] * g.k[2];
        Tensor wt({co, ci, g.k[0], g.k[1], g.k[2]});
        if (!zero_init) {
            const float sd = std::sqrt(2.0f / static_cast<float>(fan_in));
            for (auto& v : wt.data) v = sd * rng.normal();
        }
        w = ps.add(name + ".w", std::move(wt), true);
        b = ps.add(name + ".b", Tensor::zeros({co}), false);
    }

    Var forward(Ctx& ctx, Var x) const { return conv3d(ctx, x, w, b, geom); }
};

struct GroupNormLayer {
    Var gamma, beta;
    int64_t groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore& ps, const std::string& name, int64_t channels, int64_t g)
        : groups(g) {
        gamma = ps.add(name + ".g", Tensor::full({channels}, 1.0f), false);
        beta = ps.add(name + ".b", Tensor::zeros({channels}), false);
    }

    Var forward(Ctx& ctx, Var x) const { return group_norm(ctx, x, gamma, beta, groups); }
};

struct LinearLayer {
    Var w, b;

    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& name, Rng& rng, int64_t in, int64_t out,
                bool zero_init = false) {
        Tensor wt({out, in});
        if (!zero_init) {
            const float sd = std::sqrt(2.0f / static_cast<float>(in));
            for (auto& v : wt.data) v = sd * rng.normal();
        }
        w = ps.add(name + ".w", std::move(wt), true);
        b = ps.add(name + ".b", Tensor::zeros({out}), false);
    }

    Var forward(Ctx& ctx, Var x) const { return linear(ctx, x, w, b); }
};

inline int64_t norm_groups_for(int64_t channels) {
    for (int64_t g : {8, 4, 2})
        if (channels % g == 0 && channels >= g) return g;
    return 1;
}

// GN -> SiLU -> conv -> (+temb bias) -> GN -> SiLU -> conv, residual add.
// Second conv zero-initialized so the block starts as identity.
struct ResBlock3d {
    GroupNormLayer n1, n2;
    Conv3dLayer c1, c2, skip;
    LinearLayer temb_proj;
    bool has_skip = false;
    bool has_temb = false;

    ResBlock3d() = default;
    ResBlock3d(ParamStore& ps, const std::string& name, Rng& rng, int64_t ci, int64_t co,
               int64_t temb_dim = 0) {
        n1 = GroupNormLayer(ps, name + ".n1", ci, norm_groups_for(ci));
        c1 = Conv3dLayer(ps, name + ".c1", rng, ci, co, ConvGeom{});
        if (temb_dim > 0) {
            has_temb = true;
            temb_proj = LinearLayer(ps, name + ".temb", rng, temb_dim, co);
        }
        n2 = GroupNormLayer(ps, name + ".n2", co, norm_groups_for(co));
        c2 = Conv3dLayer(ps, name + ".c2", rng, co, co, ConvGeom{}, /*zero_init=*/true);
        if (ci != co) {
            has_skip = true;
            skip = Conv3dLayer(ps, name + ".skip", rng, ci, co,
                               ConvGeom{{1, 1, 1}, {1, 1, 1}, {0, 0, 0}});
        }
    }

    Var forward(Ctx& ctx, Var x, Var temb = nullptr) const {
        Var h = c1.forward(ctx, silu(ctx, n1.forward(ctx, x)));
        if (has_temb) {
            require(temb != nullptr, ErrorKind::shape_mismatch, "ResBlock3d: missing timestep embedding");
            h = add_channel_bias(ctx, h, temb_proj.forward(ctx, silu(ctx, temb)));
        }
        h = c2.forward(ctx, silu(ctx, n2.forward(ctx, h)));
        return add(ctx, h, has_skip ? skip.forward(ctx, x) : x);
    }
};

// pre-norm single-head-group self-attention over all spatial tokens,
// zero-initialized output projection
struct SelfAttention3d {
    GroupNormLayer norm;
    Conv3dLayer qkv, proj;
    int64_t heads = 1, head_dim = 32, chunk = 1024;

    SelfAttention3d() = default;
    SelfAttention3d(ParamStore& ps, const std::string& name, Rng& rng, int64_t channels,
                    int64_t head_dim_, int64_t chunk_) {
        require(channels % head_dim_ == 0, ErrorKind::config,
                "SelfAttention3d: channels must be divisible by head_dim");
        heads = channels / head_dim_;
        head_dim = head_dim_;
        chunk = chunk_;
        norm = GroupNormLayer(ps, name + ".norm", channels, norm_groups_for(channels));
        const ConvGeom one{{1, 1, 1}, {1, 1, 1}, {0, 0, 0}};
        qkv = Conv3dLayer(ps, name + ".qkv", rng, channels, 3 * channels, one);
        proj = Conv3dLayer(ps, name + ".proj", rng, channels, channels, one, /*zero_init=*/true);
    }

    Var forward(Ctx& ctx, Var x) const {
        const auto& d = x->value.dims;
        const std::array<int64_t, 3> spatial{d[2], d[3], d[4]};
        Var h = qkv.forward(ctx, norm.forward(ctx, x));
        Var q = split_heads(ctx, h, 0, heads, head_dim);
        Var k = split_heads(ctx, h, 1, heads, head_dim);
        Var v = split_heads(ctx, h, 2, heads, head_dim);
        Var att = attention_chunked(ctx, q, k, v, chunk);
        return add(ctx, x, proj.forward(ctx, merge_heads(ctx, att, spatial)));
    }
};

} // namespace medlord

#endif
