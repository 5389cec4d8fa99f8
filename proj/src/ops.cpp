#include <Eigen/Dense>

#include <cmath>
#include <numbers>

#include "uda/autograd.hpp"

namespace uda::ops {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorX<Real>>;
using CMapVec = Eigen::Map<const Eigen::VectorX<Real>>;

void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

void add_into(Tensor& dst, const Tensor& src) {
    Real* d = dst.data();
    const Real* s = src.data();
    for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

struct ConvGeometry {
    int batch, in_ch, h, w, out_ch, k, stride, pad, out_h, out_w;
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
    int col_rows() const { return in_ch * k * k; }
    int col_cols() const { return out_h * out_w; }
};

void im2col(const Real* img, const ConvGeometry& g, Real* col) {
    const int cols = g.col_cols();
    for (int c = 0; c < g.in_ch; ++c)
        for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj) {
                Real* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * cols;
                const Real* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    Real* out = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(out, out + g.out_w, 0.0);
                        continue;
                    }
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        out[ox] = (ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : 0.0;
                    }
                }
            }
}

void col2im(const Real* col, const ConvGeometry& g, Real* img) {
    const int cols = g.col_cols();
    for (int c = 0; c < g.in_ch; ++c)
        for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj) {
                const Real* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * cols;
                Real* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.out_w + ox];
                    }
                }
            }
}

struct BilinearTaps {
    std::vector<int> i0, i1;
    std::vector<Real> l0, l1;
};

BilinearTaps bilinear_taps(int in, int out) {
    BilinearTaps t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.l0.resize(out);
    t.l1.resize(out);
    const Real scale = static_cast<Real>(in) / out;
    for (int o = 0; o < out; ++o) {
        Real src = (o + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = i0 < in - 1 ? i0 + 1 : i0;
        const Real frac = src - i0;
        t.i0[o] = i0;
        t.i1[o] = i1;
        t.l1[o] = frac;
        t.l0[o] = 1.0 - frac;
    }
    return t;
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_shape(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    add_into(out, b.value());
    return make_op(std::move(out), {a, b}, [a, b](const Tensor& g) {
        if (Tensor* ga = grad_sink(a)) add_into(*ga, g);
        if (Tensor* gb = grad_sink(b)) add_into(*gb, g);
    });
}

Var scale(const Var& a, Real s) {
    Tensor out = a.value();
    for (auto& v : out.values()) v *= s;
    return make_op(std::move(out), {a}, [a, s](const Tensor& g) {
        if (Tensor* ga = grad_sink(a))
            for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
    });
}

Var add_broadcast(const Var& x, const Var& pos) {
    Shape tail(x.shape().begin() + 1, x.shape().end());
    require_shape(tail == pos.shape(), "add_broadcast: " + shape_str(x.shape()) + " + " + shape_str(pos.shape()));
    const std::size_t inner = pos.value().numel();
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += pos.value()[i % inner];
    return make_op(std::move(out), {x, pos}, [x, pos, inner](const Tensor& g) {
        if (Tensor* gx = grad_sink(x)) add_into(*gx, g);
        if (Tensor* gp = grad_sink(pos))
            for (std::size_t i = 0; i < g.numel(); ++i) (*gp)[i % inner] += g[i];
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const int in = weight.dim(1), out_f = weight.dim(0);
    require_shape(x.dim(-1) == in, "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    if (bias.defined()) require_shape(bias.value().numel() == static_cast<std::size_t>(out_f), "linear: bias size");
    const int rows = static_cast<int>(x.value().numel() / in);
    // Rank >= 3 inputs are multiplied per leading index so each sample's
    // result is independent of the batch it arrives in.
    const int chunks = x.value().rank() >= 3 ? x.dim(0) : 1;
    const int chunk_rows = chunks ? rows / chunks : 0;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    Tensor out(out_shape);
    CMapMat w(weight.value().data(), out_f, in);
    for (int c = 0; c < chunks; ++c) {
        CMapMat xm(x.value().data() + static_cast<std::size_t>(c) * chunk_rows * in, chunk_rows, in);
        MapMat ym(out.data() + static_cast<std::size_t>(c) * chunk_rows * out_f, chunk_rows, out_f);
        ym.noalias() = xm * w.transpose();
        if (bias.defined()) ym.rowwise() += CMapVec(bias.value().data(), out_f).transpose();
    }
    return make_op(std::move(out), {x, weight, bias}, [x, weight, bias, in, out_f, rows](const Tensor& g) {
        CMapMat gm(g.data(), rows, out_f);
        CMapMat w(weight.value().data(), out_f, in);
        if (Tensor* gx = grad_sink(x)) MapMat(gx->data(), rows, in).noalias() += gm * w;
        if (Tensor* gw = grad_sink(weight))
            MapMat(gw->data(), out_f, in).noalias() += gm.transpose() * CMapMat(x.value().data(), rows, in);
        if (bias.defined())
            if (Tensor* gb = grad_sink(bias)) MapVec(gb->data(), out_f) += gm.colwise().sum().transpose();
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
    require_shape(x.value().rank() == 4 && weight.value().rank() == 4, "conv2d expects rank-4 input and weight");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
    require_shape(weight.dim(1) == g.in_ch && weight.dim(3) == g.k,
                  "conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    g.out_h = (g.h + 2 * padding - g.k) / stride + 1;
    g.out_w = (g.w + 2 * padding - g.k) / stride + 1;
    require_shape(g.out_h > 0 && g.out_w > 0, "conv2d: empty output for " + shape_str(x.shape()));

    const int krows = g.col_rows(), cols = g.col_cols();
    const bool keep_cols = grad_enabled() && !g.pointwise() && (weight.requires_grad() || x.requires_grad());
    auto saved = std::make_shared<std::vector<Real>>();
    std::vector<Real> scratch;
    if (!g.pointwise()) {
        if (keep_cols)
            saved->resize(static_cast<std::size_t>(g.batch) * krows * cols);
        else
            scratch.resize(static_cast<std::size_t>(krows) * cols);
    }

    Tensor out({g.batch, g.out_ch, g.out_h, g.out_w});
    CMapMat wm(weight.value().data(), g.out_ch, krows);
    const std::size_t in_plane = static_cast<std::size_t>(g.in_ch) * g.h * g.w;
    const std::size_t out_plane = static_cast<std::size_t>(g.out_ch) * cols;
    for (int b = 0; b < g.batch; ++b) {
        const Real* img = x.value().data() + b * in_plane;
        const Real* col = img;
        if (!g.pointwise()) {
            Real* buf = keep_cols ? saved->data() + static_cast<std::size_t>(b) * krows * cols : scratch.data();
            im2col(img, g, buf);
            col = buf;
        }
        MapMat om(out.data() + b * out_plane, g.out_ch, cols);
        om.noalias() = wm * CMapMat(col, krows, cols);
        if (bias.defined()) om.colwise() += CMapVec(bias.value().data(), g.out_ch);
    }

    return make_op(std::move(out), {x, weight, bias}, [x, weight, bias, g, saved](const Tensor& go) {
        const int krows = g.col_rows(), cols = g.col_cols();
        const std::size_t in_plane = static_cast<std::size_t>(g.in_ch) * g.h * g.w;
        const std::size_t out_plane = static_cast<std::size_t>(g.out_ch) * cols;
        CMapMat wm(weight.value().data(), g.out_ch, krows);
        Tensor* gx = grad_sink(x);
        Tensor* gw = grad_sink(weight);
        Tensor* gb = bias.defined() ? grad_sink(bias) : nullptr;
        std::vector<Real> dcol(g.pointwise() ? 0 : static_cast<std::size_t>(krows) * cols);
        for (int b = 0; b < g.batch; ++b) {
            CMapMat gm(go.data() + b * out_plane, g.out_ch, cols);
            const Real* col = g.pointwise() ? x.value().data() + b * in_plane
                                            : saved->data() + static_cast<std::size_t>(b) * krows * cols;
            if (gw) MapMat(gw->data(), g.out_ch, krows).noalias() += gm * CMapMat(col, krows, cols).transpose();
            if (gb) MapVec(gb->data(), g.out_ch) += gm.rowwise().sum();
            if (gx) {
                if (g.pointwise()) {
                    MapMat(gx->data() + b * in_plane, krows, cols).noalias() += wm.transpose() * gm;
                } else {
                    MapMat(dcol.data(), krows, cols).noalias() = wm.transpose() * gm;
                    col2im(dcol.data(), g, gx->data() + b * in_plane);
                }
            }
        }
    });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
    require_shape(x.value().rank() == 4, "batch_norm2d expects [B, C, H, W]");
    const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require_shape(gamma.value().numel() == static_cast<std::size_t>(C), "batch_norm2d: gamma size");
    const std::size_t n = static_cast<std::size_t>(B) * HW;
    std::vector<Real> mean(C), inv_std(C);
    const Tensor& xv = x.value();
    if (training) {
        require_shape(n > 1, "batch_norm2d: training needs more than one value per channel");
        for (int c = 0; c < C; ++c) {
            Real s = 0;
            for (int b = 0; b < B; ++b) {
                const Real* p = xv.data() + (static_cast<std::size_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) s += p[i];
            }
            const Real m = s / static_cast<Real>(n);
            Real v = 0;
            for (int b = 0; b < B; ++b) {
                const Real* p = xv.data() + (static_cast<std::size_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= static_cast<Real>(n);
            mean[c] = m;
            inv_std[c] = 1.0 / std::sqrt(v + state.eps);
            state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * m;
            state.running_var[c] = (1 - state.momentum) * state.running_var[c] +
                                   state.momentum * v * static_cast<Real>(n) / static_cast<Real>(n - 1);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
        }
    }
    Tensor xhat(x.shape());
    Tensor out(x.shape());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
            const Real gm = gamma.value()[c], bt = beta.value()[c];
            for (int i = 0; i < HW; ++i) {
                const Real h = (xv[off + i] - mean[c]) * inv_std[c];
                xhat[off + i] = h;
                out[off + i] = gm * h + bt;
            }
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), inv_std, training, B, C, HW, n](const Tensor& g) {
                       std::vector<Real> sum_g(C, 0.0), sum_gx(C, 0.0);
                       for (int b = 0; b < B; ++b)
                           for (int c = 0; c < C; ++c) {
                               const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
                               for (int i = 0; i < HW; ++i) {
                                   sum_g[c] += g[off + i];
                                   sum_gx[c] += g[off + i] * xhat[off + i];
                               }
                           }
                       if (Tensor* gg = grad_sink(gamma))
                           for (int c = 0; c < C; ++c) (*gg)[c] += sum_gx[c];
                       if (Tensor* gbt = grad_sink(beta))
                           for (int c = 0; c < C; ++c) (*gbt)[c] += sum_g[c];
                       Tensor* gx = grad_sink(x);
                       if (!gx) return;
                       const Real inv_n = 1.0 / static_cast<Real>(n);
                       for (int b = 0; b < B; ++b)
                           for (int c = 0; c < C; ++c) {
                               const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
                               const Real k = gamma.value()[c] * inv_std[c];
                               for (int i = 0; i < HW; ++i) {
                                   if (training)
                                       (*gx)[off + i] +=
                                           k * (g[off + i] - inv_n * sum_g[c] - xhat[off + i] * inv_n * sum_gx[c]);
                                   else
                                       (*gx)[off + i] += k * g[off + i];
                               }
                           }
                   });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
    const int D = x.dim(-1);
    require_shape(gamma.value().numel() == static_cast<std::size_t>(D), "layer_norm: gamma size");
    const std::size_t rows = x.value().numel() / D;
    Tensor xhat(x.shape()), out(x.shape());
    std::vector<Real> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* p = x.value().data() + r * D;
        Real m = 0;
        for (int i = 0; i < D; ++i) m += p[i];
        m /= D;
        Real v = 0;
        for (int i = 0; i < D; ++i) v += (p[i] - m) * (p[i] - m);
        v /= D;
        rstd[r] = 1.0 / std::sqrt(v + eps);
        for (int i = 0; i < D; ++i) {
            const Real h = (p[i] - m) * rstd[r];
            xhat[r * D + i] = h;
            out[r * D + i] = gamma.value()[i] * h + beta.value()[i];
        }
    }
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, D](const Tensor& g) {
                       Tensor* gg = grad_sink(gamma);
                       Tensor* gbt = grad_sink(beta);
                       Tensor* gx = grad_sink(x);
                       std::vector<Real> dh(D);
                       for (std::size_t r = 0; r < rows; ++r) {
                           Real mean_dh = 0, mean_dhx = 0;
                           for (int i = 0; i < D; ++i) {
                               const Real gi = g[r * D + i];
                               if (gg) (*gg)[i] += gi * xhat[r * D + i];
                               if (gbt) (*gbt)[i] += gi;
                               dh[i] = gi * gamma.value()[i];
                               mean_dh += dh[i];
                               mean_dhx += dh[i] * xhat[r * D + i];
                           }
                           if (!gx) continue;
                           mean_dh /= D;
                           mean_dhx /= D;
                           for (int i = 0; i < D; ++i)
                               (*gx)[r * D + i] += rstd[r] * (dh[i] - mean_dh - xhat[r * D + i] * mean_dhx);
                       }
                   });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = v > 0 ? v : 0.0;
    return make_op(std::move(out), {x}, [x](const Tensor& g) {
        if (Tensor* gx = grad_sink(x))
            for (std::size_t i = 0; i < g.numel(); ++i)
                if (x.value()[i] > 0) (*gx)[i] += g[i];
    });
}

Var gelu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2));
    return make_op(std::move(out), {x}, [x](const Tensor& g) {
        Tensor* gx = grad_sink(x);
        if (!gx) return;
        const Real inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const Real v = x.value()[i];
            const Real cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2));
            (*gx)[i] += g[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
        }
    });
}

Var self_attention(const Var& qkv, int num_heads) {
    require_shape(qkv.value().rank() == 3 && qkv.dim(2) % 3 == 0, "self_attention expects [B, N, 3D]");
    const int B = qkv.dim(0), N = qkv.dim(1), D = qkv.dim(2) / 3;
    require_shape(num_heads > 0 && D % num_heads == 0, "self_attention: heads must divide embed dim");
    const int dh = D / num_heads;
    const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
    auto probs = std::make_shared<std::vector<RowMat>>(static_cast<std::size_t>(B) * num_heads);
    Tensor out({B, N, D});
    const Tensor& in = qkv.value();
    auto gather = [&](int b, int offset) {
        RowMat m(N, dh);
        for (int i = 0; i < N; ++i)
            for (int d = 0; d < dh; ++d) m(i, d) = in.at(b, i, offset + d);
        return m;
    };
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < num_heads; ++h) {
            const RowMat q = gather(b, h * dh), k = gather(b, D + h * dh), v = gather(b, 2 * D + h * dh);
            RowMat s = (q * k.transpose()) * scale;
            for (int i = 0; i < N; ++i) {
                const Real mx = s.row(i).maxCoeff();
                s.row(i) = (s.row(i).array() - mx).exp();
                s.row(i) /= s.row(i).sum();
            }
            const RowMat o = s * v;
            for (int i = 0; i < N; ++i)
                for (int d = 0; d < dh; ++d) out.at(b, i, h * dh + d) = o(i, d);
            (*probs)[static_cast<std::size_t>(b) * num_heads + h] = std::move(s);
        }
    return make_op(std::move(out), {qkv}, [qkv, probs, num_heads, B, N, D, dh, scale](const Tensor& g) {
        Tensor* gq = grad_sink(qkv);
        if (!gq) return;
        const Tensor& in = qkv.value();
        auto gather = [&](const Tensor& t, int b, int offset) {
            RowMat m(N, dh);
            for (int i = 0; i < N; ++i)
                for (int d = 0; d < dh; ++d) m(i, d) = t.at(b, i, offset + d);
            return m;
        };
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < num_heads; ++h) {
                const RowMat& p = (*probs)[static_cast<std::size_t>(b) * num_heads + h];
                const RowMat q = gather(in, b, h * dh), k = gather(in, b, D + h * dh), v = gather(in, b, 2 * D + h * dh);
                const RowMat go = gather(g, b, h * dh);
                const RowMat dv = p.transpose() * go;
                const RowMat dp = go * v.transpose();
                RowMat ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
                const RowMat dq = (ds * k) * scale;
                const RowMat dk = (ds.transpose() * q) * scale;
                for (int i = 0; i < N; ++i)
                    for (int d = 0; d < dh; ++d) {
                        gq->at(b, i, h * dh + d) += dq(i, d);
                        gq->at(b, i, D + h * dh + d) += dk(i, d);
                        gq->at(b, i, 2 * D + h * dh + d) += dv(i, d);
                    }
            }
    });
}

Var tokens_to_map(const Var& tokens, int h, int w) {
    require_shape(tokens.value().rank() == 3 && tokens.dim(1) == h * w,
                  "tokens_to_map: " + shape_str(tokens.shape()) + " vs grid " + std::to_string(h) + "x" +
                      std::to_string(w));
    const int B = tokens.dim(0), N = h * w, D = tokens.dim(2);
    Tensor out({B, D, h, w});
    for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) out[(static_cast<std::size_t>(b) * D + d) * N + n] = tokens.value().at(b, n, d);
    return make_op(std::move(out), {tokens}, [tokens, B, N, D](const Tensor& g) {
        if (Tensor* gt = grad_sink(tokens))
            for (int b = 0; b < B; ++b)
                for (int n = 0; n < N; ++n)
                    for (int d = 0; d < D; ++d) gt->at(b, n, d) += g[(static_cast<std::size_t>(b) * D + d) * N + n];
    });
}

Var map_to_tokens(const Var& map) {
    require_shape(map.value().rank() == 4, "map_to_tokens expects [B, D, h, w]");
    const int B = map.dim(0), D = map.dim(1), N = map.dim(2) * map.dim(3);
    Tensor out({B, N, D});
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
            for (int n = 0; n < N; ++n) out.at(b, n, d) = map.value()[(static_cast<std::size_t>(b) * D + d) * N + n];
    return make_op(std::move(out), {map}, [map, B, N, D](const Tensor& g) {
        if (Tensor* gm = grad_sink(map))
            for (int b = 0; b < B; ++b)
                for (int d = 0; d < D; ++d)
                    for (int n = 0; n < N; ++n) (*gm)[(static_cast<std::size_t>(b) * D + d) * N + n] += g.at(b, n, d);
    });
}

Var upsample_nearest(const Var& x, int factor) {
    require_shape(x.value().rank() == 4 && factor >= 1, "upsample_nearest expects [B, C, H, W]");
    const int planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = H * factor, OW = W * factor;
    Tensor out({x.dim(0), x.dim(1), OH, OW});
    for (int p = 0; p < planes; ++p)
        for (int y = 0; y < OH; ++y)
            for (int xx = 0; xx < OW; ++xx)
                out[(static_cast<std::size_t>(p) * OH + y) * OW + xx] =
                    x.value()[(static_cast<std::size_t>(p) * H + y / factor) * W + xx / factor];
    return make_op(std::move(out), {x}, [x, planes, H, W, OH, OW, factor](const Tensor& g) {
        if (Tensor* gx = grad_sink(x))
            for (int p = 0; p < planes; ++p)
                for (int y = 0; y < OH; ++y)
                    for (int xx = 0; xx < OW; ++xx)
                        (*gx)[(static_cast<std::size_t>(p) * H + y / factor) * W + xx / factor] +=
                            g[(static_cast<std::size_t>(p) * OH + y) * OW + xx];
    });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    require_shape(x.value().rank() == 4 && out_h > 0 && out_w > 0, "resize_bilinear expects [B, C, H, W]");
    const int planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H == out_h && W == out_w) return x;
    auto ty = std::make_shared<BilinearTaps>(bilinear_taps(H, out_h));
    auto tx = std::make_shared<BilinearTaps>(bilinear_taps(W, out_w));
    Tensor out({x.dim(0), x.dim(1), out_h, out_w});
    for (int p = 0; p < planes; ++p) {
        const Real* src = x.value().data() + static_cast<std::size_t>(p) * H * W;
        Real* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const Real* r0 = src + ty->i0[y] * W;
            const Real* r1 = src + ty->i1[y] * W;
            for (int xx = 0; xx < out_w; ++xx) {
                const int a = tx->i0[xx], b = tx->i1[xx];
                dst[y * out_w + xx] = ty->l0[y] * (tx->l0[xx] * r0[a] + tx->l1[xx] * r0[b]) +
                                      ty->l1[y] * (tx->l0[xx] * r1[a] + tx->l1[xx] * r1[b]);
            }
        }
    }
    return make_op(std::move(out), {x}, [x, ty, tx, planes, H, W, out_h, out_w](const Tensor& g) {
        Tensor* gx = grad_sink(x);
        if (!gx) return;
        for (int p = 0; p < planes; ++p) {
            Real* dst = gx->data() + static_cast<std::size_t>(p) * H * W;
            const Real* gp = g.data() + static_cast<std::size_t>(p) * out_h * out_w;
            for (int y = 0; y < out_h; ++y) {
                Real* r0 = dst + ty->i0[y] * W;
                Real* r1 = dst + ty->i1[y] * W;
                for (int xx = 0; xx < out_w; ++xx) {
                    const Real v = gp[y * out_w + xx];
                    const int a = tx->i0[xx], b = tx->i1[xx];
                    r0[a] += ty->l0[y] * tx->l0[xx] * v;
                    r0[b] += ty->l0[y] * tx->l1[xx] * v;
                    r1[a] += ty->l1[y] * tx->l0[xx] * v;
                    r1[b] += ty->l1[y] * tx->l1[xx] * v;
                }
            }
        }
    });
}

Var weighted_cross_entropy(const Var& logits, const LabelTensor& labels, const Tensor& weights, int ignore_index) {
    require_shape(logits.value().rank() == 4, "weighted_cross_entropy expects [B, C, H, W] logits");
    const int B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    const Shape label_shape{B, logits.dim(2), logits.dim(3)};
    require_shape(labels.shape() == label_shape && weights.shape() == label_shape,
                  "weighted_cross_entropy: labels/weights must be " + shape_str(label_shape));
    const Tensor& z = logits.value();
    auto probs = std::make_shared<Tensor>(logits.shape());
    Real total = 0;
    std::size_t count = 0;
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < HW; ++i) {
            const int y = labels[static_cast<std::size_t>(b) * HW + i];
            if (y == ignore_index) continue;
            if (y < 0 || y >= C) throw std::out_of_range("weighted_cross_entropy: label " + std::to_string(y));
            const std::size_t base = static_cast<std::size_t>(b) * C * HW + i;
            Real mx = z[base];
            for (int c = 1; c < C; ++c) mx = std::max(mx, z[base + static_cast<std::size_t>(c) * HW]);
            Real s = 0;
            for (int c = 0; c < C; ++c) {
                const Real e = std::exp(z[base + static_cast<std::size_t>(c) * HW] - mx);
                (*probs)[base + static_cast<std::size_t>(c) * HW] = e;
                s += e;
            }
            for (int c = 0; c < C; ++c) (*probs)[base + static_cast<std::size_t>(c) * HW] /= s;
            const Real nll = mx + std::log(s) - z[base + static_cast<std::size_t>(y) * HW];
            total += weights[static_cast<std::size_t>(b) * HW + i] * nll;
            ++count;
        }
    const Real denom = count ? static_cast<Real>(count) : 1.0;
    Tensor out(Shape{}, total / denom);
    return make_op(std::move(out), {logits},
                   [logits, labels, weights, probs, ignore_index, B, C, HW, denom](const Tensor& g) {
                       Tensor* gz = grad_sink(logits);
                       if (!gz) return;
                       const Real go = g[0] / denom;
                       for (int b = 0; b < B; ++b)
                           for (int i = 0; i < HW; ++i) {
                               const int y = labels[static_cast<std::size_t>(b) * HW + i];
                               if (y == ignore_index) continue;
                               const Real w = weights[static_cast<std::size_t>(b) * HW + i];
                               if (w == 0) continue;
                               const std::size_t base = static_cast<std::size_t>(b) * C * HW + i;
                               for (int c = 0; c < C; ++c) {
                                   const std::size_t k = base + static_cast<std::size_t>(c) * HW;
                                   (*gz)[k] += go * w * ((*probs)[k] - (c == y ? 1.0 : 0.0));
                               }
                           }
                   });
}

Var cosine_distance(const Var& student, const Tensor& reference, Real eps) {
    require_shape(student.shape() == reference.shape(),
                  "cosine_distance: " + shape_str(student.shape()) + " vs " + shape_str(reference.shape()));
    const int D = student.dim(-1);
    const std::size_t positions = student.value().numel() / D;
    require_shape(positions > 0, "cosine_distance: empty grid");
    std::vector<Real> ns(positions), nt(positions), cosv(positions);
    Real total = 0;
    for (std::size_t p = 0; p < positions; ++p) {
        const Real* s = student.value().data() + p * D;
        const Real* t = reference.data() + p * D;
        Real ss = 0, tt = 0, st = 0;
        for (int i = 0; i < D; ++i) {
            ss += s[i] * s[i];
            tt += t[i] * t[i];
            st += s[i] * t[i];
        }
        ns[p] = std::max(std::sqrt(ss), eps);
        nt[p] = std::max(std::sqrt(tt), eps);
        // sqrt(ss * tt) keeps cos exactly +-1 for (anti)parallel inputs.
        const Real denom = (ns[p] > eps && nt[p] > eps) ? std::sqrt(ss * tt) : ns[p] * nt[p];
        cosv[p] = st / denom;
        total += 1.0 - cosv[p];
    }
    Tensor out(Shape{}, total / static_cast<Real>(positions));
    return make_op(std::move(out), {student},
                   [student, reference, ns, nt, cosv, positions, D, eps](const Tensor& g) {
                       Tensor* gs = grad_sink(student);
                       if (!gs) return;
                       const Real go = g[0] / static_cast<Real>(positions);
                       for (std::size_t p = 0; p < positions; ++p) {
                           const Real* s = student.value().data() + p * D;
                           const Real* t = reference.data() + p * D;
                           const bool clamped = ns[p] <= eps;
                           for (int i = 0; i < D; ++i) {
                               Real d = t[i] / (ns[p] * nt[p]);
                               if (!clamped) d -= cosv[p] * s[i] / (ns[p] * ns[p]);
                               (*gs)[p * D + i] -= go * d;
                           }
                       }
                   });
}

Var dot_const(const Var& x, const Tensor& w) {
    require_shape(x.shape() == w.shape(), "dot_const shape mismatch");
    Real s = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) s += x.value()[i] * w[i];
    return make_op(Tensor(Shape{}, s), {x}, [x, w](const Tensor& g) {
        if (Tensor* gx = grad_sink(x))
            for (std::size_t i = 0; i < w.numel(); ++i) (*gx)[i] += g[0] * w[i];
    });
}

Var sum_scalars(std::span<const Var> terms) {
    Real s = 0;
    std::vector<Var> inputs(terms.begin(), terms.end());
    for (const auto& t : terms) {
        require_shape(t.value().numel() == 1, "sum_scalars: non-scalar term");
        s += t.value()[0];
    }
    return make_op(Tensor(Shape{}, s), inputs, [inputs](const Tensor& g) {
        for (const auto& t : inputs)
            if (Tensor* gt = grad_sink(t)) (*gt)[0] += g[0];
    });
}

}  // namespace uda::ops
