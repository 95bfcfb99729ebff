#include "cdhm/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace cdhm {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a.shape_str() + " vs " + b.shape_str());
}

Var unary(Var a, Tensor out, std::function<double(double, double, double)> dfn) {
    // dfn(x, y, gy) -> contribution to gx
    int pa = a.id;
    return a.tape->record(std::move(out), {pa}, [pa, dfn](Tape& t, int self) {
        const Tensor& x = t.value(pa);
        const Tensor& y = t.value(self);
        const Tensor& gy = t.grad_ref(self);
        Tensor& gx = t.grad_ref(pa);
        for (int64_t i = 0; i < x.size(); ++i) gx[i] += dfn(x[i], y[i], gy[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    check_same_shape(a.tape->value(a), b.tape->value(b), "add");
    const Tensor& va = a.tape->value(a);
    const Tensor& vb = b.tape->value(b);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    int pa = a.id, pb = b.id;
    return a.tape->record(std::move(out), {pa, pb}, [pa, pb](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& ga = t.grad_ref(pa);
        Tensor& gb = t.grad_ref(pb);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a.tape->value(a), b.tape->value(b), "sub");
    const Tensor& va = a.tape->value(a);
    const Tensor& vb = b.tape->value(b);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i];
    int pa = a.id, pb = b.id;
    return a.tape->record(std::move(out), {pa, pb}, [pa, pb](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& ga = t.grad_ref(pa);
        Tensor& gb = t.grad_ref(pb);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a.tape->value(a), b.tape->value(b), "mul");
    const Tensor& va = a.tape->value(a);
    const Tensor& vb = b.tape->value(b);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    int pa = a.id, pb = b.id;
    return a.tape->record(std::move(out), {pa, pb}, [pa, pb](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& va = t.value(pa);
        const Tensor& vb = t.value(pb);
        Tensor& ga = t.grad_ref(pa);
        Tensor& gb = t.grad_ref(pb);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * vb[i];
            gb[i] += g[i] * va[i];
        }
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = c * va[i];
    return unary(a, std::move(out), [c](double, double, double gy) { return c * gy; });
}

Var add_scalar(Var a, double c) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = va[i] + c;
    return unary(a, std::move(out), [](double, double, double gy) { return gy; });
}

Var one_minus(Var a) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = 1.0 - va[i];
    return unary(a, std::move(out), [](double, double, double gy) { return -gy; });
}

Var relu(Var a) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = va[i] > 0.0 ? va[i] : 0.0;
    return unary(a, std::move(out),
                 [](double x, double, double gy) { return x > 0.0 ? gy : 0.0; });
}

Var leaky_relu(Var a, double slope) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i)
        out[i] = va[i] > 0.0 ? va[i] : slope * va[i];
    return unary(a, std::move(out), [slope](double x, double, double gy) {
        return x > 0.0 ? gy : slope * gy;
    });
}

Var tanh_op(Var a) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = std::tanh(va[i]);
    return unary(a, std::move(out),
                 [](double, double y, double gy) { return (1.0 - y * y) * gy; });
}

Var sigmoid(Var a) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-va[i]));
    return unary(a, std::move(out),
                 [](double, double y, double gy) { return y * (1.0 - y) * gy; });
}

Var exp_op(Var a) {
    const Tensor& va = a.tape->value(a);
    Tensor out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) out[i] = std::exp(va[i]);
    return unary(a, std::move(out),
                 [](double, double y, double gy) { return y * gy; });
}

Var reshape(Var a, std::vector<int64_t> shape) {
    Tensor out = a.tape->value(a).reshaped(std::move(shape));
    return unary(a, std::move(out), [](double, double, double gy) { return gy; });
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    Tape* tape = xs[0].tape;
    int64_t rows = tape->value(xs[0]).dim(0);
    int64_t total = 0;
    std::vector<int> parents;
    std::vector<int64_t> widths;
    for (const Var& x : xs) {
        const Tensor& v = tape->value(x);
        if (v.rank() != 2 || v.dim(0) != rows)
            throw std::invalid_argument("concat_cols: rank-2 with equal rows required");
        widths.push_back(v.dim(1));
        total += v.dim(1);
        parents.push_back(x.id);
    }
    Tensor out({rows, total});
    int64_t off = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
        const Tensor& v = tape->value(xs[k]);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < widths[k]; ++c)
                out.at2(r, off + c) = v.at2(r, c);
        off += widths[k];
    }
    return tape->record(std::move(out), parents,
                        [parents, widths, rows, total](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        int64_t off = 0;
        for (size_t k = 0; k < parents.size(); ++k) {
            Tensor& gp = t.grad_ref(parents[k]);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < widths[k]; ++c)
                    gp[r * widths[k] + c] += g[r * total + off + c];
            off += widths[k];
        }
    });
}

Var slice_cols(Var x, int64_t start, int64_t len) {
    const Tensor& v = x.tape->value(x);
    if (v.rank() != 2 || start < 0 || start + len > v.dim(1))
        throw std::invalid_argument("slice_cols: bad range");
    int64_t rows = v.dim(0), cols = v.dim(1);
    Tensor out({rows, len});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < len; ++c) out.at2(r, c) = v.at2(r, start + c);
    int px = x.id;
    return x.tape->record(std::move(out), {px},
                          [px, start, len, rows, cols](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& gx = t.grad_ref(px);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < len; ++c)
                gx[r * cols + start + c] += g[r * len + c];
    });
}

Var sum_all(Var a) {
    const Tensor& va = a.tape->value(a);
    double s = 0.0;
    for (int64_t i = 0; i < va.size(); ++i) s += va[i];
    int pa = a.id;
    return a.tape->record(Tensor::scalar(s), {pa}, [pa](Tape& t, int self) {
        double g = t.grad_ref(self)[0];
        Tensor& ga = t.grad_ref(pa);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean_all(Var a) {
    int64_t n = a.tape->value(a).size();
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var add_rows(Var a, Var b) {
    const Tensor& va = a.tape->value(a);
    const Tensor& vb = b.tape->value(b);
    if (va.rank() != 2 || vb.rank() != 1 || va.dim(1) != vb.dim(0))
        throw std::invalid_argument("add_rows: [N,D] + [D] required");
    int64_t n = va.dim(0), d = va.dim(1);
    Tensor out({n, d});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) out.at2(r, c) = va.at2(r, c) + vb[c];
    int pa = a.id, pb = b.id;
    return a.tape->record(std::move(out), {pa, pb}, [pa, pb, n, d](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& ga = t.grad_ref(pa);
        Tensor& gb = t.grad_ref(pb);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c) {
                ga[r * d + c] += g[r * d + c];
                gb[c] += g[r * d + c];
            }
    });
}

Var linear(Var x, Var w, Var b) {
    const Tensor& vx = x.tape->value(x);
    const Tensor& vw = w.tape->value(w);
    const Tensor& vb = b.tape->value(b);
    if (vx.rank() != 2 || vw.rank() != 2 || vb.rank() != 1 ||
        vx.dim(1) != vw.dim(1) || vw.dim(0) != vb.dim(0))
        throw std::invalid_argument("linear: x[N,I] w[O,I] b[O] required, got x" +
                                    vx.shape_str() + " w" + vw.shape_str());
    int64_t n = vx.dim(0), in = vx.dim(1), out_dim = vw.dim(0);
    Tensor out({n, out_dim});
    {
        CMapM X(vx.data(), n, in);
        CMapM W(vw.data(), out_dim, in);
        MapM Y(out.data(), n, out_dim);
        Y.noalias() = X * W.transpose();
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < out_dim; ++c) out.at2(r, c) += vb[c];
    }
    int px = x.id, pw = w.id, pb = b.id;
    return x.tape->record(std::move(out), {px, pw, pb},
                          [px, pw, pb, n, in, out_dim](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        CMapM G(g.data(), n, out_dim);
        CMapM X(t.value(px).data(), n, in);
        CMapM W(t.value(pw).data(), out_dim, in);
        {
            Tensor& gx = t.grad_ref(px);
            MapM GX(gx.data(), n, in);
            GX.noalias() += G * W;
        }
        {
            Tensor& gw = t.grad_ref(pw);
            MapM GW(gw.data(), out_dim, in);
            GW.noalias() += G.transpose() * X;
        }
        {
            Tensor& gb = t.grad_ref(pb);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
        }
    });
}

namespace {

struct ConvGeom {
    int64_t ci, hi, wi, co, k, stride, pad, ho, wo;
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int pad,
                   bool transposed) {
    ConvGeom g{};
    g.k = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (!transposed) {
        g.ci = x.dim(1);
        g.hi = x.dim(2);
        g.wi = x.dim(3);
        g.co = w.dim(0);
        g.ho = (g.hi + 2 * pad - g.k) / stride + 1;
        g.wo = (g.wi + 2 * pad - g.k) / stride + 1;
    } else {
        g.ci = x.dim(1);
        g.hi = x.dim(2);
        g.wi = x.dim(3);
        g.co = w.dim(1);
        g.ho = (g.hi - 1) * stride - 2 * pad + g.k;
        g.wo = (g.wi - 1) * stride - 2 * pad + g.k;
    }
    return g;
}

// im2col over geometry (big image: C x H x W; small grid: OH x OW).
void im2col(const double* img, int64_t C, int64_t H, int64_t W, int64_t K,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, double* cols) {
    for (int64_t c = 0; c < C; ++c)
        for (int64_t kh = 0; kh < K; ++kh)
            for (int64_t kw = 0; kw < K; ++kw) {
                double* row = cols + ((c * K + kh) * K + kw) * OH * OW;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    int64_t h = oh * stride - pad + kh;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        int64_t w = ow * stride - pad + kw;
                        row[oh * OW + ow] =
                            (h >= 0 && h < H && w >= 0 && w < W)
                                ? img[(c * H + h) * W + w]
                                : 0.0;
                    }
                }
            }
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im(const double* cols, int64_t C, int64_t H, int64_t W, int64_t K,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, double* img) {
    for (int64_t c = 0; c < C; ++c)
        for (int64_t kh = 0; kh < K; ++kh)
            for (int64_t kw = 0; kw < K; ++kw) {
                const double* row = cols + ((c * K + kh) * K + kw) * OH * OW;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    int64_t h = oh * stride - pad + kh;
                    if (h < 0 || h >= H) continue;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        int64_t w = ow * stride - pad + kw;
                        if (w < 0 || w >= W) continue;
                        img[(c * H + h) * W + w] += row[oh * OW + ow];
                    }
                }
            }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& vx = x.tape->value(x);
    const Tensor& vw = w.tape->value(w);
    const Tensor& vb = b.tape->value(b);
    if (vx.rank() != 4 || vw.rank() != 4 || vw.dim(1) != vx.dim(1) ||
        vb.dim(0) != vw.dim(0))
        throw std::invalid_argument("conv2d: x[N,Ci,H,W] w[Co,Ci,K,K] b[Co] required");
    ConvGeom g = conv_geom(vx, vw, stride, pad, false);
    int64_t n = vx.dim(0);
    Tensor out({n, g.co, g.ho, g.wo});
    std::vector<double> cols(static_cast<size_t>(g.ci * g.k * g.k * g.ho * g.wo));
    CMapM W(vw.data(), g.co, g.ci * g.k * g.k);
    for (int64_t i = 0; i < n; ++i) {
        im2col(vx.data() + i * g.ci * g.hi * g.wi, g.ci, g.hi, g.wi, g.k, g.stride,
               g.pad, g.ho, g.wo, cols.data());
        CMapM C(cols.data(), g.ci * g.k * g.k, g.ho * g.wo);
        MapM Y(out.data() + i * g.co * g.ho * g.wo, g.co, g.ho * g.wo);
        Y.noalias() = W * C;
        for (int64_t c = 0; c < g.co; ++c)
            for (int64_t p = 0; p < g.ho * g.wo; ++p)
                out[((i * g.co + c) * g.ho * g.wo) + p] += vb[c];
    }
    int px = x.id, pw = w.id, pb = b.id;
    return x.tape->record(std::move(out), {px, pw, pb},
                          [px, pw, pb, g, n](Tape& t, int self) {
        const Tensor& gy = t.grad_ref(self);
        const Tensor& vx = t.value(px);
        const Tensor& vw = t.value(pw);
        Tensor& gx = t.grad_ref(px);
        Tensor& gw = t.grad_ref(pw);
        Tensor& gb = t.grad_ref(pb);
        CMapM W(vw.data(), g.co, g.ci * g.k * g.k);
        MapM GW(gw.data(), g.co, g.ci * g.k * g.k);
        std::vector<double> cols(static_cast<size_t>(g.ci * g.k * g.k * g.ho * g.wo));
        std::vector<double> dcols(cols.size());
        for (int64_t i = 0; i < n; ++i) {
            CMapM GY(gy.data() + i * g.co * g.ho * g.wo, g.co, g.ho * g.wo);
            im2col(vx.data() + i * g.ci * g.hi * g.wi, g.ci, g.hi, g.wi, g.k,
                   g.stride, g.pad, g.ho, g.wo, cols.data());
            CMapM C(cols.data(), g.ci * g.k * g.k, g.ho * g.wo);
            GW.noalias() += GY * C.transpose();
            MapM DC(dcols.data(), g.ci * g.k * g.k, g.ho * g.wo);
            DC.noalias() = W.transpose() * GY;
            col2im(dcols.data(), g.ci, g.hi, g.wi, g.k, g.stride, g.pad, g.ho, g.wo,
                   gx.data() + i * g.ci * g.hi * g.wi);
            for (int64_t c = 0; c < g.co; ++c)
                for (int64_t p = 0; p < g.ho * g.wo; ++p)
                    gb[c] += gy[(i * g.co + c) * g.ho * g.wo + p];
        }
    });
}

Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& vx = x.tape->value(x);
    const Tensor& vw = w.tape->value(w);
    const Tensor& vb = b.tape->value(b);
    if (vx.rank() != 4 || vw.rank() != 4 || vw.dim(0) != vx.dim(1) ||
        vb.dim(0) != vw.dim(1))
        throw std::invalid_argument(
            "conv_transpose2d: x[N,Ci,H,W] w[Ci,Co,K,K] b[Co] required");
    ConvGeom g = conv_geom(vx, vw, stride, pad, true);
    int64_t n = vx.dim(0);
    // Output plays the "big image" role in the conv geometry; input indexes
    // the OHxOW grid. y = col2im(W2^T x), W2 = w viewed as [Ci, Co*K*K].
    Tensor out({n, g.co, g.ho, g.wo});
    std::vector<double> tmp(static_cast<size_t>(g.co * g.k * g.k * g.hi * g.wi));
    CMapM W2(vw.data(), g.ci, g.co * g.k * g.k);
    for (int64_t i = 0; i < n; ++i) {
        CMapM X(vx.data() + i * g.ci * g.hi * g.wi, g.ci, g.hi * g.wi);
        MapM T(tmp.data(), g.co * g.k * g.k, g.hi * g.wi);
        T.noalias() = W2.transpose() * X;
        col2im(tmp.data(), g.co, g.ho, g.wo, g.k, g.stride, g.pad, g.hi, g.wi,
               out.data() + i * g.co * g.ho * g.wo);
        for (int64_t c = 0; c < g.co; ++c)
            for (int64_t p = 0; p < g.ho * g.wo; ++p)
                out[(i * g.co + c) * g.ho * g.wo + p] += vb[c];
    }
    int px = x.id, pw = w.id, pb = b.id;
    return x.tape->record(std::move(out), {px, pw, pb},
                          [px, pw, pb, g, n](Tape& t, int self) {
        const Tensor& gy = t.grad_ref(self);
        const Tensor& vx = t.value(px);
        const Tensor& vw = t.value(pw);
        Tensor& gx = t.grad_ref(px);
        Tensor& gw = t.grad_ref(pw);
        Tensor& gb = t.grad_ref(pb);
        CMapM W2(vw.data(), g.ci, g.co * g.k * g.k);
        MapM GW2(gw.data(), g.ci, g.co * g.k * g.k);
        std::vector<double> dcols(static_cast<size_t>(g.co * g.k * g.k * g.hi * g.wi));
        for (int64_t i = 0; i < n; ++i) {
            im2col(gy.data() + i * g.co * g.ho * g.wo, g.co, g.ho, g.wo, g.k,
                   g.stride, g.pad, g.hi, g.wi, dcols.data());
            CMapM DC(dcols.data(), g.co * g.k * g.k, g.hi * g.wi);
            CMapM X(vx.data() + i * g.ci * g.hi * g.wi, g.ci, g.hi * g.wi);
            MapM GX(gx.data() + i * g.ci * g.hi * g.wi, g.ci, g.hi * g.wi);
            GX.noalias() += W2 * DC;
            GW2.noalias() += X * DC.transpose();
            for (int64_t c = 0; c < g.co; ++c)
                for (int64_t p = 0; p < g.ho * g.wo; ++p)
                    gb[c] += gy[(i * g.co + c) * g.ho * g.wo + p];
        }
    });
}

Var conv1d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& vx = x.tape->value(x);
    const Tensor& vw = w.tape->value(w);
    const Tensor& vb = b.tape->value(b);
    if (vx.rank() != 3 || vw.rank() != 3 || vw.dim(1) != vx.dim(1) ||
        vb.dim(0) != vw.dim(0))
        throw std::invalid_argument("conv1d: x[N,Ci,L] w[Co,Ci,K] b[Co] required");
    int64_t n = vx.dim(0), ci = vx.dim(1), li = vx.dim(2);
    int64_t co = vw.dim(0), k = vw.dim(2);
    int64_t lo = (li + 2 * pad - k) / stride + 1;
    if (lo < 1) throw std::invalid_argument("conv1d: output length < 1");
    Tensor out({n, co, lo});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < co; ++c)
            for (int64_t o = 0; o < lo; ++o) {
                double s = vb[c];
                for (int64_t cc = 0; cc < ci; ++cc)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        int64_t p = o * stride - pad + kk;
                        if (p >= 0 && p < li)
                            s += vx[(i * ci + cc) * li + p] * vw[(c * ci + cc) * k + kk];
                    }
                out[(i * co + c) * lo + o] = s;
            }
    int px = x.id, pw = w.id, pb = b.id;
    return x.tape->record(std::move(out), {px, pw, pb},
                          [px, pw, pb, n, ci, li, co, k, lo, stride, pad](Tape& t,
                                                                          int self) {
        const Tensor& gy = t.grad_ref(self);
        const Tensor& vx = t.value(px);
        const Tensor& vw = t.value(pw);
        Tensor& gx = t.grad_ref(px);
        Tensor& gw = t.grad_ref(pw);
        Tensor& gb = t.grad_ref(pb);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < co; ++c)
                for (int64_t o = 0; o < lo; ++o) {
                    double g = gy[(i * co + c) * lo + o];
                    gb[c] += g;
                    for (int64_t cc = 0; cc < ci; ++cc)
                        for (int64_t kk = 0; kk < k; ++kk) {
                            int64_t p = o * stride - pad + kk;
                            if (p < 0 || p >= li) continue;
                            gx[(i * ci + cc) * li + p] += g * vw[(c * ci + cc) * k + kk];
                            gw[(c * ci + cc) * k + kk] += g * vx[(i * ci + cc) * li + p];
                        }
                }
    });
}

Var batch_norm2d(Var x, Var gamma, Var beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps) {
    const Tensor& vx = x.tape->value(x);
    if (vx.rank() != 4) throw std::invalid_argument("batch_norm2d: x[N,C,H,W]");
    int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
    const Tensor& vg = gamma.tape->value(gamma);
    const Tensor& vb = beta.tape->value(beta);
    if (vg.dim(0) != c || vb.dim(0) != c)
        throw std::invalid_argument("batch_norm2d: gamma/beta dim mismatch");
    int64_t m = n * h * w;

    Tensor mean({c}), var({c});
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t p = 0; p < h * w; ++p)
                    s += vx[(i * c + ch) * h * w + p];
            mean[ch] = s / static_cast<double>(m);
            double v = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t p = 0; p < h * w; ++p) {
                    double d = vx[(i * c + ch) * h * w + p] - mean[ch];
                    v += d * d;
                }
            var[ch] = v / static_cast<double>(m);  // biased, used for normalization
        }
        for (int64_t ch = 0; ch < c; ++ch) {
            double unbiased = m > 1 ? var[ch] * static_cast<double>(m) /
                                          static_cast<double>(m - 1)
                                    : var[ch];
            running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
            running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor out(vx.shape());
    Tensor xhat(vx.shape());
    std::vector<double> istd(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch) istd[static_cast<size_t>(ch)] = 1.0 / std::sqrt(var[ch] + eps);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t p = 0; p < h * w; ++p) {
                int64_t idx = (i * c + ch) * h * w + p;
                xhat[idx] = (vx[idx] - mean[ch]) * istd[static_cast<size_t>(ch)];
                out[idx] = vg[ch] * xhat[idx] + vb[ch];
            }

    int px = x.id, pg = gamma.id, pb = beta.id;
    // Capture what backward needs by value; xhat/istd are not tape nodes.
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto istd_p = std::make_shared<std::vector<double>>(std::move(istd));
    return x.tape->record(std::move(out), {px, pg, pb},
                          [px, pg, pb, n, c, h, w, m, training, xhat_p,
                           istd_p](Tape& t, int self) {
        const Tensor& gy = t.grad_ref(self);
        const Tensor& vg = t.value(pg);
        Tensor& gx = t.grad_ref(px);
        Tensor& gg = t.grad_ref(pg);
        Tensor& gb = t.grad_ref(pb);
        const Tensor& xh = *xhat_p;
        const std::vector<double>& istd = *istd_p;
        for (int64_t ch = 0; ch < c; ++ch) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t p = 0; p < h * w; ++p) {
                    int64_t idx = (i * c + ch) * h * w + p;
                    sum_gy += gy[idx];
                    sum_gy_xhat += gy[idx] * xh[idx];
                }
            gb[ch] += sum_gy;
            gg[ch] += sum_gy_xhat;
            double g = vg[ch] * istd[static_cast<size_t>(ch)];
            if (training) {
                double inv_m = 1.0 / static_cast<double>(m);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t p = 0; p < h * w; ++p) {
                        int64_t idx = (i * c + ch) * h * w + p;
                        gx[idx] += g * (gy[idx] - inv_m * sum_gy -
                                        inv_m * xh[idx] * sum_gy_xhat);
                    }
            } else {
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t p = 0; p < h * w; ++p) {
                        int64_t idx = (i * c + ch) * h * w + p;
                        gx[idx] += g * gy[idx];
                    }
            }
        }
    });
}

Var global_avg_pool2d(Var x) {
    const Tensor& vx = x.tape->value(x);
    if (vx.rank() != 4) throw std::invalid_argument("global_avg_pool2d: x[N,C,H,W]");
    int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
    Tensor out({n, c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t p = 0; p < hw; ++p) s += vx[(i * c + ch) * hw + p];
            out.at2(i, ch) = s / static_cast<double>(hw);
        }
    int px = x.id;
    return x.tape->record(std::move(out), {px}, [px, n, c, hw](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& gx = t.grad_ref(px);
        double inv = 1.0 / static_cast<double>(hw);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t p = 0; p < hw; ++p)
                    gx[(i * c + ch) * hw + p] += g[i * c + ch] * inv;
    });
}

Var global_avg_pool1d(Var x) {
    const Tensor& vx = x.tape->value(x);
    if (vx.rank() != 3) throw std::invalid_argument("global_avg_pool1d: x[N,C,L]");
    Var x4 = reshape(x, {vx.dim(0), vx.dim(1), 1, vx.dim(2)});
    return global_avg_pool2d(x4);
}

Var softmax_rows(Var x) {
    const Tensor& vx = x.tape->value(x);
    if (vx.rank() != 2) throw std::invalid_argument("softmax_rows: x[N,C]");
    int64_t n = vx.dim(0), c = vx.dim(1);
    Tensor out({n, c});
    for (int64_t i = 0; i < n; ++i) {
        double mx = vx.at2(i, 0);
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, vx.at2(i, j));
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            out.at2(i, j) = std::exp(vx.at2(i, j) - mx);
            s += out.at2(i, j);
        }
        for (int64_t j = 0; j < c; ++j) out.at2(i, j) /= s;
    }
    int px = x.id;
    return x.tape->record(std::move(out), {px}, [px, n, c](Tape& t, int self) {
        const Tensor& y = t.value(self);
        const Tensor& gy = t.grad_ref(self);
        Tensor& gx = t.grad_ref(px);
        for (int64_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += gy[i * c + j] * y[i * c + j];
            for (int64_t j = 0; j < c; ++j)
                gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot);
        }
    });
}

Var reparameterize_op(Var mean, Var logvar, const Tensor& noise) {
    const Tensor& vm = mean.tape->value(mean);
    const Tensor& vl = logvar.tape->value(logvar);
    check_same_shape(vm, vl, "reparameterize");
    check_same_shape(vm, noise, "reparameterize(noise)");
    Tensor out(vm.shape());
    for (int64_t i = 0; i < vm.size(); ++i)
        out[i] = vm[i] + std::exp(0.5 * vl[i]) * noise[i];
    int pm = mean.id, pl = logvar.id;
    auto nz = std::make_shared<Tensor>(noise);
    return mean.tape->record(std::move(out), {pm, pl},
                             [pm, pl, nz](Tape& t, int self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& vl = t.value(pl);
        Tensor& gm = t.grad_ref(pm);
        Tensor& gl = t.grad_ref(pl);
        for (int64_t i = 0; i < g.size(); ++i) {
            gm[i] += g[i];
            gl[i] += g[i] * 0.5 * std::exp(0.5 * vl[i]) * (*nz)[i];
        }
    });
}

Var kl_diag_mean(Var mq, Var lq, Var mp, Var lp) {
    const Tensor& vmq = mq.tape->value(mq);
    const Tensor& vlq = lq.tape->value(lq);
    const Tensor& vmp = mp.tape->value(mp);
    const Tensor& vlp = lp.tape->value(lp);
    check_same_shape(vmq, vlq, "kl_diag");
    check_same_shape(vmq, vmp, "kl_diag");
    check_same_shape(vmq, vlp, "kl_diag");
    if (vmq.rank() != 2) throw std::invalid_argument("kl_diag_mean: [N,D] required");
    int64_t n = vmq.dim(0);
    double total = 0.0;
    for (int64_t i = 0; i < vmq.size(); ++i) {
        double dm = vmq[i] - vmp[i];
        total += 0.5 * (vlp[i] - vlq[i] +
                        (std::exp(vlq[i]) + dm * dm) / std::exp(vlp[i]) - 1.0);
    }
    total /= static_cast<double>(n);
    int a = mq.id, b = lq.id, c = mp.id, d = lp.id;
    return mq.tape->record(Tensor::scalar(total), {a, b, c, d},
                           [a, b, c, d, n](Tape& t, int self) {
        double g = t.grad_ref(self)[0] / static_cast<double>(n);
        const Tensor& vmq = t.value(a);
        const Tensor& vlq = t.value(b);
        const Tensor& vmp = t.value(c);
        const Tensor& vlp = t.value(d);
        Tensor& gmq = t.grad_ref(a);
        Tensor& glq = t.grad_ref(b);
        Tensor& gmp = t.grad_ref(c);
        Tensor& glp = t.grad_ref(d);
        for (int64_t i = 0; i < vmq.size(); ++i) {
            double elp = std::exp(vlp[i]);
            double dm = vmq[i] - vmp[i];
            gmq[i] += g * dm / elp;
            gmp[i] -= g * dm / elp;
            glq[i] += g * 0.5 * (std::exp(vlq[i]) / elp - 1.0);
            glp[i] += g * 0.5 * (1.0 - (std::exp(vlq[i]) + dm * dm) / elp);
        }
    });
}

Var half_mse(Var pred, Var target) {
    const Tensor& vp = pred.tape->value(pred);
    const Tensor& vt = target.tape->value(target);
    check_same_shape(vp, vt, "half_mse");
    double s = 0.0;
    for (int64_t i = 0; i < vp.size(); ++i) {
        double d = vp[i] - vt[i];
        s += d * d;
    }
    double val = 0.5 * s / static_cast<double>(vp.size());
    int pp = pred.id, pt = target.id;
    return pred.tape->record(Tensor::scalar(val), {pp, pt},
                             [pp, pt](Tape& t, int self) {
        double g = t.grad_ref(self)[0];
        const Tensor& vp = t.value(pp);
        const Tensor& vt = t.value(pt);
        Tensor& gp = t.grad_ref(pp);
        Tensor& gt = t.grad_ref(pt);
        double inv = 1.0 / static_cast<double>(vp.size());
        for (int64_t i = 0; i < vp.size(); ++i) {
            double d = (vp[i] - vt[i]) * inv;
            gp[i] += g * d;
            gt[i] -= g * d;
        }
    });
}

Var mmd_rbf(Var xs, Var xt, const std::vector<double>& bandwidths) {
    const Tensor& vs = xs.tape->value(xs);
    const Tensor& vt = xt.tape->value(xt);
    if (vs.rank() != 2 || vt.rank() != 2 || vs.dim(1) != vt.dim(1))
        throw std::invalid_argument("mmd_rbf: row sets with equal dim required");
    if (vs.dim(0) < 1 || vt.dim(0) < 1)
        throw std::invalid_argument("mmd_rbf: empty set");
    if (bandwidths.empty())
        throw std::invalid_argument("mmd_rbf: at least one bandwidth");
    for (double bw : bandwidths)
        if (!(bw > 0.0)) throw std::invalid_argument("mmd_rbf: bandwidths must be > 0");
    int64_t ns = vs.dim(0), nt = vt.dim(0), d = vs.dim(1);

    auto sqdist = [d](const double* a, const double* b) {
        double s = 0.0;
        for (int64_t k = 0; k < d; ++k) {
            double diff = a[k] - b[k];
            s += diff * diff;
        }
        return s;
    };

    double total = 0.0;
    for (double bw : bandwidths) {
        double inv2s2 = 1.0 / (2.0 * bw * bw);
        double kss = 0.0, ktt = 0.0, kst = 0.0;
        for (int64_t i = 0; i < ns; ++i)
            for (int64_t j = 0; j < ns; ++j)
                kss += std::exp(-sqdist(vs.data() + i * d, vs.data() + j * d) * inv2s2);
        for (int64_t i = 0; i < nt; ++i)
            for (int64_t j = 0; j < nt; ++j)
                ktt += std::exp(-sqdist(vt.data() + i * d, vt.data() + j * d) * inv2s2);
        for (int64_t i = 0; i < ns; ++i)
            for (int64_t j = 0; j < nt; ++j)
                kst += std::exp(-sqdist(vs.data() + i * d, vt.data() + j * d) * inv2s2);
        total += kss / static_cast<double>(ns * ns) +
                 ktt / static_cast<double>(nt * nt) -
                 2.0 * kst / static_cast<double>(ns * nt);
    }

    int ps = xs.id, pt = xt.id;
    auto bws = std::make_shared<std::vector<double>>(bandwidths);
    return xs.tape->record(Tensor::scalar(total), {ps, pt},
                           [ps, pt, ns, nt, d, bws](Tape& t, int self) {
        double g = t.grad_ref(self)[0];
        const Tensor& vs = t.value(ps);
        const Tensor& vt = t.value(pt);
        Tensor& gs = t.grad_ref(ps);
        Tensor& gt = t.grad_ref(pt);
        for (double bw : *bws) {
            double inv2s2 = 1.0 / (2.0 * bw * bw);
            double invs2 = 1.0 / (bw * bw);
            // d k(a,b)/d a = k(a,b) * (b - a) / bw^2. Each unordered within-set
            // pair appears as (i,j) and (j,i), hence the factor 2; diagonal
            // terms have zero gradient.
            double cs = g * 2.0 / static_cast<double>(ns * ns);
            double ct = g * 2.0 / static_cast<double>(nt * nt);
            double cst = g * 2.0 / static_cast<double>(ns * nt);
            for (int64_t i = 0; i < ns; ++i)
                for (int64_t j = 0; j < ns; ++j) {
                    if (i == j) continue;
                    double sq = 0.0;
                    for (int64_t k = 0; k < d; ++k) {
                        double diff = vs[i * d + k] - vs[j * d + k];
                        sq += diff * diff;
                    }
                    double kv = std::exp(-sq * inv2s2) * invs2;
                    for (int64_t k = 0; k < d; ++k)
                        gs[i * d + k] += cs * kv * (vs[j * d + k] - vs[i * d + k]);
                }
            for (int64_t i = 0; i < nt; ++i)
                for (int64_t j = 0; j < nt; ++j) {
                    if (i == j) continue;
                    double sq = 0.0;
                    for (int64_t k = 0; k < d; ++k) {
                        double diff = vt[i * d + k] - vt[j * d + k];
                        sq += diff * diff;
                    }
                    double kv = std::exp(-sq * inv2s2) * invs2;
                    for (int64_t k = 0; k < d; ++k)
                        gt[i * d + k] += ct * kv * (vt[j * d + k] - vt[i * d + k]);
                }
            for (int64_t i = 0; i < ns; ++i)
                for (int64_t j = 0; j < nt; ++j) {
                    double sq = 0.0;
                    for (int64_t k = 0; k < d; ++k) {
                        double diff = vs[i * d + k] - vt[j * d + k];
                        sq += diff * diff;
                    }
                    double kv = std::exp(-sq * inv2s2) * invs2;
                    for (int64_t k = 0; k < d; ++k) {
                        gs[i * d + k] -= cst * kv * (vt[j * d + k] - vs[i * d + k]);
                        gt[j * d + k] -= cst * kv * (vs[i * d + k] - vt[j * d + k]);
                    }
                }
        }
    });
}

Var nll_onehot(Var probs, const std::vector<int>& labels, long* clamp_events) {
    const Tensor& vp = probs.tape->value(probs);
    if (vp.rank() != 2) throw std::invalid_argument("nll_onehot: probs[N,C]");
    int64_t n = vp.dim(0), c = vp.dim(1);
    if (static_cast<int64_t>(labels.size()) != n)
        throw std::invalid_argument("nll_onehot: label count mismatch");
    constexpr double kEps = 1e-12;
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= c) throw std::invalid_argument("nll_onehot: label out of range");
        double p = vp.at2(i, y);
        if (p < kEps) {
            p = kEps;
            if (clamp_events) ++(*clamp_events);
        }
        total -= std::log(p);
    }
    total /= static_cast<double>(n);
    int pp = probs.id;
    auto labs = std::make_shared<std::vector<int>>(labels);
    return probs.tape->record(Tensor::scalar(total), {pp},
                              [pp, n, c, labs](Tape& t, int self) {
        double g = t.grad_ref(self)[0] / static_cast<double>(n);
        const Tensor& vp = t.value(pp);
        Tensor& gp = t.grad_ref(pp);
        for (int64_t i = 0; i < n; ++i) {
            int y = (*labs)[static_cast<size_t>(i)];
            double p = vp[i * c + y];
            if (p >= 1e-12) gp[i * c + y] -= g / p;
        }
    });
}

}  // namespace cdhm
