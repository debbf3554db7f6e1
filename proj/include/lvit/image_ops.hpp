#pragma once

#include "lvit/tensor.hpp"

namespace lvit {

enum class PadMode { Zero, Circular };

namespace detail {

template <typename Real>
void pad2d(const Real* x, Real* xp, int c, int h, int w, int pad, PadMode mode) {
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    for (int ch = 0; ch < c; ++ch) {
        const Real* src = x + static_cast<size_t>(ch) * h * w;
        Real* dst = xp + static_cast<size_t>(ch) * hp * wp;
        for (int y = 0; y < hp; ++y)
            for (int xx = 0; xx < wp; ++xx) {
                const int sy = y - pad, sx = xx - pad;
                if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                    dst[y * wp + xx] = src[sy * w + sx];
                } else if (mode == PadMode::Circular) {
                    const int cy = ((sy % h) + h) % h;
                    const int cx = ((sx % w) + w) % w;
                    dst[y * wp + xx] = src[cy * w + cx];
                } else {
                    dst[y * wp + xx] = Real(0);
                }
            }
    }
}

// Scatter padded-grid gradients back; circular positions accumulate into
// their wrapped sources.
template <typename Real>
void unpad2d_acc(const Real* gp, Real* gx, int c, int h, int w, int pad, PadMode mode) {
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    for (int ch = 0; ch < c; ++ch) {
        const Real* src = gp + static_cast<size_t>(ch) * hp * wp;
        Real* dst = gx + static_cast<size_t>(ch) * h * w;
        for (int y = 0; y < hp; ++y)
            for (int xx = 0; xx < wp; ++xx) {
                const int sy = y - pad, sx = xx - pad;
                if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                    dst[sy * w + sx] += src[y * wp + xx];
                } else if (mode == PadMode::Circular) {
                    const int cy = ((sy % h) + h) % h;
                    const int cx = ((sx % w) + w) % w;
                    dst[cy * w + cx] += src[y * wp + xx];
                }
            }
    }
}

// col(C*S*S, Ho*Wo) from a padded image (C,Hp,Wp).
template <typename Real>
void im2col(const Real* xp, Real* col, int c, int hp, int wp, int s, int stride, int ho, int wo) {
    const int hw = ho * wo;
    for (int ch = 0; ch < c; ++ch)
        for (int ki = 0; ki < s; ++ki)
            for (int kj = 0; kj < s; ++kj) {
                Real* row = col + static_cast<size_t>((ch * s + ki) * s + kj) * hw;
                const Real* base = xp + static_cast<size_t>(ch) * hp * wp;
                for (int oy = 0; oy < ho; ++oy) {
                    const Real* line = base + (oy * stride + ki) * wp + kj;
                    Real* out = row + oy * wo;
                    for (int ox = 0; ox < wo; ++ox) out[ox] = line[ox * stride];
                }
            }
}

template <typename Real>
void col2im_acc(const Real* col, Real* xp, int c, int hp, int wp, int s, int stride, int ho, int wo) {
    const int hw = ho * wo;
    for (int ch = 0; ch < c; ++ch)
        for (int ki = 0; ki < s; ++ki)
            for (int kj = 0; kj < s; ++kj) {
                const Real* row = col + static_cast<size_t>((ch * s + ki) * s + kj) * hw;
                Real* base = xp + static_cast<size_t>(ch) * hp * wp;
                for (int oy = 0; oy < ho; ++oy) {
                    Real* line = base + (oy * stride + ki) * wp + kj;
                    const Real* in = row + oy * wo;
                    for (int ox = 0; ox < wo; ++ox) line[ox * stride] += in[ox];
                }
            }
}

}  // namespace detail

// 2-D convolution: x (N,C,H,W), kernel (K,C,S,S) -> (N,K,H',W') with
// H' = (H + 2*pad - S)/stride + 1. Implemented as im2col + GEMM; the column
// matrix is rebuilt in the backward pass instead of being saved.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& kernel, int stride = 1, int pad = 0,
                    PadMode mode = PadMode::Zero) {
    if (x.rank() != 4 || kernel.rank() != 4)
        throw std::invalid_argument("conv2d: expected (N,C,H,W) and (K,C,S,S), got " + shape_str(x.shape()) +
                                    " and " + shape_str(kernel.shape()));
    if (stride <= 0) throw std::invalid_argument("conv2d: stride must be positive");
    if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int k = kernel.dim(0), kc = kernel.dim(1), s = kernel.dim(2);
    if (kernel.dim(3) != s) throw std::invalid_argument("conv2d: kernel must be square");
    if (kc != c)
        throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs kernel " +
                                    shape_str(kernel.shape()));
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    if (s > hp || s > wp)
        throw std::invalid_argument("conv2d: kernel size " + std::to_string(s) + " exceeds padded input " +
                                    std::to_string(hp) + "x" + std::to_string(wp));
    const int ho = (hp - s) / stride + 1;
    const int wo = (wp - s) / stride + 1;
    const int css = c * s * s, hw = ho * wo;

    Tensor<Real> out(Shape{n, k, ho, wo});
    {
        std::vector<Real> xp(static_cast<size_t>(c) * hp * wp);
        std::vector<Real> col(static_cast<size_t>(css) * hw);
        for (int b = 0; b < n; ++b) {
            const Real* xb = x.data() + static_cast<size_t>(b) * c * h * w;
            const Real* src = xb;
            if (pad > 0) {
                detail::pad2d(xb, xp.data(), c, h, w, pad, mode);
                src = xp.data();
            }
            detail::im2col(src, col.data(), c, hp, wp, s, stride, ho, wo);
            detail::gemm_nn(kernel.data(), col.data(), out.data() + static_cast<size_t>(b) * k * hw, k, css, hw,
                            false);
        }
    }

    if (detail::recording<Real>({&x, &kernel})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, wc = kernel, oc = out;
        Tape<Real>::active()->record([xc, wc, oc, n, c, h, w, k, s, stride, pad, mode, hp, wp, ho, wo, css,
                                      hw]() mutable {
            if (!oc.has_grad()) return;
            const Real* g = oc.grad_buffer().data();
            std::vector<Real> xp(static_cast<size_t>(c) * hp * wp);
            std::vector<Real> col(static_cast<size_t>(css) * hw);
            for (int b = 0; b < n; ++b) {
                const Real* gb = g + static_cast<size_t>(b) * k * hw;
                if (wc.requires_grad()) {
                    const Real* xb = xc.data() + static_cast<size_t>(b) * c * h * w;
                    const Real* src = xb;
                    if (pad > 0) {
                        detail::pad2d(xb, xp.data(), c, h, w, pad, mode);
                        src = xp.data();
                    }
                    detail::im2col(src, col.data(), c, hp, wp, s, stride, ho, wo);
                    // dW = dY * col^T
                    detail::gemm_nt(gb, col.data(), wc.grad_buffer().data(), k, hw, css, true);
                }
                if (xc.requires_grad()) {
                    // dcol = W^T * dY, then scatter back through the padding
                    detail::gemm_tn(wc.data(), gb, col.data(), css, k, hw, false);
                    std::fill(xp.begin(), xp.end(), Real(0));
                    detail::col2im_acc(col.data(), xp.data(), c, hp, wp, s, stride, ho, wo);
                    detail::unpad2d_acc(xp.data(), xc.grad_buffer().data() + static_cast<size_t>(b) * c * h * w,
                                        c, h, w, pad, mode);
                }
            }
        });
    }
    return out;
}

// Non-overlapping max pooling; gradient routes to the first maximum in
// row-major order within each window.
template <typename Real>
Tensor<Real> maxpool2d(const Tensor<Real>& x, int window) {
    if (x.rank() != 4) throw std::invalid_argument("maxpool2d: expected (N,C,H,W), got " + shape_str(x.shape()));
    if (window <= 0) throw std::invalid_argument("maxpool2d: window must be positive");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % window != 0 || w % window != 0)
        throw std::invalid_argument("maxpool2d: extents " + std::to_string(h) + "x" + std::to_string(w) +
                                    " not divisible by window " + std::to_string(window));
    const int ho = h / window, wo = w / window;
    Tensor<Real> out(Shape{n, c, ho, wo});
    std::vector<std::int64_t> argmax(static_cast<size_t>(out.size()));
    const Real* px = x.data();
    Real* po = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const Real* plane = px + (static_cast<size_t>(b) * c + ch) * h * w;
            const std::int64_t plane_off = (static_cast<size_t>(b) * c + ch) * h * w;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, ++oi) {
                    Real best = plane[(oy * window) * w + ox * window];
                    Real second = -std::numeric_limits<Real>::infinity();
                    std::int64_t besti = (oy * window) * w + ox * window;
                    for (int ky = 0; ky < window; ++ky)
                        for (int kx = 0; kx < window; ++kx) {
                            const std::int64_t idx = (oy * window + ky) * w + ox * window + kx;
                            if (plane[idx] > best) {  // strict: ties keep the first
                                second = best;
                                best = plane[idx];
                                besti = idx;
                            } else if (idx != besti && plane[idx] > second) {
                                second = plane[idx];
                            }
                        }
                    po[oi] = best;
                    argmax[static_cast<size_t>(oi)] = plane_off + besti;
                    if (KinkMargin::active() && std::isfinite(static_cast<double>(second)) && best != second) {
                        const double scale =
                            std::max(std::abs(static_cast<double>(best)), std::abs(static_cast<double>(second)));
                        KinkMargin::active()->feed(static_cast<double>(best) - static_cast<double>(second), scale);
                    }
                }
        }

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, argmax]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (size_t i = 0; i < argmax.size(); ++i) gx[static_cast<size_t>(argmax[i])] += g[i];
        });
    }
    return out;
}

// Non-overlapping average pooling.
template <typename Real>
Tensor<Real> avgpool2d(const Tensor<Real>& x, int window) {
    if (x.rank() != 4) throw std::invalid_argument("avgpool2d: expected (N,C,H,W), got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % window != 0 || w % window != 0)
        throw std::invalid_argument("avgpool2d: extents not divisible by window");
    const int ho = h / window, wo = w / window;
    const Real inv = Real(1) / static_cast<Real>(window * window);
    Tensor<Real> out(Shape{n, c, ho, wo});
    const Real* px = x.data();
    Real* po = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const Real* plane = px + (static_cast<size_t>(b) * c + ch) * h * w;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, ++oi) {
                    Real acc = 0;
                    for (int ky = 0; ky < window; ++ky)
                        for (int kx = 0; kx < window; ++kx)
                            acc += plane[(oy * window + ky) * w + ox * window + kx];
                    po[oi] = acc * inv;
                }
        }

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, n, c, h, w, ho, wo, window, inv]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            std::int64_t oi2 = 0;
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch) {
                    Real* plane = gx.data() + (static_cast<size_t>(b) * c + ch) * h * w;
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox, ++oi2) {
                            const Real gi = g[static_cast<size_t>(oi2)] * inv;
                            for (int ky = 0; ky < window; ++ky)
                                for (int kx = 0; kx < window; ++kx)
                                    plane[(oy * window + ky) * w + ox * window + kx] += gi;
                        }
                }
        });
    }
    return out;
}

// Bilinear upsampling by an integer factor, align-corners-false convention.
// Factor 1 is the identity; constants stay constant.
template <typename Real>
Tensor<Real> upsample_bilinear(const Tensor<Real>& x, int factor) {
    if (x.rank() != 4) throw std::invalid_argument("upsample_bilinear: expected (N,C,H,W)");
    if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h * factor, wo = w * factor;

    auto make_map = [factor](int src_len, int dst_len, std::vector<int>& lo, std::vector<int>& hi,
                             std::vector<Real>& wt) {
        lo.resize(static_cast<size_t>(dst_len));
        hi.resize(static_cast<size_t>(dst_len));
        wt.resize(static_cast<size_t>(dst_len));
        for (int i = 0; i < dst_len; ++i) {
            double s = (i + 0.5) / factor - 0.5;
            s = std::min(std::max(s, 0.0), static_cast<double>(src_len - 1));
            const int l = static_cast<int>(std::floor(s));
            lo[static_cast<size_t>(i)] = l;
            hi[static_cast<size_t>(i)] = std::min(l + 1, src_len - 1);
            wt[static_cast<size_t>(i)] = static_cast<Real>(s - l);
        }
    };
    std::vector<int> ylo, yhi, xlo, xhi;
    std::vector<Real> ywt, xwt;
    make_map(h, ho, ylo, yhi, ywt);
    make_map(w, wo, xlo, xhi, xwt);

    Tensor<Real> out(Shape{n, c, ho, wo});
    const Real* px = x.data();
    Real* po = out.data();
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const Real* plane = px + (static_cast<size_t>(b) * c + ch) * h * w;
            Real* oplane = po + (static_cast<size_t>(b) * c + ch) * ho * wo;
            for (int oy = 0; oy < ho; ++oy) {
                const int y0 = ylo[static_cast<size_t>(oy)], y1 = yhi[static_cast<size_t>(oy)];
                const Real fy = ywt[static_cast<size_t>(oy)];
                for (int ox = 0; ox < wo; ++ox) {
                    const int x0 = xlo[static_cast<size_t>(ox)], x1 = xhi[static_cast<size_t>(ox)];
                    const Real fx = xwt[static_cast<size_t>(ox)];
                    const Real top = (Real(1) - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                    const Real bot = (Real(1) - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                    oplane[oy * wo + ox] = (Real(1) - fy) * top + fy * bot;
                }
            }
        }

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, n, c, h, w, ho, wo, ylo, yhi, ywt, xlo, xhi, xwt]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch) {
                    const Real* gplane = g.data() + (static_cast<size_t>(b) * c + ch) * ho * wo;
                    Real* xplane = gx.data() + (static_cast<size_t>(b) * c + ch) * h * w;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int y0 = ylo[static_cast<size_t>(oy)], y1 = yhi[static_cast<size_t>(oy)];
                        const Real fy = ywt[static_cast<size_t>(oy)];
                        for (int ox = 0; ox < wo; ++ox) {
                            const int x0 = xlo[static_cast<size_t>(ox)], x1 = xhi[static_cast<size_t>(ox)];
                            const Real fx = xwt[static_cast<size_t>(ox)];
                            const Real gi = gplane[oy * wo + ox];
                            xplane[y0 * w + x0] += (Real(1) - fy) * (Real(1) - fx) * gi;
                            xplane[y0 * w + x1] += (Real(1) - fy) * fx * gi;
                            xplane[y1 * w + x0] += fy * (Real(1) - fx) * gi;
                            xplane[y1 * w + x1] += fy * fx * gi;
                        }
                    }
                }
        });
    }
    return out;
}

// Nearest-neighbour upsampling by an integer factor.
template <typename Real>
Tensor<Real> upsample_nearest(const Tensor<Real>& x, int factor) {
    if (x.rank() != 4) throw std::invalid_argument("upsample_nearest: expected (N,C,H,W)");
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h * factor, wo = w * factor;
    Tensor<Real> out(Shape{n, c, ho, wo});
    const Real* px = x.data();
    Real* po = out.data();
    for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(n) * c; ++plane) {
        const Real* sp = px + plane * h * w;
        Real* dp = po + plane * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) dp[oy * wo + ox] = sp[(oy / factor) * w + ox / factor];
    }
    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, n, c, h, w, ho, wo, factor]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(n) * c; ++plane) {
                const Real* gp = g.data() + plane * ho * wo;
                Real* xp = gx.data() + plane * h * w;
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) xp[(oy / factor) * w + ox / factor] += gp[oy * wo + ox];
            }
        });
    }
    return out;
}

}  // namespace lvit
