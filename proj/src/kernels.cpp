#include "nowcast/kernels.hpp"

#include <vector>

namespace nowcast {

std::int64_t conv_output_extent(std::int64_t in, std::int64_t k, std::int64_t s,
                                const std::string& where) {
    if (k < 1 || s < 1)
        fail(ErrorCode::shape, where + ": kernel and stride must be >= 1");
    if (in < k)
        fail(ErrorCode::negative_extent,
             where + ": input extent " + std::to_string(in) + " smaller than kernel " +
                 std::to_string(k));
    return (in - k) / s + 1;
}

static void check_rank4(const Tensor& t, const char* name) {
    if (t.shape.rank != 4)
        fail(ErrorCode::shape, std::string(name) + " must be rank 4, got " + t.shape.str());
}

// Reuse the output buffer when the shape already matches (hot path in training).
static void ensure(Tensor& t, const Shape& s) {
    if (t.shape != s) t = Tensor(s);
}

void conv2d_forward(const Tensor& x, const Tensor& w, std::int64_t stride, Tensor& out) {
    check_rank4(x, "conv input");
    check_rank4(w, "conv weight");
    const std::int64_t B = x.shape.d[0], H = x.shape.d[1], W = x.shape.d[2], Ci = x.shape.d[3];
    const std::int64_t kh = w.shape.d[0], kw = w.shape.d[1], Co = w.shape.d[3];
    if (w.shape.d[2] != Ci)
        fail(ErrorCode::shape, "conv weight channel mismatch: input has " + std::to_string(Ci) +
                                   ", weight expects " + std::to_string(w.shape.d[2]));
    const std::int64_t Ho = conv_output_extent(H, kh, stride);
    const std::int64_t Wo = conv_output_extent(W, kw, stride);
    ensure(out, Shape{B, Ho, Wo, Co});

    const Scalar* __restrict__ xp = x.ptr();
    Scalar* __restrict__ op = out.ptr();

    constexpr std::int64_t kLane = sizeof(Scalar) == 8 ? 8 : 16;
    const std::int64_t Cp = (Co + kLane - 1) / kLane * kLane;
    std::vector<Scalar> wbuf;
    const Scalar* __restrict__ wp = w.ptr();
    if (Cp != Co) {
        wbuf.assign(static_cast<std::size_t>(kh * kw * Ci * Cp), 0);
        for (std::int64_t k = 0; k < kh * kw * Ci; ++k)
            for (std::int64_t co = 0; co < Co; ++co)
                wbuf[static_cast<std::size_t>(k * Cp + co)] =
                    w.data[static_cast<std::size_t>(k * Co + co)];
        wp = wbuf.data();
    }

    // Two output pixels per pass: two independent accumulator chains hide FMA
    // latency and each weight row load is reused. Per-element accumulation
    // order stays (di, dj, ci) ascending; padded lanes hold zero weights.
    std::vector<Scalar> accbuf(static_cast<std::size_t>(2 * Cp));
    Scalar* __restrict__ acc0 = accbuf.data();
    Scalar* __restrict__ acc1 = accbuf.data() + Cp;

    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < Ho; ++i) {
            std::int64_t j = 0;
            for (; j + 1 < Wo; j += 2) {
                for (std::int64_t co = 0; co < 2 * Cp; ++co) acc0[co] = 0;
                for (std::int64_t di = 0; di < kh; ++di) {
                    const Scalar* __restrict__ xrow =
                        xp + ((b * H + i * stride + di) * W + j * stride) * Ci;
                    const Scalar* __restrict__ wrow = wp + di * kw * Ci * Cp;
                    for (std::int64_t dj = 0; dj < kw; ++dj) {
                        const Scalar* __restrict__ xpix = xrow + dj * Ci;
                        const Scalar* __restrict__ wpix = wrow + dj * Ci * Cp;
                        for (std::int64_t ci = 0; ci < Ci; ++ci) {
                            const Scalar xv0 = xpix[ci];
                            const Scalar xv1 = xpix[stride * Ci + ci];
                            const Scalar* __restrict__ wv = wpix + ci * Cp;
                            for (std::int64_t co = 0; co < Cp; ++co) {
                                acc0[co] += xv0 * wv[co];
                                acc1[co] += xv1 * wv[co];
                            }
                        }
                    }
                }
                Scalar* __restrict__ orow = op + ((b * Ho + i) * Wo + j) * Co;
                for (std::int64_t co = 0; co < Co; ++co) orow[co] = acc0[co];
                for (std::int64_t co = 0; co < Co; ++co) orow[Co + co] = acc1[co];
            }
            for (; j < Wo; ++j) {
                for (std::int64_t co = 0; co < Cp; ++co) acc0[co] = 0;
                for (std::int64_t di = 0; di < kh; ++di) {
                    const Scalar* __restrict__ xrow =
                        xp + ((b * H + i * stride + di) * W + j * stride) * Ci;
                    const Scalar* __restrict__ wrow = wp + di * kw * Ci * Cp;
                    for (std::int64_t dj = 0; dj < kw; ++dj) {
                        const Scalar* __restrict__ xpix = xrow + dj * Ci;
                        const Scalar* __restrict__ wpix = wrow + dj * Ci * Cp;
                        for (std::int64_t ci = 0; ci < Ci; ++ci) {
                            const Scalar xv = xpix[ci];
                            const Scalar* __restrict__ wv = wpix + ci * Cp;
                            for (std::int64_t co = 0; co < Cp; ++co) acc0[co] += xv * wv[co];
                        }
                    }
                }
                Scalar* __restrict__ orow = op + ((b * Ho + i) * Wo + j) * Co;
                for (std::int64_t co = 0; co < Co; ++co) orow[co] = acc0[co];
            }
        }
    }
}

void conv2d_backward_input(const Tensor& w, const Tensor& gout, std::int64_t stride, Tensor& gx) {
    const std::int64_t B = gx.shape.d[0], H = gx.shape.d[1], W = gx.shape.d[2], Ci = gx.shape.d[3];
    const std::int64_t kh = w.shape.d[0], kw = w.shape.d[1], Co = w.shape.d[3];
    const std::int64_t Ho = gout.shape.d[1], Wo = gout.shape.d[2];
    const Scalar* __restrict__ gp = gout.ptr();
    Scalar* __restrict__ gxp = gx.ptr();

    // Transposed weight copy [di][dj][co][ci] makes the ci axis contiguous, so
    // the inner accumulation runs at full vector width over input channels.
    std::vector<Scalar> wt(static_cast<std::size_t>(kh * kw * Co * Ci));
    for (std::int64_t di = 0; di < kh; ++di)
        for (std::int64_t dj = 0; dj < kw; ++dj)
            for (std::int64_t ci = 0; ci < Ci; ++ci)
                for (std::int64_t co = 0; co < Co; ++co)
                    wt[static_cast<std::size_t>(((di * kw + dj) * Co + co) * Ci + ci)] =
                        w.data[static_cast<std::size_t>(((di * kw + dj) * Ci + ci) * Co + co)];
    std::vector<Scalar> accbuf(static_cast<std::size_t>(Ci));
    Scalar* __restrict__ acc = accbuf.data();

    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < Ho; ++i) {
            for (std::int64_t j = 0; j < Wo; ++j) {
                const Scalar* __restrict__ grow = gp + ((b * Ho + i) * Wo + j) * Co;
                for (std::int64_t di = 0; di < kh; ++di) {
                    Scalar* __restrict__ gxrow =
                        gxp + ((b * H + i * stride + di) * W + j * stride) * Ci;
                    const Scalar* __restrict__ wtrow = wt.data() + di * kw * Co * Ci;
                    for (std::int64_t dj = 0; dj < kw; ++dj) {
                        Scalar* __restrict__ gxpix = gxrow + dj * Ci;
                        const Scalar* __restrict__ wtpix = wtrow + dj * Co * Ci;
                        // Accumulate in registers across co; write back once.
                        for (std::int64_t ci = 0; ci < Ci; ++ci) acc[ci] = 0;
                        for (std::int64_t co = 0; co + 1 < Co; co += 2) {
                            const Scalar gv0 = grow[co];
                            const Scalar gv1 = grow[co + 1];
                            const Scalar* __restrict__ wv0 = wtpix + co * Ci;
                            const Scalar* __restrict__ wv1 = wtpix + (co + 1) * Ci;
                            for (std::int64_t ci = 0; ci < Ci; ++ci)
                                acc[ci] += gv0 * wv0[ci] + gv1 * wv1[ci];
                        }
                        if (Co % 2) {
                            const Scalar gv = grow[Co - 1];
                            const Scalar* __restrict__ wv = wtpix + (Co - 1) * Ci;
                            for (std::int64_t ci = 0; ci < Ci; ++ci) acc[ci] += gv * wv[ci];
                        }
                        for (std::int64_t ci = 0; ci < Ci; ++ci) gxpix[ci] += acc[ci];
                    }
                }
            }
        }
    }
}

void conv2d_backward_weight(const Tensor& x, const Tensor& gout, std::int64_t stride, Tensor& gw) {
    const std::int64_t B = x.shape.d[0], H = x.shape.d[1], W = x.shape.d[2], Ci = x.shape.d[3];
    const std::int64_t kh = gw.shape.d[0], kw = gw.shape.d[1], Co = gw.shape.d[3];
    const std::int64_t Ho = gout.shape.d[1], Wo = gout.shape.d[2];
    const Scalar* __restrict__ xp = x.ptr();
    const Scalar* __restrict__ gp = gout.ptr();
    Scalar* __restrict__ gwp = gw.ptr();

    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < Ho; ++i) {
            for (std::int64_t j = 0; j < Wo; ++j) {
                const Scalar* __restrict__ grow = gp + ((b * Ho + i) * Wo + j) * Co;
                for (std::int64_t di = 0; di < kh; ++di) {
                    const Scalar* __restrict__ xrow =
                        xp + ((b * H + i * stride + di) * W + j * stride) * Ci;
                    Scalar* __restrict__ gwrow = gwp + di * kw * Ci * Co;
                    for (std::int64_t dj = 0; dj < kw; ++dj) {
                        const Scalar* __restrict__ xpix = xrow + dj * Ci;
                        Scalar* __restrict__ gwpix = gwrow + dj * Ci * Co;
                        for (std::int64_t ci = 0; ci < Ci; ++ci) {
                            const Scalar xv = xpix[ci];
                            Scalar* __restrict__ gwv = gwpix + ci * Co;
                            for (std::int64_t co = 0; co < Co; ++co)
                                gwv[co] += xv * grow[co];
                        }
                    }
                }
            }
        }
    }
}

void bias_add_forward(const Tensor& x, const Tensor& bias, Tensor& out) {
    check_rank4(x, "bias input");
    const std::int64_t C = x.shape.d[3];
    if (bias.shape.rank != 1 || bias.shape.d[0] != C)
        fail(ErrorCode::shape, "bias shape " + bias.shape.str() + " does not match channels " +
                                   std::to_string(C));
    ensure(out, x.shape);
    const std::int64_t n = x.numel() / C;
    const Scalar* xp = x.ptr();
    const Scalar* bp = bias.ptr();
    Scalar* op = out.ptr();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < C; ++c) op[i * C + c] = xp[i * C + c] + bp[c];
}

void bias_add_backward(const Tensor& gout, Tensor& gx, Tensor& gbias) {
    const std::int64_t C = gout.shape.d[3];
    const std::int64_t n = gout.numel() / C;
    const Scalar* gp = gout.ptr();
    Scalar* gxp = gx.ptr();
    Scalar* gbp = gbias.ptr();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < C; ++c) {
            gxp[i * C + c] += gp[i * C + c];
            gbp[c] += gp[i * C + c];
        }
}

Tensor conv2d_valid(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride) {
    Tensor conv;
    conv2d_forward(x, w, stride, conv);
    Tensor out;
    bias_add_forward(conv, b, out);
    return out;
}

void upsample_nearest_forward(const Tensor& x, std::int64_t factor, Tensor& out) {
    check_rank4(x, "upsample input");
    const std::int64_t B = x.shape.d[0], H = x.shape.d[1], W = x.shape.d[2], C = x.shape.d[3];
    ensure(out, Shape{B, H * factor, W * factor, C});
    const Scalar* xp = x.ptr();
    Scalar* op = out.ptr();
    const std::int64_t Wo = W * factor;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < H * factor; ++i) {
            const Scalar* xrow = xp + ((b * H + i / factor) * W) * C;
            Scalar* orow = op + ((b * H * factor + i) * Wo) * C;
            for (std::int64_t j = 0; j < Wo; ++j) {
                const Scalar* src = xrow + (j / factor) * C;
                Scalar* dst = orow + j * C;
                for (std::int64_t c = 0; c < C; ++c) dst[c] = src[c];
            }
        }
}

void upsample_nearest_backward(const Tensor& gout, std::int64_t factor, Tensor& gx) {
    const std::int64_t B = gx.shape.d[0], H = gx.shape.d[1], W = gx.shape.d[2], C = gx.shape.d[3];
    const std::int64_t Wo = W * factor;
    const Scalar* gp = gout.ptr();
    Scalar* gxp = gx.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < H * factor; ++i) {
            Scalar* gxrow = gxp + ((b * H + i / factor) * W) * C;
            const Scalar* grow = gp + ((b * H * factor + i) * Wo) * C;
            for (std::int64_t j = 0; j < Wo; ++j) {
                Scalar* dst = gxrow + (j / factor) * C;
                const Scalar* src = grow + j * C;
                for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
            }
        }
}

std::int64_t crop_offset(std::int64_t in, std::int64_t target) { return (in - target) / 2; }

void center_crop_forward(const Tensor& x, std::int64_t h, std::int64_t w, Tensor& out) {
    check_rank4(x, "crop input");
    const std::int64_t B = x.shape.d[0], H = x.shape.d[1], W = x.shape.d[2], C = x.shape.d[3];
    if (h > H || w > W)
        fail(ErrorCode::shape, "crop target (" + std::to_string(h) + "," + std::to_string(w) +
                                   ") larger than input " + x.shape.str());
    const std::int64_t oy = crop_offset(H, h), ox = crop_offset(W, w);
    ensure(out, Shape{B, h, w, C});
    const Scalar* xp = x.ptr();
    Scalar* op = out.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < h; ++i) {
            const Scalar* src = xp + ((b * H + i + oy) * W + ox) * C;
            Scalar* dst = op + ((b * h + i) * w) * C;
            for (std::int64_t k = 0; k < w * C; ++k) dst[k] = src[k];
        }
}

void center_crop_backward(const Tensor& gout, Tensor& gx) {
    const std::int64_t B = gx.shape.d[0], H = gx.shape.d[1], W = gx.shape.d[2], C = gx.shape.d[3];
    const std::int64_t h = gout.shape.d[1], w = gout.shape.d[2];
    const std::int64_t oy = crop_offset(H, h), ox = crop_offset(W, w);
    const Scalar* gp = gout.ptr();
    Scalar* gxp = gx.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < h; ++i) {
            Scalar* dst = gxp + ((b * H + i + oy) * W + ox) * C;
            const Scalar* src = gp + ((b * h + i) * w) * C;
            for (std::int64_t k = 0; k < w * C; ++k) dst[k] += src[k];
        }
}

void avgpool_forward(const Tensor& x, std::int64_t factor, Tensor& out) {
    check_rank4(x, "avgpool input");
    const std::int64_t B = x.shape.d[0], H = x.shape.d[1], W = x.shape.d[2], C = x.shape.d[3];
    if (H % factor != 0 || W % factor != 0)
        fail(ErrorCode::shape, "avgpool: extents " + x.shape.str() + " not divisible by " +
                                   std::to_string(factor));
    const std::int64_t Ho = H / factor, Wo = W / factor;
    ensure(out, Shape{B, Ho, Wo, C});
    const Scalar inv = Scalar(1) / static_cast<Scalar>(factor * factor);
    const Scalar* xp = x.ptr();
    Scalar* op = out.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j) {
                Scalar* dst = op + ((b * Ho + i) * Wo + j) * C;
                for (std::int64_t c = 0; c < C; ++c) dst[c] = 0;
                for (std::int64_t di = 0; di < factor; ++di) {
                    const Scalar* src = xp + ((b * H + i * factor + di) * W + j * factor) * C;
                    for (std::int64_t dj = 0; dj < factor; ++dj)
                        for (std::int64_t c = 0; c < C; ++c) dst[c] += src[dj * C + c];
                }
                for (std::int64_t c = 0; c < C; ++c) dst[c] *= inv;
            }
}

void avgpool_backward(const Tensor& gout, std::int64_t factor, Tensor& gx) {
    const std::int64_t B = gx.shape.d[0], H = gx.shape.d[1], W = gx.shape.d[2], C = gx.shape.d[3];
    const std::int64_t Ho = H / factor, Wo = W / factor;
    const Scalar inv = Scalar(1) / static_cast<Scalar>(factor * factor);
    const Scalar* gp = gout.ptr();
    Scalar* gxp = gx.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j) {
                const Scalar* src = gp + ((b * Ho + i) * Wo + j) * C;
                for (std::int64_t di = 0; di < factor; ++di) {
                    Scalar* dst = gxp + ((b * H + i * factor + di) * W + j * factor) * C;
                    for (std::int64_t dj = 0; dj < factor; ++dj)
                        for (std::int64_t c = 0; c < C; ++c) dst[dj * C + c] += src[c] * inv;
                }
            }
}

void relu_forward(const Tensor& x, Tensor& out) {
    ensure(out, x.shape);
    const Scalar* xp = x.ptr();
    Scalar* op = out.ptr();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0 ? xp[i] : 0;
}

void relu_backward(const Tensor& x, const Tensor& gout, Tensor& gx) {
    const Scalar* xp = x.ptr();
    const Scalar* gp = gout.ptr();
    Scalar* gxp = gx.ptr();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i)
        if (xp[i] > 0) gxp[i] += gp[i];
}

Scalar mse_cropped(const Tensor& pred, const Tensor& truth, std::int64_t h, std::int64_t w) {
    check_rank4(pred, "mse pred");
    check_rank4(truth, "mse truth");
    if (pred.shape.d[0] != truth.shape.d[0] || pred.shape.d[3] != truth.shape.d[3])
        fail(ErrorCode::shape, "mse: batch/channel mismatch " + pred.shape.str() + " vs " +
                                   truth.shape.str());
    const std::int64_t B = pred.shape.d[0], C = pred.shape.d[3];
    const std::int64_t Hp = pred.shape.d[1], Wp = pred.shape.d[2];
    const std::int64_t Ht = truth.shape.d[1], Wt = truth.shape.d[2];
    if (h > Hp || w > Wp || h > Ht || w > Wt)
        fail(ErrorCode::shape, "mse: crop larger than operand");
    const std::int64_t oyp = crop_offset(Hp, h), oxp = crop_offset(Wp, w);
    const std::int64_t oyt = crop_offset(Ht, h), oxt = crop_offset(Wt, w);
    Scalar acc = 0;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < h; ++i) {
            const Scalar* pp = pred.ptr() + ((b * Hp + i + oyp) * Wp + oxp) * C;
            const Scalar* tp = truth.ptr() + ((b * Ht + i + oyt) * Wt + oxt) * C;
            for (std::int64_t k = 0; k < w * C; ++k) {
                const Scalar d = pp[k] - tp[k];
                acc += d * d;
            }
        }
    return acc / static_cast<Scalar>(B * h * w * C);
}

void mse_cropped_backward(const Tensor& pred, const Tensor& truth, std::int64_t h,
                          std::int64_t w, Scalar gout, Tensor& gpred, Tensor& gtruth) {
    const std::int64_t B = pred.shape.d[0], C = pred.shape.d[3];
    const std::int64_t Hp = pred.shape.d[1], Wp = pred.shape.d[2];
    const std::int64_t Ht = truth.shape.d[1], Wt = truth.shape.d[2];
    const std::int64_t oyp = crop_offset(Hp, h), oxp = crop_offset(Wp, w);
    const std::int64_t oyt = crop_offset(Ht, h), oxt = crop_offset(Wt, w);
    const Scalar scale = gout * Scalar(2) / static_cast<Scalar>(B * h * w * C);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < h; ++i) {
            const Scalar* pp = pred.ptr() + ((b * Hp + i + oyp) * Wp + oxp) * C;
            const Scalar* tp = truth.ptr() + ((b * Ht + i + oyt) * Wt + oxt) * C;
            Scalar* gp = gpred.ptr() + ((b * Hp + i + oyp) * Wp + oxp) * C;
            Scalar* gt = gtruth.ptr() + ((b * Ht + i + oyt) * Wt + oxt) * C;
            for (std::int64_t k = 0; k < w * C; ++k) {
                const Scalar d = scale * (pp[k] - tp[k]);
                gp[k] += d;
                gt[k] -= d;
            }
        }
}

void concat_channels_forward(const Tensor& a, const Tensor& b, Tensor& out) {
    check_rank4(a, "concat lhs");
    check_rank4(b, "concat rhs");
    if (a.shape.d[0] != b.shape.d[0] || a.shape.d[1] != b.shape.d[1] ||
        a.shape.d[2] != b.shape.d[2])
        fail(ErrorCode::shape,
             "concat: spatial mismatch " + a.shape.str() + " vs " + b.shape.str());
    const std::int64_t n = a.shape.d[0] * a.shape.d[1] * a.shape.d[2];
    const std::int64_t Ca = a.shape.d[3], Cb = b.shape.d[3];
    ensure(out, Shape{a.shape.d[0], a.shape.d[1], a.shape.d[2], Ca + Cb});
    const Scalar* ap = a.ptr();
    const Scalar* bp = b.ptr();
    Scalar* op = out.ptr();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t c = 0; c < Ca; ++c) op[i * (Ca + Cb) + c] = ap[i * Ca + c];
        for (std::int64_t c = 0; c < Cb; ++c) op[i * (Ca + Cb) + Ca + c] = bp[i * Cb + c];
    }
}

} // namespace nowcast
