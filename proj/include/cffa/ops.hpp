#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cffa/tensor.hpp"

namespace cffa {

constexpr double kProbClamp = 1e-7;

inline double clamp_prob(double p) {
    return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    check_shape(a->shape == b->shape, "add: operand shapes differ");
    auto out = make_tensor(a->shape);
    return g.record({a, b}, out,
        [a, b, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] + b->data[i];
        },
        [a, b, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                if (a->requires_grad) a->grad[i] += out->grad[i];
                if (b->requires_grad) b->grad[i] += out->grad[i];
            }
        });
}

inline TensorPtr sub(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    check_shape(a->shape == b->shape, "sub: operand shapes differ");
    auto out = make_tensor(a->shape);
    return g.record({a, b}, out,
        [a, b, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] - b->data[i];
        },
        [a, b, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                if (a->requires_grad) a->grad[i] += out->grad[i];
                if (b->requires_grad) b->grad[i] -= out->grad[i];
            }
        });
}

inline TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    check_shape(a->shape == b->shape, "mul: operand shapes differ");
    auto out = make_tensor(a->shape);
    return g.record({a, b}, out,
        [a, b, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] * b->data[i];
        },
        [a, b, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                if (a->requires_grad) a->grad[i] += out->grad[i] * b->data[i];
                if (b->requires_grad) b->grad[i] += out->grad[i] * a->data[i];
            }
        });
}

inline TensorPtr scale(Graph& g, const TensorPtr& a, double c) {
    auto out = make_tensor(a->shape);
    return g.record({a}, out,
        [a, out, c] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] * c;
        },
        [a, out, c] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i)
                a->grad[i] += out->grad[i] * c;
        });
}

/// Elementwise multiply by a fixed weight table (no gradient into weights).
inline TensorPtr weight_by(Graph& g, const TensorPtr& a, std::vector<double> w) {
    check_shape(a->numel() == w.size(), "weight_by: weight count mismatch");
    auto out = make_tensor(a->shape);
    auto wp = std::make_shared<std::vector<double>>(std::move(w));
    return g.record({a}, out,
        [a, out, wp] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] * (*wp)[i];
        },
        [a, out, wp] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i)
                a->grad[i] += out->grad[i] * (*wp)[i];
        });
}

/// Elementwise subtract a fixed offset table.
inline TensorPtr shift_by(Graph& g, const TensorPtr& a, std::vector<double> offset) {
    check_shape(a->numel() == offset.size(), "shift_by: offset count mismatch");
    auto out = make_tensor(a->shape);
    auto op = std::make_shared<std::vector<double>>(std::move(offset));
    return g.record({a}, out,
        [a, out, op] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] - (*op)[i];
        },
        [a, out] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i)
                a->grad[i] += out->grad[i];
        });
}

inline TensorPtr sum(Graph& g, const TensorPtr& a) {
    auto out = make_tensor({1});
    return g.record({a}, out,
        [a, out] {
            double s = 0.0;
            for (double v : a->data) s += v;
            out->data[0] = s;
        },
        [a, out] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < a->data.size(); ++i)
                a->grad[i] += out->grad[0];
        });
}

inline TensorPtr mean(Graph& g, const TensorPtr& a) {
    return scale(g, sum(g, a), 1.0 / static_cast<double>(a->numel()));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// out[n,j] = sum_i w[j,i] * in[n,i] + b[j]
inline TensorPtr fully_connected(Graph& g, const TensorPtr& in, const TensorPtr& w,
                                 const TensorPtr& b) {
    check_shape(in->rank() == 2 && w->rank() == 2 && b->rank() == 1, "fully_connected: ranks");
    const std::size_t n = in->dim(0), din = in->dim(1);
    const std::size_t dout = w->dim(0);
    check_shape(w->dim(1) == din, "fully_connected: inner dimension mismatch");
    check_shape(b->dim(0) == dout, "fully_connected: bias size mismatch");
    auto out = make_tensor({n, dout});
    return g.record({in, w, b}, out,
        [in, w, b, out, n, din, dout] {
            for (std::size_t r = 0; r < n; ++r) {
                const double* x = &in->data[r * din];
                for (std::size_t j = 0; j < dout; ++j) {
                    const double* wr = &w->data[j * din];
                    double s = b->data[j];
                    for (std::size_t i = 0; i < din; ++i) s += wr[i] * x[i];
                    out->data[r * dout + j] = s;
                }
            }
        },
        [in, w, b, out, n, din, dout] {
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < dout; ++j) {
                    const double go = out->grad[r * dout + j];
                    if (go == 0.0) continue;
                    if (b->requires_grad) b->grad[j] += go;
                    const double* x = &in->data[r * din];
                    if (w->requires_grad) {
                        double* gw = &w->grad[j * din];
                        for (std::size_t i = 0; i < din; ++i) gw[i] += go * x[i];
                    }
                    if (in->requires_grad) {
                        const double* wr = &w->data[j * din];
                        double* gx = &in->grad[r * din];
                        for (std::size_t i = 0; i < din; ++i) gx[i] += go * wr[i];
                    }
                }
            }
        });
}

/// 2-D convolution, NCHW layout, single stride/pad for both axes.
inline TensorPtr conv2d(Graph& g, const TensorPtr& in, const TensorPtr& w, const TensorPtr& b,
                        std::size_t stride, std::size_t pad) {
    check_shape(in->rank() == 4 && w->rank() == 4 && b->rank() == 1, "conv2d: ranks");
    check_shape(stride >= 1, "conv2d: stride must be >= 1");
    const std::size_t n = in->dim(0), cin = in->dim(1), h = in->dim(2), wd = in->dim(3);
    const std::size_t cout = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    check_shape(w->dim(1) == cin, "conv2d: input channels do not match weight Cin");
    check_shape(b->dim(0) == cout, "conv2d: bias size mismatch");
    check_shape(kh <= h + 2 * pad && kw <= wd + 2 * pad, "conv2d: kernel larger than padded input");
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
    auto out = make_tensor({n, cout, oh, ow});
    auto idx_in = [cin, h, wd](std::size_t ni, std::size_t c, std::size_t y, std::size_t x) {
        return ((ni * cin + c) * h + y) * wd + x;
    };
    auto idx_w = [cin, kh, kw](std::size_t o, std::size_t c, std::size_t y, std::size_t x) {
        return ((o * cin + c) * kh + y) * kw + x;
    };
    return g.record({in, w, b}, out,
        [=] {
            for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double s = b->data[o];
                const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(y * stride) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(x * stride) - static_cast<std::ptrdiff_t>(pad);
                for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(ky);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(kx);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                        s += in->data[idx_in(ni, c, iy, ix)] * w->data[idx_w(o, c, ky, kx)];
                    }
                }
                out->data[((ni * cout + o) * oh + y) * ow + x] = s;
            }
        },
        [=] {
            for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                const double go = out->grad[((ni * cout + o) * oh + y) * ow + x];
                if (go == 0.0) continue;
                if (b->requires_grad) b->grad[o] += go;
                const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(y * stride) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(x * stride) - static_cast<std::ptrdiff_t>(pad);
                for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(ky);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(kx);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                        if (w->requires_grad)
                            w->grad[idx_w(o, c, ky, kx)] += go * in->data[idx_in(ni, c, iy, ix)];
                        if (in->requires_grad)
                            in->grad[idx_in(ni, c, iy, ix)] += go * w->data[idx_w(o, c, ky, kx)];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

inline TensorPtr relu(Graph& g, const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    return g.record({a}, out,
        [a, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
        },
        [a, out] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i)
                if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
        });
}

inline TensorPtr sigmoid(Graph& g, const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    return g.record({a}, out,
        [a, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i)
                out->data[i] = 1.0 / (1.0 + std::exp(-a->data[i]));
        },
        [a, out] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i)
                a->grad[i] += out->grad[i] * out->data[i] * (1.0 - out->data[i]);
        });
}

/// Row-wise softmax over a rank-2 tensor.
inline TensorPtr softmax_rows(Graph& g, const TensorPtr& a) {
    check_shape(a->rank() == 2, "softmax_rows: rank-2 input required");
    const std::size_t n = a->dim(0), k = a->dim(1);
    auto out = make_tensor(a->shape);
    return g.record({a}, out,
        [a, out, n, k] {
            for (std::size_t r = 0; r < n; ++r) {
                double mx = a->data[r * k];
                for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, a->data[r * k + j]);
                double s = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    out->data[r * k + j] = std::exp(a->data[r * k + j] - mx);
                    s += out->data[r * k + j];
                }
                for (std::size_t j = 0; j < k; ++j) out->data[r * k + j] /= s;
            }
        },
        [a, out, n, k] {
            if (!a->requires_grad) return;
            for (std::size_t r = 0; r < n; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j)
                    dot += out->grad[r * k + j] * out->data[r * k + j];
                for (std::size_t j = 0; j < k; ++j)
                    a->grad[r * k + j] += out->data[r * k + j] * (out->grad[r * k + j] - dot);
            }
        });
}

/// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
inline TensorPtr smooth_l1(Graph& g, const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    return g.record({a}, out,
        [a, out] {
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                const double x = a->data[i];
                out->data[i] = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
            }
        },
        [a, out] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                const double x = a->data[i];
                const double d = std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
                a->grad[i] += out->grad[i] * d;
            }
        });
}

/// Mean negative log-likelihood over rows of a probability tensor.
/// Probabilities are clamped to [1e-7, 1-1e-7] before the log.
inline TensorPtr cross_entropy(Graph& g, const TensorPtr& probs,
                               const std::vector<std::size_t>& labels) {
    check_shape(probs->rank() == 2, "cross_entropy: rank-2 input required");
    const std::size_t n = probs->dim(0), k = probs->dim(1);
    check_shape(labels.size() == n, "cross_entropy: one label per row required");
    for (auto l : labels)
        if (l >= k) throw std::out_of_range("cross_entropy: label index out of range");
    auto lp = std::make_shared<std::vector<std::size_t>>(labels);
    auto out = make_tensor({1});
    return g.record({probs}, out,
        [probs, out, lp, n, k] {
            double s = 0.0;
            for (std::size_t r = 0; r < n; ++r)
                s += -std::log(clamp_prob(probs->data[r * k + (*lp)[r]]));
            out->data[0] = s / static_cast<double>(n);
        },
        [probs, out, lp, n, k] {
            if (!probs->requires_grad) return;
            for (std::size_t r = 0; r < n; ++r) {
                const double p = probs->data[r * k + (*lp)[r]];
                if (p <= kProbClamp || p >= 1.0 - kProbClamp) continue;
                probs->grad[r * k + (*lp)[r]] +=
                    out->grad[0] * (-1.0 / p) / static_cast<double>(n);
            }
        });
}

/// Elementwise binary cross-entropy against fixed targets, clamped probabilities.
inline TensorPtr binary_cross_entropy(Graph& g, const TensorPtr& p, std::vector<double> targets) {
    check_shape(p->numel() == targets.size(), "binary_cross_entropy: target count mismatch");
    auto tp = std::make_shared<std::vector<double>>(std::move(targets));
    auto out = make_tensor(p->shape);
    return g.record({p}, out,
        [p, out, tp] {
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                const double pc = clamp_prob(p->data[i]);
                const double t = (*tp)[i];
                out->data[i] = -t * std::log(pc) - (1.0 - t) * std::log(1.0 - pc);
            }
        },
        [p, out, tp] {
            if (!p->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i) {
                const double pv = p->data[i];
                if (pv <= kProbClamp || pv >= 1.0 - kProbClamp) continue;
                const double t = (*tp)[i];
                p->grad[i] += out->grad[i] * ((1.0 - t) / (1.0 - pv) - t / pv);
            }
        });
}

/// Identity forward; backward multiplies incoming gradients by -coeff.
inline TensorPtr gradient_reverse(Graph& g, const TensorPtr& a, double coeff) {
    if (coeff < 0.0) throw std::invalid_argument("gradient_reverse: coeff must be >= 0");
    auto out = make_tensor(a->shape);
    return g.record({a}, out,
        [a, out] { out->data = a->data; },
        [a, out, coeff] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < out->data.size(); ++i)
                a->grad[i] -= coeff * out->grad[i];
        });
}

/// Align-corners bilinear interpolation weights for a 1-D axis.
inline void bilinear_axis(std::size_t in_n, std::size_t out_n, std::size_t i,
                          std::size_t& lo, std::size_t& hi, double& frac) {
    if (out_n == 1 || in_n == 1) {
        lo = hi = 0;
        frac = 0.0;
        return;
    }
    const double pos = static_cast<double>(i) * static_cast<double>(in_n - 1) /
                       static_cast<double>(out_n - 1);
    lo = static_cast<std::size_t>(pos);
    if (lo >= in_n - 1) lo = in_n - 2;
    hi = lo + 1;
    frac = pos - static_cast<double>(lo);
}

/// Up-samples a [H,W] map to [out_h,out_w] with align-corners bilinear interpolation.
inline TensorPtr bilinear_upsample(Graph& g, const TensorPtr& a, std::size_t out_h,
                                   std::size_t out_w) {
    check_shape(a->rank() == 2, "bilinear_upsample: rank-2 input required");
    if (out_h == 0 || out_w == 0)
        throw std::invalid_argument("bilinear_upsample: output size must be positive");
    const std::size_t h = a->dim(0), w = a->dim(1);
    check_shape(out_h >= h && out_w >= w, "bilinear_upsample: up-sampling only");
    auto out = make_tensor({out_h, out_w});
    return g.record({a}, out,
        [a, out, h, w, out_h, out_w] {
            for (std::size_t y = 0; y < out_h; ++y) {
                std::size_t y0, y1;
                double fy;
                bilinear_axis(h, out_h, y, y0, y1, fy);
                for (std::size_t x = 0; x < out_w; ++x) {
                    std::size_t x0, x1;
                    double fx;
                    bilinear_axis(w, out_w, x, x0, x1, fx);
                    out->data[y * out_w + x] =
                        (1 - fy) * (1 - fx) * a->data[y0 * w + x0] +
                        (1 - fy) * fx * a->data[y0 * w + x1] +
                        fy * (1 - fx) * a->data[y1 * w + x0] +
                        fy * fx * a->data[y1 * w + x1];
                }
            }
        },
        [a, out, h, w, out_h, out_w] {
            if (!a->requires_grad) return;
            for (std::size_t y = 0; y < out_h; ++y) {
                std::size_t y0, y1;
                double fy;
                bilinear_axis(h, out_h, y, y0, y1, fy);
                for (std::size_t x = 0; x < out_w; ++x) {
                    std::size_t x0, x1;
                    double fx;
                    bilinear_axis(w, out_w, x, x0, x1, fx);
                    const double go = out->grad[y * out_w + x];
                    a->grad[y0 * w + x0] += go * (1 - fy) * (1 - fx);
                    a->grad[y0 * w + x1] += go * (1 - fy) * fx;
                    a->grad[y1 * w + x0] += go * fy * (1 - fx);
                    a->grad[y1 * w + x1] += go * fy * fx;
                }
            }
        });
}

/// Stacks R row vectors [1,D] into one [R,D] tensor.
inline TensorPtr concat_rows(Graph& g, const std::vector<TensorPtr>& rows) {
    check_shape(!rows.empty(), "concat_rows: at least one row required");
    const std::size_t d = rows[0]->numel();
    for (const auto& r : rows) check_shape(r->numel() == d, "concat_rows: row widths differ");
    auto out = make_tensor({rows.size(), d});
    return g.record(rows, out,
        [rows, out, d] {
            for (std::size_t r = 0; r < rows.size(); ++r)
                std::copy(rows[r]->data.begin(), rows[r]->data.end(), out->data.begin() + r * d);
        },
        [rows, out, d] {
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (!rows[r]->requires_grad) continue;
                for (std::size_t i = 0; i < d; ++i)
                    rows[r]->grad[i] += out->grad[r * d + i];
            }
        });
}

/// Weighted sum of rows of a [R,D] tensor -> [1,D]; weights are constants.
inline TensorPtr average_rows(Graph& g, const TensorPtr& a, std::vector<double> weights) {
    check_shape(a->rank() == 2, "average_rows: rank-2 input required");
    const std::size_t r = a->dim(0), d = a->dim(1);
    check_shape(weights.size() == r, "average_rows: one weight per row required");
    auto wp = std::make_shared<std::vector<double>>(std::move(weights));
    auto out = make_tensor({1, d});
    return g.record({a}, out,
        [a, out, wp, r, d] {
            std::fill(out->data.begin(), out->data.end(), 0.0);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    out->data[j] += (*wp)[i] * a->data[i * d + j];
        },
        [a, out, wp, r, d] {
            if (!a->requires_grad) return;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    a->grad[i * d + j] += (*wp)[i] * out->grad[j];
        });
}

/// Bilinearly samples a P x P grid from one channel plane inside a box and
/// flattens all channels into a [1, C*P*P] row. Box coordinates are in
/// feature-map units, align-corners within the box.
inline TensorPtr roi_align(Graph& g, const TensorPtr& feat, double x0, double y0, double x1,
                           double y1, std::size_t p) {
    check_shape(feat->rank() == 4 && feat->dim(0) == 1, "roi_align: [1,C,H,W] input required");
    const std::size_t c = feat->dim(1), h = feat->dim(2), w = feat->dim(3);
    auto clampd = [](double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); };
    x0 = clampd(x0, 0.0, static_cast<double>(w - 1));
    x1 = clampd(x1, 0.0, static_cast<double>(w - 1));
    y0 = clampd(y0, 0.0, static_cast<double>(h - 1));
    y1 = clampd(y1, 0.0, static_cast<double>(h - 1));
    if (x1 < x0) std::swap(x0, x1);
    if (y1 < y0) std::swap(y0, y1);
    auto out = make_tensor({1, c * p * p});
    struct Tap {
        std::size_t i00, i01, i10, i11;
        double w00, w01, w10, w11;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->reserve(p * p);
    for (std::size_t gy = 0; gy < p; ++gy) {
        const double fy = p == 1 ? 0.5 : static_cast<double>(gy) / static_cast<double>(p - 1);
        const double sy = y0 + fy * (y1 - y0);
        std::size_t iy0 = static_cast<std::size_t>(sy);
        if (iy0 >= h - 1 && h > 1) iy0 = h - 2;
        const std::size_t iy1 = h == 1 ? 0 : iy0 + 1;
        const double ay = h == 1 ? 0.0 : sy - static_cast<double>(iy0);
        for (std::size_t gx = 0; gx < p; ++gx) {
            const double fx = p == 1 ? 0.5 : static_cast<double>(gx) / static_cast<double>(p - 1);
            const double sx = x0 + fx * (x1 - x0);
            std::size_t ix0 = static_cast<std::size_t>(sx);
            if (ix0 >= w - 1 && w > 1) ix0 = w - 2;
            const std::size_t ix1 = w == 1 ? 0 : ix0 + 1;
            const double ax = w == 1 ? 0.0 : sx - static_cast<double>(ix0);
            taps->push_back({iy0 * w + ix0, iy0 * w + ix1, iy1 * w + ix0, iy1 * w + ix1,
                             (1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax});
        }
    }
    return g.record({feat}, out,
        [feat, out, taps, c, h, w, p] {
            const std::size_t plane = h * w;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* base = &feat->data[ch * plane];
                for (std::size_t t = 0; t < taps->size(); ++t) {
                    const Tap& tp = (*taps)[t];
                    out->data[ch * p * p + t] = tp.w00 * base[tp.i00] + tp.w01 * base[tp.i01] +
                                                tp.w10 * base[tp.i10] + tp.w11 * base[tp.i11];
                }
            }
        },
        [feat, out, taps, c, h, w, p] {
            if (!feat->requires_grad) return;
            const std::size_t plane = h * w;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* base = &feat->grad[ch * plane];
                for (std::size_t t = 0; t < taps->size(); ++t) {
                    const Tap& tp = (*taps)[t];
                    const double go = out->grad[ch * p * p + t];
                    base[tp.i00] += go * tp.w00;
                    base[tp.i01] += go * tp.w01;
                    base[tp.i10] += go * tp.w10;
                    base[tp.i11] += go * tp.w11;
                }
            }
        });
}

}  // namespace cffa
