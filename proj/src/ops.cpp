#include "dehaze/ops.hpp"

#include <algorithm>
#include <cmath>
#include <bit>
#include <cstdint>
#include <limits>

#include "dehaze/error.hpp"
#include "dehaze/kernels.hpp"

namespace dehaze::ops {
namespace {

Tensor scalar_tensor(double v) { return Tensor({1, 1, 1, 1}, v); }

// Sums in sorted order so the result is identical for every permutation of
// the operands (pooling must not depend on spatial or channel order).
// The key orders doubles totally (IEEE totalOrder), NaNs included.
std::int64_t total_order_key(double v) {
    const auto bits = std::bit_cast<std::int64_t>(v);
    return bits ^ static_cast<std::int64_t>(static_cast<std::uint64_t>(bits >> 63) >> 1);
}

double order_free_sum(std::vector<double>& values) {
    std::sort(values.begin(), values.end(), [](double a, double b) { return total_order_key(a) < total_order_key(b); });
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc;
}

struct ConvGeometry {
    int channels, height, width;  // image side
    int kh, kw, stride, pad;
    int out_h, out_w;              // column side
    std::size_t rows() const { return static_cast<std::size_t>(channels) * kh * kw; }
    std::size_t cols() const { return static_cast<std::size_t>(out_h) * out_w; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
    // Output columns [lo, hi) whose input column for tap kx is inside the image.
    std::pair<int, int> valid_cols(int kx) const {
        const int off = pad - kx;
        const int lo = off <= 0 ? 0 : (off + stride - 1) / stride;
        const int hi = width - 1 + off < 0 ? 0 : (width - 1 + off) / stride + 1;
        return {std::min(lo, out_w), std::clamp(hi, std::min(lo, out_w), out_w)};
    }
};

// Per-thread grow-only column buffer; every user fully overwrites what it reads.
double* scratch(std::size_t n) {
    thread_local std::vector<double> buf;
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

void im2col(const ConvGeometry& g, const double* image, double* col) {
    const std::size_t ncols = g.cols();
    for (int c = 0; c < g.channels; ++c) {
        const double* src = image + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                double* dst = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * ncols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    double* drow = dst + static_cast<std::size_t>(oy) * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(drow, drow + g.out_w, 0.0);
                        continue;
                    }
                    const double* srow = src + static_cast<std::size_t>(iy) * g.width;
                    const auto [lo, hi] = g.valid_cols(kx);
                    std::fill(drow, drow + lo, 0.0);
                    if (g.stride == 1) {
                        std::copy(srow + lo - g.pad + kx, srow + hi - g.pad + kx, drow + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * g.stride - g.pad + kx];
                    }
                    std::fill(drow + hi, drow + g.out_w, 0.0);
                }
            }
        }
    }
}

// Scatter-adds columns back onto the image (adjoint of im2col).
void col2im(const ConvGeometry& g, const double* col, double* image) {
    const std::size_t ncols = g.cols();
    for (int c = 0; c < g.channels; ++c) {
        double* dst = image + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                const double* src = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * ncols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) continue;
                    double* drow = dst + static_cast<std::size_t>(iy) * g.width;
                    const double* srow = src + static_cast<std::size_t>(oy) * g.out_w;
                    const auto [lo, hi] = g.valid_cols(kx);
                    if (g.stride == 1) {
                        double* d = drow - g.pad + kx;
                        for (int ox = lo; ox < hi; ++ox) d[ox] += srow[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) drow[ox * g.stride - g.pad + kx] += srow[ox];
                    }
                }
            }
        }
    }
}

void add_bias(Tensor& y, const Tensor& bias) {
    const Shape& s = y.shape();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const double b = bias[static_cast<std::size_t>(c)];
            double* p = y.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) p[i] += b;
        }
    }
}

void accumulate_bias_grad(const Tensor& dy, Tensor& db) {
    const Shape& s = dy.shape();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const double* p = dy.plane(n, c);
            double acc = 0.0;
            for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
            db[static_cast<std::size_t>(c)] += acc;
        }
    }
}

void check_bias(const Tensor* bias, int channels, const char* op) {
    if (bias && bias->size() != static_cast<std::size_t>(channels)) {
        throw InputError(std::string(op) + ": bias has " + std::to_string(bias->size()) +
                         " elements, expected " + std::to_string(channels));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InputError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

}  // namespace

Var conv2d(Tape& tape, Var x, Var weight, Var bias, int stride, int pad) {
    const Tensor& xv = tape.value(x);
    const Tensor& wv = tape.value(weight);
    const Shape xs = xv.shape();
    const Shape ws = wv.shape();
    if (ws.c != xs.c) {
        throw InputError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                         std::to_string(ws.c));
    }
    if (stride < 1 || pad < 0) throw InputError("conv2d: invalid stride/padding");
    const int out_h = (xs.h + 2 * pad - ws.h) / stride + 1;
    const int out_w = (xs.w + 2 * pad - ws.w) / stride + 1;
    if (out_h <= 0 || out_w <= 0) throw InputError("conv2d: kernel larger than padded input");
    check_bias(bias.valid() ? &tape.value(bias) : nullptr, ws.n, "conv2d");

    const ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad, out_h, out_w};
    const std::size_t k = g.rows();
    const std::size_t ncols = g.cols();
    Tensor y({xs.n, ws.n, out_h, out_w});
    double* col = g.is_pointwise() ? nullptr : scratch(k * ncols);
    for (int n = 0; n < xs.n; ++n) {
        const double* src = xv.plane(n, 0);
        if (!g.is_pointwise()) {
            im2col(g, src, col);
            src = col;
        }
        kernels::gemm(false, false, ws.n, ncols, k, 1.0, wv.data(), k, src, ncols, 0.0, y.plane(n, 0), ncols);
    }
    if (bias.valid()) add_bias(y, tape.value(bias));

    return tape.record(std::move(y), {x, weight, bias}, [x, weight, bias, g](Tape& t, Var, const Tensor& dy) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(weight);
        const int cout = wv.shape().n;
        const std::size_t k = g.rows();
        const std::size_t ncols = g.cols();
        const bool need_w = t.requires_grad(weight);
        const bool need_x = t.requires_grad(x);
        if (bias.valid() && t.requires_grad(bias)) accumulate_bias_grad(dy, t.grad_buffer(bias));
        if (!need_w && !need_x) return;
        double* col = g.is_pointwise() ? nullptr : scratch(k * ncols);
        Tensor* dw = need_w ? &t.grad_buffer(weight) : nullptr;
        Tensor* dx = need_x ? &t.grad_buffer(x) : nullptr;
        for (int n = 0; n < xv.shape().n; ++n) {
            const double* dyn = dy.plane(n, 0);
            if (dw) {
                const double* src = xv.plane(n, 0);
                if (!g.is_pointwise()) {
                    im2col(g, src, col);
                    src = col;
                }
                kernels::gemm(false, true, cout, k, ncols, 1.0, dyn, ncols, src, ncols, 1.0, dw->data(), k);
            }
            if (dx) {
                if (g.is_pointwise()) {
                    kernels::gemm(true, false, k, ncols, cout, 1.0, wv.data(), k, dyn, ncols, 1.0, dx->plane(n, 0), ncols);
                } else {
                    kernels::gemm(true, false, k, ncols, cout, 1.0, wv.data(), k, dyn, ncols, 0.0, col, ncols);
                    col2im(g, col, dx->plane(n, 0));
                }
            }
        }
    });
}

Var conv_transpose2d(Tape& tape, Var x, Var weight, Var bias, int stride, int pad) {
    const Tensor& xv = tape.value(x);
    const Tensor& wv = tape.value(weight);
    const Shape xs = xv.shape();
    const Shape ws = wv.shape();  // (Cin, Cout, kh, kw)
    if (ws.n != xs.c) {
        throw InputError("conv_transpose2d: input has " + std::to_string(xs.c) +
                         " channels, weight expects " + std::to_string(ws.n));
    }
    const int out_h = (xs.h - 1) * stride - 2 * pad + ws.h;
    const int out_w = (xs.w - 1) * stride - 2 * pad + ws.w;
    if (out_h <= 0 || out_w <= 0) throw InputError("conv_transpose2d: empty output");
    check_bias(bias.valid() ? &tape.value(bias) : nullptr, ws.c, "conv_transpose2d");

    // Geometry of the equivalent forward convolution mapping output -> input.
    const ConvGeometry g{ws.c, out_h, out_w, ws.h, ws.w, stride, pad, xs.h, xs.w};
    if ((out_h + 2 * pad - ws.h) / stride + 1 != xs.h) throw InternalError("conv_transpose2d geometry");
    const std::size_t k = g.rows();  // Cout * kh * kw
    const std::size_t ncols = g.cols();
    Tensor y({xs.n, ws.c, out_h, out_w});
    double* col = scratch(k * ncols);
    for (int n = 0; n < xs.n; ++n) {
        kernels::gemm(true, false, k, ncols, xs.c, 1.0, wv.data(), k, xv.plane(n, 0), ncols, 0.0, col, ncols);
        col2im(g, col, y.plane(n, 0));
    }
    if (bias.valid()) add_bias(y, tape.value(bias));

    return tape.record(std::move(y), {x, weight, bias}, [x, weight, bias, g](Tape& t, Var, const Tensor& dy) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(weight);
        const int cin = wv.shape().n;
        const std::size_t k = g.rows();
        const std::size_t ncols = g.cols();
        if (bias.valid() && t.requires_grad(bias)) accumulate_bias_grad(dy, t.grad_buffer(bias));
        const bool need_w = t.requires_grad(weight);
        const bool need_x = t.requires_grad(x);
        if (!need_w && !need_x) return;
        double* col = scratch(k * ncols);
        for (int n = 0; n < xv.shape().n; ++n) {
            im2col(g, dy.plane(n, 0), col);
            if (need_x) {
                kernels::gemm(false, false, cin, ncols, k, 1.0, wv.data(), k, col, ncols, 1.0,
                              t.grad_buffer(x).plane(n, 0), ncols);
            }
            if (need_w) {
                kernels::gemm(false, true, cin, k, ncols, 1.0, xv.plane(n, 0), ncols, col, ncols, 1.0,
                              t.grad_buffer(weight).data(), k);
            }
        }
    });
}

Var relu(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    Tensor y(xv.shape());
    kernels::active().relu_forward(xv.size(), xv.data(), y.data());
    return tape.record(std::move(y), {x}, [x](Tape& t, Var self, const Tensor& dy) {
        kernels::active().relu_backward(dy.size(), t.value(self).data(), dy.data(), t.grad_buffer(x).data());
    });
}

Var sigmoid(Tape& tape, Var x) {
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    const double hi = std::nextafter(1.0, 0.0);
    const Tensor& xv = tape.value(x);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        y[i] = std::clamp(s, lo, hi);
    }
    return tape.record(std::move(y), {x}, [x](Tape& t, Var self, const Tensor& dy) {
        const Tensor& yv = t.value(self);
        Tensor& dx = t.grad_buffer(x);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * yv[i] * (1.0 - yv[i]);
    });
}

Var add(Tape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    require_same_shape(av, bv, "add");
    Tensor y = av;
    kernels::axpy(y.size(), 1.0, bv.data(), y.data());
    return tape.record(std::move(y), {a, b}, [a, b](Tape& t, Var, const Tensor& dy) {
        if (t.requires_grad(a)) kernels::axpy(dy.size(), 1.0, dy.data(), t.grad_buffer(a).data());
        if (t.requires_grad(b)) kernels::axpy(dy.size(), 1.0, dy.data(), t.grad_buffer(b).data());
    });
}

Var scale(Tape& tape, Var a, double factor) {
    Tensor y = tape.value(a);
    for (double& v : y.vec()) v *= factor;
    return tape.record(std::move(y), {a}, [a, factor](Tape& t, Var, const Tensor& dy) {
        kernels::axpy(dy.size(), factor, dy.data(), t.grad_buffer(a).data());
    });
}

Var concat_channels(Tape& tape, const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat_channels: no inputs");
    const Shape first = tape.value(parts.front()).shape();
    int channels = 0;
    for (Var p : parts) {
        const Shape s = tape.value(p).shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw InputError("concat_channels: incompatible shapes " + to_string(first) + " and " + to_string(s));
        }
        channels += s.c;
    }
    Tensor y({first.n, channels, first.h, first.w});
    for (int n = 0; n < first.n; ++n) {
        double* dst = y.plane(n, 0);
        for (Var p : parts) {
            const Tensor& pv = tape.value(p);
            dst = std::copy_n(pv.plane(n, 0), pv.shape().item(), dst);
        }
    }
    return tape.record(std::move(y), parts, [parts](Tape& t, Var, const Tensor& dy) {
        const Shape s = dy.shape();
        for (int n = 0; n < s.n; ++n) {
            const double* src = dy.plane(n, 0);
            for (Var p : parts) {
                const std::size_t len = t.value(p).shape().item();
                if (t.requires_grad(p)) kernels::axpy(len, 1.0, src, t.grad_buffer(p).plane(n, 0));
                src += len;
            }
        }
    });
}

Var slice_channels(Tape& tape, Var x, int first, int count) {
    Tensor y = dehaze::slice_channels(tape.value(x), first, count);
    return tape.record(std::move(y), {x}, [x, first, count](Tape& t, Var, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        for (int n = 0; n < dy.shape().n; ++n) {
            kernels::axpy(static_cast<std::size_t>(count) * dy.shape().plane(), 1.0, dy.plane(n, 0), dx.plane(n, first));
        }
    });
}

Var global_avg_pool(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    const Shape s = xv.shape();
    Tensor y({s.n, s.c, 1, 1});
    const double inv = 1.0 / static_cast<double>(s.plane());
    std::vector<double> buf(s.plane());
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const double* p = xv.plane(n, c);
            std::copy_n(p, s.plane(), buf.begin());
            y.at(n, c, 0, 0) = order_free_sum(buf) * inv;
        }
    }
    return tape.record(std::move(y), {x}, [x, inv](Tape& t, Var, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        const Shape s = dx.shape();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                const double g = dy.at(n, c, 0, 0) * inv;
                double* p = dx.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) p[i] += g;
            }
        }
    });
}

Var global_max_pool(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    const Shape s = xv.shape();
    Tensor y({s.n, s.c, 1, 1});
    std::vector<std::size_t> argmax(static_cast<std::size_t>(s.n) * s.c);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const double* p = xv.plane(n, c);
            const std::size_t best = static_cast<std::size_t>(std::max_element(p, p + s.plane()) - p);
            argmax[static_cast<std::size_t>(n) * s.c + c] = best;
            y.at(n, c, 0, 0) = p[best];
        }
    }
    return tape.record(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape& t, Var, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        const Shape s = dx.shape();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                dx.plane(n, c)[argmax[static_cast<std::size_t>(n) * s.c + c]] += dy.at(n, c, 0, 0);
            }
        }
    });
}

Var channel_mean(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    const Shape s = xv.shape();
    Tensor y({s.n, 1, s.h, s.w});
    const double inv = 1.0 / static_cast<double>(s.c);
    std::vector<double> buf(static_cast<std::size_t>(s.c));
    for (int n = 0; n < s.n; ++n) {
        double* dst = y.plane(n, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) {
            for (int c = 0; c < s.c; ++c) buf[static_cast<std::size_t>(c)] = xv.plane(n, c)[i];
            dst[i] = order_free_sum(buf) * inv;
        }
    }
    return tape.record(std::move(y), {x}, [x, inv](Tape& t, Var, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        const Shape s = dx.shape();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) kernels::axpy(s.plane(), inv, dy.plane(n, 0), dx.plane(n, c));
        }
    });
}

Var channel_max(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    const Shape s = xv.shape();
    Tensor y({s.n, 1, s.h, s.w});
    std::vector<int> argmax(static_cast<std::size_t>(s.n) * s.plane(), 0);
    for (int n = 0; n < s.n; ++n) {
        double* dst = y.plane(n, 0);
        int* arg = argmax.data() + static_cast<std::size_t>(n) * s.plane();
        std::copy_n(xv.plane(n, 0), s.plane(), dst);
        for (int c = 1; c < s.c; ++c) {
            const double* p = xv.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                if (p[i] > dst[i]) {
                    dst[i] = p[i];
                    arg[i] = c;
                }
            }
        }
    }
    return tape.record(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape& t, Var, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        const Shape s = dx.shape();
        for (int n = 0; n < s.n; ++n) {
            const int* arg = argmax.data() + static_cast<std::size_t>(n) * s.plane();
            const double* g = dy.plane(n, 0);
            for (std::size_t i = 0; i < s.plane(); ++i) dx.plane(n, arg[i])[i] += g[i];
        }
    });
}

Var avg_pool2(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    const Shape s = xv.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw InputError("avg_pool2: odd spatial size " + to_string(s));
    Tensor y({s.n, s.c, s.h / 2, s.w / 2});
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int oy = 0; oy < s.h / 2; ++oy) {
                for (int ox = 0; ox < s.w / 2; ++ox) {
                    y.at(n, c, oy, ox) = 0.25 * (xv.at(n, c, 2 * oy, 2 * ox) + xv.at(n, c, 2 * oy, 2 * ox + 1) +
                                                 xv.at(n, c, 2 * oy + 1, 2 * ox) + xv.at(n, c, 2 * oy + 1, 2 * ox + 1));
                }
            }
        }
    }
    return tape.record(std::move(y), {x}, [x](Tape& t, Var, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        const Shape s = dy.shape();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                for (int oy = 0; oy < s.h; ++oy) {
                    for (int ox = 0; ox < s.w; ++ox) {
                        const double g = 0.25 * dy.at(n, c, oy, ox);
                        dx.at(n, c, 2 * oy, 2 * ox) += g;
                        dx.at(n, c, 2 * oy, 2 * ox + 1) += g;
                        dx.at(n, c, 2 * oy + 1, 2 * ox) += g;
                        dx.at(n, c, 2 * oy + 1, 2 * ox + 1) += g;
                    }
                }
            }
        }
    });
}

Var mul_channelwise(Tape& tape, Var x, Var s) {
    const Tensor& xv = tape.value(x);
    const Tensor& sv = tape.value(s);
    const Shape xs = xv.shape();
    if (sv.shape() != Shape{xs.n, xs.c, 1, 1}) {
        throw InputError("mul_channelwise: scale shape " + to_string(sv.shape()) + " for input " + to_string(xs));
    }
    Tensor y = xv;
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const double k = sv.at(n, c, 0, 0);
            double* p = y.plane(n, c);
            for (std::size_t i = 0; i < xs.plane(); ++i) p[i] *= k;
        }
    }
    return tape.record(std::move(y), {x, s}, [x, s](Tape& t, Var, const Tensor& dy) {
        const Tensor& xv = t.value(x);
        const Tensor& sv = t.value(s);
        const Shape xs = xv.shape();
        for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < xs.c; ++c) {
                if (t.requires_grad(x)) kernels::axpy(xs.plane(), sv.at(n, c, 0, 0), dy.plane(n, c), t.grad_buffer(x).plane(n, c));
                if (t.requires_grad(s)) t.grad_buffer(s).at(n, c, 0, 0) += kernels::dot(xs.plane(), dy.plane(n, c), xv.plane(n, c));
            }
        }
    });
}

Var mul_spatial(Tape& tape, Var x, Var s) {
    const Tensor& xv = tape.value(x);
    const Tensor& sv = tape.value(s);
    const Shape xs = xv.shape();
    if (sv.shape() != Shape{xs.n, 1, xs.h, xs.w}) {
        throw InputError("mul_spatial: map shape " + to_string(sv.shape()) + " for input " + to_string(xs));
    }
    Tensor y = xv;
    for (int n = 0; n < xs.n; ++n) {
        const double* m = sv.plane(n, 0);
        for (int c = 0; c < xs.c; ++c) {
            double* p = y.plane(n, c);
            for (std::size_t i = 0; i < xs.plane(); ++i) p[i] *= m[i];
        }
    }
    return tape.record(std::move(y), {x, s}, [x, s](Tape& t, Var, const Tensor& dy) {
        const Tensor& xv = t.value(x);
        const Tensor& sv = t.value(s);
        const Shape xs = xv.shape();
        for (int n = 0; n < xs.n; ++n) {
            const double* m = sv.plane(n, 0);
            for (int c = 0; c < xs.c; ++c) {
                const double* g = dy.plane(n, c);
                if (t.requires_grad(x)) {
                    double* dx = t.grad_buffer(x).plane(n, c);
                    for (std::size_t i = 0; i < xs.plane(); ++i) dx[i] += g[i] * m[i];
                }
                if (t.requires_grad(s)) {
                    double* ds = t.grad_buffer(s).plane(n, 0);
                    const double* xp = xv.plane(n, c);
                    for (std::size_t i = 0; i < xs.plane(); ++i) ds[i] += g[i] * xp[i];
                }
            }
        }
    });
}

Var asm_invert(Tape& tape, Var hazy, Var transmission, Var airlight, double t_min) {
    const Tensor& iv = tape.value(hazy);
    const Tensor& tv = tape.value(transmission);
    const Tensor& av = tape.value(airlight);
    const Shape is = iv.shape();
    if (tv.shape() != Shape{is.n, 1, is.h, is.w} || av.shape() != Shape{is.n, 1, 1, 1}) {
        throw InputError("asm_invert: transmission/airlight shapes do not match hazy " + to_string(is));
    }
    Tensor y(is);
    for (int n = 0; n < is.n; ++n) {
        const double a = av[static_cast<std::size_t>(n)];
        const double* tp = tv.plane(n, 0);
        for (int c = 0; c < is.c; ++c) {
            const double* ip = iv.plane(n, c);
            double* yp = y.plane(n, c);
            for (std::size_t i = 0; i < is.plane(); ++i) {
                const double tt = std::max(tp[i], t_min);
                yp[i] = (ip[i] - a * (1.0 - tt)) / tt;
            }
        }
    }
    return tape.record(std::move(y), {hazy, transmission, airlight},
                       [hazy, transmission, airlight, t_min](Tape& t, Var, const Tensor& dy) {
        const Tensor& iv = t.value(hazy);
        const Tensor& tv = t.value(transmission);
        const Tensor& av = t.value(airlight);
        const Shape is = iv.shape();
        const bool need_i = t.requires_grad(hazy);
        const bool need_t = t.requires_grad(transmission);
        const bool need_a = t.requires_grad(airlight);
        for (int n = 0; n < is.n; ++n) {
            const double a = av[static_cast<std::size_t>(n)];
            const double* tp = tv.plane(n, 0);
            double da = 0.0;
            for (int c = 0; c < is.c; ++c) {
                const double* ip = iv.plane(n, c);
                const double* g = dy.plane(n, c);
                for (std::size_t i = 0; i < is.plane(); ++i) {
                    const double tt = std::max(tp[i], t_min);
                    if (need_i) t.grad_buffer(hazy).plane(n, c)[i] += g[i] / tt;
                    if (need_t && tp[i] > t_min) {
                        t.grad_buffer(transmission).plane(n, 0)[i] -= g[i] * (ip[i] - a) / (tt * tt);
                    }
                    da += g[i] * (1.0 - 1.0 / tt);
                }
            }
            if (need_a) t.grad_buffer(airlight)[static_cast<std::size_t>(n)] += da;
        }
    });
}

Var smooth_l1_mean(Tape& tape, Var pred, Var target) {
    const Tensor& pv = tape.value(pred);
    const Tensor& tv = tape.value(target);
    require_same_shape(pv, tv, "smooth_l1");
    if (pv.size() == 0) throw InputError("smooth_l1: empty input");
    const double inv = 1.0 / static_cast<double>(pv.size());
    const double total = kernels::active().smooth_l1(pv.size(), pv.data(), tv.data(), nullptr, 0.0);
    return tape.record(scalar_tensor(total * inv), {pred, target}, [pred, target, inv](Tape& t, Var, const Tensor& dy) {
        const Tensor& pv = t.value(pred);
        std::vector<double> g(pv.size());
        kernels::active().smooth_l1(pv.size(), pv.data(), t.value(target).data(), g.data(), dy[0] * inv);
        if (t.requires_grad(pred)) kernels::axpy(g.size(), 1.0, g.data(), t.grad_buffer(pred).data());
        if (t.requires_grad(target)) kernels::axpy(g.size(), -1.0, g.data(), t.grad_buffer(target).data());
    });
}

Var mse_mean(Tape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    require_same_shape(av, bv, "mse");
    if (av.size() == 0) throw InputError("mse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - bv[i];
        acc += d * d;
    }
    const double inv = 1.0 / static_cast<double>(av.size());
    return tape.record(scalar_tensor(acc * inv), {a, b}, [a, b, inv](Tape& t, Var, const Tensor& dy) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        const double k = 2.0 * inv * dy[0];
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double g = k * (av[i] - bv[i]);
            if (t.requires_grad(a)) t.grad_buffer(a)[i] += g;
            if (t.requires_grad(b)) t.grad_buffer(b)[i] -= g;
        }
    });
}

Var l1_sum(Tape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    require_same_shape(av, bv, "l1");
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
    return tape.record(scalar_tensor(acc), {a, b}, [a, b](Tape& t, Var, const Tensor& dy) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double d = av[i] - bv[i];
            const double g = d > 0.0 ? dy[0] : (d < 0.0 ? -dy[0] : 0.0);
            if (t.requires_grad(a)) t.grad_buffer(a)[i] += g;
            if (t.requires_grad(b)) t.grad_buffer(b)[i] -= g;
        }
    });
}

Var weighted_sum(Tape& tape, const std::vector<std::pair<Var, double>>& terms) {
    double total = 0.0;
    std::vector<Var> inputs;
    for (const auto& [v, w] : terms) {
        if (tape.value(v).size() != 1) throw InputError("weighted_sum: terms must be scalars");
        total += w * tape.value(v)[0];
        inputs.push_back(v);
    }
    return tape.record(scalar_tensor(total), inputs, [terms](Tape& t, Var, const Tensor& dy) {
        for (const auto& [v, w] : terms) {
            if (t.requires_grad(v)) t.grad_buffer(v)[0] += w * dy[0];
        }
    });
}

}  // namespace dehaze::ops
