#include "dehaze/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dehaze/error.hpp"

namespace dehaze {

std::string to_string(const Shape& s) {
    return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) +
           ", " + std::to_string(s.w) + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
        throw InputError("negative tensor dimension " + to_string(shape));
    }
    data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape.numel()) {
        throw InputError("tensor buffer of " + std::to_string(data_.size()) +
                         " elements does not match shape " + to_string(shape));
    }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape s) const {
    if (s.numel() != data_.size()) {
        throw InputError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    }
    return Tensor(s, data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
double Tensor::max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }
double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

Tensor slice_batch(const Tensor& t, int index) {
    const Shape& s = t.shape();
    if (index < 0 || index >= s.n) throw InputError("batch index out of range");
    Tensor out({1, s.c, s.h, s.w});
    std::copy_n(t.data() + index * s.item(), s.item(), out.data());
    return out;
}

Tensor stack_batch(std::span<const Tensor> items) {
    if (items.empty()) throw InputError("cannot stack an empty batch");
    const Shape first = items.front().shape();
    Tensor out({static_cast<int>(items.size()), first.c, first.h, first.w});
    for (std::size_t i = 0; i < items.size(); ++i) {
        const Shape& s = items[i].shape();
        if (s.n != 1 || s.c != first.c || s.h != first.h || s.w != first.w) {
            throw InputError("stack_batch: item " + std::to_string(i) + " has shape " + to_string(s));
        }
        std::copy_n(items[i].data(), first.item(), out.data() + i * first.item());
    }
    return out;
}

Tensor slice_channels(const Tensor& t, int first, int count) {
    const Shape& s = t.shape();
    if (first < 0 || count < 0 || first + count > s.c) throw InputError("channel slice out of range");
    Tensor out({s.n, count, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        std::copy_n(t.plane(n, first), count * s.plane(), out.plane(n, 0));
    }
    return out;
}

Tensor crop(const Tensor& t, int y0, int x0, int h, int w) {
    const Shape& s = t.shape();
    if (y0 < 0 || x0 < 0 || h < 0 || w < 0 || y0 + h > s.h || x0 + w > s.w) {
        throw InputError("crop window exceeds tensor " + to_string(s));
    }
    Tensor out({s.n, s.c, h, w});
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int y = 0; y < h; ++y) {
                std::copy_n(t.plane(n, c) + static_cast<std::size_t>(y0 + y) * s.w + x0, w, out.plane(n, c) + static_cast<std::size_t>(y) * w);
            }
        }
    }
    return out;
}

namespace {
int reflect_index(int i, int size) {
    if (size == 1) return 0;
    const int period = 2 * (size - 1);
    i %= period;
    if (i < 0) i += period;
    return i < size ? i : period - i;
}
}  // namespace

Tensor reflect_pad(const Tensor& t, int h, int w) {
    const Shape& s = t.shape();
    if (h < s.h || w < s.w) throw InputError("reflect_pad target smaller than input");
    if (h == s.h && w == s.w) return t;
    Tensor out({s.n, s.c, h, w});
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int y = 0; y < h; ++y) {
                const int sy = reflect_index(y, s.h);
                for (int x = 0; x < w; ++x) {
                    out.at(n, c, y, x) = t.at(n, c, sy, reflect_index(x, s.w));
                }
            }
        }
    }
    return out;
}

Tensor clamp(const Tensor& t, double lo, double hi) {
    Tensor out = t;
    for (double& v : out.vec()) v = std::clamp(v, lo, hi);
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw InputError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace dehaze
