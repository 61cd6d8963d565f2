#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dehaze {

/// Batched planar volume dimensions (batch, channels, height, width).
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    std::size_t item() const { return static_cast<std::size_t>(c) * plane(); }
    std::size_t numel() const { return static_cast<std::size_t>(n) * item(); }

    friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense NCHW tensor of doubles. Images are stored as unit-interval values;
/// parameters reuse the same container with whatever logical dims fit.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    double at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

    /// Pointer to the start of plane (n, c).
    double* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
    const double* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

    void fill(double v);
    /// Reinterprets the buffer under a new shape with the same element count.
    Tensor reshaped(Shape s) const;

    bool all_finite() const;
    double min() const;
    double max() const;
    double sum() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }

    Shape shape_{};
    std::vector<double> data_;
};

using ImageTensor = Tensor;

/// Copies batch item `index` of `t` into a new single-item tensor.
Tensor slice_batch(const Tensor& t, int index);
/// Stacks single-item tensors of identical shape along the batch axis.
Tensor stack_batch(std::span<const Tensor> items);
/// Copies channel range [first, first + count) of every batch item.
Tensor slice_channels(const Tensor& t, int first, int count);
/// Spatial window (y0, x0, h, w) of every batch item and channel.
Tensor crop(const Tensor& t, int y0, int x0, int h, int w);
/// Reflect-pads bottom/right edges to (h, w); no-op when already that size.
Tensor reflect_pad(const Tensor& t, int h, int w);
Tensor clamp(const Tensor& t, double lo, double hi);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dehaze
