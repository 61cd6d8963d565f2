#include "dehaze/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "dehaze/error.hpp"

namespace dehaze {
namespace {

struct PngImage {
    png_image image{};
    PngImage() { image.version = PNG_IMAGE_VERSION; }
    ~PngImage() { png_image_free(&image); }
};

void begin_read(PngImage& png, const std::filesystem::path& path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) throw IoError("cannot read " + path.string());
    if (!png_image_begin_read_from_file(&png.image, path.c_str())) {
        throw InputError("invalid PNG " + path.string() + ": " + png.image.message);
    }
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void finish_write(PngImage& png, const std::filesystem::path& path, const void* buffer) {
    if (!png_image_write_to_file(&png.image, path.c_str(), 0, buffer, 0, nullptr)) {
        throw IoError("cannot write " + path.string() + ": " + png.image.message);
    }
}

}  // namespace

ImageTensor read_png(const std::filesystem::path& path) {
    PngImage png;
    begin_read(png, path);
    png.image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png.image));
    if (!png_image_finish_read(&png.image, nullptr, buf.data(), 0, nullptr)) {
        throw InputError("corrupt PNG " + path.string() + ": " + png.image.message);
    }
    const int h = static_cast<int>(png.image.height);
    const int w = static_cast<int>(png.image.width);
    ImageTensor out({1, 3, h, w});
    for (int c = 0; c < 3; ++c) {
        double* p = out.plane(0, c);
        for (std::size_t i = 0; i < out.shape().plane(); ++i) p[i] = buf[i * 3 + c] / 255.0;
    }
    return out;
}

Tensor read_png_gray16(const std::filesystem::path& path) {
    PngImage png;
    begin_read(png, path);
    png.image.format = PNG_FORMAT_LINEAR_Y;
    std::vector<std::uint16_t> buf(PNG_IMAGE_SIZE(png.image) / 2);
    if (!png_image_finish_read(&png.image, nullptr, buf.data(), 0, nullptr)) {
        throw InputError("corrupt PNG " + path.string() + ": " + png.image.message);
    }
    Tensor out({1, 1, static_cast<int>(png.image.height), static_cast<int>(png.image.width)});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = buf[i] / 65535.0;
    return out;
}

void write_png_rgb8(const std::filesystem::path& path, const ImageTensor& image) {
    const Shape s = image.shape();
    if (s.c != 3 || s.n < 1) throw InputError("write_png_rgb8: expected a 3-channel image, got " + to_string(s));
    std::vector<std::uint8_t> buf(s.plane() * 3);
    for (int c = 0; c < 3; ++c) {
        const double* p = image.plane(0, c);
        for (std::size_t i = 0; i < s.plane(); ++i) buf[i * 3 + c] = to_u8(p[i]);
    }
    PngImage png;
    png.image.width = static_cast<png_uint_32>(s.w);
    png.image.height = static_cast<png_uint_32>(s.h);
    png.image.format = PNG_FORMAT_RGB;
    finish_write(png, path, buf.data());
}

void write_png_gray8(const std::filesystem::path& path, const Tensor& t, int channel) {
    const Shape s = t.shape();
    if (channel < 0 || channel >= s.c || s.n < 1) throw InputError("write_png_gray8: channel out of range");
    std::vector<std::uint8_t> buf(s.plane());
    const double* p = t.plane(0, channel);
    for (std::size_t i = 0; i < s.plane(); ++i) buf[i] = to_u8(p[i]);
    PngImage png;
    png.image.width = static_cast<png_uint_32>(s.w);
    png.image.height = static_cast<png_uint_32>(s.h);
    png.image.format = PNG_FORMAT_GRAY;
    finish_write(png, path, buf.data());
}

void write_png_gray16(const std::filesystem::path& path, const Tensor& t) {
    const Shape s = t.shape();
    if (s.c != 1 || s.n < 1) throw InputError("write_png_gray16: expected one channel, got " + to_string(s));
    std::vector<std::uint16_t> buf(s.plane());
    for (std::size_t i = 0; i < s.plane(); ++i) {
        buf[i] = static_cast<std::uint16_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * 65535.0));
    }
    PngImage png;
    png.image.width = static_cast<png_uint_32>(s.w);
    png.image.height = static_cast<png_uint_32>(s.h);
    // LINEAR_Y is the simplified API's 16-bit gray; no gamma transform is
    // applied when reading back with the same format.
    png.image.format = PNG_FORMAT_LINEAR_Y;
    finish_write(png, path, buf.data());
}

}  // namespace dehaze
