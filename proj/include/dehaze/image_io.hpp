#pragma once

// PNG import/export. Colour images map 8-bit RGB to [0, 1]; transmission maps
// use 16-bit gray scaled by 65535 so they survive a round trip nearly exactly.

#include <filesystem>

#include "dehaze/tensor.hpp"

namespace dehaze {

/// Reads any PNG as (1, 3, H, W) in [0, 1]. Throws IoError if unreadable,
/// InputError if the file is not a valid PNG.
ImageTensor read_png(const std::filesystem::path& path);
/// Reads a PNG as (1, 1, H, W) 16-bit gray in [0, 1].
Tensor read_png_gray16(const std::filesystem::path& path);

/// Writes item 0 of a 3-channel tensor, clamped and rounded to 8 bits.
void write_png_rgb8(const std::filesystem::path& path, const ImageTensor& image);
/// Writes plane (0, channel) as 8-bit gray.
void write_png_gray8(const std::filesystem::path& path, const Tensor& t, int channel = 0);
void write_png_gray16(const std::filesystem::path& path, const Tensor& t);

}  // namespace dehaze
