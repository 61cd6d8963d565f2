#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dehaze/tensor.hpp"

namespace dehaze {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) over all elements, capped at `cap` (MSE = 0 gives
/// the cap).
double psnr(const ImageTensor& a, const ImageTensor& b, double peak = 1.0, double cap = kPsnrCap);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

/// Mean Gaussian-weighted local SSIM over the valid region of the luma
/// channel (3-channel inputs) or the single channel; batch items averaged.
double ssim(const ImageTensor& a, const ImageTensor& b, const SsimOptions& options = {});

struct ImageMetric {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricReport {
    std::vector<ImageMetric> images;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double psnr_cap = kPsnrCap;
    int ssim_window = 11;
};

/// Fills the means from the per-image rows.
MetricReport summarize(std::vector<ImageMetric> rows, double psnr_cap = kPsnrCap, int ssim_window = 11);
/// One JSON object per image, then a summary object with "summary": true.
void write_report(const std::filesystem::path& path, const MetricReport& report);
MetricReport read_report(const std::filesystem::path& path);

}  // namespace dehaze
