#pragma once

// Atmospheric scattering synthesis and inversion, synthetic depth/texture
// generation, the hand-crafted enhancement bank used as alternative network
// inputs, and a parametric domain-shift proxy.
//
// Haze formation per colour channel c:   I_c = J_c * t + A * (1 - t),
// with transmission t = exp(-beta * d) for scene depth d.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dehaze/tensor.hpp"

namespace dehaze {

/// Luma weights shared by the gray-scale channel, white balance and SSIM.
inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

/// Luma written as r + wg (g - r) + wb (b - r): algebraically identical to
/// the weighted sum, but exact on neutral pixels (r = g = b).
inline double luma(double r, double g, double b) { return r + kLumaG * (g - r) + kLumaB * (b - r); }

struct DepthMap {
    Tensor values;  // (1, 1, H, W), relative metres

    int height() const { return values.shape().h; }
    int width() const { return values.shape().w; }
    /// Throws InputError unless the grid is non-empty, finite and >= 0.
    void validate() const;
};

struct HazeParams {
    double beta = 1.0;
    double airlight = 1.0;
    void validate() const;
};

enum class Domain { synthetic, translated };
std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);

struct HazeSample {
    std::string id;
    ImageTensor clear;      // (1, 3, H, W)
    ImageTensor hazy;       // (1, 3, H, W)
    Tensor transmission;    // (1, 1, H, W)
    double airlight = 1.0;
    double beta = 1.0;
    DepthMap depth;
    Domain domain = Domain::synthetic;
    std::uint64_t seed = 0;
};

struct DomainShiftParams {
    std::array<double, 3> beta_scale{1.15, 1.0, 0.9};
    std::array<double, 3> color_cast{0.03, 0.0, -0.02};
    double gamma_jitter = 1.1;
    double noise_sigma = 0.01;

    static DomainShiftParams identity() { return {{1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, 1.0, 0.0}; }
    void validate() const;
};

/// Clean image and scattering parameters behind a hazy image; lets the domain
/// shift re-weight haze per channel rather than only restyling pixels.
struct HazeContext {
    const ImageTensor* clear = nullptr;
    const Tensor* transmission = nullptr;
    double airlight = 1.0;
};

enum class DepthKind { linear_ramp, radial, smooth_noise };
std::string_view to_string(DepthKind k);
/// Throws ParameterError for unknown names.
DepthKind parse_depth_kind(std::string_view s);

inline constexpr double kDefaultDepthMax = 5.0;
inline constexpr double kDefaultTMin = 0.05;

/// exp(-beta * d) elementwise; entries lie in (0, 1].
Tensor transmission(const DepthMap& depth, double beta);

/// t has one channel and either the clear image's batch size or 1.
ImageTensor apply_asm(const ImageTensor& clear, const Tensor& t, double airlight);
/// Inverse of apply_asm with t floored at t_min, clamped to [0, 1].
ImageTensor invert_asm(const ImageTensor& hazy, const Tensor& t, double airlight, double t_min = kDefaultTMin);

DepthMap synth_depth(DepthKind kind, int height, int width, std::uint64_t seed, double d_max = kDefaultDepthMax);

/// Deterministic multi-octave smooth colour texture in [0, 1], (1, 3, H, W).
ImageTensor procedural_clear_image(int height, int width, std::uint64_t seed);

struct DatasetSpec {
    int count = 16;
    std::pair<double, double> beta_range{0.4, 1.6};
    std::pair<double, double> airlight_range{0.7, 1.0};
    int height = 48;
    int width = 48;
    std::uint64_t seed = 0;
    double d_max = kDefaultDepthMax;
    std::optional<DomainShiftParams> domain_shift;
    /// Optional directory of PNGs used instead of procedural textures.
    std::optional<std::filesystem::path> image_dir;

    void validate() const;
};

/// Sorted .png files in `dir`; InputError if the directory is missing or
/// holds none.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

/// Sample i depends only on (spec, i): per-sample seeds are derived from the
/// run seed, so generation order never matters.
HazeSample make_sample(const DatasetSpec& spec, int index, const std::vector<std::filesystem::path>& images = {});
std::vector<HazeSample> make_dataset(const DatasetSpec& spec);

/// Channel-dependent haze re-weighting (needs `context`; skipped otherwise),
/// additive colour cast, gamma jitter and Gaussian noise, clamped to [0, 1].
ImageTensor translate_domain(const ImageTensor& hazy, const DomainShiftParams& params, std::uint64_t seed,
                             const HazeContext* context = nullptr);

/// Gray-world: each channel scaled by mean luma / channel mean.
ImageTensor white_balance(const ImageTensor& image);
/// clamp(mean + 2 (x - mean)) around the per-image mean.
ImageTensor contrast_enhance(const ImageTensor& image);
ImageTensor gamma_correct(const ImageTensor& image, double gamma);
/// Single-channel luma.
ImageTensor gray_scale(const ImageTensor& image);

inline constexpr int kDerivedChannels = 16;
/// [0-2] input, [3-5] white balance, [6-8] contrast, [9-11] gamma 1.5,
/// [12-14] gamma 2.5, [15] gray.
ImageTensor derive_inputs(const ImageTensor& hazy);

}  // namespace dehaze
