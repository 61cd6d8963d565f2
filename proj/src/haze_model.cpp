#include "dehaze/haze_model.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>

#include "dehaze/error.hpp"
#include "dehaze/image_io.hpp"
#include "dehaze/random.hpp"

namespace dehaze {
namespace {

void require_rgb(const ImageTensor& image, const char* op) {
    if (image.shape().c != 3) {
        throw InputError(std::string(op) + ": expected 3 channels, got " + to_string(image.shape()));
    }
}

double smoothstep(double x) { return x * x * (3.0 - 2.0 * x); }

// Value noise on a (cells + 1)^2 lattice with smoothstep interpolation,
// roughly in [0, 1].
std::vector<double> value_noise(int height, int width, int cells, Rng& rng) {
    const int lattice = cells + 1;
    std::vector<double> grid(static_cast<std::size_t>(lattice) * lattice);
    for (double& v : grid) v = uniform(rng, 0.0, 1.0);
    std::vector<double> out(static_cast<std::size_t>(height) * width);
    for (int y = 0; y < height; ++y) {
        const double fy = static_cast<double>(y) / std::max(1, height - 1) * cells;
        const int y0 = std::min(static_cast<int>(fy), cells - 1);
        const double ty = smoothstep(fy - y0);
        for (int x = 0; x < width; ++x) {
            const double fx = static_cast<double>(x) / std::max(1, width - 1) * cells;
            const int x0 = std::min(static_cast<int>(fx), cells - 1);
            const double tx = smoothstep(fx - x0);
            const double a = grid[static_cast<std::size_t>(y0) * lattice + x0];
            const double b = grid[static_cast<std::size_t>(y0) * lattice + x0 + 1];
            const double c = grid[static_cast<std::size_t>(y0 + 1) * lattice + x0];
            const double d = grid[static_cast<std::size_t>(y0 + 1) * lattice + x0 + 1];
            out[static_cast<std::size_t>(y) * width + x] = (a + (b - a) * tx) + ((c + (d - c) * tx) - (a + (b - a) * tx)) * ty;
        }
    }
    return out;
}

std::vector<double> octave_noise(int height, int width, Rng& rng) {
    std::vector<double> acc(static_cast<std::size_t>(height) * width, 0.0);
    double weight = 1.0;
    for (int cells : {2, 4, 8, 16}) {
        const auto layer = value_noise(height, width, cells, rng);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * layer[i];
        weight *= 0.5;
    }
    return acc;
}

void normalize_into(std::vector<double>& v, double lo, double hi) {
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double a = *mn, b = *mx;
    const double span = b - a;
    for (double& x : v) x = span > 0.0 ? lo + (hi - lo) * (x - a) / span : 0.5 * (lo + hi);
}

}  // namespace

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw InputError("image directory not found: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (entry.is_regular_file() && ext == ".png") out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw InputError("image directory contains no PNG files: " + dir.string());
    return out;
}

std::string_view to_string(Domain d) { return d == Domain::synthetic ? "synthetic" : "translated"; }

Domain parse_domain(std::string_view s) {
    if (s == "synthetic") return Domain::synthetic;
    if (s == "translated") return Domain::translated;
    throw InputError("unknown domain '" + std::string(s) + "'");
}

std::string_view to_string(DepthKind k) {
    switch (k) {
        case DepthKind::linear_ramp: return "linear_ramp";
        case DepthKind::radial: return "radial";
        case DepthKind::smooth_noise: return "smooth_noise";
    }
    return "?";
}

DepthKind parse_depth_kind(std::string_view s) {
    if (s == "linear_ramp") return DepthKind::linear_ramp;
    if (s == "radial") return DepthKind::radial;
    if (s == "smooth_noise") return DepthKind::smooth_noise;
    throw ParameterError("unknown depth kind '" + std::string(s) + "'");
}

void DepthMap::validate() const {
    const Shape& s = values.shape();
    if (s.n != 1 || s.c != 1 || s.h <= 0 || s.w <= 0) throw InputError("depth map must be (1, 1, H, W), got " + to_string(s));
    for (double v : values.vec()) {
        if (!std::isfinite(v)) throw InputError("depth map contains non-finite values");
        if (v < 0.0) throw InputError("depth map contains negative values");
    }
}

void HazeParams::validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ParameterError("beta must be positive");
    if (!(airlight >= 0.5 && airlight <= 1.0)) throw ParameterError("atmospheric light must lie in [0.5, 1]");
}

void DomainShiftParams::validate() const {
    for (double s : beta_scale) {
        if (!(s > 0.0) || !std::isfinite(s)) throw ParameterError("beta_scale entries must be positive");
    }
    for (double c : color_cast) {
        if (!(c >= -0.1 && c <= 0.1)) throw ParameterError("color_cast entries must lie in [-0.1, 0.1]");
    }
    if (!(gamma_jitter > 0.0) || !std::isfinite(gamma_jitter)) throw ParameterError("gamma_jitter must be positive");
    if (!(noise_sigma >= 0.0 && noise_sigma <= 0.05)) throw ParameterError("noise_sigma must lie in [0, 0.05]");
}

Tensor transmission(const DepthMap& depth, double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ParameterError("transmission: beta must be positive");
    depth.validate();
    Tensor t(depth.values.shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::exp(-beta * depth.values[i]);
    return t;
}

ImageTensor apply_asm(const ImageTensor& clear, const Tensor& t, double airlight) {
    const Shape cs = clear.shape();
    const Shape ts = t.shape();
    if (ts.c != 1 || ts.h != cs.h || ts.w != cs.w || (ts.n != cs.n && ts.n != 1)) {
        throw InputError("apply_asm: transmission " + to_string(ts) + " does not broadcast over " + to_string(cs));
    }
    ImageTensor hazy(cs);
    for (int n = 0; n < cs.n; ++n) {
        const double* tp = t.plane(ts.n == 1 ? 0 : n, 0);
        for (int c = 0; c < cs.c; ++c) {
            const double* jp = clear.plane(n, c);
            double* ip = hazy.plane(n, c);
            for (std::size_t i = 0; i < cs.plane(); ++i) ip[i] = jp[i] * tp[i] + airlight * (1.0 - tp[i]);
        }
    }
    return hazy;
}

ImageTensor invert_asm(const ImageTensor& hazy, const Tensor& t, double airlight, double t_min) {
    if (!(t_min > 0.0 && t_min < 1.0)) throw ParameterError("invert_asm: t_min must lie in (0, 1)");
    const Shape hs = hazy.shape();
    const Shape ts = t.shape();
    if (ts.c != 1 || ts.h != hs.h || ts.w != hs.w || (ts.n != hs.n && ts.n != 1)) {
        throw InputError("invert_asm: transmission " + to_string(ts) + " does not broadcast over " + to_string(hs));
    }
    ImageTensor clear(hs);
    for (int n = 0; n < hs.n; ++n) {
        const double* tp = t.plane(ts.n == 1 ? 0 : n, 0);
        for (int c = 0; c < hs.c; ++c) {
            const double* ip = hazy.plane(n, c);
            double* jp = clear.plane(n, c);
            for (std::size_t i = 0; i < hs.plane(); ++i) {
                const double tt = std::max(tp[i], t_min);
                jp[i] = std::clamp((ip[i] - airlight * (1.0 - tt)) / tt, 0.0, 1.0);
            }
        }
    }
    return clear;
}

DepthMap synth_depth(DepthKind kind, int height, int width, std::uint64_t seed, double d_max) {
    if (height < 8 || width < 8) throw ParameterError("synth_depth: height and width must be at least 8");
    if (!(d_max > 0.0) || !std::isfinite(d_max)) throw ParameterError("synth_depth: d_max must be positive");
    Rng rng(derive_seed(seed, 0, 0xde97));
    DepthMap depth{Tensor({1, 1, height, width})};
    double* d = depth.values.data();
    switch (kind) {
        case DepthKind::linear_ramp:
            for (int y = 0; y < height; ++y) {
                const double v = d_max * static_cast<double>(y) / (height - 1);
                std::fill(d + static_cast<std::size_t>(y) * width, d + static_cast<std::size_t>(y + 1) * width, v);
            }
            break;
        case DepthKind::radial: {
            const double cy = uniform(rng, 0.3, 0.7) * (height - 1);
            const double cx = uniform(rng, 0.3, 0.7) * (width - 1);
            double r_max = 0.0;
            for (int y : {0, height - 1}) {
                for (int x : {0, width - 1}) r_max = std::max(r_max, std::hypot(y - cy, x - cx));
            }
            for (int y = 0; y < height; ++y) {
                for (int x = 0; x < width; ++x) d[static_cast<std::size_t>(y) * width + x] = d_max * std::hypot(y - cy, x - cx) / r_max;
            }
            break;
        }
        case DepthKind::smooth_noise: {
            auto noise = octave_noise(height, width, rng);
            normalize_into(noise, 0.0, d_max);
            std::copy(noise.begin(), noise.end(), d);
            break;
        }
    }
    return depth;
}

ImageTensor procedural_clear_image(int height, int width, std::uint64_t seed) {
    if (height < 1 || width < 1) throw ParameterError("procedural_clear_image: empty size");
    Rng rng(derive_seed(seed, 0, 0xc1ea));
    // A shared structure layer gives correlated colour edges; per-channel
    // layers add chroma variation.
    auto shared = octave_noise(height, width, rng);
    normalize_into(shared, 0.0, 1.0);
    ImageTensor img({1, 3, height, width});
    for (int c = 0; c < 3; ++c) {
        auto own = octave_noise(height, width, rng);
        normalize_into(own, 0.0, 1.0);
        const double mix = uniform(rng, 0.2, 0.6);
        const double lo = uniform(rng, 0.02, 0.3);
        const double hi = uniform(rng, 0.7, 0.98);
        std::vector<double> v(own.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1.0 - mix) * shared[i] + mix * own[i];
        normalize_into(v, lo, hi);
        std::copy(v.begin(), v.end(), img.plane(0, c));
    }
    return img;
}

void DatasetSpec::validate() const {
    if (count < 1) throw ParameterError("dataset size must be at least 1");
    if (!(beta_range.first > 0.0) || beta_range.second < beta_range.first) {
        throw ParameterError("beta range must be positive and ordered");
    }
    if (!(airlight_range.first >= 0.5) || !(airlight_range.second <= 1.0) || airlight_range.second < airlight_range.first) {
        throw ParameterError("atmospheric light range must be an ordered sub-interval of [0.5, 1]");
    }
    if (height < 8 || width < 8) throw ParameterError("dataset images must be at least 8x8");
    if (domain_shift) domain_shift->validate();
}

HazeSample make_sample(const DatasetSpec& spec, int index, const std::vector<std::filesystem::path>& images) {
    const std::uint64_t sample_seed = derive_seed(spec.seed, static_cast<std::uint64_t>(index), 0x5a3e);
    Rng rng(sample_seed);
    HazeSample s;
    char id[32];
    std::snprintf(id, sizeof(id), "%05d", index);
    s.id = id;
    s.seed = sample_seed;
    s.beta = uniform(rng, spec.beta_range.first, std::nextafter(spec.beta_range.second, 1e300));
    s.beta = std::min(s.beta, spec.beta_range.second);
    s.airlight = std::min(uniform(rng, spec.airlight_range.first, std::nextafter(spec.airlight_range.second, 1e300)),
                          spec.airlight_range.second);
    const auto kind = static_cast<DepthKind>(rng() % 3);
    const std::uint64_t depth_seed = rng();
    const std::uint64_t texture_seed = rng();

    if (images.empty()) {
        s.clear = procedural_clear_image(spec.height, spec.width, texture_seed);
    } else {
        const ImageTensor full = read_png(images[static_cast<std::size_t>(index) % images.size()]);
        const Shape fs = full.shape();
        if (fs.h < spec.height || fs.w < spec.width) {
            throw InputError("source image smaller than the requested sample size");
        }
        const int y0 = static_cast<int>(texture_seed % static_cast<std::uint64_t>(fs.h - spec.height + 1));
        const int x0 = static_cast<int>((texture_seed >> 32) % static_cast<std::uint64_t>(fs.w - spec.width + 1));
        s.clear = crop(full, y0, x0, spec.height, spec.width);
    }
    s.depth = synth_depth(kind, spec.height, spec.width, depth_seed, spec.d_max);
    s.transmission = transmission(s.depth, s.beta);
    s.hazy = apply_asm(s.clear, s.transmission, s.airlight);
    if (spec.domain_shift) {
        const HazeContext ctx{&s.clear, &s.transmission, s.airlight};
        s.hazy = translate_domain(s.hazy, *spec.domain_shift, rng(), &ctx);
        s.domain = Domain::translated;
    }
    return s;
}

std::vector<HazeSample> make_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::vector<std::filesystem::path> images;
    if (spec.image_dir) images = list_pngs(*spec.image_dir);
    std::vector<HazeSample> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) out.push_back(make_sample(spec, i, images));
    return out;
}

ImageTensor translate_domain(const ImageTensor& hazy, const DomainShiftParams& params, std::uint64_t seed,
                             const HazeContext* context) {
    params.validate();
    require_rgb(hazy, "translate_domain");
    const Shape s = hazy.shape();
    ImageTensor out = hazy;
    if (context && context->clear && context->transmission) {
        const Tensor& t = *context->transmission;
        if (context->clear->shape() != s || t.shape().h != s.h || t.shape().w != s.w) {
            throw InputError("translate_domain: context shapes do not match the hazy image");
        }
        for (int n = 0; n < s.n; ++n) {
            const double* tp = t.plane(t.shape().n == 1 ? 0 : n, 0);
            for (int c = 0; c < 3; ++c) {
                const double k = params.beta_scale[static_cast<std::size_t>(c)];
                if (k == 1.0) continue;
                const double* jp = context->clear->plane(n, c);
                double* op = out.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    // exp(-k beta d) = t^k
                    const double tc = std::pow(tp[i], k);
                    op[i] = jp[i] * tc + context->airlight * (1.0 - tc);
                }
            }
        }
    }
    Rng rng(derive_seed(seed, 0, 0x7a45));
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < 3; ++c) {
            const double cast = params.color_cast[static_cast<std::size_t>(c)];
            double* op = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                double v = std::clamp(op[i] + cast, 0.0, 1.0);
                if (params.gamma_jitter != 1.0) v = std::pow(v, params.gamma_jitter);
                if (params.noise_sigma > 0.0) v += gaussian(rng, params.noise_sigma);
                op[i] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

ImageTensor white_balance(const ImageTensor& image) {
    require_rgb(image, "white_balance");
    const Shape s = image.shape();
    ImageTensor out(s);
    for (int n = 0; n < s.n; ++n) {
        std::array<double, 3> mean{};
        for (int c = 0; c < 3; ++c) {
            const double* p = image.plane(n, c);
            double acc = 0.0;
            for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
            mean[static_cast<std::size_t>(c)] = acc / static_cast<double>(s.plane());
        }
        const double gray = luma(mean[0], mean[1], mean[2]);
        for (int c = 0; c < 3; ++c) {
            const double m = mean[static_cast<std::size_t>(c)];
            const double gain = m > 0.0 ? gray / m : 1.0;
            const double* p = image.plane(n, c);
            double* q = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) q[i] = std::clamp(p[i] * gain, 0.0, 1.0);
        }
    }
    return out;
}

ImageTensor contrast_enhance(const ImageTensor& image) {
    const Shape s = image.shape();
    ImageTensor out(s);
    for (int n = 0; n < s.n; ++n) {
        const double* p = image.plane(n, 0);
        const std::size_t len = s.item();
        const auto [mn, mx] = std::minmax_element(p, p + len);
        double* q = out.plane(n, 0);
        if (*mn == *mx) {
            std::copy(p, p + len, q);  // flat image: nothing to stretch
            continue;
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < len; ++i) acc += p[i];
        const double mean = acc / static_cast<double>(len);
        for (std::size_t i = 0; i < len; ++i) q[i] = std::clamp(mean + 2.0 * (p[i] - mean), 0.0, 1.0);
    }
    return out;
}

ImageTensor gamma_correct(const ImageTensor& image, double gamma) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ParameterError("gamma_correct: gamma must be positive");
    ImageTensor out = image;
    if (gamma == 1.0) return out;
    for (double& v : out.vec()) v = std::pow(std::clamp(v, 0.0, 1.0), gamma);
    return out;
}

ImageTensor gray_scale(const ImageTensor& image) {
    require_rgb(image, "gray_scale");
    const Shape s = image.shape();
    ImageTensor out({s.n, 1, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        const double* r = image.plane(n, 0);
        const double* g = image.plane(n, 1);
        const double* b = image.plane(n, 2);
        double* q = out.plane(n, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) q[i] = std::clamp(luma(r[i], g[i], b[i]), 0.0, 1.0);
    }
    return out;
}

ImageTensor derive_inputs(const ImageTensor& hazy) {
    require_rgb(hazy, "derive_inputs");
    const Shape s = hazy.shape();
    const ImageTensor parts[] = {hazy, white_balance(hazy), contrast_enhance(hazy), gamma_correct(hazy, 1.5),
                                 gamma_correct(hazy, 2.5), gray_scale(hazy)};
    ImageTensor out({s.n, kDerivedChannels, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        double* dst = out.plane(n, 0);
        for (const ImageTensor& p : parts) dst = std::copy_n(p.plane(n, 0), p.shape().item(), dst);
    }
    return out;
}

}  // namespace dehaze
