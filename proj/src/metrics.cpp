#include "dehaze/metrics.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "dehaze/error.hpp"
#include "dehaze/haze_model.hpp"

namespace dehaze {
namespace {

void require_same(const ImageTensor& a, const ImageTensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InputError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    if (a.empty()) throw InputError(std::string(op) + ": empty image");
}

std::vector<double> luma_plane(const ImageTensor& img, int n) {
    const Shape s = img.shape();
    std::vector<double> out(s.plane());
    if (s.c == 1) {
        std::copy_n(img.plane(n, 0), s.plane(), out.begin());
        return out;
    }
    if (s.c != 3) throw InputError("ssim: expected 1 or 3 channels, got " + to_string(s));
    const double* r = img.plane(n, 0);
    const double* g = img.plane(n, 1);
    const double* b = img.plane(n, 2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = luma(r[i], g[i], b[i]);
    return out;
}

// Separable valid-mode Gaussian filter.
std::vector<double> filter_valid(const std::vector<double>& x, int h, int w, const std::vector<double>& k) {
    const int win = static_cast<int>(k.size());
    const int oh = h - win + 1, ow = w - win + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int xo = 0; xo < ow; ++xo) {
            double acc = 0.0;
            for (int t = 0; t < win; ++t) acc += k[static_cast<std::size_t>(t)] * x[static_cast<std::size_t>(y) * w + xo + t];
            tmp[static_cast<std::size_t>(y) * ow + xo] = acc;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int yo = 0; yo < oh; ++yo) {
        for (int xo = 0; xo < ow; ++xo) {
            double acc = 0.0;
            for (int t = 0; t < win; ++t) acc += k[static_cast<std::size_t>(t)] * tmp[static_cast<std::size_t>(yo + t) * ow + xo];
            out[static_cast<std::size_t>(yo) * ow + xo] = acc;
        }
    }
    return out;
}

}  // namespace

double psnr(const ImageTensor& a, const ImageTensor& b, double peak, double cap) {
    require_same(a, b, "psnr");
    if (!(peak > 0.0)) throw ParameterError("psnr: peak must be positive");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(a.size());
    if (mse == 0.0) return cap;
    return std::min(cap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const ImageTensor& a, const ImageTensor& b, const SsimOptions& o) {
    require_same(a, b, "ssim");
    const Shape s = a.shape();
    if (o.window < 1 || o.window % 2 == 0 || !(o.sigma > 0.0)) throw ParameterError("ssim: bad window or sigma");
    if (s.h < o.window || s.w < o.window) {
        throw InputError("ssim: image " + to_string(s) + " smaller than the " + std::to_string(o.window) + "-pixel window");
    }
    std::vector<double> k(static_cast<std::size_t>(o.window));
    double ksum = 0.0;
    for (int t = 0; t < o.window; ++t) {
        const double d = t - o.window / 2;
        k[static_cast<std::size_t>(t)] = std::exp(-d * d / (2.0 * o.sigma * o.sigma));
        ksum += k[static_cast<std::size_t>(t)];
    }
    for (double& v : k) v /= ksum;
    const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
    const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);

    double total = 0.0;
    for (int n = 0; n < s.n; ++n) {
        const std::vector<double> x = luma_plane(a, n);
        const std::vector<double> y = luma_plane(b, n);
        std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter_valid(x, s.h, s.w, k);
        const auto my = filter_valid(y, s.h, s.w, k);
        const auto sxx = filter_valid(xx, s.h, s.w, k);
        const auto syy = filter_valid(yy, s.h, s.w, k);
        const auto sxy = filter_valid(xy, s.h, s.w, k);
        double acc = 0.0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i];
            const double vy = syy[i] - my[i] * my[i];
            const double cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / static_cast<double>(mx.size());
    }
    return total / s.n;
}

MetricReport summarize(std::vector<ImageMetric> rows, double psnr_cap, int ssim_window) {
    MetricReport r;
    r.images = std::move(rows);
    r.psnr_cap = psnr_cap;
    r.ssim_window = ssim_window;
    for (const ImageMetric& m : r.images) {
        r.mean_psnr += m.psnr;
        r.mean_ssim += m.ssim;
    }
    if (!r.images.empty()) {
        r.mean_psnr /= static_cast<double>(r.images.size());
        r.mean_ssim /= static_cast<double>(r.images.size());
    }
    return r;
}

void write_report(const std::filesystem::path& path, const MetricReport& report) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    for (const ImageMetric& m : report.images) os << nlohmann::json{{"id", m.id}, {"psnr", m.psnr}, {"ssim", m.ssim}}.dump() << '\n';
    os << nlohmann::json{{"summary", true},
                         {"count", report.images.size()},
                         {"mean_psnr", report.mean_psnr},
                         {"mean_ssim", report.mean_ssim},
                         {"psnr_cap", report.psnr_cap},
                         {"ssim_window", report.ssim_window}}
              .dump()
       << '\n';
    if (!os) throw IoError("write failed for " + path.string());
}

MetricReport read_report(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    MetricReport r;
    std::string line;
    try {
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            if (j.value("summary", false)) {
                r.mean_psnr = j.at("mean_psnr").get<double>();
                r.mean_ssim = j.at("mean_ssim").get<double>();
                r.psnr_cap = j.at("psnr_cap").get<double>();
                r.ssim_window = j.at("ssim_window").get<int>();
            } else {
                r.images.push_back({j.at("id").get<std::string>(), j.at("psnr").get<double>(), j.at("ssim").get<double>()});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": malformed report: " + e.what());
    }
    return r;
}

}  // namespace dehaze
