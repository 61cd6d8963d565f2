#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dehaze/error.hpp"
#include "dehaze/haze_model.hpp"
#include "dehaze/metrics.hpp"
#include "gradcheck.hpp"

using namespace dehaze;
using dehaze::testing::random_tensor;

TEST_CASE("psnr closed forms") {
    const ImageTensor a({1, 3, 16, 16}, 0.4);
    CHECK(psnr(a, a) == kPsnrCap);
    ImageTensor b = a;
    for (double& v : b.vec()) v += 0.1;
    CHECK(std::abs(psnr(a, b) - 20.0) < 1e-9);
    CHECK(psnr(ImageTensor({1, 3, 4, 4}, 0.0), ImageTensor({1, 3, 4, 4}, 1.0)) == 0.0);
    double last = kPsnrCap;
    for (double d : {0.01, 0.02, 0.05, 0.1, 0.3, 0.9}) {
        ImageTensor c = a;
        for (double& v : c.vec()) v += d;
        CHECK(psnr(a, c) < last);
        last = psnr(a, c);
    }
    CHECK_THROWS_AS(psnr(a, ImageTensor({1, 3, 16, 8})), InputError);
}

TEST_CASE("ssim closed forms") {
    std::mt19937_64 rng(1);
    const ImageTensor a = random_tensor({2, 3, 24, 20}, rng, 0.0, 1.0);
    CHECK(ssim(a, a) == 1.0);
    ImageTensor inv = a;
    for (double& v : inv.vec()) v = 1.0 - v;
    CHECK(ssim(a, inv) < 1.0);

    const double mu1 = 0.5, mu2 = 0.6, c1 = 0.01 * 0.01;
    const double expect = (2 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1);
    CHECK(ssim(ImageTensor({1, 3, 16, 16}, mu1), ImageTensor({1, 3, 16, 16}, mu2)) == doctest::Approx(expect).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(ImageTensor({1, 3, 10, 16}), ImageTensor({1, 3, 10, 16})), InputError);
}

TEST_CASE("metric symmetry") {
    std::mt19937_64 rng(2);
    for (int k = 0; k < 50; ++k) {
        const ImageTensor a = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
        const ImageTensor b = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
        CHECK(psnr(a, b) == psnr(b, a));
        CHECK(ssim(a, b) == ssim(b, a));
        CHECK(ssim(a, b) >= -1.0);
        CHECK(ssim(a, b) <= 1.0);
    }
}

TEST_CASE("report round trip") {
    const MetricReport r = summarize({{"a", 20.0, 0.5}, {"b", 30.0, 0.7}});
    CHECK(r.mean_psnr == 25.0);
    CHECK(r.mean_ssim == doctest::Approx(0.6));
    const auto path = std::filesystem::temp_directory_path() / "dehaze_report_test.jsonl";
    write_report(path, r);
    const MetricReport back = read_report(path);
    REQUIRE(back.images.size() == 2);
    CHECK(back.images[1].id == "b");
    CHECK(back.mean_psnr == r.mean_psnr);
    CHECK(back.mean_ssim == r.mean_ssim);
}
