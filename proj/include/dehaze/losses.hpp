#pragma once

// Training objective: smooth-L1 fidelity, multi-stage perceptual distance and
// the teacher-feature mimicking (ITKT) term, combined as
//     L = L_fid + lambda_P * L_P + lambda_KT * L_KT.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "dehaze/autograd.hpp"
#include "dehaze/network.hpp"

namespace dehaze {

struct LossWeights {
    double lambda_p = 0.04;
    double lambda_kt = 0.01;
    /// Throws ParameterError on negative or non-finite weights.
    void validate() const;
};

/// Frozen three-stage feature extractor: conv3x3+ReLU stages at strides
/// 1, 2 and 4 (2x2 average pooling in between) with 64, 128, 256 channels.
class PerceptualExtractor {
public:
    static constexpr std::array<int, 3> kWidths{64, 128, 256};

    /// Deterministic He-uniform weights, zero biases.
    static PerceptualExtractor fixed_random(std::uint64_t seed);
    /// Weights named stage{1,2,3}.{w,b} in the archive format.
    static PerceptualExtractor load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    /// Features of every stage; x is (N, 3, H, W) with H, W divisible by 4.
    std::vector<Var> features(Tape& tape, Var x);

    ParameterStore& params() { return store_; }
    const ParameterStore& params() const { return store_; }

private:
    PerceptualExtractor() = default;
    void wire();

    ParameterStore store_;
    std::array<ConvLayer, 3> stages_{};
};

/// Mean smooth-L1 over every pixel-channel value.
Var fidelity_loss(Tape& tape, Var pred, Var target);
/// (1/3) sum_l ||phi_l(pred) - phi_l(target)||^2 / (C_l H_l W_l), averaged
/// over the batch.
Var perceptual_loss(Tape& tape, Var pred, Var target, PerceptualExtractor& extractor);
/// (1/3) sum_j ||s_j - t_j||_1 over aligned taps (element sums, batch summed).
Var itkt_loss(Tape& tape, const std::vector<FeatureTap>& student, const std::vector<FeatureTap>& teacher);
Var total_loss(Tape& tape, Var fid, Var perc, Var itkt, const LossWeights& w);
double total_loss(double fid, double perc, double itkt, const LossWeights& w);

}  // namespace dehaze
