#include "dehaze/losses.hpp"

#include <cmath>

#include "dehaze/archive.hpp"
#include "dehaze/error.hpp"
#include "dehaze/ops.hpp"
#include "dehaze/random.hpp"

namespace dehaze {

void LossWeights::validate() const {
    if (!(lambda_p >= 0.0) || !std::isfinite(lambda_p)) throw ParameterError("lambda_p must be a finite value >= 0");
    if (!(lambda_kt >= 0.0) || !std::isfinite(lambda_kt)) throw ParameterError("lambda_kt must be a finite value >= 0");
}

void PerceptualExtractor::wire() {
    int cin = 3;
    for (int s = 0; s < 3; ++s) {
        const std::string name = "stage" + std::to_string(s + 1);
        ConvLayer& c = stages_[static_cast<std::size_t>(s)];
        for (int i = 0; i < static_cast<int>(store_.size()); ++i) {
            if (store_[i].name == name + ".w") c.weight = i;
            if (store_[i].name == name + ".b") c.bias = i;
        }
        const int cout = kWidths[static_cast<std::size_t>(s)];
        if (c.weight < 0 || c.bias < 0 || store_[c.weight].value.shape() != Shape{cout, cin, 3, 3} ||
            store_[c.bias].value.shape() != Shape{cout, 1, 1, 1}) {
            throw InputError("perceptual extractor: missing or misshapen " + name + " weights");
        }
        c.stride = 1;
        c.pad = 1;
        cin = cout;
    }
    store_.set_trainable(false);
}

PerceptualExtractor PerceptualExtractor::fixed_random(std::uint64_t seed) {
    PerceptualExtractor e;
    Rng rng(derive_seed(seed, 0, 0x9e7c));
    int cin = 3;
    for (int s = 0; s < 3; ++s) {
        const int cout = kWidths[static_cast<std::size_t>(s)];
        Tensor w({cout, cin, 3, 3});
        const double bound = std::sqrt(6.0 / (cin * 9.0));
        for (double& v : w.vec()) v = uniform(rng, -bound, bound);
        const std::string name = "stage" + std::to_string(s + 1);
        e.store_.add(name + ".w", std::move(w));
        e.store_.add(name + ".b", Tensor({cout, 1, 1, 1}));
        cin = cout;
    }
    e.store_.fingerprint = "perceptual-extractor";
    e.wire();
    return e;
}

PerceptualExtractor PerceptualExtractor::load(const std::filesystem::path& path) {
    Archive a = read_archive(path);
    PerceptualExtractor e;
    for (auto& [name, t] : a.tensors) e.store_.add(name, std::move(t));
    e.store_.fingerprint = "perceptual-extractor";
    e.wire();
    return e;
}

void PerceptualExtractor::save(const std::filesystem::path& path) const {
    Archive a;
    a.header["kind"] = "perceptual_extractor";
    for (const Parameter& p : store_.all()) a.tensors.emplace_back(p.name, p.value);
    write_archive(path, a);
}

std::vector<Var> PerceptualExtractor::features(Tape& tape, Var x) {
    const Shape s = tape.value(x).shape();
    if (s.c != 3 || s.h % 4 != 0 || s.w % 4 != 0) {
        throw InternalError("perceptual extractor needs (N, 3, 4k, 4m) input, got " + to_string(s));
    }
    std::vector<Var> out;
    Var h = x;
    for (int k = 0; k < 3; ++k) {
        if (k > 0) h = ops::avg_pool2(tape, h);
        h = conv_forward(tape, store_, stages_[static_cast<std::size_t>(k)], h, true);
        out.push_back(h);
    }
    return out;
}

Var fidelity_loss(Tape& tape, Var pred, Var target) { return ops::smooth_l1_mean(tape, pred, target); }

Var perceptual_loss(Tape& tape, Var pred, Var target, PerceptualExtractor& extractor) {
    if (tape.value(pred).shape() != tape.value(target).shape()) {
        throw InputError("perceptual_loss: shape mismatch " + to_string(tape.value(pred).shape()) + " vs " +
                         to_string(tape.value(target).shape()));
    }
    const std::vector<Var> fp = extractor.features(tape, pred);
    const std::vector<Var> ft = extractor.features(tape, target);
    std::vector<std::pair<Var, double>> terms;
    for (std::size_t l = 0; l < fp.size(); ++l) {
        if (tape.value(fp[l]).shape() != tape.value(ft[l]).shape()) throw InternalError("perceptual stage shape mismatch");
        terms.emplace_back(ops::mse_mean(tape, fp[l], ft[l]), 1.0 / static_cast<double>(fp.size()));
    }
    return ops::weighted_sum(tape, terms);
}

Var itkt_loss(Tape& tape, const std::vector<FeatureTap>& student, const std::vector<FeatureTap>& teacher) {
    if (student.empty() || student.size() != teacher.size()) throw InputError("itkt_loss: tap lists differ in length");
    std::vector<std::pair<Var, double>> terms;
    for (std::size_t k = 0; k < student.size(); ++k) {
        const FeatureTap& s = student[k];
        const FeatureTap& t = teacher[k];
        if (s.row != t.row || s.col != t.col) throw InputError("itkt_loss: tap positions differ");
        if (tape.value(s.value).shape() != tape.value(t.value).shape()) throw InputError("itkt_loss: tap shapes differ");
        terms.emplace_back(ops::l1_sum(tape, s.value, t.value), 1.0 / static_cast<double>(student.size()));
    }
    return ops::weighted_sum(tape, terms);
}

Var total_loss(Tape& tape, Var fid, Var perc, Var itkt, const LossWeights& w) {
    w.validate();
    std::vector<std::pair<Var, double>> terms{{fid, 1.0}};
    if (perc.valid()) terms.emplace_back(perc, w.lambda_p);
    if (itkt.valid()) terms.emplace_back(itkt, w.lambda_kt);
    return ops::weighted_sum(tape, terms);
}

double total_loss(double fid, double perc, double itkt, const LossWeights& w) {
    w.validate();
    return fid + w.lambda_p * perc + w.lambda_kt * itkt;
}

}  // namespace dehaze
