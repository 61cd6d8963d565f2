#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dehaze/error.hpp"
#include "dehaze/network.hpp"
#include "dehaze/ops.hpp"
#include "gradcheck.hpp"

using namespace dehaze;
using dehaze::testing::random_tensor;

namespace {

// Closed-form parameter counts, written independently of the builder.
long conv_count(long cin, long cout, long k) { return cin * cout * k * k + cout; }

long rdb_count(long c, long g, long convs) {
    long n = 0;
    for (long k = 0; k < convs - 1; ++k) n += conv_count(c + k * g, g, 3);
    return n + conv_count(c + (convs - 1) * g, c, 1);
}

long cab_count(long c, long r) {
    const long h = std::max(c / r, 2L);
    return conv_count(c, h, 1) + conv_count(h, c, 1);
}

long expected_count(const GridConfig& cfg) {
    const auto ch = [&](int i) { return static_cast<long>(cfg.scale_channels[static_cast<std::size_t>(i)]); };
    const long g = cfg.growth_rate, n = cfg.rdb_convs;
    const Variant v = cfg.variant;
    long total = 0;
    if (v != Variant::original_inputs && v != Variant::derived_inputs) total += conv_count(3, ch(0), 3) + rdb_count(ch(0), g, n);
    if (v != Variant::no_post) total += rdb_count(ch(0), g, n);
    total += conv_count(ch(0), cfg.output_head == OutputHead::direct ? 3 : 2, 3);
    long down = 0, up = 0;
    for (int i = 1; i < cfg.rows; ++i) {
        down += conv_count(ch(i - 1), ch(i), 3);
        up += conv_count(ch(i), ch(i - 1), 4);
    }
    if (v == Variant::ednet) return total + down + up + cfg.rdbs_per_row * rdb_count(ch(cfg.rows - 1), g, n);

    for (int i = 0; i < cfg.rows; ++i) total += cfg.rdbs_per_row * rdb_count(ch(i), g, n);
    const int half = cfg.cols / 2;
    const int exchange_cols = v == Variant::msnet ? 1 : half;
    total += exchange_cols * (down + up);
    // Fused junctions: the DB side excludes column 0, the UB side has all.
    const int db_fused = v == Variant::msnet ? 0 : half - 1;
    const int ub_fused = v == Variant::msnet ? 1 : half;
    long scab = 0;
    auto one_scab = [&](long c) {
        long s = 0;
        if (v != Variant::no_scab && v != Variant::no_cab) s += 2 * cab_count(c, cfg.cab_reduction);
        if (v != Variant::no_scab && v != Variant::no_sab) s += conv_count(2, 1, cfg.sab_kernel);
        return s;
    };
    for (int i = 1; i < cfg.rows; ++i) scab += db_fused * one_scab(ch(i));
    for (int i = 0; i + 1 < cfg.rows; ++i) scab += ub_fused * one_scab(ch(i));
    return total + scab;
}

void zero_all(ParameterStore& store) {
    for (Parameter& p : store.all()) p.value.fill(0.0);
}

}  // namespace

TEST_CASE("config validation and fingerprint") {
    GridConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.fingerprint().size() == 16);
    CHECK(c.fingerprint() == GridConfig{}.fingerprint());
    GridConfig other = c;
    other.variant = Variant::no_scab;
    CHECK(other.fingerprint() != c.fingerprint());

    auto broken = [](auto mutate) {
        GridConfig g;
        mutate(g);
        return g;
    };
    CHECK_THROWS_AS(broken([](GridConfig& g) { g.cols = 5; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](GridConfig& g) { g.scale_channels = {16, 32}; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](GridConfig& g) { g.scale_channels = {16, 30, 60}; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](GridConfig& g) { g.rdbs_per_row = 4; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](GridConfig& g) { g.sab_kernel = 6; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](GridConfig& g) { g.growth_rate = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(build(broken([](GridConfig& g) { g.sab_kernel = 4; }), 0), ConfigError);
    CHECK_THROWS_AS(parse_variant("bogus"), ConfigError);
    for (Variant v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
}

TEST_CASE("parameter counts match the closed form") {
    for (GridConfig base : {GridConfig{}, GridConfig::tiny()}) {
        for (Variant v : all_variants()) {
            if (v == Variant::derived_inputs && base.base_channels() != kDerivedChannels) continue;
            for (OutputHead head : {OutputHead::direct, OutputHead::indirect}) {
                GridConfig c = base;
                c.variant = v;
                c.output_head = head;
                CAPTURE(to_string(v));
                CHECK(static_cast<long>(param_count(build(c, 1))) == expected_count(c));
            }
        }
    }
    // One RDB at C = g = 16.
    long sum = 0;
    for (int i = 0; i < 4; ++i) sum += 9 * (16 + 16 * i) * 16;
    CHECK(rdb_count(16, 16, 5) == sum + 16 * 4 + (16 + 64) * 16 + 16);
}

TEST_CASE("default model size and variant ordering") {
    const std::size_t full = param_count(build(GridConfig{}, 0));
    CHECK(static_cast<double>(full) > 0.85 * 961000.0);
    CHECK(static_cast<double>(full) < 1.15 * 961000.0);
    auto count = [](Variant v) {
        GridConfig c;
        c.variant = v;
        return param_count(build(c, 0));
    };
    CHECK(full - count(Variant::no_scab) < 25000);
    CHECK(full > count(Variant::no_scab));
    CHECK(count(Variant::ednet) < count(Variant::msnet));
    CHECK(count(Variant::msnet) < full);
    CHECK(count(Variant::no_post) < full);

    GridConfig ind;
    ind.output_head = OutputHead::indirect;
    CHECK(full - param_count(build(ind, 0)) == static_cast<std::size_t>(conv_count(16, 3, 3) - conv_count(16, 2, 3)));
}

TEST_CASE("build is deterministic per seed") {
    const Model a = build(GridConfig::tiny(), 5);
    const Model b = build(GridConfig::tiny(), 5);
    const Model c = build(GridConfig::tiny(), 6);
    CHECK(a.params.value_hash() == b.params.value_hash());
    CHECK(a.params.value_hash() != c.params.value_hash());
    for (const Parameter& p : a.params.all()) {
        if (p.name.ends_with(".b")) CHECK(p.value.max() == 0.0);
    }
}

TEST_CASE("rdb residual identity and shapes") {
    Model m = build(GridConfig::tiny(), 1);
    const RdbLayer& rdb = *m.pre_rdb;
    std::mt19937_64 rng(1);
    for (auto [h, w] : {std::pair{4, 4}, std::pair{7, 13}}) {
        Tape tape(false);
        const Tensor x = random_tensor({2, 4, h, w}, rng);
        const Var y = rdb_forward(tape, m.params, rdb, tape.constant(x));
        CHECK(tape.value(y).shape() == x.shape());
    }
    zero_all(m.params);
    Tape tape(false);
    const Tensor x = random_tensor({1, 4, 6, 6}, rng);
    CHECK(tape.value(rdb_forward(tape, m.params, rdb, tape.constant(x))) == x);
    CHECK_THROWS_AS(rdb_forward(tape, m.params, rdb, tape.constant(Tensor({1, 5, 6, 6}))), InputError);
}

TEST_CASE("down and up blocks") {
    Model m = build(GridConfig{}, 2);
    const ConvLayer db1 = *m.grid[1][0].vertical;
    const ConvLayer db2 = *m.grid[2][0].vertical;
    const ConvLayer ub2 = *m.grid[1][5].vertical;
    const ConvLayer ub1 = *m.grid[0][5].vertical;
    std::mt19937_64 rng(2);
    Tape tape(false);
    const Var x = tape.constant(random_tensor({2, 16, 32, 32}, rng));
    const Var d1 = conv_forward(tape, m.params, db1, x, true);
    CHECK(tape.value(d1).shape() == Shape{2, 32, 16, 16});
    const Var d2 = conv_forward(tape, m.params, db2, d1, true);
    CHECK(tape.value(d2).shape() == Shape{2, 64, 8, 8});
    const Var u = conv_forward(tape, m.params, ub2, d2, true);
    CHECK(tape.value(u).shape() == Shape{2, 32, 16, 16});
    CHECK(tape.value(conv_forward(tape, m.params, ub1, u, true)).shape() == tape.value(x).shape());
    CHECK_THROWS_AS(conv_forward(tape, m.params, db1, tape.constant(Tensor({1, 16, 5, 6})), true), InputError);
}

TEST_CASE("downsampling gradient on a 4x4 input") {
    Model m = build(GridConfig::tiny(), 3);
    dehaze::testing::randomize_biases(m.params, 3);
    const ConvLayer db = *m.grid[1][0].vertical;
    std::mt19937_64 rng(3);
    const Tensor x = random_tensor({1, 4, 4, 4}, rng);
    const double err = dehaze::testing::max_gradient_error(
        [&](Tape& t, const std::vector<Var>& in) {
            return ops::mse_mean(t, conv_forward(t, m.params, db, in[0], true), t.constant(Tensor({1, 8, 2, 2}, 0.1)));
        },
        {x});
    CHECK(err < 1e-6);
    const auto rep = dehaze::testing::param_gradient_error(
        m.params,
        [&](Tape& t) {
            return ops::mse_mean(t, conv_forward(t, m.params, db, t.constant(x), true), t.constant(Tensor({1, 8, 2, 2}, 0.1)));
        },
        1000, 3, 1e-5);
    CHECK(rep.worst < 1e-6);
}

TEST_CASE("upsampling constant-input audit") {
    // Stride-2 transposed 4x4 kernels split output pixels into four parity
    // classes, each summing a different 2x2 subset of taps: a constant input
    // therefore yields a 2-periodic (checkerboard) response away from the
    // borders, and a spatially constant one exactly when every class has the
    // same tap sum (e.g. a separable [1 3 3 1] kernel).
    Model m = build(GridConfig::tiny(), 4);
    const ConvLayer ub = *m.grid[0][5].vertical;
    Tape tape(false);
    const Var x = tape.constant(Tensor({1, 8, 8, 8}, 0.7));
    const Tensor y = tape.value(conv_forward(tape, m.params, ub, x, false));
    REQUIRE(y.shape() == Shape{1, 4, 16, 16});
    for (int c = 0; c < 4; ++c) {
        for (int yy = 2; yy < 14; ++yy) {
            for (int xx = 2; xx < 14; ++xx) CHECK(y.at(0, c, yy, xx) == doctest::Approx(y.at(0, c, yy % 2 + 2, xx % 2 + 2)).epsilon(1e-13));
        }
    }

    Tensor& w = m.params[ub.weight].value;
    const double taps[4] = {1.0, 3.0, 3.0, 1.0};
    for (int ci = 0; ci < 8; ++ci) {
        for (int co = 0; co < 4; ++co) {
            for (int ky = 0; ky < 4; ++ky) {
                for (int kx = 0; kx < 4; ++kx) w.at(ci, co, ky, kx) = taps[ky] * taps[kx] / 64.0 * (co + 1);
            }
        }
    }
    Tape tape2(false);
    const Tensor z = tape2.value(conv_forward(tape2, m.params, ub, tape2.constant(Tensor({1, 8, 8, 8}, 0.7)), false));
    for (int c = 0; c < 4; ++c) {
        for (int yy = 1; yy < 15; ++yy) {
            for (int xx = 1; xx < 15; ++xx) CHECK(z.at(0, c, yy, xx) == doctest::Approx(z.at(0, c, 1, 1)).epsilon(1e-13));
        }
    }
}

TEST_CASE("attention zero-weight cases and ranges") {
    Model m = build(GridConfig::tiny(), 5);
    const ScabLayer scab = m.grid[0][5].scab;
    REQUIRE(scab.cab_h);
    REQUIRE(scab.sab);
    std::mt19937_64 rng(5);
    const Tensor f = random_tensor({2, 4, 8, 8}, rng, -3.0, 3.0);
    const Tensor g = random_tensor({2, 4, 8, 8}, rng, -3.0, 3.0);
    {
        Tape t(false);
        const Tensor coeff = t.value(cab_coefficients(t, m.params, *scab.cab_h, t.constant(f)));
        CHECK(coeff.min() > 0.0);
        CHECK(coeff.max() < 1.0);
        const Tensor map = t.value(sab_map(t, m.params, *scab.sab, t.constant(f)));
        CHECK(map.shape() == Shape{2, 1, 8, 8});
        CHECK(map.min() > 0.0);
        CHECK(map.max() < 1.0);
    }
    zero_all(m.params);
    Tape t(false);
    Tensor half_f = f;
    for (double& v : half_f.vec()) v *= 0.5;
    CHECK(t.value(cab_forward(t, m.params, *scab.cab_h, t.constant(f))) == half_f);
    CHECK(t.value(sab_forward(t, m.params, *scab.sab, t.constant(f))) == half_f);
    const Tensor fused = t.value(scab_fuse(t, m.params, scab, t.constant(f), t.constant(g)));
    Tensor expect(f.shape());
    for (std::size_t i = 0; i < f.size(); ++i) expect[i] = 0.25 * (f[i] + g[i]);
    CHECK(max_abs_diff(fused, expect) < 1e-15);
    CHECK_THROWS_AS(scab_fuse(t, m.params, scab, t.constant(f), t.constant(Tensor({2, 4, 8, 6}))), InputError);
}

TEST_CASE("attention permutation invariance") {
    Model m = build(GridConfig::tiny(), 6);
    dehaze::testing::randomize_biases(m.params, 6, 0.5);
    const ScabLayer scab = m.grid[1][4].scab;
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor f = random_tensor({1, 8, 6, 6}, rng, -2.0, 2.0);
        std::vector<std::size_t> perm(36);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor spatial(f.shape());
        for (int c = 0; c < 8; ++c) {
            for (std::size_t i = 0; i < 36; ++i) spatial.plane(0, c)[i] = f.plane(0, c)[perm[i]];
        }
        std::vector<int> cperm(8);
        std::iota(cperm.begin(), cperm.end(), 0);
        std::shuffle(cperm.begin(), cperm.end(), rng);
        Tensor channel(f.shape());
        for (int c = 0; c < 8; ++c) std::copy_n(f.plane(0, cperm[static_cast<std::size_t>(c)]), 36, channel.plane(0, c));

        Tape t(false);
        CHECK(t.value(cab_coefficients(t, m.params, *scab.cab_h, t.constant(f))) ==
              t.value(cab_coefficients(t, m.params, *scab.cab_h, t.constant(spatial))));
        CHECK(t.value(sab_map(t, m.params, *scab.sab, t.constant(f))) == t.value(sab_map(t, m.params, *scab.sab, t.constant(channel))));
    }
}

TEST_CASE("scab symmetry with tied weights") {
    Model m = build(GridConfig::tiny(), 7);
    ScabLayer tied = m.grid[0][4].scab;
    tied.cab_v = tied.cab_h;
    std::mt19937_64 rng(7);
    const Tensor f = random_tensor({1, 4, 8, 8}, rng);
    const Tensor zero(f.shape());
    Tape t(false);
    CHECK(t.value(scab_fuse(t, m.params, tied, t.constant(f), t.constant(zero))) ==
          t.value(scab_fuse(t, m.params, tied, t.constant(zero), t.constant(f))));
}

TEST_CASE("forward shapes, taps and determinism") {
    std::mt19937_64 rng(8);
    const ImageTensor x = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
    for (Variant v : all_variants()) {
        if (v == Variant::derived_inputs) continue;
        GridConfig c = GridConfig::tiny();
        c.variant = v;
        Model m = build(c, 8);
        const ForwardResult r = forward(m, x, true);
        CAPTURE(to_string(v));
        CHECK(r.output.shape() == Shape{2, 3, 16, 16});
        CHECK(r.output.min() >= 0.0);
        CHECK(r.output.max() <= 1.0);
        CHECK(r.output == forward(m, x).output);
        if (v == Variant::ednet) {
            CHECK(r.taps.empty());
        } else {
            REQUIRE(r.taps.size() == 3);
            for (int k = 0; k < 3; ++k) {
                CHECK(r.taps[static_cast<std::size_t>(k)].first == std::pair{0, 3 + k});
                CHECK(r.taps[static_cast<std::size_t>(k)].second.shape() == Shape{2, 4, 16, 16});
            }
        }
    }
    GridConfig d;
    d.variant = Variant::derived_inputs;
    Model md = build(d, 8);
    CHECK(forward(md, x).output.shape() == Shape{2, 3, 16, 16});
    CHECK(forward(md, derive_inputs(x)).output == forward(md, x).output);

    Model full = build(GridConfig{}, 0);
    const ForwardResult r = forward(full, slice_batch(x, 0), true);
    REQUIRE(r.taps.size() == 3);
    for (const auto& tap : r.taps) CHECK(tap.second.shape().c == 16);
}

TEST_CASE("arbitrary sizes via pad and crop") {
    Model m = build(GridConfig::tiny(), 9);
    std::mt19937_64 rng(9);
    const ImageTensor x = random_tensor({1, 3, 13, 18}, rng, 0.0, 1.0);
    CHECK(forward(m, x).output.shape() == Shape{1, 3, 13, 18});
    Tape t(false);
    CHECK_THROWS_AS(forward_graph(t, m, t.constant(x), false), InputError);
    CHECK_THROWS_AS(forward(m, ImageTensor({1, 4, 16, 16})), InputError);
}

TEST_CASE("learned inputs") {
    std::mt19937_64 rng(10);
    const ImageTensor x = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
    Model m = build(GridConfig{}, 10);
    CHECK(learned_inputs(m, x).shape() == Shape{1, 16, 16, 16});
    GridConfig o;
    o.variant = Variant::original_inputs;
    Model mo = build(o, 10);
    const Tensor li = learned_inputs(mo, x);
    CHECK(slice_channels(li, 0, 3) == x);
    CHECK(slice_channels(li, 3, 13).max() == 0.0);
    CHECK(slice_channels(li, 3, 13).min() == 0.0);
}

TEST_CASE("indirect head") {
    GridConfig c = GridConfig::tiny();
    c.output_head = OutputHead::indirect;
    Model m = build(c, 11);
    std::mt19937_64 rng(11);
    const ImageTensor x = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
    const IndirectResult r = forward_indirect(m, x);
    CHECK(r.transmission.shape() == Shape{2, 1, 16, 16});
    CHECK(r.transmission.min() > 0.0);
    CHECK(r.transmission.max() < 1.0);
    REQUIRE(r.airlight.size() == 2);
    for (int n = 0; n < 2; ++n) {
        CHECK(slice_batch(r.dehazed, n) ==
              invert_asm(slice_batch(x, n), slice_batch(r.transmission, n), r.airlight[static_cast<std::size_t>(n)]));
    }
    Model direct = build(GridConfig::tiny(), 11);
    CHECK_THROWS_AS(forward_indirect(direct, x), ConfigError);
}

TEST_CASE("forward gradient on the tiny config") {
    for (Variant v : {Variant::full, Variant::ednet, Variant::msnet, Variant::no_cab, Variant::no_sab}) {
        GridConfig c = GridConfig::tiny();
        c.variant = v;
        Model m = build(c, 12);
        dehaze::testing::randomize_biases(m.params, 12);
        std::mt19937_64 rng(12);
        const Tensor x = random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
        const Tensor y = random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
        const auto rep = dehaze::testing::param_gradient_error(
            m.params,
            [&](Tape& t) { return ops::mse_mean(t, forward_graph(t, m, t.constant(x), false).output, t.constant(y)); }, 2,
            12);
        CAPTURE(to_string(v));
        CAPTURE(rep.worst_param);
        CHECK(rep.worst < 1e-4);
    }
}
