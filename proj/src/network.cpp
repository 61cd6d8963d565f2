#include "dehaze/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dehaze/error.hpp"
#include "dehaze/ops.hpp"
#include "dehaze/random.hpp"

namespace dehaze {

namespace {

constexpr std::pair<Variant, std::string_view> kVariantNames[] = {
    {Variant::full, "full"},
    {Variant::ednet, "ednet"},
    {Variant::msnet, "msnet"},
    {Variant::no_scab, "no_scab"},
    {Variant::no_cab, "no_cab"},
    {Variant::no_sab, "no_sab"},
    {Variant::no_post, "no_post"},
    {Variant::original_inputs, "original_inputs"},
    {Variant::derived_inputs, "derived_inputs"},
};

class Builder {
public:
    Builder(ParameterStore& store, std::uint64_t seed) : store_(store), rng_(derive_seed(seed, 0, 0x1a1e)) {}

    ConvLayer conv(const std::string& name, int cin, int cout, int k, int stride, int pad) {
        ConvLayer c;
        c.stride = stride;
        c.pad = pad;
        c.weight = store_.add(name + ".w", uniform_tensor({cout, cin, k, k}, cin * k * k));
        c.bias = store_.add(name + ".b", Tensor({cout, 1, 1, 1}));
        return c;
    }

    ConvLayer deconv(const std::string& name, int cin, int cout, int k, int stride, int pad) {
        ConvLayer c;
        c.stride = stride;
        c.pad = pad;
        c.transposed = true;
        // Each output pixel sees about cin * (k / stride)^2 taps.
        const int fan_in = std::max(1, cin * k * k / (stride * stride));
        c.weight = store_.add(name + ".w", uniform_tensor({cin, cout, k, k}, fan_in));
        c.bias = store_.add(name + ".b", Tensor({cout, 1, 1, 1}));
        return c;
    }

    RdbLayer rdb(const std::string& name, int channels, const GridConfig& cfg) {
        RdbLayer r;
        const int g = cfg.growth_rate;
        for (int k = 0; k < cfg.rdb_convs - 1; ++k) {
            r.dense.push_back(conv(name + ".dense" + std::to_string(k), channels + k * g, g, 3, 1, 1));
        }
        r.fuse = conv(name + ".fuse", channels + (cfg.rdb_convs - 1) * g, channels, 1, 1, 0);
        return r;
    }

    CabLayer cab(const std::string& name, int channels, const GridConfig& cfg) {
        const int hidden = std::max(channels / cfg.cab_reduction, 2);
        return CabLayer{conv(name + ".fc1", channels, hidden, 1, 1, 0), conv(name + ".fc2", hidden, channels, 1, 1, 0)};
    }

    SabLayer sab(const std::string& name, const GridConfig& cfg) {
        return SabLayer{conv(name, 2, 1, cfg.sab_kernel, 1, cfg.sab_kernel / 2)};
    }

private:
    Tensor uniform_tensor(Shape s, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor t(s);
        for (double& v : t.vec()) v = uniform(rng_, -bound, bound);
        return t;
    }

    ParameterStore& store_;
    Rng rng_;
};

std::string junction_name(int i, int j) { return "grid.r" + std::to_string(i) + "c" + std::to_string(j); }

bool uses_pre(Variant v) { return v != Variant::original_inputs && v != Variant::derived_inputs; }

// Resolves the 16 input maps for the configured variant.
Var input_stage(Tape& tape, Model& model, Var input) {
    const GridConfig& cfg = model.config;
    const Shape s = tape.value(input).shape();
    const int c0 = cfg.base_channels();
    if (cfg.variant == Variant::derived_inputs) {
        if (s.c == c0) return input;
        if (s.c != 3) throw InputError("derived_inputs expects 3 or 16 input channels, got " + to_string(s));
        return tape.constant(derive_inputs(tape.value(input)));
    }
    if (s.c != 3) throw InputError("network input must have 3 channels, got " + to_string(s));
    if (cfg.variant == Variant::original_inputs) {
        if (c0 == 3) return input;
        return ops::concat_channels(tape, {input, tape.constant(Tensor({s.n, c0 - 3, s.h, s.w}))});
    }
    const Var x = conv_forward(tape, model.params, *model.pre_conv, input, false);
    return rdb_forward(tape, model.params, *model.pre_rdb, x);
}

}  // namespace

std::string_view to_string(Variant v) {
    for (const auto& [value, name] : kVariantNames) {
        if (value == v) return name;
    }
    return "?";
}

Variant parse_variant(std::string_view s) {
    for (const auto& [value, name] : kVariantNames) {
        if (name == s) return value;
    }
    throw ConfigError("unknown variant '" + std::string(s) + "'");
}

std::vector<Variant> all_variants() {
    std::vector<Variant> out;
    for (const auto& entry : kVariantNames) out.push_back(entry.first);
    return out;
}

std::string_view to_string(OutputHead h) { return h == OutputHead::direct ? "direct" : "indirect"; }

OutputHead parse_output_head(std::string_view s) {
    if (s == "direct") return OutputHead::direct;
    if (s == "indirect") return OutputHead::indirect;
    throw ConfigError("unknown output head '" + std::string(s) + "'");
}

void GridConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("grid config: " + msg); };
    if (rows < 2) fail("rows must be at least 2");
    if (static_cast<int>(scale_channels.size()) != rows) fail("scale_channels must have one entry per row");
    if (cols < 2 || cols % 2 != 0) fail("cols must be even and at least 2");
    if (scale_channels.front() < 1) fail("scale channels must be positive");
    for (int i = 0; i + 1 < rows; ++i) {
        if (scale_channels[static_cast<std::size_t>(i + 1)] != 2 * scale_channels[static_cast<std::size_t>(i)]) {
            fail("scale_channels must double from row to row");
        }
    }
    if (rdbs_per_row != cols - 1) fail("rdbs_per_row must equal cols - 1");
    if (rdb_convs < 2) fail("rdb_convs must be at least 2");
    if (growth_rate < 1) fail("growth_rate must be at least 1");
    if (cab_reduction < 1) fail("cab_reduction must be at least 1");
    if (sab_kernel < 1 || sab_kernel % 2 == 0) fail("sab_kernel must be a positive odd integer");
    if (variant == Variant::original_inputs && base_channels() < 3) fail("original_inputs needs at least 3 base channels");
    if (variant == Variant::derived_inputs && base_channels() != kDerivedChannels) {
        fail("derived_inputs needs " + std::to_string(kDerivedChannels) + " base channels");
    }
}

std::string GridConfig::canonical() const {
    std::ostringstream os;
    os << "rows=" << rows << ";cols=" << cols << ";scale_channels=";
    for (std::size_t i = 0; i < scale_channels.size(); ++i) os << (i ? "," : "") << scale_channels[i];
    os << ";rdbs_per_row=" << rdbs_per_row << ";rdb_convs=" << rdb_convs << ";growth_rate=" << growth_rate
       << ";cab_reduction=" << cab_reduction << ";sab_kernel=" << sab_kernel << ";variant=" << to_string(variant)
       << ";output_head=" << to_string(output_head);
    return os.str();
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string GridConfig::fingerprint() const {
    const std::string c = canonical();
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(c.data(), c.size())));
    return buf;
}

GridConfig GridConfig::tiny() {
    GridConfig c;
    c.scale_channels = {4, 8, 16};
    c.growth_rate = 4;
    return c;
}

int ParameterStore::add(std::string name, Tensor value) {
    if (index_.count(name)) throw InternalError("duplicate parameter name " + name);
    const int id = static_cast<int>(params_.size());
    index_.emplace(name, id);
    params_.push_back(Parameter{std::move(name), std::move(value), Tensor(), true});
    return id;
}

Parameter& ParameterStore::at(std::string_view name) {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InputError("unknown parameter " + std::string(name));
    return params_[static_cast<std::size_t>(it->second)];
}

const Parameter& ParameterStore::at(std::string_view name) const {
    return const_cast<ParameterStore*>(this)->at(name);
}

void ParameterStore::zero_grad() {
    for (Parameter& p : params_) {
        if (p.grad.shape() == p.value.shape()) p.grad.fill(0.0);
    }
}

void ParameterStore::set_trainable(bool trainable) {
    for (Parameter& p : params_) {
        p.trainable = trainable;
        if (!trainable) p.grad = Tensor();
    }
}

bool ParameterStore::all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](const Parameter& p) { return p.value.all_finite(); });
}

std::uint64_t ParameterStore::value_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Parameter& p : params_) {
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.value.data(), p.value.size() * sizeof(double), h);
    }
    return h;
}

Model build(const GridConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    m.params.fingerprint = config.fingerprint();
    Builder b(m.params, seed);
    const int rows = config.rows;
    const int cols = config.cols;
    const auto ch = [&](int i) { return config.scale_channels[static_cast<std::size_t>(i)]; };
    const Variant v = config.variant;

    if (uses_pre(v)) {
        m.pre_conv = b.conv("pre.conv", 3, ch(0), 3, 1, 1);
        m.pre_rdb = b.rdb("pre.rdb", ch(0), config);
    }

    if (v == Variant::ednet) {
        for (int i = 1; i < rows; ++i) m.down_chain.push_back(b.conv("ednet.down" + std::to_string(i), ch(i - 1), ch(i), 3, 2, 1));
        for (int k = 0; k < config.rdbs_per_row; ++k) {
            m.bottom_rdbs.push_back(b.rdb("ednet.rdb" + std::to_string(k), ch(rows - 1), config));
        }
        for (int i = rows - 1; i >= 1; --i) m.up_chain.push_back(b.deconv("ednet.up" + std::to_string(i), ch(i), ch(i - 1), 4, 2, 1));
    } else {
        m.grid.assign(static_cast<std::size_t>(rows), std::vector<Junction>(static_cast<std::size_t>(cols)));
        const int half = cols / 2;
        for (int j = 0; j < cols; ++j) {
            const bool down = j < half;
            const bool exchange = v != Variant::msnet || j == 0 || j == cols - 1;
            // Creation order follows evaluation order so parameter names read
            // in the order data flows.
            for (int step = 0; step < rows; ++step) {
                const int i = down ? step : rows - 1 - step;
                Junction& jn = m.grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                const std::string name = junction_name(i, j);
                const bool has_row = j > 0 && (i == 0 || m.grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j - 1)].row_rdb ||
                                               m.grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j - 1)].vertical);
                if (has_row) jn.row_rdb = b.rdb(name + ".rdb", ch(i), config);
                if (exchange && down && i > 0) jn.vertical = b.conv(name + ".down", ch(i - 1), ch(i), 3, 2, 1);
                if (exchange && !down && i < rows - 1) jn.vertical = b.deconv(name + ".up", ch(i + 1), ch(i), 4, 2, 1);
                jn.fuse = jn.row_rdb.has_value() && jn.vertical.has_value();
                if (jn.fuse) {
                    if (v != Variant::no_scab && v != Variant::no_cab) {
                        jn.scab.cab_h = b.cab(name + ".scab.cab_h", ch(i), config);
                        jn.scab.cab_v = b.cab(name + ".scab.cab_v", ch(i), config);
                    }
                    if (v != Variant::no_scab && v != Variant::no_sab) jn.scab.sab = b.sab(name + ".scab.sab", config);
                }
            }
        }
    }

    if (v != Variant::no_post) m.post_rdb = b.rdb("post.rdb", ch(0), config);
    m.out_conv = b.conv("post.out", ch(0), config.output_head == OutputHead::direct ? 3 : 2, 3, 1, 1);
    return m;
}

std::size_t param_count(const ParameterStore& store) {
    std::size_t n = 0;
    for (const Parameter& p : store.all()) n += p.value.size();
    return n;
}

Var conv_forward(Tape& tape, ParameterStore& store, const ConvLayer& conv, Var x, bool relu) {
    const Var w = tape.param(store[conv.weight]);
    const Var b = conv.bias >= 0 ? tape.param(store[conv.bias]) : Var{};
    Var y;
    if (conv.transposed) {
        y = ops::conv_transpose2d(tape, x, w, b, conv.stride, conv.pad);
    } else {
        const Shape s = tape.value(x).shape();
        if (conv.stride == 2 && (s.h % 2 != 0 || s.w % 2 != 0)) {
            throw InputError("downsampling needs even spatial size, got " + to_string(s));
        }
        y = ops::conv2d(tape, x, w, b, conv.stride, conv.pad);
    }
    return relu ? ops::relu(tape, y) : y;
}

Var rdb_forward(Tape& tape, ParameterStore& store, const RdbLayer& rdb, Var x) {
    const int channels = store[rdb.fuse.weight].value.shape().n;
    if (tape.value(x).shape().c != channels) {
        throw InputError("RDB expects " + std::to_string(channels) + " channels, got " + to_string(tape.value(x).shape()));
    }
    std::vector<Var> features{x};
    for (const ConvLayer& c : rdb.dense) {
        const Var in = features.size() == 1 ? x : ops::concat_channels(tape, features);
        features.push_back(conv_forward(tape, store, c, in, true));
    }
    const Var fused = conv_forward(tape, store, rdb.fuse, ops::concat_channels(tape, features), false);
    return ops::add(tape, x, fused);
}

Var cab_coefficients(Tape& tape, ParameterStore& store, const CabLayer& cab, Var x) {
    // Shared MLP over both pooled descriptors.
    const auto mlp = [&](Var v) { return conv_forward(tape, store, cab.fc2, conv_forward(tape, store, cab.fc1, v, true), false); };
    const Var sum = ops::add(tape, mlp(ops::global_avg_pool(tape, x)), mlp(ops::global_max_pool(tape, x)));
    return ops::sigmoid(tape, sum);
}

Var cab_forward(Tape& tape, ParameterStore& store, const CabLayer& cab, Var x) {
    return ops::mul_channelwise(tape, x, cab_coefficients(tape, store, cab, x));
}

Var sab_map(Tape& tape, ParameterStore& store, const SabLayer& sab, Var x) {
    const Var pooled = ops::concat_channels(tape, {ops::channel_mean(tape, x), ops::channel_max(tape, x)});
    return ops::sigmoid(tape, conv_forward(tape, store, sab.conv, pooled, false));
}

Var sab_forward(Tape& tape, ParameterStore& store, const SabLayer& sab, Var x) {
    return ops::mul_spatial(tape, x, sab_map(tape, store, sab, x));
}

Var scab_fuse(Tape& tape, ParameterStore& store, const ScabLayer& scab, Var f_h, Var f_v) {
    if (tape.value(f_h).shape() != tape.value(f_v).shape()) {
        throw InputError("fusion inputs differ: " + to_string(tape.value(f_h).shape()) + " vs " +
                         to_string(tape.value(f_v).shape()));
    }
    const Var a = scab.cab_h ? cab_forward(tape, store, *scab.cab_h, f_h) : f_h;
    const Var b = scab.cab_v ? cab_forward(tape, store, *scab.cab_v, f_v) : f_v;
    const Var sum = ops::add(tape, a, b);
    return scab.sab ? sab_forward(tape, store, *scab.sab, sum) : sum;
}

GraphOutput forward_graph(Tape& tape, Model& model, Var input, bool want_taps) {
    const GridConfig& cfg = model.config;
    const Shape s = tape.value(input).shape();
    const int mult = cfg.size_multiple();
    if (s.h % mult != 0 || s.w % mult != 0 || s.h == 0 || s.w == 0) {
        throw InputError("input size must be a positive multiple of " + std::to_string(mult) + ", got " + to_string(s));
    }
    ParameterStore& ps = model.params;
    GraphOutput out;
    out.learned_inputs = input_stage(tape, model, input);

    Var top;
    if (cfg.variant == Variant::ednet) {
        Var x = out.learned_inputs;
        for (const ConvLayer& c : model.down_chain) x = conv_forward(tape, ps, c, x, true);
        for (const RdbLayer& r : model.bottom_rdbs) x = rdb_forward(tape, ps, r, x);
        for (const ConvLayer& c : model.up_chain) x = conv_forward(tape, ps, c, x, true);
        top = x;
    } else {
        const int rows = cfg.rows;
        const int cols = cfg.cols;
        std::vector<std::vector<Var>> X(static_cast<std::size_t>(rows), std::vector<Var>(static_cast<std::size_t>(cols)));
        X[0][0] = out.learned_inputs;
        for (int j = 0; j < cols; ++j) {
            const bool down = j < cols / 2;
            for (int step = 0; step < rows; ++step) {
                const int i = down ? step : rows - 1 - step;
                if (i == 0 && j == 0) continue;
                const Junction& jn = model.grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                Var h, v;
                if (jn.row_rdb) h = rdb_forward(tape, ps, *jn.row_rdb, X[static_cast<std::size_t>(i)][static_cast<std::size_t>(j - 1)]);
                if (jn.vertical) {
                    const int src = down ? i - 1 : i + 1;
                    v = conv_forward(tape, ps, *jn.vertical, X[static_cast<std::size_t>(src)][static_cast<std::size_t>(j)], true);
                }
                Var& dst = X[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                if (jn.fuse) {
                    dst = scab_fuse(tape, ps, jn.scab, h, v);
                } else {
                    dst = h.valid() ? h : v;
                }
            }
        }
        top = X[0][static_cast<std::size_t>(cols - 1)];
        if (want_taps) {
            for (int j = cols / 2; j < cols; ++j) out.taps.push_back(FeatureTap{0, j, X[0][static_cast<std::size_t>(j)]});
        }
    }

    if (model.post_rdb) top = rdb_forward(tape, ps, *model.post_rdb, top);
    const Var raw = conv_forward(tape, ps, model.out_conv, top, false);
    if (cfg.output_head == OutputHead::direct) {
        out.output = raw;
        return out;
    }
    out.transmission = ops::sigmoid(tape, ops::slice_channels(tape, raw, 0, 1));
    out.airlight = ops::global_avg_pool(tape, ops::slice_channels(tape, raw, 1, 1));
    const Var rgb = s.c == 3 ? input : ops::slice_channels(tape, input, 0, 3);
    out.output = ops::asm_invert(tape, rgb, out.transmission, out.airlight, kDefaultTMin);
    return out;
}

namespace {

struct Padded {
    Tensor input;
    int h, w;
};

Padded pad_input(const Model& model, const ImageTensor& input) {
    const int mult = model.config.size_multiple();
    const Shape s = input.shape();
    if (s.n < 1 || s.h < 1 || s.w < 1) throw InputError("empty input " + to_string(s));
    const int ph = (s.h + mult - 1) / mult * mult;
    const int pw = (s.w + mult - 1) / mult * mult;
    return {reflect_pad(input, ph, pw), s.h, s.w};
}

}  // namespace

ForwardResult forward(Model& model, const ImageTensor& input, bool want_taps) {
    const Padded p = pad_input(model, input);
    Tape tape(false);
    const GraphOutput g = forward_graph(tape, model, tape.constant(p.input), want_taps);
    ForwardResult r;
    r.output = clamp(crop(tape.value(g.output), 0, 0, p.h, p.w), 0.0, 1.0);
    for (const FeatureTap& t : g.taps) r.taps.push_back({{t.row, t.col}, crop(tape.value(t.value), 0, 0, p.h, p.w)});
    return r;
}

IndirectResult forward_indirect(Model& model, const ImageTensor& input, double t_min) {
    if (model.config.output_head != OutputHead::indirect) throw ConfigError("forward_indirect needs the indirect output head");
    const Padded p = pad_input(model, input);
    Tape tape(false);
    const GraphOutput g = forward_graph(tape, model, tape.constant(p.input), false);
    IndirectResult r;
    r.transmission = crop(tape.value(g.transmission), 0, 0, p.h, p.w);
    const Tensor& a = tape.value(g.airlight);
    r.airlight.assign(a.vec().begin(), a.vec().end());
    const ImageTensor rgb = input.shape().c == 3 ? input : slice_channels(input, 0, 3);
    // Re-invert at the caller's t_min on the cropped maps; the channel-1 mean
    // covers the padded area, which is part of the estimate by construction.
    ImageTensor dehazed(rgb.shape());
    for (int n = 0; n < rgb.shape().n; ++n) {
        const ImageTensor item = invert_asm(slice_batch(rgb, n), slice_batch(r.transmission, n), r.airlight[static_cast<std::size_t>(n)], t_min);
        std::copy(item.data(), item.data() + item.size(), dehazed.plane(n, 0));
    }
    r.dehazed = std::move(dehazed);
    return r;
}

Tensor learned_inputs(Model& model, const ImageTensor& input) {
    const Padded p = pad_input(model, input);
    Tape tape(false);
    const Var x = input_stage(tape, model, tape.constant(p.input));
    return crop(tape.value(x), 0, 0, p.h, p.w);
}

}  // namespace dehaze
