#pragma once

// Grid dehazing network: a pre-processing module producing 16 "learned
// inputs", a rows x cols grid of residual dense blocks exchanging features
// across scales through attention fusion, and a post-processing module.
//
// Junction (i, j) lives on row (scale) i and column j. Row streams place one
// RDB between consecutive junctions. The first cols/2 columns carry strided
// downsampling convolutions from row i-1 to i; the remaining columns carry
// transposed-convolution upsampling from row i+1 to i. Where a vertical
// output meets a row stream the two are fused by a SCAB:
//     F = SAB(CAB_h(F_h) + CAB_v(F_v)).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dehaze/autograd.hpp"
#include "dehaze/haze_model.hpp"

namespace dehaze {

enum class Variant { full, ednet, msnet, no_scab, no_cab, no_sab, no_post, original_inputs, derived_inputs };
std::string_view to_string(Variant v);
/// Throws ConfigError for unknown names.
Variant parse_variant(std::string_view s);
std::vector<Variant> all_variants();

enum class OutputHead { direct, indirect };
std::string_view to_string(OutputHead h);
OutputHead parse_output_head(std::string_view s);

struct GridConfig {
    int rows = 3;
    int cols = 6;
    std::vector<int> scale_channels{16, 32, 64};
    int rdbs_per_row = 5;
    int rdb_convs = 5;  // rdb_convs - 1 dense 3x3 convs plus the 1x1 fusion
    int growth_rate = 16;
    int cab_reduction = 16;
    int sab_kernel = 7;
    Variant variant = Variant::full;
    OutputHead output_head = OutputHead::direct;

    /// Throws ConfigError on any violated invariant.
    void validate() const;
    /// Stable textual form of every field; the fingerprint hashes it.
    std::string canonical() const;
    /// 16 hex digits (FNV-1a 64 of canonical()).
    std::string fingerprint() const;
    /// Spatial sizes must be multiples of this.
    int size_multiple() const { return 1 << (rows - 1); }
    int base_channels() const { return scale_channels.front(); }

    static GridConfig tiny();
};

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

/// Named parameter tensors in creation order.
class ParameterStore {
public:
    int add(std::string name, Tensor value);
    Parameter& operator[](int index) { return params_[static_cast<std::size_t>(index)]; }
    const Parameter& operator[](int index) const { return params_[static_cast<std::size_t>(index)]; }
    /// Throws InputError for unknown names.
    Parameter& at(std::string_view name);
    const Parameter& at(std::string_view name) const;
    bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    void zero_grad();
    void set_trainable(bool trainable);
    bool all_finite() const;
    /// Hash of every value byte in creation order.
    std::uint64_t value_hash() const;

    std::string fingerprint;

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, int> index_;
};

struct ConvLayer {
    int weight = -1;
    int bias = -1;
    int stride = 1;
    int pad = 1;
    bool transposed = false;
    bool valid() const { return weight >= 0; }
};

struct RdbLayer {
    std::vector<ConvLayer> dense;
    ConvLayer fuse;
};

struct CabLayer {
    ConvLayer fc1;  // C -> hidden, as a 1x1 convolution on pooled vectors
    ConvLayer fc2;  // hidden -> C
};

struct SabLayer {
    ConvLayer conv;  // 2 -> 1, k x k
};

struct ScabLayer {
    std::optional<CabLayer> cab_h;
    std::optional<CabLayer> cab_v;
    std::optional<SabLayer> sab;
};

/// A junction receiving a vertical input (from row i-1 via DB, or row i+1
/// via UB) and, when it has a row stream, fusing the two.
struct Junction {
    std::optional<RdbLayer> row_rdb;  // between (i, j-1) and (i, j)
    std::optional<ConvLayer> vertical;
    bool fuse = false;
    ScabLayer scab;
};

struct Model {
    GridConfig config;
    ParameterStore params;

    std::optional<ConvLayer> pre_conv;
    std::optional<RdbLayer> pre_rdb;
    std::optional<RdbLayer> post_rdb;
    ConvLayer out_conv;

    std::vector<std::vector<Junction>> grid;  // [rows][cols]; empty for ednet
    // ednet chain
    std::vector<ConvLayer> down_chain;
    std::vector<RdbLayer> bottom_rdbs;
    std::vector<ConvLayer> up_chain;
};

/// Deterministic fan-in uniform initialisation with zero biases.
Model build(const GridConfig& config, std::uint64_t seed);
std::size_t param_count(const ParameterStore& store);
inline std::size_t param_count(const Model& model) { return param_count(model.params); }

struct FeatureTap {
    int row = 0;
    int col = 0;
    Var value;
};

struct GraphOutput {
    Var output;          // direct: (N, 3, H, W) unclamped; indirect: dehazed
    Var learned_inputs;  // (N, 16, H, W)
    std::vector<FeatureTap> taps;
    Var transmission;  // indirect only: (N, 1, H, W)
    Var airlight;      // indirect only: (N, 1, 1, 1)
};

/// Records a full forward pass on `tape`. `input` is (N, 3, H, W) (or
/// (N, 16, H, W) derived inputs for that variant); H and W must be multiples
/// of size_multiple(). Taps are the row-0 junctions of the upsampling columns.
GraphOutput forward_graph(Tape& tape, Model& model, Var input, bool want_taps);

// Building blocks, exposed for testing.
Var rdb_forward(Tape& tape, ParameterStore& store, const RdbLayer& rdb, Var x);
Var conv_forward(Tape& tape, ParameterStore& store, const ConvLayer& conv, Var x, bool relu);
/// Channel attention coefficients (N, C, 1, 1).
Var cab_coefficients(Tape& tape, ParameterStore& store, const CabLayer& cab, Var x);
Var cab_forward(Tape& tape, ParameterStore& store, const CabLayer& cab, Var x);
/// Spatial attention map (N, 1, H, W).
Var sab_map(Tape& tape, ParameterStore& store, const SabLayer& sab, Var x);
Var sab_forward(Tape& tape, ParameterStore& store, const SabLayer& sab, Var x);
Var scab_fuse(Tape& tape, ParameterStore& store, const ScabLayer& scab, Var f_h, Var f_v);

struct ForwardResult {
    ImageTensor output;
    std::vector<std::pair<std::pair<int, int>, Tensor>> taps;
};

/// Inference pass: outputs clamped to [0, 1]. Sizes that are not multiples
/// of size_multiple() are reflect-padded and the output cropped back.
ForwardResult forward(Model& model, const ImageTensor& input, bool want_taps = false);

struct IndirectResult {
    Tensor transmission;  // (N, 1, H, W) in (0, 1)
    std::vector<double> airlight;
    ImageTensor dehazed;  // clamped to [0, 1]
};
/// Throws ConfigError unless the model has the indirect head.
IndirectResult forward_indirect(Model& model, const ImageTensor& input, double t_min = kDefaultTMin);

/// The 16 learned (or substituted) input maps for an inference input.
Tensor learned_inputs(Model& model, const ImageTensor& input);

}  // namespace dehaze
