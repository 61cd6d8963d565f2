#pragma once

// Datasets on disk and the multi-variant comparison runner shared by the
// command-line front end and the acceptance harness.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dehaze/config.hpp"
#include "dehaze/haze_model.hpp"
#include "dehaze/losses.hpp"
#include "dehaze/network.hpp"

namespace dehaze {

/// make_dataset with samples generated on `workers` threads. Every sample
/// has its own derived seed, so the result does not depend on `workers`.
std::vector<HazeSample> generate_dataset(const DatasetSpec& spec, int workers = 1);

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Writes <id>_clear.png, <id>_hazy.png, <id>_t.png (16-bit) and one
/// manifest line per sample. `untranslated`, when given, holds the same
/// samples before the domain shift and is written as <id>_hazy_synthetic.png.
/// Returns the manifest hash.
std::string write_dataset(const std::filesystem::path& dir, const std::vector<HazeSample>& samples,
                          const std::vector<HazeSample>* untranslated = nullptr);

/// Reads a manifest written by write_dataset. Entries without a clear image
/// raise InputError (evaluation and training need pairs).
std::vector<HazeSample> read_dataset(const std::filesystem::path& dir);

/// 16-hex FNV-1a of a file's bytes.
std::string file_hash(const std::filesystem::path& path);
/// 16-hex FNV-1a over every tensor in the samples, in order.
std::string dataset_hash(const std::vector<HazeSample>& samples);

/// The configured extractor: loaded weights when a path is set, otherwise
/// the fixed random one for extractor_seed.
PerceptualExtractor make_extractor(const ExperimentConfig& config);

enum class AblationKind { architecture, pretrained_only, finetune_plain, finetune_itkt };

struct VariantSpec {
    std::string label;
    GridConfig grid;
    AblationKind kind = AblationKind::architecture;
};

/// Accepts a grid variant name (full, no_scab, ...), an output head
/// (direct, indirect) or an ITKT stage (pretrained_only, wo_itkt, w_itkt).
VariantSpec parse_variant_spec(std::string_view name, const GridConfig& base);

struct AblationData {
    std::vector<HazeSample> train;
    /// Translated data for the ITKT stages; unused by architecture rows.
    std::vector<HazeSample> finetune;
    std::vector<HazeSample> eval;
};

struct AblationRow {
    std::string label;
    std::uint64_t seed = 0;
    long params = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    /// Optimizer steps summed over every phase the row went through.
    long steps = 0;
    std::string train_data_hash;
    std::string eval_data_hash;
    std::optional<std::string> error;
};

/// Trains and evaluates every spec under every seed with identical data.
/// A failing row records its error and the others still run.
std::vector<AblationRow> run_ablation(const ExperimentConfig& config, const std::vector<VariantSpec>& specs,
                                      const AblationData& data, const std::vector<std::uint64_t>& seeds,
                                      std::ostream* progress = nullptr);

/// Markdown table, one line per label: mean PSNR / SSIM over seeds and the
/// parameter count.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace dehaze
