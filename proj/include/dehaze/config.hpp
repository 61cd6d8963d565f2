#pragma once

// JSON forms of every configuration record. Readers start from the struct's
// defaults, override the keys present and reject unknown keys.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dehaze/haze_model.hpp"
#include "dehaze/losses.hpp"
#include "dehaze/network.hpp"
#include "dehaze/training.hpp"

namespace dehaze {

nlohmann::json to_json(const GridConfig& c);
GridConfig grid_config_from_json(const nlohmann::json& j, GridConfig base = {});

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j, LossWeights base = {});

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

nlohmann::json to_json(const DomainShiftParams& p);
DomainShiftParams domain_shift_from_json(const nlohmann::json& j, DomainShiftParams base = {});

/// Dataset generation block; the seed lives at the experiment level.
struct DataConfig {
    int count = 16;
    std::pair<double, double> beta_range{0.4, 1.6};
    std::pair<double, double> airlight_range{0.7, 1.0};
    int height = 48;
    int width = 48;
    double d_max = kDefaultDepthMax;
    bool translated = false;
    DomainShiftParams domain_shift;
    std::optional<std::filesystem::path> image_dir;

    DatasetSpec spec(std::uint64_t seed) const;
};
nlohmann::json to_json(const DataConfig& c);
DataConfig data_config_from_json(const nlohmann::json& j, DataConfig base = {});

struct ExperimentConfig {
    GridConfig grid;
    TrainConfig train;
    DataConfig data;
    std::uint64_t seed = 0;
    int workers = 1;
    std::uint64_t extractor_seed = 7;
    std::optional<std::filesystem::path> extractor_weights;
    /// Ablation entries: grid variant names, output heads or ITKT stages.
    std::vector<std::string> ablate_variants;
    std::vector<std::uint64_t> ablate_seeds;

    void validate() const;
};
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
/// Throws IoError if unreadable, ConfigError if malformed or unknown keys.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace dehaze
