#pragma once

// Synthetic pretraining, teacher-student finetuning, Adam, patch sampling,
// evaluation and resumable checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dehaze/haze_model.hpp"
#include "dehaze/losses.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/network.hpp"
#include "dehaze/random.hpp"

namespace dehaze {

enum class TrainMode { pretrain, finetune_itkt, finetune_plain };
std::string_view to_string(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
    int epochs = 5;
    int batch_size = 4;
    int patch = 48;
    double lr0 = 1e-3;
    int lr_halving_period = 20;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    /// 0 means one pass over the training split: ceil(n_train / batch_size).
    int steps_per_epoch = 0;
    LossWeights loss_weights;
    TrainMode mode = TrainMode::pretrain;

    void validate() const;
    /// Hash of every field that changes the optimisation trajectory; epochs
    /// is excluded so a finished run can be extended by resuming.
    std::string fingerprint() const;
};

/// lr0 * 0.5^floor(epoch / lr_halving_period)
double lr_schedule(int epoch, const TrainConfig& config);

/// Every 10th sample (index % 10 == 9) is held out for validation.
bool is_validation_index(int index);
std::pair<std::vector<HazeSample>, std::vector<HazeSample>> split_dataset(const std::vector<HazeSample>& samples);

struct PatchBatch {
    ImageTensor hazy;
    ImageTensor clear;
};

/// Random sample indices and aligned crop offsets drawn from `rng`.
PatchBatch sample_patches(const std::vector<HazeSample>& samples, int patch, int batch_size, Rng& rng);

struct AdamState {
    long step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

/// One Adam step on every trainable parameter using its accumulated grad.
void adam_step(ParameterStore& store, AdamState& state, double lr, const TrainConfig& config);

struct RunState {
    int epoch = 0;
    long step = 0;
    double lr = 0.0;
    // Running sums over the current epoch.
    long epoch_steps = 0;
    double sum_total = 0.0;
    double sum_fidelity = 0.0;
    double sum_perceptual = 0.0;
    double sum_itkt = 0.0;
    Rng rng;
};

struct CheckpointBundle {
    Model model;
    AdamState optimizer;
    RunState state;
    TrainConfig config;
};

/// Throws IoError on write failure.
void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& bundle);
/// With `expected`, refuses (ConfigError) checkpoints whose grid fingerprint
/// differs. Always verifies the stored tensors against the stored config.
CheckpointBundle load_checkpoint(const std::filesystem::path& path, const GridConfig* expected = nullptr);

struct StepRecord {
    long step = 0;
    int epoch = 0;
    double lr = 0.0;
    double fidelity = 0.0;
    double perceptual = 0.0;
    double itkt = 0.0;
    double total = 0.0;
};

struct TrainOptions {
    /// Appends one JSON line per step.
    std::optional<std::filesystem::path> log_path;
    /// Overwritten at every epoch end and at completion.
    std::optional<std::filesystem::path> checkpoint_path;
    const CheckpointBundle* resume = nullptr;
    /// Stop (as if interrupted) after this global step; -1 runs to the end.
    long stop_after_step = -1;
    std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
    CheckpointBundle bundle;
    std::vector<StepRecord> records;
};

/// Runs `config.mode`. `teacher` is required for finetune_itkt and ignored
/// otherwise; it is only read. Throws NumericalError on a non-finite loss
/// (the last written checkpoint is left untouched).
TrainResult train(Model student, Model* teacher, const std::vector<HazeSample>& data, const TrainConfig& config,
                  PerceptualExtractor& extractor, std::uint64_t seed, const TrainOptions& options = {});

TrainResult pretrain(Model model, const std::vector<HazeSample>& data, TrainConfig config, PerceptualExtractor& extractor,
                     std::uint64_t seed, const TrainOptions& options = {});
/// The student starts as a copy of the teacher.
TrainResult finetune_itkt(Model& teacher, const std::vector<HazeSample>& data, TrainConfig config,
                          PerceptualExtractor& extractor, std::uint64_t seed, const TrainOptions& options = {});
TrainResult finetune_plain(const Model& pretrained, const std::vector<HazeSample>& data, TrainConfig config,
                           PerceptualExtractor& extractor, std::uint64_t seed, const TrainOptions& options = {});

/// Mean L1 distance between student and teacher taps on `hazy`, averaged
/// over the taps (the ITKT loss value without its weight).
double tap_distance(Model& student, Model& teacher, const ImageTensor& hazy);

/// Clamped inference (pad-and-crop for any size) scored against ground
/// truth. Indirect-head models are scored on their ASM-inverted output.
MetricReport evaluate(Model& model, const std::vector<HazeSample>& samples, int workers = 1);

/// Model output for a single image as used by evaluate().
ImageTensor dehaze_image(Model& model, const ImageTensor& hazy);

}  // namespace dehaze
