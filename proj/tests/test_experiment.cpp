#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dehaze/error.hpp"
#include "dehaze/experiment.hpp"

using namespace dehaze;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
    DatasetSpec s;
    s.count = 5;
    s.height = 16;
    s.width = 20;
    s.seed = 3;
    return s;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dehaze_experiment_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("dataset generation does not depend on worker count") {
    const auto a = generate_dataset(small_spec(), 1);
    const auto b = generate_dataset(small_spec(), 4);
    CHECK(dataset_hash(a) == dataset_hash(b));
    CHECK(dataset_hash(a) == dataset_hash(make_dataset(small_spec())));
    const fs::path d1 = scratch("w1"), d2 = scratch("w4");
    CHECK(write_dataset(d1, a) == write_dataset(d2, b));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("datasets survive a disk round trip to 8-bit precision") {
    const auto samples = generate_dataset(small_spec());
    const fs::path dir = scratch("rt");
    write_dataset(dir, samples);
    const auto back = read_dataset(dir);
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == samples[i].id);
        CHECK(back[i].beta == samples[i].beta);
        CHECK(back[i].hazy.shape() == samples[i].hazy.shape());
        double err = 0.0;
        for (std::size_t k = 0; k < back[i].clear.size(); ++k) {
            err = std::max(err, std::abs(back[i].clear.data()[k] - samples[i].clear.data()[k]));
        }
        CHECK(err <= 0.5 / 255.0 + 1e-12);
    }
    fs::remove_all(dir);
}

TEST_CASE("broken datasets are reported") {
    CHECK_THROWS_AS(read_dataset(scratch("none")), IoError);
    const fs::path dir = scratch("broken");
    write_dataset(dir, generate_dataset(small_spec()));
    fs::remove(dir / "00001_clear.png");
    const auto files = list_pngs(dir);
    CHECK(!files.empty());
    bool missing_reported = false;
    try {
        read_dataset(dir);
    } catch (const Error&) {
        missing_reported = true;
    }
    CHECK(missing_reported);
    { std::ofstream(dir / kManifestName, std::ios::trunc); }
    CHECK_THROWS_AS(read_dataset(dir), InputError);
    fs::remove_all(dir);
}

TEST_CASE("variant vocabulary") {
    const GridConfig base;
    CHECK(parse_variant_spec("no_scab", base).grid.variant == Variant::no_scab);
    CHECK(parse_variant_spec("indirect", base).grid.output_head == OutputHead::indirect);
    CHECK(parse_variant_spec("w_itkt", base).kind == AblationKind::finetune_itkt);
    CHECK(parse_variant_spec("wo_itkt", base).kind == AblationKind::finetune_plain);
    CHECK(parse_variant_spec("pretrained_only", base).kind == AblationKind::pretrained_only);
    CHECK_THROWS_AS(parse_variant_spec("bogus", base), ConfigError);
}

TEST_CASE("ablation rows share data and record failures") {
    ExperimentConfig config;
    config.grid.scale_channels = {4, 8, 16};
    config.grid.growth_rate = 4;
    config.train.epochs = 1;
    config.train.steps_per_epoch = 2;
    config.train.batch_size = 2;
    config.train.patch = 8;
    AblationData data;
    DatasetSpec s = small_spec();
    s.width = 16;
    data.train = make_dataset(s);
    data.eval = data.train;
    const std::vector<VariantSpec> specs{parse_variant_spec("direct", config.grid),
                                         parse_variant_spec("indirect", config.grid),
                                         parse_variant_spec("w_itkt", config.grid)};
    const auto rows = run_ablation(config, specs, data, {1});
    REQUIRE(rows.size() == 3);
    CHECK(!rows[0].error);
    CHECK(!rows[1].error);
    CHECK(rows[0].steps == rows[1].steps);
    CHECK(rows[0].train_data_hash == rows[1].train_data_hash);
    CHECK(rows[0].eval_data_hash == rows[1].eval_data_hash);
    // No finetuning data: that row fails on its own.
    CHECK(rows[2].error);
    const std::string table = format_ablation_table(rows);
    CHECK(table.find("| direct |") != std::string::npos);
    CHECK(table.find("| w_itkt | FAILED") != std::string::npos);
}
