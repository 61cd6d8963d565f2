#include "dehaze/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dehaze/config.hpp"
#include "dehaze/error.hpp"
#include "dehaze/experiment.hpp"
#include "dehaze/image_io.hpp"
#include "dehaze/kernels.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/training.hpp"

namespace dehaze {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    int workers = 1;
    std::string out;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* workers_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Experiment config (JSON)");
    c.seed_opt = sub->add_option("--seed", c.seed, "Run seed (overrides the config)");
    c.workers_opt = sub->add_option("--workers", c.workers, "Worker threads for data generation / evaluation")
                        ->check(CLI::PositiveNumber);
    sub->add_option("--out", c.out, "Output directory");
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
    if (c.seed_opt->count()) cfg.seed = c.seed;
    if (c.workers_opt->count()) cfg.workers = c.workers;
    return cfg;
}

fs::path out_dir(const Common& c, const char* sub) {
    if (!c.out.empty()) return c.out;
    const char* root = std::getenv(kOutputRootEnv);
    return fs::path(root && *root ? root : "runs") / sub;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

// ---- synth ----------------------------------------------------------------

int cmd_synth(const Common& c, bool translated) {
    ExperimentConfig cfg = resolve(c);
    if (translated) cfg.data.translated = true;
    cfg.validate();
    const fs::path out = out_dir(c, "synth");
    const DatasetSpec spec = cfg.data.spec(cfg.seed);
    const std::vector<HazeSample> samples = generate_dataset(spec, cfg.workers);
    std::vector<HazeSample> untranslated;
    if (cfg.data.translated) {
        DatasetSpec plain = spec;
        plain.domain_shift.reset();
        untranslated = generate_dataset(plain, cfg.workers);
    }
    const std::string hash = write_dataset(out, samples, cfg.data.translated ? &untranslated : nullptr);
    write_json(out / "experiment.json", to_json(cfg));

    double bmin = 1e300, bmax = -1e300, amin = 1e300, amax = -1e300;
    for (const HazeSample& s : samples) {
        bmin = std::min(bmin, s.beta);
        bmax = std::max(bmax, s.beta);
        amin = std::min(amin, s.airlight);
        amax = std::max(amax, s.airlight);
    }
    std::cout << std::fixed << std::setprecision(3) << "synth: " << samples.size() << " samples ("
              << spec.height << "x" << spec.width << ") -> " << out.string() << "\n  beta [" << bmin << ", " << bmax
              << "]  airlight [" << amin << ", " << amax << "]  domain "
              << (cfg.data.translated ? "translated" : "synthetic") << "\n  manifest " << hash << '\n';
    return 0;
}

// ---- train / finetune -----------------------------------------------------

void report_training(const TrainResult& r, const fs::path& ckpt) {
    std::cout << "  " << r.records.size() << " steps this run, " << r.bundle.state.step << " total";
    if (!r.records.empty()) {
        const StepRecord& last = r.records.back();
        std::cout << std::scientific << std::setprecision(4) << "; last loss " << last.total << " (fidelity "
                  << last.fidelity << ", perceptual " << last.perceptual << ", itkt " << last.itkt << ")";
    }
    std::cout << "\n  checkpoint " << ckpt.string() << '\n';
}

TrainOptions train_options(const fs::path& out, const CheckpointBundle* resume, long stop_after) {
    TrainOptions opt;
    opt.log_path = out / "train_log.jsonl";
    opt.checkpoint_path = out / "checkpoint.ckpt";
    opt.resume = resume;
    opt.stop_after_step = stop_after;
    return opt;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume_path,
              const std::string& variant, long stop_after) {
    ExperimentConfig cfg = resolve(c);
    if (!variant.empty()) {
        const VariantSpec v = parse_variant_spec(variant, cfg.grid);
        if (v.kind != AblationKind::architecture) throw ConfigError("--variant " + variant + " is not an architecture");
        cfg.grid = v.grid;
    }
    cfg.validate();
    if (data_dir.empty()) throw ConfigError("train needs --data");
    const fs::path out = out_dir(c, "train");
    ensure_dir(out);
    const std::vector<HazeSample> samples = read_dataset(data_dir);
    PerceptualExtractor extractor = make_extractor(cfg);

    std::optional<CheckpointBundle> resume;
    if (!resume_path.empty()) resume = load_checkpoint(resume_path, &cfg.grid);
    write_json(out / "experiment.json", to_json(cfg));
    std::cout << "train: " << to_string(cfg.grid.variant) << "/" << to_string(cfg.grid.output_head) << ", "
              << samples.size() << " samples, kernels " << kernels::name(kernels::selected()) << '\n';
    const TrainResult r = pretrain(build(cfg.grid, cfg.seed), samples, cfg.train, extractor, cfg.seed,
                                   train_options(out, resume ? &*resume : nullptr, stop_after));
    report_training(r, out / "checkpoint.ckpt");
    return 0;
}

int cmd_finetune(const Common& c, const std::string& data_dir, const std::string& teacher_path,
                 const std::string& resume_path, bool no_itkt, long stop_after) {
    ExperimentConfig cfg = resolve(c);
    cfg.validate();
    if (teacher_path.empty()) throw ConfigError("finetune needs a teacher checkpoint (--teacher)");
    if (data_dir.empty()) throw ConfigError("finetune needs --data");
    const fs::path out = out_dir(c, "finetune");
    ensure_dir(out);
    CheckpointBundle teacher = load_checkpoint(teacher_path);
    const std::vector<HazeSample> samples = read_dataset(data_dir);
    if (std::any_of(samples.begin(), samples.end(), [](const HazeSample& s) { return s.domain != Domain::translated; })) {
        std::cerr << "warning: finetuning data is not marked as translated\n";
    }
    PerceptualExtractor extractor = make_extractor(cfg);
    std::optional<CheckpointBundle> resume;
    if (!resume_path.empty()) resume = load_checkpoint(resume_path, &teacher.model.config);
    cfg.grid = teacher.model.config;
    write_json(out / "experiment.json", to_json(cfg));

    const TrainOptions opt = train_options(out, resume ? &*resume : nullptr, stop_after);
    const std::uint64_t seed = cfg.seed;
    std::cout << "finetune: " << (no_itkt ? "plain (no teacher)" : "itkt") << ", " << samples.size() << " samples\n";
    const TrainResult r = no_itkt ? finetune_plain(teacher.model, samples, cfg.train, extractor, seed, opt)
                                  : finetune_itkt(teacher.model, samples, cfg.train, extractor, seed, opt);
    report_training(r, out / "checkpoint.ckpt");
    return 0;
}

// ---- dehaze ---------------------------------------------------------------

std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
    std::vector<fs::path> out;
    for (const std::string& in : inputs) {
        if (fs::is_directory(in)) {
            for (const fs::path& p : list_pngs(in)) out.push_back(p);
        } else {
            out.emplace_back(in);
        }
    }
    return out;
}

void dump_learned_inputs(Model& model, const ImageTensor& img, const fs::path& dir) {
    ensure_dir(dir);
    Tensor li = learned_inputs(model, img);
    const Shape s = li.shape();
    for (int ch = 0; ch < s.c; ++ch) {
        // Min-max stretched so each map is visible on its own.
        double* p = li.plane(0, ch);
        const auto [lo, hi] = std::minmax_element(p, p + s.plane());
        const double a = *lo, span = *hi - *lo;
        for (std::size_t i = 0; i < s.plane(); ++i) p[i] = span > 0.0 ? (p[i] - a) / span : 0.0;
        std::ostringstream name;
        name << "channel_" << std::setw(2) << std::setfill('0') << ch << ".png";
        write_png_gray8(dir / name.str(), li, ch);
    }
}

int cmd_dehaze(const Common& c, const std::string& ckpt, const std::vector<std::string>& inputs, bool dump) {
    if (ckpt.empty()) throw ConfigError("dehaze needs --checkpoint");
    const fs::path out = out_dir(c, "dehaze");
    CheckpointBundle b = load_checkpoint(ckpt);
    const std::vector<fs::path> files = expand_inputs(inputs);
    if (files.empty()) throw InputError("dehaze: no input images");
    ensure_dir(out);
    int ok = 0;
    for (const fs::path& f : files) {
        ImageTensor img;
        try {
            img = read_png(f);
        } catch (const Error& e) {
            std::cerr << "warning: skipping " << f.string() << ": " << e.what() << '\n';
            continue;
        }
        const fs::path dst = out / (f.stem().string() + ".png");
        write_png_rgb8(dst, dehaze_image(b.model, img));
        if (dump) dump_learned_inputs(b.model, img, out / (f.stem().string() + "_learned"));
        std::cout << f.string() << " -> " << dst.string() << '\n';
        ++ok;
    }
    if (ok == 0) throw InputError("dehaze: every input image failed to load");
    return 0;
}

// ---- eval -----------------------------------------------------------------

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_dir) {
    const ExperimentConfig cfg = resolve(c);
    if (ckpt.empty()) throw ConfigError("eval needs --checkpoint");
    if (data_dir.empty()) throw ConfigError("eval needs --data");
    CheckpointBundle b = load_checkpoint(ckpt);
    const std::vector<HazeSample> samples = read_dataset(data_dir);
    const MetricReport rep = evaluate(b.model, samples, cfg.workers);
    const fs::path out = out_dir(c, "eval");
    ensure_dir(out);
    write_report(out / "report.jsonl", rep);
    std::cout << std::fixed;
    for (const ImageMetric& m : rep.images) {
        std::cout << m.id << "  psnr " << std::setprecision(3) << m.psnr << "  ssim " << std::setprecision(4) << m.ssim
                  << '\n';
    }
    std::cout << "mean  psnr " << std::setprecision(3) << rep.mean_psnr << "  ssim " << std::setprecision(4)
              << rep.mean_ssim << "  (" << rep.images.size() << " images)\n  report " << (out / "report.jsonl").string()
              << '\n';
    return 0;
}

// ---- ablate ---------------------------------------------------------------

int cmd_ablate(const Common& c, const std::string& data_dir, const std::string& finetune_dir,
               const std::string& eval_dir, const std::vector<std::string>& variants) {
    const ExperimentConfig cfg = resolve(c);
    cfg.validate();
    if (data_dir.empty()) throw ConfigError("ablate needs --data");
    std::vector<std::string> names = variants.empty() ? cfg.ablate_variants : variants;
    if (names.empty()) names = {"full", "no_scab"};
    std::vector<VariantSpec> specs;
    for (const std::string& n : names) specs.push_back(parse_variant_spec(n, cfg.grid));

    AblationData data;
    const std::vector<HazeSample> all = read_dataset(data_dir);
    if (eval_dir.empty()) {
        // Without a separate evaluation set, score on the held-out split.
        auto [train, val] = split_dataset(all);
        data.train = std::move(train);
        data.eval = val.empty() ? data.train : std::move(val);
    } else {
        data.train = all;
        data.eval = read_dataset(eval_dir);
    }
    if (!finetune_dir.empty()) data.finetune = read_dataset(finetune_dir);

    std::vector<std::uint64_t> seeds = cfg.ablate_seeds;
    if (c.seed_opt->count() || seeds.empty()) seeds = {cfg.seed};

    const fs::path out = out_dir(c, "ablate");
    ensure_dir(out);
    const std::vector<AblationRow> rows = run_ablation(cfg, specs, data, seeds, &std::cout);
    std::ofstream jl(out / "ablation.jsonl", std::ios::trunc);
    if (!jl) throw IoError("cannot write " + (out / "ablation.jsonl").string());
    int failures = 0;
    for (const AblationRow& r : rows) {
        json j{{"variant", r.label}, {"seed", r.seed},  {"params", r.params},
               {"psnr", r.psnr},     {"ssim", r.ssim}, {"steps", r.steps},
               {"train_data", r.train_data_hash}, {"eval_data", r.eval_data_hash}};
        if (r.error) {
            j["error"] = *r.error;
            ++failures;
        }
        jl << j.dump() << '\n';
    }
    const std::string table = format_ablation_table(rows);
    std::ofstream(out / "ablation.md", std::ios::trunc) << table;
    std::cout << '\n' << table;
    if (failures == static_cast<int>(rows.size())) throw InputError("ablate: every variant failed");
    if (failures) std::cerr << "warning: " << failures << " of " << rows.size() << " runs failed\n";
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Grid dehazing network: data synthesis, training, inference and evaluation"};
    app.require_subcommand(1);

    Common common;
    bool translated = false, no_itkt = false, dump = false;
    std::string data, teacher, resume, variant, checkpoint, finetune_data, eval_data;
    std::vector<std::string> inputs, variants;
    long stop_after = -1;

    CLI::App* synth = app.add_subcommand("synth", "Generate a paired synthetic hazy dataset");
    add_common(synth, common);
    synth->add_flag("--translated", translated, "Apply the domain-shift proxy (also keeps the plain hazy image)");

    CLI::App* train = app.add_subcommand("train", "Pretrain on synthetic data");
    add_common(train, common);
    train->add_option("--data", data, "Dataset directory");
    train->add_option("--resume", resume, "Checkpoint to resume from");
    train->add_option("--variant", variant, "Architecture variant or output head");
    train->add_option("--stop-after", stop_after, "Stop after this global step, as if interrupted");

    CLI::App* finetune = app.add_subcommand("finetune", "Finetune a pretrained model on translated data");
    add_common(finetune, common);
    finetune->add_option("--data", data, "Translated dataset directory");
    finetune->add_option("--teacher", teacher, "Pretrained checkpoint (teacher and student initialisation)");
    finetune->add_option("--resume", resume, "Checkpoint to resume from");
    finetune->add_flag("--no-itkt", no_itkt, "Plain finetuning without the teacher");
    finetune->add_option("--stop-after", stop_after, "Stop after this global step, as if interrupted");

    CLI::App* dehaze = app.add_subcommand("dehaze", "Dehaze PNG images with a checkpoint");
    add_common(dehaze, common);
    dehaze->add_option("--checkpoint", checkpoint, "Model checkpoint");
    dehaze->add_flag("--dump-learned-inputs", dump, "Also write the learned input maps as grayscale PNGs");
    dehaze->add_option("inputs", inputs, "PNG files or directories")->required();

    CLI::App* eval = app.add_subcommand("eval", "PSNR / SSIM of a checkpoint on a paired dataset");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "Model checkpoint");
    eval->add_option("--data", data, "Paired dataset directory");

    CLI::App* ablate = app.add_subcommand("ablate", "Train and compare variants under identical seeds and data");
    add_common(ablate, common);
    ablate->add_option("--data", data, "Training dataset directory");
    ablate->add_option("--finetune-data", finetune_data, "Translated dataset for the ITKT stages");
    ablate->add_option("--eval-data", eval_data, "Evaluation dataset (default: held-out split of --data)");
    ablate->add_option("--variant", variants, "Variant to include (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(common, translated);
        if (*train) return cmd_train(common, data, resume, variant, stop_after);
        if (*finetune) return cmd_finetune(common, data, teacher, resume, no_itkt, stop_after);
        if (*dehaze) return cmd_dehaze(common, checkpoint, inputs, dump);
        if (*eval) return cmd_eval(common, checkpoint, data);
        if (*ablate) return cmd_ablate(common, data, finetune_data, eval_data, variants);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return InternalError("").exit_code();
    }
    return 2;
}

}  // namespace dehaze
