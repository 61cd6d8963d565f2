#include "dehaze/experiment.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dehaze/error.hpp"
#include "dehaze/image_io.hpp"
#include "dehaze/training.hpp"

namespace dehaze {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

// Runs body(i) for i in [0, n) on up to `workers` threads, rethrowing the
// first failure after all threads finish.
template <typename Body>
void parallel_for(std::size_t n, int workers, Body body) {
    const std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
    if (nw <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(nw);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nw; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += nw) body(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

std::vector<HazeSample> generate_dataset(const DatasetSpec& spec, int workers) {
    spec.validate();
    std::vector<fs::path> images;
    if (spec.image_dir) images = list_pngs(*spec.image_dir);
    std::vector<HazeSample> out(static_cast<std::size_t>(spec.count));
    parallel_for(out.size(), workers, [&](std::size_t i) { out[i] = make_sample(spec, static_cast<int>(i), images); });
    return out;
}

std::string write_dataset(const fs::path& dir, const std::vector<HazeSample>& samples,
                          const std::vector<HazeSample>* untranslated) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create dataset directory " + dir.string());
    if (untranslated && untranslated->size() != samples.size()) {
        throw InternalError("write_dataset: untranslated set has a different size");
    }
    const fs::path manifest = dir / kManifestName;
    std::ofstream os(manifest, std::ios::trunc);
    if (!os) throw IoError("cannot write " + manifest.string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const HazeSample& s = samples[i];
        json line{{"id", s.id},
                  {"clear", s.id + "_clear.png"},
                  {"hazy", s.id + "_hazy.png"},
                  {"transmission", s.id + "_t.png"},
                  {"beta", s.beta},
                  {"airlight", s.airlight},
                  {"domain", std::string(to_string(s.domain))}};
        write_png_rgb8(dir / (s.id + "_clear.png"), s.clear);
        write_png_rgb8(dir / (s.id + "_hazy.png"), s.hazy);
        write_png_gray16(dir / (s.id + "_t.png"), s.transmission);
        if (untranslated) {
            line["hazy_synthetic"] = s.id + "_hazy_synthetic.png";
            write_png_rgb8(dir / (s.id + "_hazy_synthetic.png"), (*untranslated)[i].hazy);
        }
        os << line.dump() << '\n';
    }
    os.close();
    if (!os) throw IoError("failed writing " + manifest.string());
    return file_hash(manifest);
}

std::vector<HazeSample> read_dataset(const fs::path& dir) {
    const fs::path manifest = dir / kManifestName;
    std::ifstream is(manifest);
    if (!is) throw IoError("cannot read dataset manifest " + manifest.string());
    std::vector<HazeSample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = manifest.string() + ":" + std::to_string(lineno);
        HazeSample s;
        try {
            const json j = json::parse(line);
            s.id = j.at("id").get<std::string>();
            if (!j.contains("clear") || !j.contains("hazy")) {
                throw InputError(where + ": sample " + s.id + " is not a hazy/clear pair");
            }
            s.hazy = read_png(dir / j.at("hazy").get<std::string>());
            s.clear = read_png(dir / j.at("clear").get<std::string>());
            if (j.contains("transmission")) s.transmission = read_png_gray16(dir / j.at("transmission").get<std::string>());
            s.beta = j.value("beta", 0.0);
            s.airlight = j.value("airlight", 0.0);
            s.domain = parse_domain(j.value("domain", "synthetic"));
        } catch (const json::exception& e) {
            throw InputError(where + ": " + e.what());
        }
        if (s.hazy.shape() != s.clear.shape()) throw InputError(where + ": hazy and clear sizes differ");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw InputError("dataset " + dir.string() + " is empty");
    return out;
}

std::string file_hash(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(is)), {});
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

std::string dataset_hash(const std::vector<HazeSample>& samples) {
    std::string buf;
    for (const HazeSample& s : samples) {
        buf += s.id;
        for (const Tensor* t : {&s.hazy, &s.clear}) {
            buf.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(double));
        }
    }
    return hex64(fnv1a64(buf.data(), buf.size()));
}

PerceptualExtractor make_extractor(const ExperimentConfig& config) {
    if (config.extractor_weights) return PerceptualExtractor::load(*config.extractor_weights);
    return PerceptualExtractor::fixed_random(config.extractor_seed);
}

VariantSpec parse_variant_spec(std::string_view name, const GridConfig& base) {
    VariantSpec v{std::string(name), base, AblationKind::architecture};
    if (name == "direct" || name == "indirect") {
        v.grid.variant = Variant::full;
        v.grid.output_head = parse_output_head(name);
    } else if (name == "pretrained_only") {
        v.kind = AblationKind::pretrained_only;
    } else if (name == "wo_itkt") {
        v.kind = AblationKind::finetune_plain;
    } else if (name == "w_itkt") {
        v.kind = AblationKind::finetune_itkt;
    } else {
        v.grid.variant = parse_variant(name);
    }
    v.grid.validate();
    return v;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& config, const std::vector<VariantSpec>& specs,
                                      const AblationData& data, const std::vector<std::uint64_t>& seeds,
                                      std::ostream* progress) {
    PerceptualExtractor extractor = make_extractor(config);
    const std::string train_hash = dataset_hash(data.train);
    const std::string finetune_hash = dataset_hash(data.finetune);
    const std::string eval_hash = dataset_hash(data.eval);
    std::vector<AblationRow> rows;
    for (const std::uint64_t seed : seeds) {
        // The ITKT stages share one pretrained model per seed.
        std::optional<CheckpointBundle> pretrained;
        long pretrain_steps = 0;
        for (const VariantSpec& spec : specs) {
            AblationRow row;
            row.label = spec.label;
            row.seed = seed;
            row.eval_data_hash = eval_hash;
            row.train_data_hash = train_hash;
            try {
                Model model;
                if (spec.kind == AblationKind::architecture) {
                    TrainResult r = pretrain(build(spec.grid, seed), data.train, config.train, extractor, seed);
                    row.steps = static_cast<long>(r.records.size());
                    model = std::move(r.bundle.model);
                } else {
                    if (!pretrained || pretrained->model.config.fingerprint() != spec.grid.fingerprint()) {
                        TrainResult r = pretrain(build(spec.grid, seed), data.train, config.train, extractor, seed);
                        pretrain_steps = static_cast<long>(r.records.size());
                        pretrained = std::move(r.bundle);
                    }
                    row.steps = pretrain_steps;
                    model = pretrained->model;
                    if (spec.kind != AblationKind::pretrained_only) {
                        if (data.finetune.empty()) throw ConfigError(spec.label + " needs finetuning data");
                        const std::uint64_t ft_seed = derive_seed(seed, 1, 0xf17e);
                        TrainResult r = spec.kind == AblationKind::finetune_itkt
                                            ? finetune_itkt(model, data.finetune, config.train, extractor, ft_seed)
                                            : finetune_plain(model, data.finetune, config.train, extractor, ft_seed);
                        row.steps += static_cast<long>(r.records.size());
                        row.train_data_hash = train_hash + "+" + finetune_hash;
                        model = std::move(r.bundle.model);
                    }
                }
                row.params = param_count(model);
                const MetricReport rep = evaluate(model, data.eval, config.workers);
                row.psnr = rep.mean_psnr;
                row.ssim = rep.mean_ssim;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            if (progress) {
                *progress << "[ablate] " << row.label << " seed " << seed;
                if (row.error) {
                    *progress << " FAILED: " << *row.error << '\n';
                } else {
                    *progress << std::fixed << std::setprecision(3) << " psnr " << row.psnr << " ssim "
                              << std::setprecision(4) << row.ssim << " params " << row.params << " steps " << row.steps
                              << '\n';
                }
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    struct Agg {
        double psnr = 0.0, ssim = 0.0;
        int ok = 0, failed = 0;
        long params = 0;
        std::string error;
    };
    std::vector<std::string> order;
    std::map<std::string, Agg> agg;
    for (const AblationRow& r : rows) {
        if (!agg.count(r.label)) order.push_back(r.label);
        Agg& a = agg[r.label];
        if (r.error) {
            ++a.failed;
            if (a.error.empty()) a.error = *r.error;
            continue;
        }
        a.psnr += r.psnr;
        a.ssim += r.ssim;
        a.params = r.params;
        ++a.ok;
    }
    std::ostringstream os;
    os << "| variant | PSNR (dB) | SSIM | params | seeds |\n";
    os << "|---|---|---|---|---|\n";
    for (const std::string& label : order) {
        const Agg& a = agg[label];
        os << "| " << label << " | ";
        if (a.ok == 0) {
            os << "FAILED | - | - | 0 (" << a.error << ") |\n";
            continue;
        }
        os << std::fixed << std::setprecision(2) << a.psnr / a.ok << " | " << std::setprecision(4) << a.ssim / a.ok
           << " | " << a.params << " | " << a.ok;
        if (a.failed) os << " (+" << a.failed << " failed)";
        os << " |\n";
    }
    return os.str();
}

}  // namespace dehaze
