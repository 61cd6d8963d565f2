#include "dehaze/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dehaze/archive.hpp"
#include "dehaze/config.hpp"
#include "dehaze/error.hpp"
#include "dehaze/kernels.hpp"

namespace dehaze {

using nlohmann::json;

namespace {

std::uint64_t uniform_index(Rng& rng, std::uint64_t n) { return rng() % n; }

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string rng_to_string(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

Rng rng_from_string(const std::string& s) {
    std::istringstream is(s);
    Rng rng;
    is >> rng;
    if (!is) throw InputError("checkpoint: malformed RNG state");
    return rng;
}

json to_json(const RunState& s) {
    return {{"epoch", s.epoch},
            {"step", s.step},
            {"lr", s.lr},
            {"epoch_steps", s.epoch_steps},
            {"sum_total", s.sum_total},
            {"sum_fidelity", s.sum_fidelity},
            {"sum_perceptual", s.sum_perceptual},
            {"sum_itkt", s.sum_itkt},
            {"rng", rng_to_string(s.rng)}};
}

RunState run_state_from_json(const json& j) {
    RunState s;
    s.epoch = j.at("epoch").get<int>();
    s.step = j.at("step").get<long>();
    s.lr = j.at("lr").get<double>();
    s.epoch_steps = j.at("epoch_steps").get<long>();
    s.sum_total = j.at("sum_total").get<double>();
    s.sum_fidelity = j.at("sum_fidelity").get<double>();
    s.sum_perceptual = j.at("sum_perceptual").get<double>();
    s.sum_itkt = j.at("sum_itkt").get<double>();
    s.rng = rng_from_string(j.at("rng").get<std::string>());
    return s;
}

json to_json(const StepRecord& r) {
    return {{"step", r.step},        {"epoch", r.epoch}, {"lr", r.lr},          {"fidelity", r.fidelity},
            {"perceptual", r.perceptual}, {"itkt", r.itkt}, {"total", r.total}};
}

// Keeps only the log lines written before `step`, so a resumed run appends
// exactly what the uninterrupted run would have written.
void truncate_log(const std::filesystem::path& path, long step) {
    std::ifstream is(path);
    if (!is) return;
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(is, line)) {
        try {
            const json j = json::parse(line);
            const long s = j.contains("step") ? j.at("step").get<long>() : j.at("end_step").get<long>();
            if (s < step) keep.push_back(line);
        } catch (const json::exception&) {
            break;  // torn final line from an interrupted write
        }
    }
    is.close();
    std::ofstream os(path, std::ios::trunc);
    for (const std::string& l : keep) os << l << '\n';
}

void check_tap_compatibility(const Model& student, const Model& teacher) {
    if (student.config.fingerprint() != teacher.config.fingerprint()) {
        throw ConfigError("teacher and student configurations differ; their feature taps cannot be aligned");
    }
    if (student.config.variant == Variant::ednet) throw ConfigError("the ednet variant has no fusion taps to distill");
}

}  // namespace

std::string_view to_string(TrainMode m) {
    switch (m) {
        case TrainMode::pretrain: return "pretrain";
        case TrainMode::finetune_itkt: return "finetune_itkt";
        case TrainMode::finetune_plain: return "finetune_plain";
    }
    return "?";
}

TrainMode parse_train_mode(std::string_view s) {
    if (s == "pretrain") return TrainMode::pretrain;
    if (s == "finetune_itkt") return TrainMode::finetune_itkt;
    if (s == "finetune_plain") return TrainMode::finetune_plain;
    throw ConfigError("unknown training mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (epochs < 0) fail("epochs must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (patch < 4 || patch % 4 != 0) fail("patch must be a positive multiple of 4");
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) fail("lr0 must be positive");
    if (lr_halving_period < 1) fail("lr_halving_period must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
    try {
        loss_weights.validate();
    } catch (const ParameterError& e) {
        fail(e.what());
    }
}

std::string TrainConfig::fingerprint() const {
    json j = to_json(*this);
    j.erase("epochs");
    const std::string s = j.dump();
    return hex64(fnv1a64(s.data(), s.size()));
}

double lr_schedule(int epoch, const TrainConfig& config) {
    if (epoch < 0) throw ParameterError("lr_schedule: epoch must be >= 0");
    return config.lr0 * std::ldexp(1.0, -(epoch / config.lr_halving_period));
}

bool is_validation_index(int index) { return index % 10 == 9; }

std::pair<std::vector<HazeSample>, std::vector<HazeSample>> split_dataset(const std::vector<HazeSample>& samples) {
    std::pair<std::vector<HazeSample>, std::vector<HazeSample>> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        (is_validation_index(static_cast<int>(i)) ? out.second : out.first).push_back(samples[i]);
    }
    return out;
}

PatchBatch sample_patches(const std::vector<HazeSample>& samples, int patch, int batch_size, Rng& rng) {
    if (samples.empty()) throw InputError("sample_patches: no samples");
    if (patch < 1 || batch_size < 1) throw ParameterError("sample_patches: patch and batch_size must be positive");
    for (const HazeSample& s : samples) {
        if (s.hazy.shape().h < patch || s.hazy.shape().w < patch) {
            throw InputError("sample_patches: sample " + s.id + " is smaller than the " + std::to_string(patch) + " patch");
        }
    }
    std::vector<Tensor> hazy, clear;
    for (int b = 0; b < batch_size; ++b) {
        const HazeSample& s = samples[uniform_index(rng, samples.size())];
        const Shape sh = s.hazy.shape();
        const int y0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(sh.h - patch + 1)));
        const int x0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(sh.w - patch + 1)));
        hazy.push_back(crop(s.hazy, y0, x0, patch, patch));
        clear.push_back(crop(s.clear, y0, x0, patch, patch));
    }
    return {stack_batch(hazy), stack_batch(clear)};
}

void adam_step(ParameterStore& store, AdamState& state, double lr, const TrainConfig& config) {
    if (state.m.size() != store.size()) {
        state.m.assign(store.size(), Tensor());
        state.v.assign(store.size(), Tensor());
    }
    ++state.step;
    const double bias1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(state.step));
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < store.size(); ++i) {
        Parameter& p = store[static_cast<int>(i)];
        if (!p.trainable || p.grad.shape() != p.value.shape()) continue;
        if (state.m[i].shape() != p.value.shape()) {
            state.m[i] = Tensor(p.value.shape());
            state.v[i] = Tensor(p.value.shape());
        }
        k.adam_update(p.value.size(), p.value.data(), p.grad.data(), state.m[i].data(), state.v[i].data(), lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps, bias1, bias2);
    }
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& b) {
    Archive a;
    a.header["kind"] = "checkpoint";
    a.header["grid_config"] = to_json(b.model.config);
    a.header["grid_fingerprint"] = b.model.config.fingerprint();
    a.header["train_config"] = to_json(b.config);
    a.header["train_fingerprint"] = b.config.fingerprint();
    a.header["run_state"] = to_json(b.state);
    a.header["adam_step"] = b.optimizer.step;
    for (const Parameter& p : b.model.params.all()) a.tensors.emplace_back("param/" + p.name, p.value);
    for (std::size_t i = 0; i < b.optimizer.m.size(); ++i) {
        if (b.optimizer.m[i].empty()) continue;
        const std::string& name = b.model.params[static_cast<int>(i)].name;
        a.tensors.emplace_back("adam_m/" + name, b.optimizer.m[i]);
        a.tensors.emplace_back("adam_v/" + name, b.optimizer.v[i]);
    }
    write_archive(path, a);
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path, const GridConfig* expected) {
    Archive a = read_archive(path);
    CheckpointBundle b;
    try {
        if (a.header.value("kind", "") != "checkpoint") throw InputError(path.string() + " is not a checkpoint");
        const GridConfig grid = grid_config_from_json(a.header.at("grid_config"));
        const std::string stored = a.header.at("grid_fingerprint").get<std::string>();
        if (grid.fingerprint() != stored) throw InputError(path.string() + ": stored fingerprint does not match its config");
        if (expected && expected->fingerprint() != stored) {
            throw ConfigError("checkpoint " + path.string() + " was written for grid config " + stored + " (" +
                              grid.canonical() + "), expected " + expected->fingerprint() + " (" + expected->canonical() + ")");
        }
        b.config = train_config_from_json(a.header.at("train_config"));
        b.state = run_state_from_json(a.header.at("run_state"));
        b.optimizer.step = a.header.at("adam_step").get<long>();
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": malformed checkpoint header: " + e.what());
    }
    b.model = build(grid_config_from_json(a.header.at("grid_config")), 0);
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : a.tensors) by_name.emplace(name, &t);
    const std::size_t n = b.model.params.size();
    b.optimizer.m.assign(n, Tensor());
    b.optimizer.v.assign(n, Tensor());
    for (std::size_t i = 0; i < n; ++i) {
        Parameter& p = b.model.params[static_cast<int>(i)];
        const auto it = by_name.find("param/" + p.name);
        if (it == by_name.end() || it->second->shape() != p.value.shape()) {
            throw InputError(path.string() + ": missing or misshapen parameter " + p.name);
        }
        p.value = *it->second;
        const auto m = by_name.find("adam_m/" + p.name);
        const auto v = by_name.find("adam_v/" + p.name);
        if (m != by_name.end() && v != by_name.end()) {
            if (m->second->shape() != p.value.shape() || v->second->shape() != p.value.shape()) {
                throw InputError(path.string() + ": misshapen optimizer moments for " + p.name);
            }
            b.optimizer.m[i] = *m->second;
            b.optimizer.v[i] = *v->second;
        }
    }
    const std::size_t expected_tensors = n + 2 * static_cast<std::size_t>(std::count_if(
                                                     b.optimizer.m.begin(), b.optimizer.m.end(), [](const Tensor& t) { return !t.empty(); }));
    if (a.tensors.size() != expected_tensors) throw InputError(path.string() + ": unexpected extra tensors");
    return b;
}

TrainResult train(Model student, Model* teacher, const std::vector<HazeSample>& data, const TrainConfig& config,
                  PerceptualExtractor& extractor, std::uint64_t seed, const TrainOptions& options) {
    config.validate();
    if (data.empty()) throw InputError("training needs at least one sample");
    const bool itkt = config.mode == TrainMode::finetune_itkt;
    if (itkt) {
        if (!teacher) throw ConfigError("finetune_itkt needs a teacher model");
        check_tap_compatibility(student, *teacher);
        teacher->params.set_trainable(false);
    }
    const auto split = split_dataset(data);
    const std::vector<HazeSample>& train_set = split.first.empty() ? data : split.first;
    const long steps_per_epoch = config.steps_per_epoch > 0
                                     ? config.steps_per_epoch
                                     : (static_cast<long>(train_set.size()) + config.batch_size - 1) / config.batch_size;
    const long total_steps = steps_per_epoch * config.epochs;

    TrainResult result;
    CheckpointBundle& b = result.bundle;
    b.config = config;
    b.model = std::move(student);
    b.model.params.set_trainable(true);
    b.state.rng.seed(derive_seed(seed, 0, 0x7a1d));
    b.state.lr = lr_schedule(0, config);
    if (options.resume) {
        const CheckpointBundle& r = *options.resume;
        if (r.model.config.fingerprint() != b.model.config.fingerprint()) {
            throw ConfigError("resume checkpoint has a different grid configuration");
        }
        if (r.config.fingerprint() != config.fingerprint()) {
            throw ConfigError("resume checkpoint has a different training configuration");
        }
        for (std::size_t i = 0; i < b.model.params.size(); ++i) {
            b.model.params[static_cast<int>(i)].value = r.model.params[static_cast<int>(i)].value;
        }
        b.optimizer = r.optimizer;
        b.state = r.state;
    }

    std::ofstream log;
    if (options.log_path) {
        if (options.resume) {
            truncate_log(*options.log_path, b.state.step);
            log.open(*options.log_path, std::ios::app);
        } else {
            log.open(*options.log_path, std::ios::trunc);
        }
        if (!log) throw IoError("cannot write training log " + options.log_path->string());
    }

    const LossWeights& w = config.loss_weights;
    while (b.state.step < total_steps) {
        if (options.stop_after_step >= 0 && b.state.step >= options.stop_after_step) break;
        RunState& st = b.state;
        st.epoch = static_cast<int>(st.step / steps_per_epoch);
        st.lr = lr_schedule(st.epoch, config);
        const PatchBatch batch = sample_patches(train_set, config.patch, config.batch_size, st.rng);

        Tape tape(true);
        const Var x = tape.constant(batch.hazy);
        const Var y = tape.constant(batch.clear);
        const GraphOutput g = forward_graph(tape, b.model, x, itkt);
        const Var fid = fidelity_loss(tape, g.output, y);
        const Var perc = w.lambda_p > 0.0 ? perceptual_loss(tape, g.output, y, extractor) : Var{};
        Var kt;
        if (itkt) {
            Tape frozen(false);
            const GraphOutput tg = forward_graph(frozen, *teacher, frozen.constant(batch.hazy), true);
            std::vector<FeatureTap> teacher_taps;
            for (const FeatureTap& t : tg.taps) teacher_taps.push_back({t.row, t.col, tape.constant(frozen.value(t.value))});
            kt = itkt_loss(tape, g.taps, teacher_taps);
        }
        const Var total = total_loss(tape, fid, perc, kt, w);

        StepRecord rec;
        rec.step = st.step;
        rec.epoch = st.epoch;
        rec.lr = st.lr;
        rec.fidelity = tape.value(fid)[0];
        rec.perceptual = perc.valid() ? tape.value(perc)[0] : 0.0;
        rec.itkt = kt.valid() ? tape.value(kt)[0] : 0.0;
        rec.total = tape.value(total)[0];
        if (!std::isfinite(rec.total)) {
            throw NumericalError("non-finite loss at step " + std::to_string(st.step) + " (fidelity " +
                                 std::to_string(rec.fidelity) + ", perceptual " + std::to_string(rec.perceptual) +
                                 ", itkt " + std::to_string(rec.itkt) + ")");
        }

        b.model.params.zero_grad();
        tape.backward(total);
        adam_step(b.model.params, b.optimizer, st.lr, config);

        result.records.push_back(rec);
        if (log.is_open()) log << to_json(rec).dump() << '\n';
        if (options.on_step) options.on_step(rec);

        ++st.step;
        ++st.epoch_steps;
        st.sum_total += rec.total;
        st.sum_fidelity += rec.fidelity;
        st.sum_perceptual += rec.perceptual;
        st.sum_itkt += rec.itkt;
        if (st.step % steps_per_epoch == 0) {
            if (log.is_open()) {
                const double n = static_cast<double>(st.epoch_steps);
                log << json{{"epoch_summary", st.epoch},
                            {"end_step", st.step - 1},
                            {"mean_total", st.sum_total / n},
                            {"mean_fidelity", st.sum_fidelity / n},
                            {"mean_perceptual", st.sum_perceptual / n},
                            {"mean_itkt", st.sum_itkt / n}}
                           .dump()
                    << '\n';
                log.flush();
            }
            st.epoch_steps = 0;
            st.sum_total = st.sum_fidelity = st.sum_perceptual = st.sum_itkt = 0.0;
            st.epoch = static_cast<int>(st.step / steps_per_epoch);
            st.lr = lr_schedule(st.epoch, config);
            if (options.checkpoint_path) save_checkpoint(*options.checkpoint_path, b);
        }
    }
    if (options.checkpoint_path && b.state.step == total_steps) save_checkpoint(*options.checkpoint_path, b);
    return result;
}

TrainResult pretrain(Model model, const std::vector<HazeSample>& data, TrainConfig config, PerceptualExtractor& extractor,
                     std::uint64_t seed, const TrainOptions& options) {
    config.mode = TrainMode::pretrain;
    return train(std::move(model), nullptr, data, config, extractor, seed, options);
}

TrainResult finetune_itkt(Model& teacher, const std::vector<HazeSample>& data, TrainConfig config,
                          PerceptualExtractor& extractor, std::uint64_t seed, const TrainOptions& options) {
    config.mode = TrainMode::finetune_itkt;
    Model student = teacher;
    return train(std::move(student), &teacher, data, config, extractor, seed, options);
}

TrainResult finetune_plain(const Model& pretrained, const std::vector<HazeSample>& data, TrainConfig config,
                           PerceptualExtractor& extractor, std::uint64_t seed, const TrainOptions& options) {
    config.mode = TrainMode::finetune_plain;
    return train(pretrained, nullptr, data, config, extractor, seed, options);
}

double tap_distance(Model& student, Model& teacher, const ImageTensor& hazy) {
    const ForwardResult s = forward(student, hazy, true);
    const ForwardResult t = forward(teacher, hazy, true);
    if (s.taps.size() != t.taps.size() || s.taps.empty()) throw ConfigError("tap_distance: models expose different taps");
    double acc = 0.0;
    for (std::size_t k = 0; k < s.taps.size(); ++k) {
        const Tensor& a = s.taps[k].second;
        const Tensor& b = t.taps[k].second;
        for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    }
    return acc / static_cast<double>(s.taps.size());
}

ImageTensor dehaze_image(Model& model, const ImageTensor& hazy) {
    if (model.config.output_head == OutputHead::indirect) return forward_indirect(model, hazy).dehazed;
    return forward(model, hazy).output;
}

MetricReport evaluate(Model& model, const std::vector<HazeSample>& samples, int workers) {
    std::vector<ImageMetric> rows(samples.size());
    auto score = [&](std::size_t i) {
        const ImageTensor out = dehaze_image(model, samples[i].hazy);
        rows[i] = {samples[i].id, psnr(out, samples[i].clear), ssim(out, samples[i].clear)};
    };
    const std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), samples.size());
    if (nw <= 1) {
        for (std::size_t i = 0; i < samples.size(); ++i) score(i);
    } else {
        // Each worker writes disjoint rows, so the report is identical to
        // the serial one.
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(nw);
        for (std::size_t t = 0; t < nw; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < samples.size(); i += nw) score(i);
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
    return summarize(std::move(rows));
}

}  // namespace dehaze
