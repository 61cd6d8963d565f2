#include "dehaze/config.hpp"

#include <fstream>
#include <set>

#include "dehaze/error.hpp"

namespace dehaze {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and rejects any it was not asked about.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const json* object(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key())) throw ConfigError(where_ + ": unknown key '" + item.key() + "'");
        }
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
void get_enum(Reader& r, const char* key, Enum& out, Parse parse) {
    std::string tmp;
    r.get(key, tmp);
    if (!tmp.empty()) out = parse(tmp);
}

void get_range(Reader& r, const char* key, std::pair<double, double>& out) {
    std::vector<double> v{out.first, out.second};
    r.get(key, v);
    if (v.size() != 2) throw ConfigError(std::string(key) + ": expected [lo, hi]");
    out = {v[0], v[1]};
}

}  // namespace

json to_json(const GridConfig& c) {
    return {{"rows", c.rows},
            {"cols", c.cols},
            {"scale_channels", c.scale_channels},
            {"rdbs_per_row", c.rdbs_per_row},
            {"rdb_convs", c.rdb_convs},
            {"growth_rate", c.growth_rate},
            {"cab_reduction", c.cab_reduction},
            {"sab_kernel", c.sab_kernel},
            {"variant", std::string(to_string(c.variant))},
            {"output_head", std::string(to_string(c.output_head))}};
}

GridConfig grid_config_from_json(const json& j, GridConfig c) {
    Reader r(j, "grid");
    r.get("rows", c.rows);
    r.get("cols", c.cols);
    r.get("scale_channels", c.scale_channels);
    r.get("rdbs_per_row", c.rdbs_per_row);
    r.get("rdb_convs", c.rdb_convs);
    r.get("growth_rate", c.growth_rate);
    r.get("cab_reduction", c.cab_reduction);
    r.get("sab_kernel", c.sab_kernel);
    get_enum(r, "variant", c.variant, parse_variant);
    get_enum(r, "output_head", c.output_head, parse_output_head);
    r.finish();
    return c;
}

json to_json(const LossWeights& w) { return {{"lambda_p", w.lambda_p}, {"lambda_kt", w.lambda_kt}}; }

LossWeights loss_weights_from_json(const json& j, LossWeights w) {
    Reader r(j, "loss_weights");
    r.get("lambda_p", w.lambda_p);
    r.get("lambda_kt", w.lambda_kt);
    r.finish();
    return w;
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"patch", c.patch},
            {"lr0", c.lr0},
            {"lr_halving_period", c.lr_halving_period},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"steps_per_epoch", c.steps_per_epoch},
            {"loss_weights", to_json(c.loss_weights)},
            {"mode", std::string(to_string(c.mode))}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    Reader r(j, "train");
    r.get("epochs", c.epochs);
    r.get("batch_size", c.batch_size);
    r.get("patch", c.patch);
    r.get("lr0", c.lr0);
    r.get("lr_halving_period", c.lr_halving_period);
    r.get("adam_beta1", c.adam_beta1);
    r.get("adam_beta2", c.adam_beta2);
    r.get("adam_eps", c.adam_eps);
    r.get("steps_per_epoch", c.steps_per_epoch);
    if (const json* w = r.object("loss_weights")) c.loss_weights = loss_weights_from_json(*w, c.loss_weights);
    get_enum(r, "mode", c.mode, parse_train_mode);
    r.finish();
    return c;
}

json to_json(const DomainShiftParams& p) {
    return {{"beta_scale", p.beta_scale},
            {"color_cast", p.color_cast},
            {"gamma_jitter", p.gamma_jitter},
            {"noise_sigma", p.noise_sigma}};
}

DomainShiftParams domain_shift_from_json(const json& j, DomainShiftParams p) {
    Reader r(j, "domain_shift");
    r.get("beta_scale", p.beta_scale);
    r.get("color_cast", p.color_cast);
    r.get("gamma_jitter", p.gamma_jitter);
    r.get("noise_sigma", p.noise_sigma);
    r.finish();
    return p;
}

DatasetSpec DataConfig::spec(std::uint64_t seed) const {
    DatasetSpec s;
    s.count = count;
    s.beta_range = beta_range;
    s.airlight_range = airlight_range;
    s.height = height;
    s.width = width;
    s.seed = seed;
    s.d_max = d_max;
    if (translated) s.domain_shift = domain_shift;
    s.image_dir = image_dir;
    return s;
}

json to_json(const DataConfig& c) {
    json j{{"count", c.count},
           {"beta_range", {c.beta_range.first, c.beta_range.second}},
           {"airlight_range", {c.airlight_range.first, c.airlight_range.second}},
           {"height", c.height},
           {"width", c.width},
           {"d_max", c.d_max},
           {"translated", c.translated},
           {"domain_shift", to_json(c.domain_shift)}};
    if (c.image_dir) j["image_dir"] = c.image_dir->string();
    return j;
}

DataConfig data_config_from_json(const json& j, DataConfig c) {
    Reader r(j, "data");
    r.get("count", c.count);
    get_range(r, "beta_range", c.beta_range);
    get_range(r, "airlight_range", c.airlight_range);
    r.get("height", c.height);
    r.get("width", c.width);
    r.get("d_max", c.d_max);
    r.get("translated", c.translated);
    if (const json* d = r.object("domain_shift")) c.domain_shift = domain_shift_from_json(*d, c.domain_shift);
    std::string dir;
    r.get("image_dir", dir);
    if (!dir.empty()) c.image_dir = dir;
    r.finish();
    return c;
}

void ExperimentConfig::validate() const {
    grid.validate();
    train.validate();
    try {
        data.spec(seed).validate();
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("data: ") + e.what());
    }
    if (workers < 1) throw ConfigError("workers must be at least 1");
}

json to_json(const ExperimentConfig& c) {
    json j{{"grid", to_json(c.grid)},
           {"train", to_json(c.train)},
           {"data", to_json(c.data)},
           {"seed", c.seed},
           {"workers", c.workers},
           {"extractor_seed", c.extractor_seed},
           {"ablate", {{"variants", c.ablate_variants}, {"seeds", c.ablate_seeds}}}};
    if (c.extractor_weights) j["extractor_weights"] = c.extractor_weights->string();
    return j;
}

ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c) {
    Reader r(j, "config");
    if (const json* g = r.object("grid")) c.grid = grid_config_from_json(*g, c.grid);
    if (const json* t = r.object("train")) c.train = train_config_from_json(*t, c.train);
    if (const json* d = r.object("data")) c.data = data_config_from_json(*d, c.data);
    r.get("seed", c.seed);
    r.get("workers", c.workers);
    r.get("extractor_seed", c.extractor_seed);
    std::string weights;
    r.get("extractor_weights", weights);
    if (!weights.empty()) c.extractor_weights = weights;
    if (const json* a = r.object("ablate")) {
        Reader ar(*a, "ablate");
        ar.get("variants", c.ablate_variants);
        ar.get("seeds", c.ablate_seeds);
        ar.finish();
    }
    r.finish();
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(is, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

}  // namespace dehaze
