#include "byb/config.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "byb/baselines.hpp"
#include "byb/checkpoint.hpp"

namespace byb {

const char* kCodeVersion = "byb 0.1.0";

namespace {

bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("expected a boolean, got '" + v + "'");
}

std::int64_t parse_int(const std::string& v) {
    try {
        std::size_t used = 0;
        const std::int64_t r = std::stoll(v, &used);
        if (used != v.size()) throw ConfigError("");
        return r;
    } catch (...) {
        throw ConfigError("expected an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& v) {
    try {
        std::size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) throw ConfigError("");
        return r;
    } catch (...) {
        throw ConfigError("expected a number, got '" + v + "'");
    }
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    explicit_keys[key] = value;
    if (key == "method") method = value;
    else if (key == "dataset") dataset_path = value;
    else if (key == "checkpoint") checkpoint_path = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "pool_window_seconds") pool_window_seconds = parse_int(value);
    else if (key == "prediction_window_seconds") prediction_window_seconds = parse_int(value);
    else if (key == "observation_days") observation_days = static_cast<int>(parse_int(value));
    else if (key == "preset") preset = value;
    else if (key == "d_model") d_model = parse_int(value);
    else if (key == "ff_dim") ff_dim = parse_int(value);
    else if (key == "layers") layers = parse_int(value);
    else if (key == "heads") heads = parse_int(value);
    else if (key == "m_max") m_max = parse_int(value);
    else if (key == "max_id") max_id = static_cast<std::uint32_t>(parse_int(value));
    else if (key == "loss") loss = value;
    else if (key == "ce_form") ce_form = value;
    else if (key == "temperature") temperature = parse_double(value);
    else if (key == "lr") lr = parse_double(value);
    else if (key == "weight_decay") weight_decay = parse_double(value);
    else if (key == "momentum") momentum = parse_double(value);
    else if (key == "epochs") epochs = static_cast<int>(parse_int(value));
    else if (key == "finetune_epochs") finetune_epochs = static_cast<int>(parse_int(value));
    else if (key == "batch_size") batch_size = static_cast<std::uint64_t>(parse_int(value));
    else if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(value));
    else if (key == "mode") mode = value;
    else if (key == "task") task = value;
    else if (key == "linear_head") linear_head = parse_bool(value);
    else if (key == "no_ema") no_ema = parse_bool(value);
    else if (key == "no_predictor") no_predictor = parse_bool(value);
    else if (key == "mask_ratio") mask_ratio = parse_double(value);
    else if (key == "msdp_vocab") msdp_vocab = parse_int(value);
    else if (key == "bench_warmup") bench_warmup = static_cast<int>(parse_int(value));
    else if (key == "bench_steps") bench_steps = static_cast<int>(parse_int(value));
    else if (key == "unpooled_cap") unpooled_cap = parse_int(value);
    else if (key == "export_n") export_n = static_cast<std::uint64_t>(parse_int(value));
    else if (key == "attn_samples") attn_samples = static_cast<std::uint64_t>(parse_int(value));
    else if (key == "checkpoint_every") checkpoint_every = static_cast<int>(parse_int(value));
    else if (key == "log_wall_time") log_wall_time = parse_bool(value);
    else if (key == "gen_users") gen_users = static_cast<int>(parse_int(value));
    else if (key == "gen_days") gen_days = static_cast<int>(parse_int(value));
    else if (key == "gen_horizon_days") gen_horizon_days = static_cast<int>(parse_int(value));
    else if (key == "gen_avg_events") gen_avg_events = parse_double(value);
    else if (key == "gen_categories") gen_categories = static_cast<int>(parse_int(value));
    else if (key == "gen_ids_min") gen_ids_min = static_cast<int>(parse_int(value));
    else if (key == "gen_ids_max") gen_ids_max = static_cast<int>(parse_int(value));
    else if (key == "gen_periodicity") gen_periodicity = parse_double(value);
    else if (key == "gen_drift") gen_drift = parse_double(value);
    else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate_model_choice() const {
    if (!preset.empty()) {
        const bool explicit_dims = explicit_keys.count("d_model") || explicit_keys.count("ff_dim") ||
                                   explicit_keys.count("layers");
        if (explicit_dims)
            throw ConfigError("preset and explicit model dimensions are mutually exclusive");
        if (!seq_model_preset(preset))
            throw ConfigError("unknown preset '" + preset + "'");
    }
    if (mode != "freeze" && mode != "unfreeze")
        throw ConfigError("mode must be freeze or unfreeze, got '" + mode + "'");
    if (loss != "ce" && loss != "mse") throw ConfigError("loss must be ce or mse");
    if (ce_form != "distillation" && ce_form != "literal")
        throw ConfigError("ce_form must be distillation or literal");
    if (method != "byb" && !baseline_from_name(method))
        throw ConfigError("unknown method '" + method + "'");
}

GeneratorConfig RunConfig::generator_config() const {
    GeneratorConfig g;
    g.num_users = gen_users;
    g.num_days = gen_days;
    g.horizon_days = gen_horizon_days;
    g.avg_events_per_day = gen_avg_events;
    g.vocab_size = max_id;
    g.num_categories = gen_categories;
    g.ids_min = gen_ids_min;
    g.ids_max = gen_ids_max;
    g.periodicity_strength = gen_periodicity;
    g.drift_strength = gen_drift;
    g.seed = seed;
    return g;
}

WindowPlan RunConfig::window_plan() const {
    WindowPlan plan;
    plan.pool_window_seconds = pool_window_seconds;
    plan.prediction_window_seconds = prediction_window_seconds;
    plan.observation_seconds = static_cast<std::int64_t>(observation_days) * kSecondsPerDay;
    plan.validate();
    return plan;
}

SeqModelConfig RunConfig::seq_model_config() const {
    SeqModelConfig cfg;
    if (!preset.empty()) {
        auto p = seq_model_preset(preset);
        if (!p) throw ConfigError("unknown preset '" + preset + "'");
        cfg = *p;
    } else {
        cfg.d_model = d_model;
        cfg.ff_dim = ff_dim;
        cfg.num_layers = layers;
    }
    cfg.num_heads = heads;
    cfg.max_positions = std::max<Index>(observation_days + 1, 8);
    cfg.validate();
    return cfg;
}

LossConfig RunConfig::loss_config() const {
    LossConfig lc;
    lc.kind = loss == "mse" ? LossConfig::Kind::mse : LossConfig::Kind::cross_entropy;
    lc.temperature = temperature;
    lc.ce_form = ce_form == "literal" ? LossConfig::CeForm::literal
                                      : LossConfig::CeForm::distillation;
    lc.validate();
    return lc;
}

AdamConfig RunConfig::adam_config() const {
    AdamConfig ac;
    ac.lr = lr;
    ac.weight_decay = weight_decay;
    return ac;
}

PretrainOptions RunConfig::pretrain_options() const {
    PretrainOptions opts;
    opts.plan = window_plan();
    opts.loss = loss_config();
    opts.adam = adam_config();
    opts.epochs = epochs;
    opts.batch_size = batch_size;
    opts.seed = seed;
    opts.use_predictor = !no_predictor;
    opts.checkpoint_every = checkpoint_every;
    opts.out_dir = out_dir;
    opts.log_wall_time = log_wall_time;
    return opts;
}

FinetuneOptions RunConfig::finetune_options() const {
    FinetuneOptions opts;
    opts.plan = window_plan();
    opts.mode = mode == "unfreeze" ? FinetuneMode::unfreeze : FinetuneMode::freeze;
    opts.epochs = finetune_epochs;
    opts.batch_size = batch_size;
    opts.adam = adam_config();
    opts.seed = seed;
    opts.linear_head = linear_head;
    opts.out_dir = out_dir;
    opts.log_wall_time = log_wall_time;
    return opts;
}

std::map<std::string, std::string> RunConfig::to_map() const {
    auto fmt_d = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    std::map<std::string, std::string> m;
    m["method"] = method;
    m["dataset"] = dataset_path;
    m["checkpoint"] = checkpoint_path;
    m["out_dir"] = out_dir;
    m["pool_window_seconds"] = std::to_string(pool_window_seconds);
    m["prediction_window_seconds"] = std::to_string(prediction_window_seconds);
    m["observation_days"] = std::to_string(observation_days);
    if (!preset.empty()) m["preset"] = preset;
    if (preset.empty()) {
        m["d_model"] = std::to_string(d_model);
        m["ff_dim"] = std::to_string(ff_dim);
        m["layers"] = std::to_string(layers);
    }
    m["heads"] = std::to_string(heads);
    m["m_max"] = std::to_string(m_max);
    m["max_id"] = std::to_string(max_id);
    m["loss"] = loss;
    m["ce_form"] = ce_form;
    m["temperature"] = fmt_d(temperature);
    m["lr"] = fmt_d(lr);
    m["weight_decay"] = fmt_d(weight_decay);
    m["momentum"] = fmt_d(momentum);
    m["epochs"] = std::to_string(epochs);
    m["finetune_epochs"] = std::to_string(finetune_epochs);
    m["batch_size"] = std::to_string(batch_size);
    m["seed"] = std::to_string(seed);
    m["mode"] = mode;
    if (!task.empty()) m["task"] = task;
    m["linear_head"] = linear_head ? "1" : "0";
    m["no_ema"] = no_ema ? "1" : "0";
    m["no_predictor"] = no_predictor ? "1" : "0";
    if (mask_ratio > 0.0) m["mask_ratio"] = fmt_d(mask_ratio);
    m["msdp_vocab"] = std::to_string(msdp_vocab);
    m["bench_warmup"] = std::to_string(bench_warmup);
    m["bench_steps"] = std::to_string(bench_steps);
    m["unpooled_cap"] = std::to_string(unpooled_cap);
    m["export_n"] = std::to_string(export_n);
    m["attn_samples"] = std::to_string(attn_samples);
    m["checkpoint_every"] = std::to_string(checkpoint_every);
    m["log_wall_time"] = log_wall_time ? "1" : "0";
    m["gen_users"] = std::to_string(gen_users);
    m["gen_days"] = std::to_string(gen_days);
    m["gen_horizon_days"] = std::to_string(gen_horizon_days);
    m["gen_avg_events"] = fmt_d(gen_avg_events);
    m["gen_categories"] = std::to_string(gen_categories);
    m["gen_ids_min"] = std::to_string(gen_ids_min);
    m["gen_ids_max"] = std::to_string(gen_ids_max);
    m["gen_periodicity"] = fmt_d(gen_periodicity);
    m["gen_drift"] = fmt_d(gen_drift);
    return m;
}

void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    const std::string text = buf.str();

    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path + ": " + e.what());
        }
        const nlohmann::json& conf = j.contains("config") ? j.at("config") : j;
        for (const auto& [key, value] : conf.items())
            cfg.set(key, value.is_string() ? value.get<std::string>() : value.dump());
        return;
    }

    std::istringstream lines(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

std::string manifest_json(const RunConfig& cfg, const std::string& subcommand) {
    nlohmann::json j;
    j["subcommand"] = subcommand;
    j["seed"] = cfg.seed;
    j["code_version"] = kCodeVersion;
    j["format_versions"] = {{"checkpoint", kCheckpointVersion}, {"jsonl", 1}};
    j["config"] = cfg.to_map();
    return j.dump(2);
}

void write_manifest(const RunConfig& cfg, const std::string& subcommand) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream os(cfg.out_dir + "/manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write manifest under " + cfg.out_dir);
    os << manifest_json(cfg, subcommand) << '\n';
}

}  // namespace byb
