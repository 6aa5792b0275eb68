#pragma once

// Flat run configuration shared by the CLI subcommands. Values come from
// defaults, then an optional key=value config file (or a manifest.json from a
// previous run), then command-line flags.

#include <cstdint>
#include <map>
#include <string>

#include "byb/data.hpp"
#include "byb/finetune.hpp"
#include "byb/pretrain.hpp"
#include "byb/seq_model.hpp"

namespace byb {

struct RunConfig {
    std::string method = "byb";  // byb|nbp|mbm1|mbm2|cts|msdp|supervised
    std::string dataset_path;
    std::string checkpoint_path;
    std::string out_dir = "out";

    std::int64_t pool_window_seconds = kSecondsPerDay;        // dT1
    std::int64_t prediction_window_seconds = kSecondsPerDay;  // dT2
    int observation_days = 60;                                // T / 86400

    std::string preset;  // base|base_x2|base_x4|base_x8|base_x16; excludes explicit dims
    Index d_model = 128;
    Index ff_dim = 128;
    Index layers = 4;
    Index heads = 4;
    Index m_max = 8;
    std::uint32_t max_id = 999;

    std::string loss = "ce";  // ce|mse
    std::string ce_form = "distillation";
    double temperature = 0.1;

    double lr = 1e-4;
    double weight_decay = 1e-4;
    double momentum = 0.995;  // EMA momentum
    int epochs = 2;
    int finetune_epochs = 1;
    std::uint64_t batch_size = 64;  // production-scale runs use 512
    std::uint64_t seed = 0;

    std::string mode = "freeze";  // freeze|unfreeze
    std::string task;
    bool linear_head = false;

    bool no_ema = false;        // ablation: momentum forced to 0
    bool no_predictor = false;  // ablation: loss reads H directly
    double mask_ratio = 0.0;    // 0 selects the per-method default
    std::int64_t msdp_vocab = 200;

    int bench_warmup = 5;
    int bench_steps = 10;
    std::int64_t unpooled_cap = 2048;
    std::uint64_t export_n = 5000;
    std::uint64_t attn_samples = 256;
    int checkpoint_every = 0;
    bool log_wall_time = true;

    // generate subcommand (vocab/seed are shared with the model fields)
    int gen_users = 1000;
    int gen_days = 60;
    int gen_horizon_days = 30;
    double gen_avg_events = 20.0;
    int gen_categories = 10;
    int gen_ids_min = 1;
    int gen_ids_max = 4;
    double gen_periodicity = 0.0;
    double gen_drift = 0.0;

    // Tracks keys set explicitly (file or flag) for the preset/dims exclusivity check.
    std::map<std::string, std::string> explicit_keys;

    void set(const std::string& key, const std::string& value);
    void validate_model_choice() const;

    WindowPlan window_plan() const;
    GeneratorConfig generator_config() const;
    SeqModelConfig seq_model_config() const;
    LossConfig loss_config() const;
    AdamConfig adam_config() const;
    PretrainOptions pretrain_options() const;
    FinetuneOptions finetune_options() const;

    std::map<std::string, std::string> to_map() const;
};

// key=value lines, '#' comments; also accepts a manifest.json produced by a
// previous run (its "config" object is read back).
void load_config_file(RunConfig& cfg, const std::string& path);

// manifest.json payload: config echo, seed, format versions, code version.
std::string manifest_json(const RunConfig& cfg, const std::string& subcommand);
void write_manifest(const RunConfig& cfg, const std::string& subcommand);

extern const char* kCodeVersion;

}  // namespace byb
