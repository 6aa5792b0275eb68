// byb: pretraining, finetuning, evaluation, benchmarking, and export for
// user-behavior-sequence models.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "byb/baselines.hpp"
#include "byb/bench.hpp"
#include "byb/checkpoint.hpp"
#include "byb/config.hpp"

namespace {

using namespace byb;

// Pre-scan for --config so file values load before flag overrides.
void preload_config(RunConfig& cfg, int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") load_config_file(cfg, argv[i + 1]);
}

std::string g_config_path;  // consumed by preload_config before parsing

void add_common_flags(CLI::App* cmd, RunConfig& cfg) {
    cmd->add_option("--config", g_config_path,
                    "config file (key=value lines or a manifest.json)")
        ->check(CLI::ExistingFile);
    auto opt = [&cfg, cmd](const char* flag, const char* key, const char* help) {
        cmd->add_option_function<std::string>(
            flag, [&cfg, key](const std::string& v) { cfg.set(key, v); }, help);
    };
    opt("--dataset", "dataset", "JSONL dataset path");
    opt("--checkpoint", "checkpoint", "checkpoint archive path");
    opt("--out-dir", "out_dir", "output directory");
    opt("--method", "method", "byb|nbp|mbm1|mbm2|cts|msdp|supervised");
    opt("--preset", "preset", "model preset: base|base_x2|base_x4|base_x8|base_x16");
    opt("--d-model", "d_model", "embedding / model dimension");
    opt("--ff-dim", "ff_dim", "transformer feed-forward dimension");
    opt("--layers", "layers", "transformer layers");
    opt("--heads", "heads", "attention heads");
    opt("--m-max", "m_max", "max ids per behavior");
    opt("--max-id", "max_id", "largest behavior id I");
    opt("--pool-window-seconds", "pool_window_seconds", "pooling window dT1 in seconds");
    opt("--prediction-window-seconds", "prediction_window_seconds",
        "prediction window dT2 in seconds");
    opt("--observation-days", "observation_days", "observation window T in days");
    opt("--loss", "loss", "ce|mse");
    opt("--ce-form", "ce_form", "distillation|literal");
    opt("--temperature", "temperature", "softmax temperature");
    opt("--lr", "lr", "learning rate");
    opt("--weight-decay", "weight_decay", "decoupled weight decay");
    opt("--momentum", "momentum", "EMA momentum");
    opt("--epochs", "epochs", "pretraining epochs");
    opt("--finetune-epochs", "finetune_epochs", "finetuning epochs");
    opt("--batch-size", "batch_size", "batch size");
    opt("--seed", "seed", "rng seed");
    opt("--mode", "mode", "freeze|unfreeze");
    opt("--task", "task", "downstream task name");
    opt("--linear-head", "linear_head", "use a linear probe head (0/1)");
    opt("--no-ema", "no_ema", "ablation: disable the EMA teacher (0/1)");
    opt("--no-predictor", "no_predictor", "ablation: drop the predictor (0/1)");
    opt("--mask-ratio", "mask_ratio", "mbm mask ratio override");
    opt("--msdp-vocab", "msdp_vocab", "msdp vocabulary size");
    opt("--bench-warmup", "bench_warmup", "bench warmup steps");
    opt("--bench-steps", "bench_steps", "bench timed steps");
    opt("--unpooled-cap", "unpooled_cap", "raw-length cap for the unpooled bench variant");
    opt("--export-n", "export_n", "rows to export");
    opt("--attn-samples", "attn_samples", "samples to average attention over");
    opt("--checkpoint-every", "checkpoint_every", "checkpoint every N steps");
    opt("--log-wall-time", "log_wall_time", "record wall clock in metrics.csv (0/1)");
}

void add_generator_flags(CLI::App* cmd, RunConfig& cfg) {
    auto opt = [&cfg, cmd](const char* flag, const char* key, const char* help) {
        cmd->add_option_function<std::string>(
            flag, [&cfg, key](const std::string& v) { cfg.set(key, v); }, help);
    };
    opt("--num-users", "gen_users", "users to generate");
    opt("--num-days", "gen_days", "observation days");
    opt("--horizon-days", "gen_horizon_days", "label horizon days");
    opt("--avg-events", "gen_avg_events", "mean events per day");
    opt("--vocab", "max_id", "largest behavior id I");
    opt("--categories", "gen_categories", "planted categories");
    opt("--ids-min", "gen_ids_min", "min ids per event");
    opt("--ids-max", "gen_ids_max", "max ids per event");
    opt("--periodicity", "gen_periodicity", "weekly modulation in [0,1]");
    opt("--drift", "gen_drift", "preference drift in [0,1]");
}

BybModel build_model(const RunConfig& cfg) {
    SeqModelConfig seq_cfg = cfg.seq_model_config();
    const double m_ema = cfg.no_ema ? 0.0 : cfg.momentum;
    return init_byb_model(seq_cfg.d_model, cfg.max_id, cfg.m_max, seq_cfg, cfg.seed, m_ema);
}

BybModel load_model(const RunConfig& cfg, bool trainable) {
    if (cfg.checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
    NamedTensors entries = load_checkpoint(cfg.checkpoint_path);
    SeqModelConfig seq_cfg = cfg.seq_model_config();
    seq_cfg.d_model = checkpoint_get(entries, "student.embedding").cols();
    BybModel model = byb_model_from_checkpoint(entries, seq_cfg, cfg.m_max, trainable);
    model.encoders.m_ema = cfg.no_ema ? 0.0 : cfg.momentum;
    return model;
}

Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.dataset_path.empty()) throw ConfigError("--dataset is required");
    return read_jsonl(cfg.dataset_path);
}

int run_generate(const RunConfig& cfg) {
    Dataset dataset = generate_synthetic(cfg.generator_config());
    std::filesystem::create_directories(cfg.out_dir);
    write_jsonl(dataset, cfg.out_dir + "/dataset.jsonl");
    write_manifest(cfg, "generate");
    std::cout << "wrote " << dataset.size() << " samples to " << cfg.out_dir << "/dataset.jsonl\n";
    return 0;
}

int run_pretrain(const RunConfig& cfg) {
    Dataset dataset = load_dataset(cfg);
    BybModel model = build_model(cfg);
    PretrainOptions opts = cfg.pretrain_options();
    opts.progress = &std::cerr;
    write_manifest(cfg, "pretrain");

    PretrainStats stats;
    if (cfg.method == "byb") {
        stats = pretrain(dataset, model, opts);
    } else if (cfg.method == "nbp") {
        stats = nbp_pretrain(dataset, model, opts);
    } else if (cfg.method == "mbm1" || cfg.method == "mbm2") {
        const double ratio = cfg.mask_ratio > 0.0 ? cfg.mask_ratio
                                                  : (cfg.method == "mbm1" ? 0.1 : 0.2);
        stats = mbm_pretrain(dataset, model, opts, ratio);
    } else if (cfg.method == "cts") {
        stats = cts_pretrain(dataset, model, opts, cfg.temperature);
    } else if (cfg.method == "msdp") {
        stats = msdp_pretrain(dataset, model, opts, cfg.msdp_vocab);
    } else if (cfg.method == "supervised") {
        throw ConfigError("the supervised baseline trains with labels; use the finetune "
                          "subcommand with --method supervised");
    } else {
        throw ConfigError("unknown method '" + cfg.method + "'");
    }
    std::cout << "pretrained " << cfg.method << " for " << stats.steps << " steps; checkpoint in "
              << cfg.out_dir << "\n";
    return 0;
}

int run_finetune(const RunConfig& cfg) {
    if (cfg.task.empty()) throw ConfigError("--task is required");
    Dataset dataset = load_dataset(cfg);
    write_manifest(cfg, "finetune");
    FinetuneOptions opts = cfg.finetune_options();
    opts.progress = &std::cerr;
    opts.epochs = cfg.finetune_epochs;

    BybModel model = cfg.method == "supervised" ? build_model(cfg)
                                                : load_model(cfg, cfg.mode == "unfreeze");
    FinetuneResult result = cfg.method == "supervised"
                                ? supervised_train(model, dataset, cfg.task, opts)
                                : finetune(model, dataset, cfg.task, opts);

    NamedTensors out = model.checkpoint_tensors();
    for (auto& e : result.head.named_params("head." + cfg.task + ".")) out.push_back(std::move(e));
    save_checkpoint(cfg.out_dir + "/finetuned.bybt", out);
    std::cout << "finetuned head for task " << cfg.task << " (" << result.num_classes
              << " classes); checkpoint in " << cfg.out_dir << "\n";
    return 0;
}

int run_eval(const RunConfig& cfg) {
    if (cfg.task.empty()) throw ConfigError("--task is required");
    Dataset dataset = load_dataset(cfg);
    if (cfg.checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
    NamedTensors entries = load_checkpoint(cfg.checkpoint_path);
    SeqModelConfig seq_cfg = cfg.seq_model_config();
    seq_cfg.d_model = checkpoint_get(entries, "student.embedding").cols();
    BybModel model = byb_model_from_checkpoint(entries, seq_cfg, cfg.m_max, false);

    const std::string head_prefix = "head." + cfg.task + ".";
    HeadParams head;
    head.linear = !checkpoint_has(entries, head_prefix + "m1");
    if (!head.linear) {
        head.m1 = checkpoint_get(entries, head_prefix + "m1").clone();
        head.c1 = checkpoint_get(entries, head_prefix + "c1").clone();
    }
    head.m2 = checkpoint_get(entries, head_prefix + "m2").clone();
    head.c2 = checkpoint_get(entries, head_prefix + "c2").clone();

    EvalScores scores = evaluate(model, head, dataset, cfg.task, cfg.window_plan());
    write_manifest(cfg, "eval");
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/eval.json") << scores.report.to_json() << '\n';
    std::ofstream(cfg.out_dir + "/eval.csv") << scores.report.to_csv();
    std::cout << scores.report.to_json() << "\n";
    return 0;
}

int run_bench(const RunConfig& cfg) {
    Dataset dataset = load_dataset(cfg);
    BybModel model = build_model(cfg);
    BenchOptions opts;
    opts.plan = cfg.window_plan();
    opts.loss = cfg.loss_config();
    opts.adam = cfg.adam_config();
    opts.batch_size = cfg.batch_size;
    opts.warmup_steps = cfg.bench_warmup;
    opts.timed_steps = cfg.bench_steps;
    opts.unpooled_cap = cfg.unpooled_cap;
    opts.seed = cfg.seed;
    opts.progress = &std::cerr;
    BenchReport report = bench(dataset, model, opts);
    write_manifest(cfg, "bench");
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/bench.json") << report.to_json() << '\n';
    std::cout << report.to_json() << "\n";
    return 0;
}

int run_attn(const RunConfig& cfg) {
    Dataset dataset = load_dataset(cfg);
    BybModel model = load_model(cfg, false);
    export_attention(model, dataset, cfg.window_plan(), cfg.attn_samples, cfg.out_dir);
    write_manifest(cfg, "attn");
    std::cout << "wrote " << model.seq.layers.size() << " attention maps to " << cfg.out_dir
              << "\n";
    return 0;
}

int run_export_emb(const RunConfig& cfg) {
    Dataset dataset = load_dataset(cfg);
    BybModel model = load_model(cfg, false);
    std::filesystem::create_directories(cfg.out_dir);
    export_embeddings(model, dataset, cfg.window_plan(), cfg.export_n, cfg.seed,
                      cfg.out_dir + "/embeddings.csv", &std::cerr);
    write_manifest(cfg, "export-emb");
    std::cout << "wrote embeddings.csv to " << cfg.out_dir << "\n";
    return 0;
}

int run_count_params(const RunConfig& cfg) {
    const SeqModelConfig seq_cfg = cfg.seq_model_config();
    const ParamCountBreakdown b = count_params(seq_cfg);
    std::cout << "attention " << b.attention << "\nfeed_forward " << b.feed_forward
              << "\nlayer_norm " << b.layer_norm << "\ntotal " << b.total << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"user behavior sequence pretraining toolkit"};
    app.require_subcommand(1);

    RunConfig cfg;
    try {
        preload_config(cfg, argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    auto* c_generate = app.add_subcommand("generate", "generate a synthetic dataset");
    add_common_flags(c_generate, cfg);
    add_generator_flags(c_generate, cfg);

    auto* c_pretrain = app.add_subcommand("pretrain", "pretrain a model (byb or a baseline)");
    add_common_flags(c_pretrain, cfg);
    auto* c_finetune = app.add_subcommand("finetune", "train a downstream head");
    add_common_flags(c_finetune, cfg);
    auto* c_eval = app.add_subcommand("eval", "evaluate a finetuned checkpoint");
    add_common_flags(c_eval, cfg);
    auto* c_bench = app.add_subcommand("bench", "measure training throughput");
    add_common_flags(c_bench, cfg);
    auto* c_attn = app.add_subcommand("attn", "export averaged attention maps");
    add_common_flags(c_attn, cfg);
    auto* c_export = app.add_subcommand("export-emb", "export sequence representations");
    add_common_flags(c_export, cfg);
    auto* c_count = app.add_subcommand("count-params", "sequence-model parameter counts");
    add_common_flags(c_count, cfg);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        cfg.validate_model_choice();
        if (c_generate->parsed()) return run_generate(cfg);
        if (c_pretrain->parsed()) return run_pretrain(cfg);
        if (c_finetune->parsed()) return run_finetune(cfg);
        if (c_eval->parsed()) return run_eval(cfg);
        if (c_bench->parsed()) return run_bench(cfg);
        if (c_attn->parsed()) return run_attn(cfg);
        if (c_export->parsed()) return run_export_emb(cfg);
        if (c_count->parsed()) return run_count_params(cfg);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
