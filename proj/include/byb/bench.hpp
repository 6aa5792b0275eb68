#pragma once

// Training-throughput benchmark (pooled vs. unpooled sequence lengths) and
// the representation / attention-map exporters.

#include <string>

#include "byb/finetune.hpp"
#include "byb/pretrain.hpp"

namespace byb {

struct BenchOptions {
    WindowPlan plan;
    LossConfig loss;
    AdamConfig adam;
    std::size_t batch_size = 64;
    int warmup_steps = 5;   // excluded from timing; must be >= 5
    int timed_steps = 10;
    Index unpooled_cap = 2048;  // raw-sequence length limit for the unpooled variant
    std::uint64_t seed = 0;
    std::ostream* progress = nullptr;
};

struct BenchReport {
    double samples_per_second = 0.0;           // pooled pretraining, steady state
    double epoch_wall_seconds = 0.0;           // dataset size / throughput
    std::uint64_t peak_resident_bytes = 0;     // from the tensor registry
    double unpooled_samples_per_second = 0.0;
    double pooled_vs_unpooled_speedup = 0.0;

    std::string to_json() const;
};

// Measures steady-state BYB pretraining throughput, then reruns the same
// objective with per-event (unpooled) sequences through the identical
// parameters. Timing wraps the step function only.
BenchReport bench(const Dataset& dataset, BybModel& model, const BenchOptions& opts);

// CSV of (user_id, E..., one column per task label) over up to n samples,
// sampled deterministically per seed.
void export_embeddings(const BybModel& model, const Dataset& dataset, const WindowPlan& plan,
                       std::size_t n, std::uint64_t seed, const std::string& path,
                       std::ostream* warnings = nullptr);

// One K x K CSV per layer (attn_layer<i>.csv) plus the last-ten-positions
// slice (attn_layer<i>_last10.csv), averaged over up to n samples.
void export_attention(const BybModel& model, const Dataset& dataset, const WindowPlan& plan,
                      std::size_t n, const std::string& out_dir);

}  // namespace byb
