#include "byb/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "byb/init.hpp"
#include "byb/rng.hpp"

namespace byb {

namespace {

using Clock = std::chrono::steady_clock;

// One BYB training step over `batch`; returns the number of samples that
// contributed. Pooled and unpooled variants share this via a sequence builder.
struct UnpooledInput {
    Tensor embeddings;          // [n_events, d]
    std::vector<char> valid;    // all true
    std::vector<Index> window_row;  // H row for prediction window k (or -1)
};

// Per-event embeddings for the last <= cap observed events, plus the mapping
// from prediction windows onto event positions (last event strictly before the
// window start).
UnpooledInput build_unpooled(const EncoderParams& enc, const UbsSample& sample,
                             const WindowPlan& plan, Index cap) {
    UnpooledInput out;
    const std::size_t obs_end = observed_length(sample, plan.observation_seconds);
    const std::size_t begin = obs_end > static_cast<std::size_t>(cap)
                                  ? obs_end - static_cast<std::size_t>(cap)
                                  : 0;
    const std::size_t n = obs_end - begin;
    if (n == 0) return out;

    FlatRows rows;
    std::vector<std::size_t> event_row_begin;
    for (std::size_t i = begin; i < obs_end; ++i) {
        event_row_begin.push_back(rows.ids.size());
        append_event_rows(rows, sample.events[i], enc.max_ids_per_event(), enc.max_id());
    }
    event_row_begin.push_back(rows.ids.size());
    const Index n_rows = static_cast<Index>(rows.ids.size());

    Tensor encoded = encode_id_rows(enc, rows);
    Vec pool = Vec::Zero(static_cast<Index>(n) * n_rows);
    for (std::size_t e = 0; e < n; ++e)
        for (std::size_t r = event_row_begin[e]; r < event_row_begin[e + 1]; ++r)
            pool[static_cast<Index>(e) * n_rows + static_cast<Index>(r)] = 1.0;
    out.embeddings =
        matmul(Tensor::from_array({static_cast<Index>(n), n_rows}, std::move(pool), false), encoded);
    out.valid.assign(n, 1);

    const Index K = plan.num_buckets();
    out.window_row.assign(static_cast<std::size_t>(K), -1);
    for (Index k = 1; k <= K; ++k) {
        const std::int64_t cutoff = k * plan.pool_window_seconds;
        // Last capped event with t < cutoff.
        Index row = -1;
        for (std::size_t e = n; e-- > 0;) {
            if (sample.events[begin + e].t < cutoff) {
                row = static_cast<Index>(e);
                break;
            }
        }
        out.window_row[static_cast<std::size_t>(k - 1)] = row;
    }
    return out;
}

}  // namespace

std::string BenchReport::to_json() const {
    nlohmann::json j;
    j["samples_per_second"] = samples_per_second;
    j["epoch_wall_seconds"] = epoch_wall_seconds;
    j["peak_resident_bytes"] = peak_resident_bytes;
    j["unpooled_samples_per_second"] = unpooled_samples_per_second;
    j["pooled_vs_unpooled_speedup"] = pooled_vs_unpooled_speedup;
    return j.dump(2);
}

BenchReport bench(const Dataset& dataset, BybModel& model, const BenchOptions& opts) {
    if (opts.warmup_steps < 5) throw ConfigError("bench requires at least 5 warmup steps");
    if (opts.timed_steps < 1) throw ConfigError("bench requires at least 1 timed step");
    opts.plan.validate();
    if (dataset.size() < opts.batch_size)
        throw ConfigError("dataset too small for warmup: need at least one batch of " +
                          std::to_string(opts.batch_size));

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(opts.seed, 0xbe4cULL));
    rng.shuffle(order);  // the batch cursor cycles, so smaller datasets repeat

    auto next_batch = [&, cursor = std::size_t{0}]() mutable {
        std::vector<const UbsSample*> batch;
        batch.reserve(opts.batch_size);
        for (std::size_t i = 0; i < opts.batch_size; ++i) {
            batch.push_back(&dataset[order[cursor]]);
            cursor = (cursor + 1) % order.size();
        }
        return batch;
    };

    // ---- pooled steps ----
    Adam pooled_adam(model.trainable_params(), opts.adam);
    auto pooled_step = [&](const std::vector<const UbsSample*>& batch) {
        GradientTape tape;
        Tensor total;
        std::int64_t used = 0;
        for (const UbsSample* sample : batch) {
            PooledSequence pooled = encode_pooled_days(model.encoders.student, *sample, opts.plan);
            if (!pooled.any_valid()) continue;
            Tensor h = encode_sequence(model.seq, pooled);
            CausalLoss cl = causal_loss(h, pooled, &model.predictor, model.encoders.teacher,
                                        *sample, opts.plan, opts.loss);
            if (cl.windows == 0) continue;
            total = total.defined() ? add(total, cl.loss) : cl.loss;
            ++used;
        }
        if (used == 0) return;
        tape.backward(scale(total, 1.0 / static_cast<double>(used)));
        pooled_adam.step();
        pooled_adam.zero_grad();
        ema_update(model.encoders);
    };

    BenchReport report;
    for (int s = 0; s < opts.warmup_steps; ++s) pooled_step(next_batch());
    TensorRegistry::reset_peak();
    {
        const auto t0 = Clock::now();
        for (int s = 0; s < opts.timed_steps; ++s) pooled_step(next_batch());
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        report.samples_per_second =
            static_cast<double>(opts.timed_steps * opts.batch_size) / secs;
    }
    report.peak_resident_bytes = TensorRegistry::peak_bytes();
    report.epoch_wall_seconds = static_cast<double>(dataset.size()) / report.samples_per_second;

    // ---- unpooled variant: identical parameters, per-event sequence ----
    SeqModelParams unpooled_seq;
    unpooled_seq.cfg = model.seq.cfg;
    unpooled_seq.cfg.max_positions = std::max<Index>(opts.unpooled_cap, model.seq.cfg.max_positions);
    unpooled_seq.layers = model.seq.layers;  // shared tensors: same parameters
    unpooled_seq.pos = sinusoidal_position_encodings(unpooled_seq.cfg.max_positions,
                                                     unpooled_seq.cfg.d_model);

    Adam unpooled_adam(model.trainable_params(), opts.adam);
    auto unpooled_step = [&](const std::vector<const UbsSample*>& batch) {
        GradientTape tape;
        Tensor total;
        std::int64_t used = 0;
        for (const UbsSample* sample : batch) {
            UnpooledInput in =
                build_unpooled(model.encoders.student, *sample, opts.plan, opts.unpooled_cap);
            if (!in.embeddings.defined()) continue;
            PooledSequence as_seq;
            as_seq.embeddings = in.embeddings;
            as_seq.valid = in.valid;
            Tensor h = encode_sequence(unpooled_seq, as_seq);

            SupervisionTargets targets =
                supervision_targets(model.encoders.teacher, *sample, opts.plan);
            std::vector<Index> h_rows, t_rows;
            for (std::size_t k = 0; k < in.window_row.size(); ++k)
                if (in.window_row[k] >= 0 && targets.valid[k]) {
                    h_rows.push_back(in.window_row[k]);
                    t_rows.push_back(static_cast<Index>(k));
                }
            if (h_rows.empty()) continue;
            Tensor preds = predict(model.predictor, gather_rows(h, h_rows));
            Tensor targs = gather_rows(targets.embeddings, t_rows);
            Tensor loss = opts.loss.kind == LossConfig::Kind::mse
                              ? loss_mse(preds, targs)
                              : loss_ce(preds, targs, opts.loss.temperature, opts.loss.ce_form);
            total = total.defined() ? add(total, loss) : loss;
            ++used;
        }
        if (used == 0) return;
        tape.backward(scale(total, 1.0 / static_cast<double>(used)));
        unpooled_adam.step();
        unpooled_adam.zero_grad();
        ema_update(model.encoders);
    };

    // Unpooled steps cost far more; a shorter timed run keeps the harness
    // bounded while warmup still satisfies the steady-state requirement.
    const int unpooled_timed = std::max(1, opts.timed_steps / 2);
    for (int s = 0; s < opts.warmup_steps; ++s) unpooled_step(next_batch());
    {
        const auto t0 = Clock::now();
        for (int s = 0; s < unpooled_timed; ++s) unpooled_step(next_batch());
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        report.unpooled_samples_per_second =
            static_cast<double>(unpooled_timed * opts.batch_size) / secs;
    }
    report.pooled_vs_unpooled_speedup =
        report.samples_per_second / report.unpooled_samples_per_second;
    if (opts.progress)
        *opts.progress << "pooled " << report.samples_per_second << " samples/s, unpooled "
                       << report.unpooled_samples_per_second << " samples/s, speedup "
                       << report.pooled_vs_unpooled_speedup << "\n";
    return report;
}

void export_embeddings(const BybModel& model, const Dataset& dataset, const WindowPlan& plan,
                       std::size_t n, std::uint64_t seed, const std::string& path,
                       std::ostream* warnings) {
    plan.validate();
    if (n > dataset.size()) {
        if (warnings)
            *warnings << "export_embeddings: requested " << n << " rows, dataset has "
                      << dataset.size() << "; clipping\n";
        n = dataset.size();
    }
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0xe46bULL));
    rng.shuffle(order);
    order.resize(n);
    std::sort(order.begin(), order.end());

    std::set<std::string> task_set;
    for (const auto& s : dataset)
        for (const auto& [task, label] : s.labels) task_set.insert(task);
    std::vector<std::string> tasks(task_set.begin(), task_set.end());

    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "user_id";
    for (Index i = 0; i < model.seq.cfg.d_model; ++i) os << ",e" << i;
    for (const auto& t : tasks) os << ',' << t;
    os << '\n';
    char buf[32];
    for (std::size_t idx : order) {
        const UbsSample& sample = dataset[idx];
        auto e = compute_representation(model, sample, plan);
        if (!e) continue;
        os << sample.user_id;
        for (Index i = 0; i < e->size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", (*e)[i]);
            os << ',' << buf;
        }
        for (const auto& t : tasks) {
            auto it = sample.labels.find(t);
            os << ',';
            if (it != sample.labels.end()) os << it->second;
        }
        os << '\n';
    }
}

void export_attention(const BybModel& model, const Dataset& dataset, const WindowPlan& plan,
                      std::size_t n, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto maps = attention_maps(model.seq, model.encoders.student, dataset, plan, n);
    char buf[32];
    auto write_matrix = [&](const std::string& path, const MatRM& m, Index row_begin) {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw IoError("cannot open " + path + " for writing");
        for (Index r = row_begin; r < m.rows(); ++r) {
            for (Index c = 0; c < m.cols(); ++c) {
                std::snprintf(buf, sizeof(buf), "%.17g", m(r, c));
                os << (c ? "," : "") << buf;
            }
            os << '\n';
        }
    };
    for (std::size_t l = 0; l < maps.size(); ++l) {
        const std::string base = out_dir + "/attn_layer" + std::to_string(l);
        write_matrix(base + ".csv", maps[l], 0);
        const Index row_begin = std::max<Index>(0, maps[l].rows() - 10);
        write_matrix(base + "_last10.csv", maps[l], row_begin);
    }
}

}  // namespace byb
