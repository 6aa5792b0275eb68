#include "byb/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "byb/checkpoint.hpp"
#include "byb/init.hpp"
#include "byb/rng.hpp"

namespace byb {

std::optional<BaselineKind> baseline_from_name(const std::string& name) {
    if (name == "nbp") return BaselineKind::nbp;
    if (name == "mbm1") return BaselineKind::mbm1;
    if (name == "mbm2") return BaselineKind::mbm2;
    if (name == "cts") return BaselineKind::cts;
    if (name == "msdp") return BaselineKind::msdp;
    if (name == "supervised") return BaselineKind::supervised;
    return std::nullopt;
}

std::int64_t event_behavior_class(const BehaviorEvent& event) {
    if (event.ids.empty()) throw ContractError("event with no ids");
    return static_cast<std::int64_t>(event.ids.front());
}

std::int64_t nbp_target(const UbsSample& sample, const EventBuckets& buckets, std::size_t k) {
    for (std::size_t j = k + 1; j < buckets.size(); ++j) {
        if (buckets.count(j) == 0) continue;
        return event_behavior_class(sample.events[buckets.ranges[j].first]);
    }
    return -1;
}

std::int64_t modal_behavior_id(const UbsSample& sample, std::size_t begin, std::size_t end) {
    if (begin >= end) return -1;
    std::map<std::int64_t, std::size_t> counts;
    for (std::size_t i = begin; i < end; ++i) ++counts[event_behavior_class(sample.events[i])];
    std::int64_t best = -1;
    std::size_t best_count = 0;
    for (const auto& [id, c] : counts)
        if (c > best_count) {
            best = id;
            best_count = c;
        }
    return best;
}

// ---------------------------------------------------------------------------
// Shared loop
// ---------------------------------------------------------------------------

namespace {

struct BatchLoss {
    Tensor loss;             // undefined to skip the step
    std::int64_t units = 0;  // positions / pairs contributing
    std::int64_t skipped = 0;
};

using BatchFn = std::function<BatchLoss(const std::vector<const UbsSample*>&, int epoch,
                                        std::int64_t batch_index)>;

PretrainStats run_baseline_loop(const Dataset& dataset, BybModel& model,
                                const PretrainOptions& opts, Adam& adam, const BatchFn& batch_fn) {
    if (dataset.empty()) throw ConfigError("pretrain: empty dataset");
    opts.plan.validate();

    PretrainStats stats;
    std::ofstream metrics;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        metrics.open(opts.out_dir + "/metrics.csv", std::ios::trunc);
        if (!metrics) throw IoError("cannot open metrics.csv under " + opts.out_dir);
        metrics << metrics_csv_header() << '\n';
    }

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::int64_t step = 0, batch_index = 0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(opts.seed, 0x85u + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += opts.batch_size) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::size_t end = std::min(order.size(), at + opts.batch_size);
            std::vector<const UbsSample*> batch;
            batch.reserve(end - at);
            for (std::size_t i = at; i < end; ++i) batch.push_back(&dataset[order[i]]);

            GradientTape tape;
            BatchLoss bl = batch_fn(batch, epoch, batch_index++);
            if (!bl.loss.defined()) continue;
            tape.backward(bl.loss);
            adam.step();
            adam.zero_grad();
            ++step;

            MetricsRow row;
            row.step = step;
            row.epoch = epoch;
            row.loss = bl.loss.item();
            row.windows_contributing = bl.units;
            row.samples_skipped = bl.skipped;
            if (opts.log_wall_time)
                row.wall_ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count();
            stats.rows.push_back(row);
            if (metrics.is_open()) metrics << metrics_csv_line(row) << '\n';
            if (opts.progress && step % 50 == 0)
                *opts.progress << "step " << step << " epoch " << epoch << " loss " << row.loss
                               << "\n";
        }
    }
    stats.steps = step;
    if (!opts.out_dir.empty())
        save_checkpoint(opts.out_dir + "/checkpoint.bybt", model.checkpoint_tensors());
    return stats;
}

Tensor logits_for_rows(const Tensor& h, const std::vector<Index>& rows, const Tensor& w,
                       const Tensor& b) {
    return broadcast_add(matmul(gather_rows(h, rows), w), b);
}

}  // namespace

// ---------------------------------------------------------------------------
// NBP
// ---------------------------------------------------------------------------

PretrainStats nbp_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts) {
    const Index d = model.seq.cfg.d_model;
    const Index num_ids = model.encoders.student.embedding.rows();  // I + 1 classes
    Rng rng(derive_seed(opts.seed, 0x6e6270ULL));
    Tensor head_w = uniform_init({d, num_ids}, std::sqrt(1.0 / static_cast<double>(d)), rng);
    Tensor head_b = Tensor::zeros({num_ids}, true);

    NamedTensors params = model.trainable_params();
    params.emplace_back("aux.nbp_head_w", head_w);
    params.emplace_back("aux.nbp_head_b", head_b);
    Adam adam(std::move(params), opts.adam);

    auto batch_fn = [&](const std::vector<const UbsSample*>& batch, int, std::int64_t) {
        BatchLoss bl;
        Tensor total;
        std::int64_t used = 0;
        for (const UbsSample* sample : batch) {
            const EventBuckets buckets = bucketize(*sample, opts.plan);
            PooledSequence pooled = encode_pooled_days(model.encoders.student, *sample, opts.plan);
            std::vector<Index> rows;
            std::vector<int> targets;
            for (std::size_t k = 0; k < buckets.size(); ++k) {
                if (buckets.count(k) == 0) continue;
                const std::int64_t target = nbp_target(*sample, buckets, k);
                if (target < 0) continue;  // no future behavior to predict
                rows.push_back(static_cast<Index>(k));
                targets.push_back(static_cast<int>(target % num_ids));
            }
            if (rows.empty()) {
                ++bl.skipped;
                continue;
            }
            Tensor h = encode_sequence(model.seq, pooled);
            Tensor loss = classification_ce(logits_for_rows(h, rows, head_w, head_b),
                                            one_hot_rows(targets, num_ids));
            total = total.defined() ? add(total, loss) : loss;
            bl.units += static_cast<std::int64_t>(rows.size());
            ++used;
        }
        if (used > 0) bl.loss = scale(total, 1.0 / static_cast<double>(used));
        return bl;
    };
    return run_baseline_loop(dataset, model, opts, adam, batch_fn);
}

// ---------------------------------------------------------------------------
// MBM
// ---------------------------------------------------------------------------

PretrainStats mbm_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts,
                           double mask_ratio) {
    if (mask_ratio <= 0.0 || mask_ratio > 1.0)
        throw ConfigError("mask_ratio must lie in (0,1], got " + std::to_string(mask_ratio));
    const Index d = model.seq.cfg.d_model;
    const Index num_ids = model.encoders.student.embedding.rows();
    Rng init_rng(derive_seed(opts.seed, 0x6d626dULL));
    Tensor mask_emb = normal_init({1, d}, 0.02, init_rng);
    Tensor head_w = uniform_init({d, num_ids}, std::sqrt(1.0 / static_cast<double>(d)), init_rng);
    Tensor head_b = Tensor::zeros({num_ids}, true);

    NamedTensors params = model.trainable_params();
    params.emplace_back("aux.mbm_mask_emb", mask_emb);
    params.emplace_back("aux.mbm_head_w", head_w);
    params.emplace_back("aux.mbm_head_b", head_b);
    Adam adam(std::move(params), opts.adam);

    auto batch_fn = [&](const std::vector<const UbsSample*>& batch, int epoch,
                        std::int64_t batch_index) {
        BatchLoss bl;
        Rng mask_rng(derive_seed(opts.seed, 0x6d61736bULL + static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                                static_cast<std::uint64_t>(batch_index)));
        Tensor total;
        std::int64_t used = 0;
        for (const UbsSample* sample : batch) {
            const EventBuckets buckets = bucketize(*sample, opts.plan);
            PooledSequence pooled = encode_pooled_days(model.encoders.student, *sample, opts.plan);
            std::vector<Index> valid_positions;
            for (std::size_t k = 0; k < pooled.valid.size(); ++k)
                if (pooled.valid[k]) valid_positions.push_back(static_cast<Index>(k));
            if (valid_positions.empty()) {
                ++bl.skipped;
                continue;
            }
            // At least one position is always masked.
            std::size_t n_mask = static_cast<std::size_t>(
                std::llround(mask_ratio * static_cast<double>(valid_positions.size())));
            n_mask = std::clamp<std::size_t>(n_mask, 1, valid_positions.size());
            mask_rng.shuffle(valid_positions);
            std::vector<Index> masked(valid_positions.begin(),
                                      valid_positions.begin() + static_cast<std::ptrdiff_t>(n_mask));
            std::sort(masked.begin(), masked.end());

            const Index K = pooled.length();
            Vec keep = Vec::Constant(K * d, 1.0);
            Vec indicator = Vec::Zero(K);
            std::vector<int> targets;
            for (Index k : masked) {
                keep.segment(k * d, d).setZero();
                indicator[k] = 1.0;
                const auto [b, e] = buckets.ranges[static_cast<std::size_t>(k)];
                targets.push_back(static_cast<int>(modal_behavior_id(*sample, b, e) % num_ids));
            }
            Tensor keep_t = Tensor::from_array({K, d}, std::move(keep), false);
            Tensor ind_t = Tensor::from_array({K, 1}, std::move(indicator), false);
            PooledSequence masked_seq;
            masked_seq.embeddings = add(elementwise_multiply(pooled.embeddings, keep_t),
                                        matmul(ind_t, mask_emb));
            masked_seq.valid = pooled.valid;

            Tensor h = encode_sequence(model.seq, masked_seq, nullptr, /*causal=*/false);
            Tensor loss = classification_ce(logits_for_rows(h, masked, head_w, head_b),
                                            one_hot_rows(targets, num_ids));
            total = total.defined() ? add(total, loss) : loss;
            bl.units += static_cast<std::int64_t>(masked.size());
            ++used;
        }
        if (used > 0) bl.loss = scale(total, 1.0 / static_cast<double>(used));
        return bl;
    };
    return run_baseline_loop(dataset, model, opts, adam, batch_fn);
}

// ---------------------------------------------------------------------------
// CTS
// ---------------------------------------------------------------------------

namespace {

// Positive view: per observation day, shuffle which event carries which id
// payload (timestamps keep their order, so the sample stays sorted).
UbsSample shuffle_within_days(const UbsSample& sample, const WindowPlan& plan, Rng& rng) {
    UbsSample view = sample;
    const EventBuckets buckets = bucketize(view, plan);
    for (std::size_t k = 0; k < buckets.size(); ++k) {
        const auto [b, e] = buckets.ranges[k];
        if (e - b < 2) continue;
        std::vector<std::size_t> perm(e - b);
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        rng.shuffle(perm);
        for (std::size_t i = 0; i < perm.size(); ++i)
            view.events[b + i].ids = sample.events[b + perm[i]].ids;
    }
    return view;
}

}  // namespace

PretrainStats cts_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts,
                           double infonce_temperature) {
    if (opts.batch_size < 2) throw ContractError("cts_pretrain requires batch size >= 2");
    if (infonce_temperature <= 0.0) throw ConfigError("InfoNCE temperature must be positive");
    Adam adam(model.trainable_params(), opts.adam);

    auto encode_e = [&](const UbsSample& sample) -> Tensor {
        PooledSequence pooled = encode_pooled_days(model.encoders.student, sample, opts.plan);
        if (!pooled.any_valid()) return {};
        Tensor h = encode_sequence(model.seq, pooled);
        return gather_rows(h, {last_valid_position(pooled.valid)});
    };

    auto batch_fn = [&](const std::vector<const UbsSample*>& batch, int epoch,
                        std::int64_t batch_index) {
        BatchLoss bl;
        Rng view_rng(derive_seed(opts.seed, 0x637473ULL + static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                                static_cast<std::uint64_t>(batch_index)));
        std::vector<Tensor> anchors, views;
        for (const UbsSample* sample : batch) {
            Tensor a = encode_e(*sample);
            if (!a.defined()) {
                ++bl.skipped;
                continue;
            }
            UbsSample view = shuffle_within_days(*sample, opts.plan, view_rng);
            anchors.push_back(std::move(a));
            views.push_back(encode_e(view));
        }
        if (anchors.size() < 2) return bl;  // InfoNCE needs at least one negative
        const Index b = static_cast<Index>(anchors.size());
        Tensor an = l2_normalize_rows(anchors.size() == 1 ? anchors[0] : concat(anchors, 0));
        Tensor vn = l2_normalize_rows(views.size() == 1 ? views[0] : concat(views, 0));
        Tensor sims = scale(matmul(an, transpose(vn)), 1.0 / infonce_temperature);
        std::vector<int> diag(static_cast<std::size_t>(b));
        for (Index i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
        bl.loss = classification_ce(sims, one_hot_rows(diag, b));
        bl.units = b;
        return bl;
    };
    return run_baseline_loop(dataset, model, opts, adam, batch_fn);
}

// ---------------------------------------------------------------------------
// MSDP
// ---------------------------------------------------------------------------

std::vector<std::uint32_t> msdp_select_vocab(const Dataset& dataset, Index k) {
    if (k < 1) throw ConfigError("msdp vocabulary size must be >= 1");
    std::map<std::uint32_t, std::size_t> freq;
    for (const auto& sample : dataset)
        for (const auto& ev : sample.events)
            for (std::uint32_t id : ev.ids) ++freq[id];
    std::vector<std::pair<std::uint32_t, std::size_t>> items(freq.begin(), freq.end());
    // Highest count first; ties to the smaller id for determinism.
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::uint32_t> vocab;
    vocab.reserve(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < items.size() && i < static_cast<std::size_t>(k); ++i)
        vocab.push_back(items[i].first);
    return vocab;
}

Vec msdp_presence_targets(const UbsSample& sample, std::int64_t window_k, const WindowPlan& plan,
                          const MsdpVocabIndex& vocab) {
    Vec targets = Vec::Zero(static_cast<Index>(vocab.size()));
    const auto [b, e] = prediction_events(sample, window_k, plan);
    for (std::size_t i = b; i < e; ++i)
        for (std::uint32_t id : sample.events[i].ids) {
            auto it = vocab.find(id);
            if (it != vocab.end()) targets[it->second] = 1.0;
        }
    return targets;
}

PretrainStats msdp_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts,
                            Index vocab_k) {
    std::vector<std::uint32_t> vocab = msdp_select_vocab(dataset, vocab_k);
    if (static_cast<Index>(vocab.size()) < vocab_k && opts.progress)
        *opts.progress << "msdp: vocabulary clipped to " << vocab.size() << " distinct ids\n";
    MsdpVocabIndex vocab_index;
    for (std::size_t i = 0; i < vocab.size(); ++i) vocab_index[vocab[i]] = static_cast<Index>(i);
    const Index v = static_cast<Index>(vocab.size());
    const Index d = model.seq.cfg.d_model;

    Rng rng(derive_seed(opts.seed, 0x6d736470ULL));
    Tensor head_w = uniform_init({d, v}, std::sqrt(1.0 / static_cast<double>(d)), rng);
    Tensor head_b = Tensor::zeros({v}, true);
    NamedTensors params = model.trainable_params();
    params.emplace_back("aux.msdp_head_w", head_w);
    params.emplace_back("aux.msdp_head_b", head_b);
    Adam adam(std::move(params), opts.adam);

    auto batch_fn = [&](const std::vector<const UbsSample*>& batch, int, std::int64_t) {
        BatchLoss bl;
        Tensor total;
        std::int64_t used = 0;
        for (const UbsSample* sample : batch) {
            PooledSequence pooled = encode_pooled_days(model.encoders.student, *sample, opts.plan);
            std::vector<Index> rows;
            for (std::size_t k = 0; k < pooled.valid.size(); ++k)
                if (pooled.valid[k]) rows.push_back(static_cast<Index>(k));
            if (rows.empty()) {
                ++bl.skipped;
                continue;
            }
            Vec targets(static_cast<Index>(rows.size()) * v);
            for (std::size_t r = 0; r < rows.size(); ++r)
                targets.segment(static_cast<Index>(r) * v, v) =
                    msdp_presence_targets(*sample, rows[r] + 1, opts.plan, vocab_index);
            Tensor target_t =
                Tensor::from_array({static_cast<Index>(rows.size()), v}, std::move(targets), false);
            Tensor h = encode_sequence(model.seq, pooled);
            Tensor loss = binary_ce_with_logits(logits_for_rows(h, rows, head_w, head_b), target_t);
            total = total.defined() ? add(total, loss) : loss;
            bl.units += static_cast<std::int64_t>(rows.size());
            ++used;
        }
        if (used > 0) bl.loss = scale(total, 1.0 / static_cast<double>(used));
        return bl;
    };
    return run_baseline_loop(dataset, model, opts, adam, batch_fn);
}

FinetuneResult supervised_train(BybModel& model, const Dataset& dataset, const std::string& task,
                                FinetuneOptions opts) {
    opts.mode = FinetuneMode::unfreeze;
    return finetune(model, dataset, task, opts);
}

}  // namespace byb
