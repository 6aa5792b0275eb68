#include "byb/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>

#include "byb/rng.hpp"

namespace byb {

namespace {

struct LabeledSet {
    std::vector<std::size_t> sample_idx;
    std::vector<int> labels;
};

LabeledSet collect_labeled(const Dataset& dataset, const std::string& task) {
    LabeledSet out;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        auto it = dataset[i].labels.find(task);
        if (it == dataset[i].labels.end()) continue;
        out.sample_idx.push_back(i);
        out.labels.push_back(it->second);
    }
    if (out.sample_idx.empty())
        throw ConfigError("no sample carries a label for task '" + task + "'");
    return out;
}

}  // namespace

std::optional<Vec> compute_representation(const BybModel& model, const UbsSample& sample,
                                          const WindowPlan& plan) {
    PooledSequence pooled = encode_pooled_days(model.encoders.student, sample, plan);
    if (!pooled.any_valid()) return std::nullopt;
    Tensor h = encode_sequence(model.seq, pooled);
    return sequence_representation(h, pooled.valid).values();
}

FinetuneResult finetune(BybModel& model, const Dataset& dataset, const std::string& task,
                        const FinetuneOptions& opts) {
    opts.plan.validate();
    LabeledSet labeled = collect_labeled(dataset, task);

    Index num_classes = opts.num_classes;
    if (num_classes == 0) {
        int max_label = 0;
        for (int l : labeled.labels) max_label = std::max(max_label, l);
        num_classes = static_cast<Index>(max_label) + 1;
    }
    num_classes = std::max<Index>(num_classes, 2);

    FinetuneResult result;
    result.num_classes = num_classes;
    result.head = attach_head(model.seq.cfg.d_model, num_classes, opts.seed, opts.linear_head,
                              opts.head_hidden);

    NamedTensors train_set = result.head.named_params("head." + task + ".");
    if (opts.mode == FinetuneMode::unfreeze) {
        for (auto& e : model.encoders.student.named_params("student.")) train_set.push_back(std::move(e));
        for (auto& e : model.seq.named_params("seqmodel.")) train_set.push_back(std::move(e));
    }
    Adam adam(std::move(train_set), opts.adam);

    std::ofstream metrics;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        metrics.open(opts.out_dir + "/metrics.csv", std::ios::trunc);
        if (!metrics) throw IoError("cannot open metrics.csv under " + opts.out_dir);
        metrics << metrics_csv_header() << '\n';
    }

    // Freeze mode: E is constant, so encode every sample once up front.
    Tensor cached_e;
    std::vector<std::size_t> usable;          // indices into labeled.*
    if (opts.mode == FinetuneMode::freeze) {
        std::vector<double> flat;
        for (std::size_t i = 0; i < labeled.sample_idx.size(); ++i) {
            auto e = compute_representation(model, dataset[labeled.sample_idx[i]], opts.plan);
            if (!e) continue;
            usable.push_back(i);
            flat.insert(flat.end(), e->data(), e->data() + e->size());
        }
        if (usable.empty()) throw ConfigError("no labeled sample has any non-empty day");
        cached_e = Tensor::from_data(
            {static_cast<Index>(usable.size()), model.seq.cfg.d_model}, std::move(flat), false);
    } else {
        for (std::size_t i = 0; i < labeled.sample_idx.size(); ++i) usable.push_back(i);
    }

    std::int64_t step = 0;
    std::vector<std::size_t> order(usable.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(opts.seed, 0xf17eu + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += opts.batch_size) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::size_t end = std::min(order.size(), at + opts.batch_size);

            GradientTape tape;
            Tensor logits;
            std::vector<int> batch_labels;
            std::int64_t skipped = 0;
            if (opts.mode == FinetuneMode::freeze) {
                std::vector<Index> rows;
                for (std::size_t i = at; i < end; ++i) {
                    rows.push_back(static_cast<Index>(order[i]));
                    batch_labels.push_back(labeled.labels[usable[order[i]]]);
                }
                logits = head_forward(result.head, gather_rows(cached_e, rows));
            } else {
                std::vector<Tensor> reps;
                for (std::size_t i = at; i < end; ++i) {
                    const UbsSample& sample = dataset[labeled.sample_idx[usable[order[i]]]];
                    PooledSequence pooled =
                        encode_pooled_days(model.encoders.student, sample, opts.plan);
                    if (!pooled.any_valid()) {
                        ++skipped;
                        continue;
                    }
                    Tensor h = encode_sequence(model.seq, pooled);
                    reps.push_back(gather_rows(h, {last_valid_position(pooled.valid)}));
                    batch_labels.push_back(labeled.labels[usable[order[i]]]);
                }
                if (reps.empty()) continue;
                logits = head_forward(result.head, reps.size() == 1 ? reps[0] : concat(reps, 0));
            }

            Tensor loss = classification_ce(logits, one_hot_rows(batch_labels, num_classes));
            tape.backward(loss);
            adam.step();
            adam.zero_grad();
            ++step;

            MetricsRow row;
            row.step = step;
            row.epoch = epoch;
            row.loss = loss.item();
            row.windows_contributing = static_cast<std::int64_t>(batch_labels.size());
            row.samples_skipped = skipped;
            if (opts.log_wall_time)
                row.wall_ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count();
            result.rows.push_back(row);
            if (metrics.is_open()) metrics << metrics_csv_line(row) << '\n';
            if (opts.progress && step % 100 == 0)
                *opts.progress << "finetune step " << step << " loss " << row.loss << "\n";
        }
    }
    return result;
}

EvalScores evaluate(const BybModel& model, const HeadParams& head, const Dataset& dataset,
                    const std::string& task, const WindowPlan& plan) {
    plan.validate();
    LabeledSet labeled = collect_labeled(dataset, task);
    const Index num_classes = head.num_classes();

    EvalScores out;
    for (std::size_t i = 0; i < labeled.sample_idx.size(); ++i) {
        auto e = compute_representation(model, dataset[labeled.sample_idx[i]], plan);
        if (!e) continue;
        Tensor rep = Tensor::from_array({1, e->size()}, *e, false);
        Tensor probs = softmax(head_forward(head, rep), 1);
        std::vector<double> row(probs.values().data(), probs.values().data() + num_classes);
        out.scores.push_back(std::move(row));
        out.labels.push_back(labeled.labels[i]);
    }
    if (out.labels.empty()) throw MetricError("evaluate: no usable labeled samples");

    TaskMetric tm;
    tm.task = task;
    tm.samples = out.labels.size();
    if (num_classes == 2) {
        std::vector<double> pos_scores;
        pos_scores.reserve(out.scores.size());
        for (const auto& r : out.scores) pos_scores.push_back(r[1]);
        std::size_t positives = 0;
        for (int l : out.labels) positives += l != 0;
        tm.positive_rate = static_cast<double>(positives) / static_cast<double>(out.labels.size());
        tm.metric = "auroc";
        tm.value = auroc_binary(pos_scores, out.labels);
        out.report.metrics.push_back(tm);
        tm.metric = "ks";
        tm.value = ks_score(pos_scores, out.labels);
        out.report.metrics.push_back(tm);
    } else {
        tm.class_histogram.assign(static_cast<std::size_t>(num_classes), 0);
        for (int l : out.labels)
            if (l >= 0 && l < num_classes) ++tm.class_histogram[static_cast<std::size_t>(l)];
        tm.metric = "macro_auroc";
        tm.value = auroc_macro(out.scores, out.labels);
        out.report.metrics.push_back(tm);
    }
    return out;
}

}  // namespace byb
