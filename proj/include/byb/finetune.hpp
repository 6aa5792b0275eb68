#pragma once

// Downstream finetuning (freeze: new head only; unfreeze: head + sequence
// model + student encoder) and evaluation over labeled datasets. The
// pretraining predictor plays no part here.

#include <optional>
#include <string>
#include <vector>

#include "byb/metrics.hpp"
#include "byb/pretrain.hpp"

namespace byb {

enum class FinetuneMode { freeze, unfreeze };

struct FinetuneOptions {
    WindowPlan plan;
    FinetuneMode mode = FinetuneMode::freeze;
    int epochs = 1;
    std::size_t batch_size = 64;
    AdamConfig adam;
    std::uint64_t seed = 0;
    bool linear_head = false;  // logistic probe instead of the 2-layer MLP head
    Index head_hidden = 64;
    Index num_classes = 0;     // 0: derive from the dataset's labels
    std::string out_dir;
    bool log_wall_time = true;
    std::ostream* progress = nullptr;
};

struct FinetuneResult {
    HeadParams head;
    Index num_classes = 0;
    std::vector<MetricsRow> rows;
};

// Trains a fresh head for `task` on cross-entropy over E. Freeze mode leaves
// every pretrained parameter bitwise intact; unfreeze also updates the
// sequence model and student encoder. Samples without the task label are
// skipped; a dataset with none is a config error.
FinetuneResult finetune(BybModel& model, const Dataset& dataset, const std::string& task,
                        const FinetuneOptions& opts);

// E for one sample, or nullopt when every pooled position is empty.
std::optional<Vec> compute_representation(const BybModel& model, const UbsSample& sample,
                                          const WindowPlan& plan);

struct EvalScores {
    std::vector<std::vector<double>> scores;  // [n, num_classes] softmax probabilities
    std::vector<int> labels;
    EvalReport report;
};

EvalScores evaluate(const BybModel& model, const HeadParams& head, const Dataset& dataset,
                    const std::string& task, const WindowPlan& plan);

}  // namespace byb
