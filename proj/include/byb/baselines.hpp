#pragma once

// The five comparison methods, sharing the BYB encoder/sequence-model
// architecture: next-behavior prediction, masked behavior modeling (two mask
// ratios), contrastive pretraining, behavior-distribution prediction over a
// top-K vocabulary, and fully supervised training.

#include <unordered_map>

#include "byb/finetune.hpp"
#include "byb/pretrain.hpp"

namespace byb {

enum class BaselineKind { nbp, mbm1, mbm2, cts, msdp, supervised };

std::optional<BaselineKind> baseline_from_name(const std::string& name);  // also accepts "byb" -> nullopt

// The behavior class of an event is its first id.
std::int64_t event_behavior_class(const BehaviorEvent& event);

// First behavior id of the next nonempty bucket after k, or -1 when none.
std::int64_t nbp_target(const UbsSample& sample, const EventBuckets& buckets, std::size_t k);

// Causal next-behavior-id classification over day positions.
PretrainStats nbp_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts);

// Bidirectional masked-day modeling: mask_ratio of the valid day positions are
// replaced by a learned mask embedding; each masked day's modal behavior id is
// predicted. mask_ratio must be positive (0.1 = MBMv1, 0.2 = MBMv2).
PretrainStats mbm_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts,
                           double mask_ratio);

// Modal behavior id over a span of events (ties to the smallest id), -1 if empty.
std::int64_t modal_behavior_id(const UbsSample& sample, std::size_t begin, std::size_t end);

// InfoNCE on E with in-batch negatives; the positive view shuffles each day's
// event payloads (a no-op under mean pooling, kept for fidelity).
PretrainStats cts_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts,
                           double infonce_temperature = 0.1);

// Top-k behavior ids by frequency over the dataset (k clipped to the number of
// distinct ids).
std::vector<std::uint32_t> msdp_select_vocab(const Dataset& dataset, Index k);

using MsdpVocabIndex = std::unordered_map<std::uint32_t, Index>;

// 0/1 presence of each vocabulary id inside prediction window k.
Vec msdp_presence_targets(const UbsSample& sample, std::int64_t window_k, const WindowPlan& plan,
                          const MsdpVocabIndex& vocab);

// Multi-label presence prediction of the top-K vocabulary in each position's
// prediction window (sigmoid + binary cross-entropy).
PretrainStats msdp_pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts,
                            Index vocab_k);

// Same architecture + pooling, trained from scratch on task labels (all
// parameters in the optimizer set).
FinetuneResult supervised_train(BybModel& model, const Dataset& dataset, const std::string& task,
                                FinetuneOptions opts);

}  // namespace byb
