#pragma once

// Behavior encoder: embedding table + gated merge layer turning a multi-ID
// behavior into one d-dimensional embedding, day pooling over time buckets,
// and the student/teacher pair with EMA teacher updates.

#include <cstdint>
#include <span>
#include <vector>

#include "byb/checkpoint.hpp"
#include "byb/data.hpp"
#include "byb/tensor.hpp"

namespace byb {

struct EncoderParams {
    Tensor embedding;  // [I+1, d]
    Tensor w1;         // [d, d]
    Tensor b1;         // [d]
    Tensor w2;         // [1, d]  (gate weight; the gate bias is scalar)
    Tensor b2;         // [1]
    Tensor id_pos;     // [m_max, d], fixed sinusoidal

    Index dim() const { return embedding.cols(); }
    std::uint32_t max_id() const { return static_cast<std::uint32_t>(embedding.rows() - 1); }
    Index max_ids_per_event() const { return id_pos.rows(); }

    NamedTensors named_params(const std::string& prefix) const;  // trainables only
};

EncoderParams init_encoder(Index d, std::uint32_t max_id, Index m_max, std::uint64_t seed);
EncoderParams clone_encoder(const EncoderParams& src, bool requires_grad);
EncoderParams encoder_from_checkpoint(const NamedTensors& entries, const std::string& prefix,
                                      bool requires_grad, Index m_max);

struct EncoderPair {
    EncoderParams student;
    EncoderParams teacher;  // never receives gradients
    double m_ema = 0.995;
};

EncoderPair make_encoder_pair(Index d, std::uint32_t max_id, Index m_max, std::uint64_t seed,
                              double m_ema = 0.995);

// teacher <- m_ema * teacher + (1 - m_ema) * student, elementwise.
void ema_update(EncoderPair& pair);

// Merge-layer encode of one behavior: e_x = sum_j sigmoid(w2 (e_j+p_j) + b2) *
// (w1 (e_j+p_j) + b1).
Tensor encode_behavior(const EncoderParams& params, std::span<const std::uint32_t> ids);

// Mean of embeddings; empty input yields (zero vector, valid=false).
std::pair<Tensor, bool> pool_embeddings(const std::vector<Tensor>& embs, Index d);

// Detached teacher mean over one prediction window's events.
std::pair<Tensor, bool> supervision_embedding(const EncoderParams& teacher,
                                              std::span<const BehaviorEvent> pred_events);

// ---------------------------------------------------------------------------
// Vectorized batch paths (the training-time fast lane). One gather per id
// occurrence; bucket means are a single matmul with a constant pooling matrix.
// ---------------------------------------------------------------------------

// Flattened (id, slot) rows for a run of events. Ids are folded modulo the
// vocabulary so open-world ids stay in range.
struct FlatRows {
    std::vector<Index> ids;
    std::vector<Index> slots;
    std::size_t events = 0;
};

void append_event_rows(FlatRows& rows, const BehaviorEvent& event, Index m_max, std::uint32_t max_id);

// Per-id-row weighted embeddings [N, d]; the rows of one event sum to that
// event's behavior embedding.
Tensor encode_id_rows(const EncoderParams& params, const FlatRows& rows);

// Day-bucketed embedding sequence with validity mask (empty days are zero
// vectors flagged invalid).
struct PooledSequence {
    Tensor embeddings;        // [K, d]
    std::vector<char> valid;  // K flags
    std::size_t observed_events = 0;

    Index length() const { return embeddings.rows(); }
    bool any_valid() const;
};

PooledSequence encode_pooled_days(const EncoderParams& params, const UbsSample& sample,
                                  const WindowPlan& plan);

// All K supervision embeddings (teacher side, detached): row k-1 is the pooled
// teacher embedding of prediction window k.
struct SupervisionTargets {
    Tensor embeddings;        // [K, d], constant
    std::vector<char> valid;  // K flags
};

SupervisionTargets supervision_targets(const EncoderParams& teacher, const UbsSample& sample,
                                       const WindowPlan& plan);

}  // namespace byb
