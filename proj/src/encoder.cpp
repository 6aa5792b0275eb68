#include "byb/encoder.hpp"

#include <cmath>

#include "byb/init.hpp"

namespace byb {

NamedTensors EncoderParams::named_params(const std::string& prefix) const {
    return {{prefix + "embedding", embedding},
            {prefix + "w1", w1},
            {prefix + "b1", b1},
            {prefix + "w2", w2},
            {prefix + "b2", b2}};
}

EncoderParams init_encoder(Index d, std::uint32_t max_id, Index m_max, std::uint64_t seed) {
    if (d <= 0 || m_max <= 0) throw ConfigError("encoder dims must be positive");
    Rng rng(derive_seed(seed, 0x42454843ULL));  // encoder stream
    EncoderParams p;
    p.embedding = normal_init({static_cast<Index>(max_id) + 1, d}, 0.02, rng);
    const double bound = std::sqrt(1.0 / static_cast<double>(d));
    p.w1 = uniform_init({d, d}, bound, rng);
    p.b1 = Tensor::zeros({d}, true);
    p.w2 = uniform_init({1, d}, bound, rng);
    p.b2 = Tensor::zeros({1}, true);
    p.id_pos = sinusoidal_position_encodings(m_max, d);
    return p;
}

EncoderParams clone_encoder(const EncoderParams& src, bool requires_grad) {
    EncoderParams p;
    p.embedding = make_tensor(src.embedding.shape(), src.embedding.values(), requires_grad);
    p.w1 = make_tensor(src.w1.shape(), src.w1.values(), requires_grad);
    p.b1 = make_tensor(src.b1.shape(), src.b1.values(), requires_grad);
    p.w2 = make_tensor(src.w2.shape(), src.w2.values(), requires_grad);
    p.b2 = make_tensor(src.b2.shape(), src.b2.values(), requires_grad);
    p.id_pos = src.id_pos;  // constant, shared
    return p;
}

EncoderParams encoder_from_checkpoint(const NamedTensors& entries, const std::string& prefix,
                                      bool requires_grad, Index m_max) {
    EncoderParams p;
    auto take = [&](const std::string& name) {
        const Tensor& t = checkpoint_get(entries, prefix + name);
        return make_tensor(t.shape(), t.values(), requires_grad);
    };
    p.embedding = take("embedding");
    p.w1 = take("w1");
    p.b1 = take("b1");
    p.w2 = take("w2");
    p.b2 = take("b2");
    p.id_pos = sinusoidal_position_encodings(m_max, p.embedding.cols());
    return p;
}

EncoderPair make_encoder_pair(Index d, std::uint32_t max_id, Index m_max, std::uint64_t seed,
                              double m_ema) {
    EncoderPair pair;
    pair.student = init_encoder(d, max_id, m_max, seed);
    pair.teacher = clone_encoder(pair.student, false);
    pair.m_ema = m_ema;
    return pair;
}

void ema_update(EncoderPair& pair) {
    const double m = pair.m_ema;
    auto student = pair.student.named_params("");
    auto teacher = pair.teacher.named_params("");
    for (std::size_t i = 0; i < student.size(); ++i) {
        Tensor& s = student[i].second;
        Tensor& t = teacher[i].second;
        if (s.shape() != t.shape())
            throw StateError("ema_update: student/teacher shape mismatch on " + student[i].first);
        t.values() = m * t.values() + (1.0 - m) * s.values();
    }
}

namespace {

// Shared merge-layer core: rows of x are (e_j + p_j).
Tensor merge_rows(const EncoderParams& params, const Tensor& x) {
    Tensor tilde = broadcast_add(matmul(x, transpose(params.w1)), params.b1);
    Tensor gate = sigmoid(broadcast_add(matmul(x, transpose(params.w2)), params.b2));
    Tensor gate_full = matmul(gate, Tensor::full({1, params.dim()}, 1.0));
    return elementwise_multiply(tilde, gate_full);
}

}  // namespace

Tensor encode_behavior(const EncoderParams& params, std::span<const std::uint32_t> ids) {
    const Index m_max = params.max_ids_per_event();
    if (ids.empty()) throw ContractError("encode_behavior: behavior has no ids");
    if (static_cast<Index>(ids.size()) > m_max)
        throw ContractError("encode_behavior: behavior has " + std::to_string(ids.size()) +
                            " ids, limit is " + std::to_string(m_max));
    std::vector<Index> idx, slots;
    idx.reserve(ids.size());
    slots.reserve(ids.size());
    for (std::size_t j = 0; j < ids.size(); ++j) {
        if (ids[j] > params.max_id())
            throw BoundsError("encode_behavior: id " + std::to_string(ids[j]) + " exceeds max id " +
                              std::to_string(params.max_id()));
        idx.push_back(static_cast<Index>(ids[j]));
        slots.push_back(static_cast<Index>(j));
    }
    Tensor x = add(gather_rows(params.embedding, idx), gather_rows(params.id_pos, slots));
    return sum(merge_rows(params, x), 0);
}

std::pair<Tensor, bool> pool_embeddings(const std::vector<Tensor>& embs, Index d) {
    if (embs.empty()) return {Tensor::zeros({d}), false};
    std::vector<Tensor> as_rows;
    as_rows.reserve(embs.size());
    for (const auto& e : embs) as_rows.push_back(reshape(e, {1, e.size()}));
    Tensor stacked = as_rows.size() == 1 ? as_rows[0] : concat(as_rows, 0);
    return {mean(stacked, 0), true};
}

std::pair<Tensor, bool> supervision_embedding(const EncoderParams& teacher,
                                              std::span<const BehaviorEvent> pred_events) {
    const Index d = teacher.dim();
    if (pred_events.empty()) return {Tensor::zeros({d}), false};
    std::vector<Tensor> embs;
    embs.reserve(pred_events.size());
    for (const auto& ev : pred_events)
        embs.push_back(encode_behavior(teacher, std::span<const std::uint32_t>(ev.ids)));
    auto [pooled, valid] = pool_embeddings(embs, d);
    return {pooled.detach(), valid};
}

// ---------------------------------------------------------------------------
// Batch paths
// ---------------------------------------------------------------------------

void append_event_rows(FlatRows& rows, const BehaviorEvent& event, Index m_max, std::uint32_t max_id) {
    if (event.ids.empty()) throw ContractError("event with no ids");
    if (static_cast<Index>(event.ids.size()) > m_max)
        throw ContractError("event has " + std::to_string(event.ids.size()) +
                            " ids; raise the encoder's ids-per-event limit (" +
                            std::to_string(m_max) + ")");
    const auto vocab = static_cast<Index>(max_id) + 1;
    for (std::size_t j = 0; j < event.ids.size(); ++j) {
        rows.ids.push_back(static_cast<Index>(event.ids[j]) % vocab);
        rows.slots.push_back(static_cast<Index>(j));
    }
    ++rows.events;
}

Tensor encode_id_rows(const EncoderParams& params, const FlatRows& rows) {
    Tensor x = add(gather_rows(params.embedding, rows.ids), gather_rows(params.id_pos, rows.slots));
    return merge_rows(params, x);
}

bool PooledSequence::any_valid() const {
    for (char v : valid)
        if (v) return true;
    return false;
}

PooledSequence encode_pooled_days(const EncoderParams& params, const UbsSample& sample,
                                  const WindowPlan& plan) {
    const EventBuckets buckets = bucketize(sample, plan);
    const Index K = static_cast<Index>(buckets.size());
    const Index d = params.dim();

    PooledSequence out;
    out.valid.assign(static_cast<std::size_t>(K), 0);

    FlatRows rows;
    std::vector<Index> row_bucket;  // bucket index per id row
    for (Index k = 0; k < K; ++k) {
        const auto [b, e] = buckets.ranges[static_cast<std::size_t>(k)];
        if (b != e) out.valid[static_cast<std::size_t>(k)] = 1;
        for (std::size_t i = b; i < e; ++i) {
            append_event_rows(rows, sample.events[i], params.max_ids_per_event(), params.max_id());
            while (row_bucket.size() < rows.ids.size()) row_bucket.push_back(k);
        }
        out.observed_events += e - b;
    }
    const Index n_rows = static_cast<Index>(rows.ids.size());
    if (n_rows == 0) {
        out.embeddings = Tensor::zeros({K, d});
        return out;
    }

    Tensor encoded = encode_id_rows(params, rows);

    // P[k, j] = 1/|events in bucket k| for every id row j of an event in
    // bucket k, so P * encoded is the per-bucket mean of event embeddings.
    Vec pool(K * n_rows);
    pool.setZero();
    for (Index j = 0; j < n_rows; ++j) {
        const Index k = row_bucket[static_cast<std::size_t>(j)];
        pool[k * n_rows + j] =
            1.0 / static_cast<double>(buckets.count(static_cast<std::size_t>(k)));
    }
    Tensor pool_mat = Tensor::from_array({K, n_rows}, std::move(pool), false);
    out.embeddings = matmul(pool_mat, encoded);
    return out;
}

SupervisionTargets supervision_targets(const EncoderParams& teacher, const UbsSample& sample,
                                       const WindowPlan& plan) {
    const Index K = plan.num_buckets();
    const Index d = teacher.dim();
    SupervisionTargets out;
    out.valid.assign(static_cast<std::size_t>(K), 0);

    std::vector<std::pair<std::size_t, std::size_t>> windows;
    windows.reserve(static_cast<std::size_t>(K));
    std::size_t lo = sample.events.size(), hi = 0;
    for (Index k = 1; k <= K; ++k) {
        const auto range = prediction_events(sample, k, plan);
        windows.push_back(range);
        if (range.first != range.second) {
            out.valid[static_cast<std::size_t>(k - 1)] = 1;
            lo = std::min(lo, range.first);
            hi = std::max(hi, range.second);
        }
    }
    if (hi <= lo) {
        out.embeddings = Tensor::zeros({K, d});
        return out;
    }

    FlatRows rows;
    std::vector<std::size_t> event_row_begin;  // first id row of event (lo + i)
    for (std::size_t i = lo; i < hi; ++i) {
        event_row_begin.push_back(rows.ids.size());
        append_event_rows(rows, sample.events[i], teacher.max_ids_per_event(), teacher.max_id());
    }
    event_row_begin.push_back(rows.ids.size());
    const Index n_rows = static_cast<Index>(rows.ids.size());

    Tensor encoded = encode_id_rows(teacher, rows);

    Vec pool(K * n_rows);
    pool.setZero();
    for (Index k = 0; k < K; ++k) {
        const auto [b, e] = windows[static_cast<std::size_t>(k)];
        if (b == e) continue;
        const double w = 1.0 / static_cast<double>(e - b);
        for (std::size_t i = b; i < e; ++i)
            for (std::size_t r = event_row_begin[i - lo]; r < event_row_begin[i - lo + 1]; ++r)
                pool[k * n_rows + static_cast<Index>(r)] = w;
    }
    Tensor pool_mat = Tensor::from_array({K, n_rows}, std::move(pool), false);
    out.embeddings = matmul(pool_mat, encoded).detach();
    return out;
}

}  // namespace byb
