#pragma once

// Causal pre-norm transformer over the pooled day sequence, the pretraining
// predictor head, downstream classification heads, and attention-map export.

#include <optional>
#include <string>
#include <vector>

#include "byb/checkpoint.hpp"
#include "byb/encoder.hpp"
#include "byb/tensor.hpp"

namespace byb {

struct SeqModelConfig {
    Index d_model = 128;
    Index ff_dim = 128;
    Index num_layers = 4;
    Index num_heads = 4;
    Index max_positions = 512;

    void validate() const;
};

// Scaling presets; d_model stays 128, (ff_dim, layers) vary.
std::optional<SeqModelConfig> seq_model_preset(const std::string& name);
std::vector<std::string> seq_model_preset_names();

struct SeqLayerParams {
    Tensor wq, wk, wv, wo;      // [d, d], bias-free (applied as x @ w)
    Tensor ff1, ff2;            // [d, ff], [ff, d], bias-free
    Tensor ln1_g, ln1_b;        // pre-attention layer norm
    Tensor ln2_g, ln2_b;        // pre-feed-forward layer norm
};

struct SeqModelParams {
    SeqModelConfig cfg;
    std::vector<SeqLayerParams> layers;
    Tensor pos;  // [max_positions, d_model], fixed sinusoidal

    NamedTensors named_params(const std::string& prefix) const;
};

SeqModelParams init_seq_model(const SeqModelConfig& cfg, std::uint64_t seed);
SeqModelParams seq_model_from_checkpoint(const NamedTensors& entries, const std::string& prefix,
                                         const SeqModelConfig& cfg, bool requires_grad);

struct ParamCountBreakdown {
    std::int64_t attention = 0;
    std::int64_t feed_forward = 0;
    std::int64_t layer_norm = 0;
    std::int64_t total = 0;
};

// Trainable parameter count of the sequence model alone: per layer
// 4*d^2 + 2*d*ff + 4*d.
ParamCountBreakdown count_params(const SeqModelConfig& cfg);

// Optional capture of post-softmax attention, averaged over heads per layer.
using AttentionCapture = std::vector<MatRM>;

// Pre-norm causal transformer. Invalid positions enter as zero vectors and are
// masked out as attention keys (a position may always attend to itself, which
// keeps fully-masked rows out of the softmax). H[k] depends only on inputs at
// positions <= k. causal=false lifts the triangular mask (used by the
// masked-behavior baseline).
Tensor encode_sequence(const SeqModelParams& params, const PooledSequence& pooled,
                       AttentionCapture* capture = nullptr, bool causal = true);

// Row of the last valid position: the sequence representation E.
Tensor sequence_representation(const Tensor& h, const std::vector<char>& valid);
Index last_valid_position(const std::vector<char>& valid);

struct PredictorParams {
    Tensor m1, c1;  // [d, hidden], [hidden]
    Tensor m2, c2;  // [hidden, d], [d]

    NamedTensors named_params(const std::string& prefix) const;
};

PredictorParams init_predictor(Index d_model, std::uint64_t seed, Index hidden = 128);
PredictorParams predictor_from_checkpoint(const NamedTensors& entries, const std::string& prefix,
                                          bool requires_grad);

// m2 @ relu(m1 @ x + c1) + c2; accepts [d] or [n, d].
Tensor predict(const PredictorParams& params, const Tensor& x);

struct HeadParams {
    Tensor m1, c1;  // empty when linear
    Tensor m2, c2;  // output layer [in, classes], [classes]
    bool linear = false;

    Index num_classes() const { return m2.cols(); }
    NamedTensors named_params(const std::string& prefix) const;
};

// Two-layer MLP head d -> hidden -> num_classes (hidden 64 by default), or a
// single linear layer when `linear` (the probe used for representation-quality
// checks).
HeadParams attach_head(Index d_model, Index num_classes, std::uint64_t seed, bool linear = false,
                       Index hidden = 64);
Tensor head_forward(const HeadParams& head, const Tensor& x);

// Mean post-softmax attention per layer over up to n samples (and all heads).
std::vector<MatRM> attention_maps(const SeqModelParams& params, const EncoderParams& encoder,
                                  const Dataset& samples, const WindowPlan& plan, std::size_t n);

}  // namespace byb
