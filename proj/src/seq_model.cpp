#include "byb/seq_model.hpp"

#include <cmath>
#include <limits>

#include "byb/init.hpp"

namespace byb {

void SeqModelConfig::validate() const {
    if (d_model <= 0 || ff_dim <= 0 || num_layers <= 0 || num_heads <= 0 || max_positions <= 0)
        throw ConfigError("sequence model dims must be positive");
    if (d_model % num_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by num_heads " +
                          std::to_string(num_heads));
}

std::optional<SeqModelConfig> seq_model_preset(const std::string& name) {
    SeqModelConfig cfg;
    if (name == "base") {
        cfg.ff_dim = 128;
        cfg.num_layers = 4;
    } else if (name == "base_x2") {
        cfg.ff_dim = 128;
        cfg.num_layers = 8;
    } else if (name == "base_x4") {
        cfg.ff_dim = 256;
        cfg.num_layers = 5;
    } else if (name == "base_x8") {
        cfg.ff_dim = 256;
        cfg.num_layers = 10;
    } else if (name == "base_x16") {
        cfg.ff_dim = 512;
        cfg.num_layers = 5;
    } else {
        return std::nullopt;
    }
    return cfg;
}

std::vector<std::string> seq_model_preset_names() {
    return {"base", "base_x2", "base_x4", "base_x8", "base_x16"};
}

NamedTensors SeqModelParams::named_params(const std::string& prefix) const {
    NamedTensors out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string lp = prefix + "layer" + std::to_string(l) + ".";
        const auto& ly = layers[l];
        out.emplace_back(lp + "wq", ly.wq);
        out.emplace_back(lp + "wk", ly.wk);
        out.emplace_back(lp + "wv", ly.wv);
        out.emplace_back(lp + "wo", ly.wo);
        out.emplace_back(lp + "ff1", ly.ff1);
        out.emplace_back(lp + "ff2", ly.ff2);
        out.emplace_back(lp + "ln1_g", ly.ln1_g);
        out.emplace_back(lp + "ln1_b", ly.ln1_b);
        out.emplace_back(lp + "ln2_g", ly.ln2_g);
        out.emplace_back(lp + "ln2_b", ly.ln2_b);
    }
    return out;
}

SeqModelParams init_seq_model(const SeqModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x53455155ULL));  // sequence-model stream
    SeqModelParams p;
    p.cfg = cfg;
    const Index d = cfg.d_model, ff = cfg.ff_dim;
    const double db = std::sqrt(1.0 / static_cast<double>(d));
    const double fb = std::sqrt(1.0 / static_cast<double>(ff));
    p.layers.reserve(static_cast<std::size_t>(cfg.num_layers));
    for (Index l = 0; l < cfg.num_layers; ++l) {
        SeqLayerParams ly;
        ly.wq = uniform_init({d, d}, db, rng);
        ly.wk = uniform_init({d, d}, db, rng);
        ly.wv = uniform_init({d, d}, db, rng);
        ly.wo = uniform_init({d, d}, db, rng);
        ly.ff1 = uniform_init({d, ff}, db, rng);
        ly.ff2 = uniform_init({ff, d}, fb, rng);
        ly.ln1_g = Tensor::full({d}, 1.0, true);
        ly.ln1_b = Tensor::zeros({d}, true);
        ly.ln2_g = Tensor::full({d}, 1.0, true);
        ly.ln2_b = Tensor::zeros({d}, true);
        p.layers.push_back(std::move(ly));
    }
    p.pos = sinusoidal_position_encodings(cfg.max_positions, d);
    return p;
}

SeqModelParams seq_model_from_checkpoint(const NamedTensors& entries, const std::string& prefix,
                                         const SeqModelConfig& cfg, bool requires_grad) {
    cfg.validate();
    SeqModelParams p;
    p.cfg = cfg;
    for (Index l = 0; l < cfg.num_layers; ++l) {
        const std::string lp = prefix + "layer" + std::to_string(l) + ".";
        auto take = [&](const char* name) {
            const Tensor& t = checkpoint_get(entries, lp + name);
            return make_tensor(t.shape(), t.values(), requires_grad);
        };
        SeqLayerParams ly;
        ly.wq = take("wq");
        ly.wk = take("wk");
        ly.wv = take("wv");
        ly.wo = take("wo");
        ly.ff1 = take("ff1");
        ly.ff2 = take("ff2");
        ly.ln1_g = take("ln1_g");
        ly.ln1_b = take("ln1_b");
        ly.ln2_g = take("ln2_g");
        ly.ln2_b = take("ln2_b");
        p.layers.push_back(std::move(ly));
    }
    p.pos = sinusoidal_position_encodings(cfg.max_positions, cfg.d_model);
    return p;
}

ParamCountBreakdown count_params(const SeqModelConfig& cfg) {
    cfg.validate();
    ParamCountBreakdown b;
    const std::int64_t d = cfg.d_model, ff = cfg.ff_dim, L = cfg.num_layers;
    b.attention = L * 4 * d * d;
    b.feed_forward = L * 2 * d * ff;
    b.layer_norm = L * 4 * d;
    b.total = b.attention + b.feed_forward + b.layer_norm;
    return b;
}

namespace {

// Additive mask: position i may attend to j iff (causal: j <= i) and (j valid
// or j == i).
Tensor build_attention_mask(const std::vector<char>& valid, bool causal) {
    const Index K = static_cast<Index>(valid.size());
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Vec m(K * K);
    for (Index i = 0; i < K; ++i)
        for (Index j = 0; j < K; ++j) {
            const bool allowed =
                (!causal || j <= i) && (valid[static_cast<std::size_t>(j)] || j == i);
            m[i * K + j] = allowed ? 0.0 : neg_inf;
        }
    return Tensor::from_array({K, K}, std::move(m), false);
}

}  // namespace

Tensor encode_sequence(const SeqModelParams& params, const PooledSequence& pooled,
                       AttentionCapture* capture, bool causal) {
    const Index K = pooled.embeddings.rows();
    const Index d = params.cfg.d_model;
    if (K < 1) throw ContractError("encode_sequence: empty sequence");
    if (pooled.embeddings.cols() != d)
        throw ShapeError("encode_sequence: input dim " + std::to_string(pooled.embeddings.cols()) +
                         " != d_model " + std::to_string(d));
    if (K > params.cfg.max_positions)
        throw ContractError("sequence length " + std::to_string(K) + " exceeds max_positions " +
                            std::to_string(params.cfg.max_positions));
    if (!pooled.any_valid()) throw ContractError("encode_sequence: all positions invalid");

    const Index heads = params.cfg.num_heads;
    const Index dh = d / heads;
    Tensor mask = build_attention_mask(pooled.valid, causal);
    Tensor x = add(pooled.embeddings, slice(params.pos, 0, 0, K));
    if (capture) capture->assign(params.layers.size(), MatRM());

    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& ly = params.layers[l];
        Tensor h = layer_norm(x, ly.ln1_g, ly.ln1_b);
        Tensor q = matmul(h, ly.wq);
        Tensor k = matmul(h, ly.wk);
        Tensor v = matmul(h, ly.wv);
        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (Index hd = 0; hd < heads; ++hd) {
            MatRM attn;
            Tensor o = scaled_dot_attention(slice(q, 1, hd * dh, dh), slice(k, 1, hd * dh, dh),
                                            slice(v, 1, hd * dh, dh), mask,
                                            capture ? &attn : nullptr);
            if (capture) {
                if ((*capture)[l].size() == 0)
                    (*capture)[l] = attn / static_cast<double>(heads);
                else
                    (*capture)[l] += attn / static_cast<double>(heads);
            }
            head_outs.push_back(std::move(o));
        }
        Tensor attn_out = matmul(heads == 1 ? head_outs[0] : concat(head_outs, 1), ly.wo);
        x = add(x, attn_out);

        Tensor h2 = layer_norm(x, ly.ln2_g, ly.ln2_b);
        Tensor ff = matmul(relu(matmul(h2, ly.ff1)), ly.ff2);
        x = add(x, ff);
    }
    return x;
}

Index last_valid_position(const std::vector<char>& valid) {
    for (Index k = static_cast<Index>(valid.size()) - 1; k >= 0; --k)
        if (valid[static_cast<std::size_t>(k)]) return k;
    throw ContractError("no valid position in sequence");
}

Tensor sequence_representation(const Tensor& h, const std::vector<char>& valid) {
    const Index k = last_valid_position(valid);
    return reshape(gather_rows(h, {k}), {h.cols()});
}

NamedTensors PredictorParams::named_params(const std::string& prefix) const {
    return {{prefix + "m1", m1}, {prefix + "c1", c1}, {prefix + "m2", m2}, {prefix + "c2", c2}};
}

PredictorParams init_predictor(Index d_model, std::uint64_t seed, Index hidden) {
    Rng rng(derive_seed(seed, 0x50524544ULL));  // predictor stream
    PredictorParams p;
    const double db = std::sqrt(1.0 / static_cast<double>(d_model));
    const double hb = std::sqrt(1.0 / static_cast<double>(hidden));
    p.m1 = uniform_init({d_model, hidden}, db, rng);
    p.c1 = Tensor::zeros({hidden}, true);
    p.m2 = uniform_init({hidden, d_model}, hb, rng);
    p.c2 = Tensor::zeros({d_model}, true);
    return p;
}

PredictorParams predictor_from_checkpoint(const NamedTensors& entries, const std::string& prefix,
                                          bool requires_grad) {
    PredictorParams p;
    auto take = [&](const char* name) {
        const Tensor& t = checkpoint_get(entries, prefix + name);
        return make_tensor(t.shape(), t.values(), requires_grad);
    };
    p.m1 = take("m1");
    p.c1 = take("c1");
    p.m2 = take("m2");
    p.c2 = take("c2");
    return p;
}

namespace {

// x [n, in] or [in]; returns the same rank.
Tensor affine_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() == 1) {
        Tensor r = broadcast_add(matmul(reshape(x, {1, x.size()}), w), b);
        return reshape(r, {w.cols()});
    }
    return broadcast_add(matmul(x, w), b);
}

}  // namespace

Tensor predict(const PredictorParams& params, const Tensor& x) {
    const Index in = x.rank() == 1 ? x.size() : x.cols();
    if (in != params.m1.rows())
        throw ShapeError("predict: input dim " + std::to_string(in) + " != " +
                         std::to_string(params.m1.rows()));
    return affine_rows(relu(affine_rows(x, params.m1, params.c1)), params.m2, params.c2);
}

NamedTensors HeadParams::named_params(const std::string& prefix) const {
    if (linear) return {{prefix + "m2", m2}, {prefix + "c2", c2}};
    return {{prefix + "m1", m1}, {prefix + "c1", c1}, {prefix + "m2", m2}, {prefix + "c2", c2}};
}

HeadParams attach_head(Index d_model, Index num_classes, std::uint64_t seed, bool linear,
                       Index hidden) {
    if (num_classes < 2) throw ConfigError("head needs at least 2 classes");
    Rng rng(derive_seed(seed, 0x48454144ULL));  // head stream
    HeadParams h;
    h.linear = linear;
    const double db = std::sqrt(1.0 / static_cast<double>(d_model));
    if (linear) {
        h.m2 = uniform_init({d_model, num_classes}, db, rng);
        h.c2 = Tensor::zeros({num_classes}, true);
        return h;
    }
    const double hb = std::sqrt(1.0 / static_cast<double>(hidden));
    h.m1 = uniform_init({d_model, hidden}, db, rng);
    h.c1 = Tensor::zeros({hidden}, true);
    h.m2 = uniform_init({hidden, num_classes}, hb, rng);
    h.c2 = Tensor::zeros({num_classes}, true);
    return h;
}

Tensor head_forward(const HeadParams& head, const Tensor& x) {
    if (head.linear) return affine_rows(x, head.m2, head.c2);
    return affine_rows(relu(affine_rows(x, head.m1, head.c1)), head.m2, head.c2);
}

std::vector<MatRM> attention_maps(const SeqModelParams& params, const EncoderParams& encoder,
                                  const Dataset& samples, const WindowPlan& plan, std::size_t n) {
    if (n < 1) throw ContractError("attention_maps: need at least one sample");
    const std::size_t use = std::min(n, samples.size());
    std::vector<MatRM> acc(params.layers.size());
    std::size_t counted = 0;
    for (std::size_t i = 0; i < use; ++i) {
        PooledSequence pooled = encode_pooled_days(encoder, samples[i], plan);
        if (!pooled.any_valid()) continue;
        AttentionCapture capture;
        encode_sequence(params, pooled, &capture);
        for (std::size_t l = 0; l < capture.size(); ++l) {
            if (acc[l].size() == 0)
                acc[l] = capture[l];
            else
                acc[l] += capture[l];
        }
        ++counted;
    }
    if (counted == 0) throw ContractError("attention_maps: no usable samples");
    for (auto& m : acc) m /= static_cast<double>(counted);
    return acc;
}

}  // namespace byb
