#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "byb/seq_model.hpp"
#include "test_util.hpp"

using namespace byb;
using test_util::random_tensor;

namespace {

SeqModelConfig mini_cfg(Index k = 6, Index d = 8, Index layers = 2, Index heads = 2) {
    SeqModelConfig cfg;
    cfg.d_model = d;
    cfg.ff_dim = d;
    cfg.num_layers = layers;
    cfg.num_heads = heads;
    cfg.max_positions = k + 2;
    return cfg;
}

PooledSequence random_pooled(Index k, Index d, Rng& rng, std::vector<char> valid = {}) {
    PooledSequence p;
    p.embeddings = random_tensor({k, d}, rng, -1, 1, false);
    p.valid = valid.empty() ? std::vector<char>(static_cast<std::size_t>(k), 1) : std::move(valid);
    return p;
}

}  // namespace

TEST_CASE("config validation") {
    SeqModelConfig cfg = mini_cfg();
    cfg.num_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = mini_cfg();
    cfg.num_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("preset parameter counts are exact") {
    auto base = seq_model_preset("base");
    REQUIRE(base);
    CHECK(count_params(*base).total == 395264);
    auto x2 = seq_model_preset("base_x2");
    REQUIRE(x2);
    CHECK(count_params(*x2).total == 790528);

    SeqModelConfig tiny;
    tiny.d_model = 8;
    tiny.ff_dim = 8;
    tiny.num_layers = 1;
    tiny.num_heads = 2;
    CHECK(count_params(tiny).total == 416);  // 4*64 + 2*64 + 32

    CHECK(!seq_model_preset("base_x3"));
    CHECK(seq_model_preset_names().size() == 5);
    for (const auto& name : seq_model_preset_names()) CHECK(seq_model_preset(name).has_value());
}

TEST_CASE("count_params matches the actual trainable tensors") {
    for (const char* name : {"base", "base_x4"}) {
        auto cfg = seq_model_preset(name);
        REQUIRE(cfg);
        cfg->max_positions = 8;
        SeqModelParams params = init_seq_model(*cfg, 1);
        std::int64_t actual = 0;
        for (const auto& [n, t] : params.named_params("")) actual += t.size();
        CHECK(actual == count_params(*cfg).total);
    }
}

TEST_CASE("encode_sequence output shape and contract errors") {
    Rng rng(8);
    SeqModelConfig cfg = mini_cfg();
    SeqModelParams params = init_seq_model(cfg, 3);
    PooledSequence pooled = random_pooled(6, 8, rng);
    Tensor h = encode_sequence(params, pooled);
    CHECK(h.shape() == Shape{6, 8});

    PooledSequence all_invalid = random_pooled(4, 8, rng, {0, 0, 0, 0});
    CHECK_THROWS_AS(encode_sequence(params, all_invalid), ContractError);

    PooledSequence wrong_dim = random_pooled(4, 6, rng);
    CHECK_THROWS_AS(encode_sequence(params, wrong_dim), ShapeError);
}

TEST_CASE("causality is bitwise exact") {
    Rng rng(21);
    SeqModelParams params = init_seq_model(mini_cfg(7, 8, 2, 2), 5);
    PooledSequence pooled = random_pooled(7, 8, rng);
    Tensor h = encode_sequence(params, pooled);

    for (Index j : {Index{2}, Index{5}}) {
        PooledSequence perturbed;
        perturbed.valid = pooled.valid;
        Vec v = pooled.embeddings.values();
        for (Index c = 0; c < 8; ++c) v[j * 8 + c] += rng.uniform(0.5, 1.5);
        perturbed.embeddings = Tensor::from_array({7, 8}, std::move(v), false);
        Tensor h2 = encode_sequence(params, perturbed);
        for (Index k = 0; k < j; ++k)
            for (Index c = 0; c < 8; ++c) CHECK(h2(k, c) == h(k, c));
        // and the perturbed position itself must change
        bool changed = false;
        for (Index c = 0; c < 8; ++c) changed |= h2(j, c) != h(j, c);
        CHECK(changed);
    }
}

TEST_CASE("bidirectional mode lifts the causal mask") {
    Rng rng(22);
    SeqModelParams params = init_seq_model(mini_cfg(5, 8, 1, 2), 6);
    PooledSequence pooled = random_pooled(5, 8, rng);
    Tensor h = encode_sequence(params, pooled, nullptr, /*causal=*/false);
    PooledSequence perturbed;
    perturbed.valid = pooled.valid;
    Vec v = pooled.embeddings.values();
    v[4 * 8 + 3] += 1.0;
    perturbed.embeddings = Tensor::from_array({5, 8}, std::move(v), false);
    Tensor h2 = encode_sequence(params, perturbed, nullptr, false);
    bool changed = false;
    for (Index c = 0; c < 8; ++c) changed |= h2(0, c) != h(0, c);
    CHECK(changed);  // position 0 sees position 4 without the causal mask
}

TEST_CASE("invalid positions are masked as attention keys") {
    Rng rng(23);
    SeqModelParams params = init_seq_model(mini_cfg(5, 8, 2, 2), 9);
    PooledSequence pooled = random_pooled(5, 8, rng, {1, 0, 1, 1, 1});
    Tensor h = encode_sequence(params, pooled);

    // changing the content of the invalid position 1 leaves every other row intact
    PooledSequence perturbed;
    perturbed.valid = pooled.valid;
    Vec v = pooled.embeddings.values();
    for (Index c = 0; c < 8; ++c) v[1 * 8 + c] = rng.uniform(-3, 3);
    perturbed.embeddings = Tensor::from_array({5, 8}, std::move(v), false);
    Tensor h2 = encode_sequence(params, perturbed);
    for (Index k = 0; k < 5; ++k) {
        if (k == 1) continue;
        for (Index c = 0; c < 8; ++c) CHECK(h2(k, c) == h(k, c));
    }
}

TEST_CASE("K=1 attends only to itself and E = H[0]") {
    Rng rng(24);
    SeqModelParams params = init_seq_model(mini_cfg(1, 8, 1, 2), 10);
    PooledSequence pooled = random_pooled(1, 8, rng);
    AttentionCapture capture;
    Tensor h = encode_sequence(params, pooled, &capture);
    REQUIRE(capture.size() == 1);
    CHECK(capture[0].rows() == 1);
    CHECK(capture[0](0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    Tensor e = sequence_representation(h, pooled.valid);
    for (Index c = 0; c < 8; ++c) CHECK(e(c) == h(0, c));
}

TEST_CASE("sequence representation picks the last valid position") {
    Rng rng(25);
    SeqModelParams params = init_seq_model(mini_cfg(5, 8, 1, 2), 11);
    PooledSequence pooled = random_pooled(5, 8, rng, {1, 1, 1, 0, 0});
    Tensor h = encode_sequence(params, pooled);
    Tensor e = sequence_representation(h, pooled.valid);
    for (Index c = 0; c < 8; ++c) CHECK(e(c) == h(2, c));
    CHECK_THROWS_AS(last_valid_position(std::vector<char>{0, 0}), ContractError);
}

TEST_CASE("predictor") {
    PredictorParams p = init_predictor(8, 4);
    CHECK(p.m1.shape() == Shape{8, 128});
    CHECK(p.m2.shape() == Shape{128, 8});

    SUBCASE("all-zero weights output the bias") {
        p.m1.values().setZero();
        p.m2.values().setZero();
        p.c2.values().setConstant(0.7);
        Tensor out = predict(p, Tensor::zeros({8}));
        CHECK(out.shape() == Shape{8});
        for (Index i = 0; i < 8; ++i) CHECK(out(i) == 0.7);
    }
    SUBCASE("matches a scalar-loop evaluation") {
        Rng rng(31);
        PredictorParams q = init_predictor(4, 9, 5);
        Tensor x = random_tensor({4}, rng, -1, 1, false);
        Tensor out = predict(q, x);
        for (Index o = 0; o < 4; ++o) {
            double acc = q.c2.values()[o];
            for (Index hidden = 0; hidden < 5; ++hidden) {
                double pre = q.c1.values()[hidden];
                for (Index i = 0; i < 4; ++i)
                    pre += x(i) * q.m1.values()[i * 5 + hidden];
                acc += std::max(0.0, pre) * q.m2.values()[hidden * 4 + o];
            }
            CHECK(out(o) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    SUBCASE("rows and single-vector paths agree") {
        Rng rng(32);
        PredictorParams q = init_predictor(6, 2);
        Tensor rows = random_tensor({3, 6}, rng, -1, 1, false);
        Tensor batch = predict(q, rows);
        for (Index r = 0; r < 3; ++r) {
            Tensor single = predict(q, reshape(gather_rows(rows, {r}), {6}));
            for (Index c = 0; c < 6; ++c)
                CHECK(batch(r, c) == doctest::Approx(single(c)).epsilon(1e-12));
        }
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(predict(p, Tensor::zeros({7})), ShapeError);
    }
}

TEST_CASE("heads") {
    SUBCASE("binary task gives 2 logits") {
        HeadParams h = attach_head(8, 2, 1);
        CHECK(head_forward(h, Tensor::zeros({8})).shape() == Shape{2});
        CHECK(h.m1.shape() == Shape{8, 64});
    }
    SUBCASE("90-class task") {
        HeadParams h = attach_head(8, 90, 1);
        CHECK(head_forward(h, Tensor::zeros({8})).shape() == Shape{90});
    }
    SUBCASE("zero weights yield the bias") {
        HeadParams h = attach_head(8, 3, 1);
        h.m1.values().setZero();
        h.m2.values().setZero();
        h.c2.values()[1] = 2.5;
        Tensor logits = head_forward(h, Tensor::full({8}, 1.0));
        CHECK(logits(0) == 0.0);
        CHECK(logits(1) == 2.5);
    }
    SUBCASE("linear probe has no hidden layer") {
        HeadParams h = attach_head(8, 4, 1, true);
        CHECK(h.linear);
        CHECK(h.m2.shape() == Shape{8, 4});
        CHECK(h.named_params("p.").size() == 2);
    }
    SUBCASE("fewer than two classes is rejected") {
        CHECK_THROWS_AS(attach_head(8, 1, 1), ConfigError);
    }
}

TEST_CASE("attention maps") {
    GeneratorConfig gcfg;
    gcfg.num_users = 6;
    gcfg.num_days = 8;
    gcfg.horizon_days = 2;
    gcfg.avg_events_per_day = 3;
    gcfg.seed = 12;
    Dataset data = generate_synthetic(gcfg);
    WindowPlan plan{kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
    EncoderParams enc = init_encoder(8, gcfg.vocab_size, 8, 2);
    SeqModelParams params = init_seq_model(mini_cfg(8, 8, 2, 2), 3);

    auto maps = attention_maps(params, enc, data, plan, 5);
    REQUIRE(maps.size() == 2);
    for (const auto& m : maps) {
        REQUIRE(m.rows() == 8);
        for (Index r = 0; r < m.rows(); ++r) {
            CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-9);
            for (Index c = r + 1; c < m.cols(); ++c) CHECK(m(r, c) == 0.0);
        }
    }

    // averaging N copies of one sample equals the single-sample map
    Dataset copies(4, data[0]);
    auto single = attention_maps(params, enc, {data[0]}, plan, 1);
    auto averaged = attention_maps(params, enc, copies, plan, 4);
    for (std::size_t l = 0; l < single.size(); ++l)
        CHECK((averaged[l] - single[l]).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(attention_maps(params, enc, data, plan, 0), ContractError);
}

TEST_CASE("sequence model gradients match finite differences on a miniature") {
    Rng rng(77);
    SeqModelConfig cfg = mini_cfg(4, 8, 1, 2);
    SeqModelParams params = init_seq_model(cfg, 13);
    PooledSequence pooled = random_pooled(4, 8, rng, {1, 1, 0, 1});

    const auto& ly = params.layers[0];
    test_util::check_gradients(
        "encode_sequence",
        [&](const std::vector<Tensor>& in) {
            SeqModelParams q;
            q.cfg = cfg;
            q.pos = params.pos;
            SeqLayerParams l;
            l.wq = in[0];
            l.wk = in[1];
            l.wv = in[2];
            l.wo = in[3];
            l.ff1 = in[4];
            l.ff2 = in[5];
            l.ln1_g = in[6];
            l.ln1_b = in[7];
            l.ln2_g = in[8];
            l.ln2_b = in[9];
            q.layers.push_back(std::move(l));
            PooledSequence input;
            input.embeddings = in[10];
            input.valid = pooled.valid;
            return encode_sequence(q, input);
        },
        {ly.wq, ly.wk, ly.wv, ly.wo, ly.ff1, ly.ff2, ly.ln1_g, ly.ln1_b, ly.ln2_g, ly.ln2_b,
         random_tensor({4, 8}, rng, -1, 1, true)},
        rng);
}
