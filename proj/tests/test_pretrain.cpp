#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "byb/pretrain.hpp"
#include "test_util.hpp"

using namespace byb;
using test_util::random_tensor;

namespace {

Dataset tiny_dataset(int users, int days, double avg, std::uint64_t seed,
                     std::uint32_t vocab = 200, int categories = 4) {
    GeneratorConfig cfg;
    cfg.num_users = users;
    cfg.num_days = days;
    cfg.horizon_days = 5;
    cfg.avg_events_per_day = avg;
    cfg.vocab_size = vocab;
    cfg.num_categories = categories;
    cfg.seed = seed;
    cfg.drift_strength = 0.3;
    cfg.periodicity_strength = 0.3;
    return generate_synthetic(cfg);
}

WindowPlan day_plan(int days) {
    return {kSecondsPerDay, kSecondsPerDay, static_cast<std::int64_t>(days) * kSecondsPerDay};
}

BybModel tiny_model(std::uint64_t seed, Index d = 6, std::uint32_t max_id = 200,
                    double m_ema = 0.995) {
    SeqModelConfig cfg;
    cfg.d_model = d;
    cfg.ff_dim = d;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.max_positions = 64;
    return init_byb_model(d, max_id, 8, cfg, seed, m_ema);
}

}  // namespace

TEST_CASE("loss_ce on uniform logits equals ln d") {
    for (double tau : {1.0, 0.1}) {
        Tensor pred = Tensor::full({5}, 0.4);
        Tensor target = Tensor::full({5}, 0.4);
        CHECK(loss_ce(pred, target, tau).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
}

TEST_CASE("loss_ce is invariant to constant shifts of either argument") {
    Rng rng(41);
    Tensor pred = random_tensor({6}, rng, -1, 1, false);
    Tensor target = random_tensor({6}, rng, -1, 1, false);
    const double base = loss_ce(pred, target, 0.1).item();
    Tensor shift = Tensor::full({6}, 3.7);
    CHECK(std::abs(loss_ce(add(pred, shift), target, 0.1).item() - base) < 1e-10);
    CHECK(std::abs(loss_ce(pred, add(target, shift), 0.1).item() - base) < 1e-10);
    CHECK(std::abs(loss_ce(add(pred, shift), add(target, shift), 0.1).item() - base) < 1e-10);
}

TEST_CASE("loss_ce two-dimensional hand oracle") {
    // softmax([1,0]) = [sigma(1), 1-sigma(1)]; target softmax is uniform
    Tensor pred = Tensor::from_data({2}, {1.0, 0.0});
    Tensor target = Tensor::from_data({2}, {0.0, 0.0});
    const double sig = 1.0 / (1.0 + std::exp(-1.0));
    const double expected = 0.5 * (-std::log(sig)) + 0.5 * (-std::log(1.0 - sig));
    CHECK(loss_ce(pred, target, 1.0).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("loss_ce(x,x) equals the entropy of softmax(x/tau) and is nonnegative") {
    Rng rng(42);
    Tensor x = random_tensor({8}, rng, -2, 2, false);
    const double l = loss_ce(x, x, 0.5).item();
    CHECK(l >= 0.0);
    Tensor p = softmax(x, 0, 0.5);
    double entropy = 0.0;
    for (Index i = 0; i < 8; ++i) entropy -= p(i) * std::log(p(i));
    CHECK(l == doctest::Approx(entropy).epsilon(1e-12));
}

TEST_CASE("literal form swaps the argument roles") {
    Rng rng(43);
    Tensor a = random_tensor({5}, rng, -1, 1, false);
    Tensor b = random_tensor({5}, rng, -1, 1, false);
    CHECK(loss_ce(a, b, 0.3, LossConfig::CeForm::literal).item() ==
          doctest::Approx(loss_ce(b, a, 0.3, LossConfig::CeForm::distillation).item())
              .epsilon(1e-12));
}

TEST_CASE("loss_ce rejects non-finite input") {
    Tensor bad = Tensor::from_data({2}, {std::numeric_limits<double>::infinity(), 0.0});
    Tensor ok = Tensor::from_data({2}, {0.0, 0.0});
    CHECK_THROWS_AS(loss_ce(bad, ok, 1.0), NumericError);
    CHECK_THROWS_AS(loss_ce(ok, bad, 1.0), NumericError);
}

TEST_CASE("CE-with-temperature gradient matches finite differences") {
    Rng rng(44);
    Tensor target = random_tensor({4, 5}, rng, -1, 1, false);
    test_util::check_gradients(
        "loss_ce",
        [&](const std::vector<Tensor>& in) { return loss_ce(in[0], target, 0.1); },
        {random_tensor({4, 5}, rng)}, rng);
    test_util::check_gradients(
        "loss_ce_literal",
        [&](const std::vector<Tensor>& in) {
            return loss_ce(in[0], target, 0.1, LossConfig::CeForm::literal);
        },
        {random_tensor({4, 5}, rng)}, rng);
}

TEST_CASE("loss_mse") {
    Tensor a = Tensor::from_data({2}, {2.0, 0.0});
    Tensor b = Tensor::from_data({2}, {0.0, 0.0});
    CHECK(loss_mse(a, a).item() == 0.0);
    CHECK(loss_mse(a, b).item() == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(loss_mse(a, b).item() == loss_mse(b, a).item());
    Rng rng(45);
    test_util::check_gradients(
        "loss_mse", [&](const std::vector<Tensor>& in) { return loss_mse(in[0], b.detach()); },
        {random_tensor({2}, rng)}, rng);
}

TEST_CASE("causal_loss equals the independent window-sum oracle") {
    Dataset data = tiny_dataset(6, 8, 4.0, 9);
    BybModel model = tiny_model(2);
    WindowPlan plan = day_plan(8);
    LossConfig lcfg;

    for (const auto& sample : data) {
        PooledSequence pooled = encode_pooled_days(model.encoders.student, sample, plan);
        if (!pooled.any_valid()) continue;
        Tensor h = encode_sequence(model.seq, pooled);
        CausalLoss cl = causal_loss(h, pooled, &model.predictor, model.encoders.teacher, sample,
                                    plan, lcfg);

        // brute force: one window at a time through the single-vector path
        double total = 0.0;
        Index windows = 0;
        for (std::int64_t k = 1; k <= plan.num_buckets(); ++k) {
            if (!pooled.valid[static_cast<std::size_t>(k - 1)]) continue;
            auto [b, e] = prediction_events(sample, k, plan);
            auto [target, valid] =
                supervision_embedding(model.encoders.teacher, std::span(sample.events.data() + b, e - b));
            if (!valid) continue;
            Tensor e_k = reshape(gather_rows(h, {static_cast<Index>(k - 1)}), {h.cols()});
            total += loss_ce(predict(model.predictor, e_k), target, lcfg.temperature).item();
            ++windows;
        }
        CHECK(cl.windows == windows);
        if (windows > 0)
            CHECK(cl.loss.item() ==
                  doctest::Approx(total / static_cast<double>(windows)).epsilon(1e-12));
    }
}

TEST_CASE("causal_loss with a single window and the empty-window skip") {
    BybModel model = tiny_model(3);
    WindowPlan plan = day_plan(3);
    LossConfig lcfg;

    UbsSample one_window;
    one_window.user_id = "u";
    one_window.events = {{10, {1, 2}}, {kSecondsPerDay + 10, {3}}};
    PooledSequence pooled = encode_pooled_days(model.encoders.student, one_window, plan);
    Tensor h = encode_sequence(model.seq, pooled);
    CausalLoss cl =
        causal_loss(h, pooled, &model.predictor, model.encoders.teacher, one_window, plan, lcfg);
    CHECK(cl.windows == 1);
    auto [b, e] = prediction_events(one_window, 1, plan);
    auto [target, valid] = supervision_embedding(model.encoders.teacher,
                                                 std::span(one_window.events.data() + b, e - b));
    Tensor e1 = reshape(gather_rows(h, {0}), {h.cols()});
    CHECK(cl.loss.item() ==
          doctest::Approx(loss_ce(predict(model.predictor, e1), target, lcfg.temperature).item())
              .epsilon(1e-12));

    UbsSample no_future;  // events only in the last observed day, dT2 = 1 day
    no_future.user_id = "v";
    no_future.events = {{10, {1}}};
    PooledSequence pooled2 = encode_pooled_days(model.encoders.student, no_future, plan);
    Tensor h2 = encode_sequence(model.seq, pooled2);
    CausalLoss cl2 =
        causal_loss(h2, pooled2, &model.predictor, model.encoders.teacher, no_future, plan, lcfg);
    CHECK(cl2.windows == 0);
    CHECK(!cl2.loss.defined());
}

TEST_CASE("stop-gradient: teacher parameters receive exactly zero gradient") {
    Dataset data = tiny_dataset(3, 6, 4.0, 10);
    BybModel model = tiny_model(4);
    WindowPlan plan = day_plan(6);
    LossConfig lcfg;

    GradientTape tape;
    Tensor total;
    for (const auto& sample : data) {
        PooledSequence pooled = encode_pooled_days(model.encoders.student, sample, plan);
        if (!pooled.any_valid()) continue;
        Tensor h = encode_sequence(model.seq, pooled);
        CausalLoss cl =
            causal_loss(h, pooled, &model.predictor, model.encoders.teacher, sample, plan, lcfg);
        if (cl.windows == 0) continue;
        total = total.defined() ? add(total, cl.loss) : cl.loss;
    }
    REQUIRE(total.defined());
    tape.backward(total);

    for (const auto& [name, t] : model.encoders.teacher.named_params("teacher."))
        CHECK(!t.has_grad());
    CHECK(model.encoders.student.embedding.has_grad());
    CHECK(model.seq.layers[0].wq.has_grad());
    CHECK(model.predictor.m1.has_grad());
}

TEST_CASE("adam") {
    SUBCASE("zero gradient and zero weight decay leave parameters unchanged") {
        Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        Adam adam({{"p", p}}, cfg);
        {
            GradientTape tape;
            tape.backward(scale(sum(p), 0.0));  // gradient identically zero
        }
        const Vec before = p.values();
        adam.step();
        CHECK((p.values() == before).all());
    }
    SUBCASE("first step has magnitude about lr") {
        Tensor p = Tensor::scalar(0.0, true);
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        cfg.lr = 1e-3;
        Adam adam({{"p", p}}, cfg);
        {
            GradientTape tape;
            tape.backward(scale(sum(p), 2.5));  // d/dp = 2.5
        }
        adam.step();
        CHECK(p.values()[0] == doctest::Approx(-1e-3).epsilon(1e-5));
    }
    SUBCASE("NaN gradient aborts with the tensor name") {
        Tensor p = Tensor::scalar(1.0, true);
        Adam adam({{"my_param", p}}, {});
        {
            GradientTape tape;
            Tensor nan_coeff = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
            tape.backward(sum(elementwise_multiply(p, nan_coeff)));  // d/dp = NaN
        }
        REQUIRE(p.has_grad());
        REQUIRE(!p.grad().allFinite());
        try {
            adam.step();
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("my_param") != std::string::npos);
        }
    }
    SUBCASE("one hundred random steps match an independently coded reference") {
        Rng rng(46);
        Tensor p = random_tensor({7}, rng);
        Vec ref = p.values();
        AdamConfig cfg;
        cfg.lr = 3e-3;
        cfg.weight_decay = 0.02;
        Adam adam({{"p", p}}, cfg);
        Vec m = Vec::Zero(7), v = Vec::Zero(7);
        for (int t = 1; t <= 100; ++t) {
            Tensor g = random_tensor({7}, rng, -1, 1, false);
            {
                GradientTape tape;
                tape.backward(sum(elementwise_multiply(p, g)));
            }
            adam.step();
            adam.zero_grad();
            // reference path, scalar loops
            for (Index i = 0; i < 7; ++i) {
                ref[i] *= 1.0 - cfg.lr * cfg.weight_decay;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g(i);
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g(i) * g(i);
                const double mhat = m[i] / (1.0 - std::pow(cfg.beta1, t));
                const double vhat = v[i] / (1.0 - std::pow(cfg.beta2, t));
                ref[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
            for (Index i = 0; i < 7; ++i) CHECK(std::abs(p.values()[i] - ref[i]) < 1e-10);
        }
    }
}

TEST_CASE("pretrain: first-step EMA identity and determinism") {
    Dataset data = tiny_dataset(8, 6, 4.0, 11);
    WindowPlan plan = day_plan(6);

    SUBCASE("after one step teacher = m*teacher0 + (1-m)*student1") {
        BybModel model = tiny_model(5, 6, 200, 0.9);
        const Vec teacher0 = model.encoders.teacher.embedding.values();
        PretrainOptions opts;
        opts.plan = plan;
        opts.epochs = 1;
        opts.batch_size = data.size();  // exactly one step
        opts.seed = 1;
        PretrainStats stats = pretrain(data, model, opts);
        REQUIRE(stats.steps == 1);
        const Vec expected = 0.9 * teacher0 + 0.1 * model.encoders.student.embedding.values();
        CHECK((model.encoders.teacher.embedding.values() - expected).abs().maxCoeff() < 1e-12);
    }
    SUBCASE("identical seeds give identical loss curves") {
        auto run = [&] {
            BybModel model = tiny_model(6);
            PretrainOptions opts;
            opts.plan = plan;
            opts.epochs = 2;
            opts.batch_size = 4;
            opts.seed = 7;
            opts.log_wall_time = false;
            return pretrain(data, model, opts);
        };
        PretrainStats a = run();
        PretrainStats b = run();
        REQUIRE(a.rows.size() == b.rows.size());
        for (std::size_t i = 0; i < a.rows.size(); ++i) {
            CHECK(a.rows[i].loss == b.rows[i].loss);
            CHECK(a.rows[i].windows_contributing == b.rows[i].windows_contributing);
        }
    }
    SUBCASE("no-predictor ablation trains without error") {
        BybModel model = tiny_model(7);
        PretrainOptions opts;
        opts.plan = plan;
        opts.epochs = 1;
        opts.batch_size = 4;
        opts.use_predictor = false;
        PretrainStats stats = pretrain(data, model, opts);
        CHECK(stats.steps > 0);
    }
    SUBCASE("mse loss trains without error") {
        BybModel model = tiny_model(8);
        PretrainOptions opts;
        opts.plan = plan;
        opts.epochs = 1;
        opts.batch_size = 4;
        opts.loss.kind = LossConfig::Kind::mse;
        PretrainStats stats = pretrain(data, model, opts);
        CHECK(stats.steps > 0);
        for (const auto& row : stats.rows) CHECK(std::isfinite(row.loss));
    }
    SUBCASE("empty dataset is a config error") {
        BybModel model = tiny_model(9);
        PretrainOptions opts;
        opts.plan = plan;
        CHECK_THROWS_AS(pretrain({}, model, opts), ConfigError);
    }
}

TEST_CASE("pretraining loss trends down on planted structure") {
    Dataset data = tiny_dataset(60, 8, 6.0, 12, 100, 3);
    BybModel model = tiny_model(10, 6, 100);
    PretrainOptions opts;
    opts.plan = day_plan(8);
    opts.epochs = 3;
    opts.batch_size = 10;
    opts.adam.lr = 3e-3;
    opts.seed = 3;
    PretrainStats stats = pretrain(data, model, opts);
    REQUIRE(stats.rows.size() >= 10);
    const std::size_t tenth = stats.rows.size() / 10;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < tenth; ++i) first += stats.rows[i].loss;
    for (std::size_t i = stats.rows.size() - tenth; i < stats.rows.size(); ++i)
        last += stats.rows[i].loss;
    CHECK(last / static_cast<double>(tenth) < first / static_cast<double>(tenth));
}
