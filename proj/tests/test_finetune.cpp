#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "byb/finetune.hpp"
#include "test_util.hpp"

using namespace byb;

namespace {

GeneratorConfig labeled_cfg(std::uint64_t seed, int users = 30) {
    GeneratorConfig cfg;
    cfg.num_users = users;
    cfg.num_days = 8;
    cfg.horizon_days = 5;
    cfg.avg_events_per_day = 5;
    cfg.vocab_size = 120;
    cfg.num_categories = 4;
    cfg.drift_strength = 0.4;
    cfg.seed = seed;
    return cfg;
}

BybModel small_model(std::uint64_t seed) {
    SeqModelConfig cfg;
    cfg.d_model = 6;
    cfg.ff_dim = 6;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.max_positions = 16;
    return init_byb_model(6, 120, 8, cfg, seed);
}

Vec snapshot(const NamedTensors& params) {
    std::size_t total = 0;
    for (const auto& [n, t] : params) total += static_cast<std::size_t>(t.size());
    Vec out(static_cast<Index>(total));
    Index at = 0;
    for (const auto& [n, t] : params) {
        out.segment(at, t.size()) = t.values();
        at += t.size();
    }
    return out;
}

}  // namespace

TEST_CASE("freeze mode leaves every pretrained parameter bitwise intact") {
    Dataset data = generate_synthetic(labeled_cfg(1));
    BybModel model = small_model(2);
    const Vec student_before = snapshot(model.encoders.student.named_params(""));
    const Vec teacher_before = snapshot(model.encoders.teacher.named_params(""));
    const Vec seq_before = snapshot(model.seq.named_params(""));
    const Vec predictor_before = snapshot(model.predictor.named_params(""));

    FinetuneOptions opts;
    opts.plan = {kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
    opts.mode = FinetuneMode::freeze;
    opts.epochs = 2;
    FinetuneResult result = finetune(model, data, "modal-5d", opts);
    CHECK(result.rows.size() > 0);
    CHECK(result.num_classes >= 2);

    CHECK((snapshot(model.encoders.student.named_params("")) == student_before).all());
    CHECK((snapshot(model.encoders.teacher.named_params("")) == teacher_before).all());
    CHECK((snapshot(model.seq.named_params("")) == seq_before).all());
    CHECK((snapshot(model.predictor.named_params("")) == predictor_before).all());
}

TEST_CASE("unfreeze mode updates the encoder but never the teacher or predictor") {
    Dataset data = generate_synthetic(labeled_cfg(3));
    BybModel model = small_model(4);
    const Vec student_before = snapshot(model.encoders.student.named_params(""));
    const Vec teacher_before = snapshot(model.encoders.teacher.named_params(""));
    const Vec seq_before = snapshot(model.seq.named_params(""));
    const Vec predictor_before = snapshot(model.predictor.named_params(""));

    FinetuneOptions opts;
    opts.plan = {kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
    opts.mode = FinetuneMode::unfreeze;
    opts.epochs = 1;
    finetune(model, data, "modal-5d", opts);

    CHECK(!(snapshot(model.encoders.student.named_params("")) == student_before).all());
    CHECK(!(snapshot(model.seq.named_params("")) == seq_before).all());
    CHECK((snapshot(model.encoders.teacher.named_params("")) == teacher_before).all());
    CHECK((snapshot(model.predictor.named_params("")) == predictor_before).all());
}

TEST_CASE("missing task is a config error") {
    Dataset data = generate_synthetic(labeled_cfg(5));
    BybModel model = small_model(6);
    FinetuneOptions opts;
    opts.plan = {kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
    CHECK_THROWS_AS(finetune(model, data, "no-such-task", opts), ConfigError);
}

TEST_CASE("evaluate emits a macro AUROC report for multi-class tasks") {
    Dataset data = generate_synthetic(labeled_cfg(7, 40));
    BybModel model = small_model(8);
    FinetuneOptions opts;
    opts.plan = {kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
    opts.epochs = 1;
    FinetuneResult result = finetune(model, data, "modal-5d", opts);

    EvalScores scores = evaluate(model, result.head, data, "modal-5d", opts.plan);
    REQUIRE(scores.report.metrics.size() == 1);
    const TaskMetric& m = scores.report.metrics[0];
    CHECK(m.metric == "macro_auroc");
    CHECK(m.value >= 0.0);
    CHECK(m.value <= 1.0);
    CHECK(m.samples == scores.labels.size());
    CHECK(!m.class_histogram.empty());
}

TEST_CASE("evaluate emits auroc and ks for binary tasks") {
    Dataset data = generate_synthetic(labeled_cfg(9, 40));
    // binarize: class 0 vs rest
    for (auto& s : data) {
        auto it = s.labels.find("modal-5d");
        if (it != s.labels.end()) s.labels["binary"] = it->second == 0 ? 0 : 1;
    }
    BybModel model = small_model(10);
    FinetuneOptions opts;
    opts.plan = {kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
    opts.num_classes = 2;
    opts.linear_head = true;
    FinetuneResult result = finetune(model, data, "binary", opts);
    CHECK(result.head.linear);

    EvalScores scores = evaluate(model, result.head, data, "binary", opts.plan);
    REQUIRE(scores.report.metrics.size() == 2);
    CHECK(scores.report.metrics[0].metric == "auroc");
    CHECK(scores.report.metrics[1].metric == "ks");
    CHECK(scores.report.metrics[0].positive_rate > 0.0);
    for (const auto& m : scores.report.metrics) {
        CHECK(m.value >= 0.0);
        CHECK(m.value <= 1.0);
    }
}

TEST_CASE("finetune is deterministic per seed") {
    Dataset data = generate_synthetic(labeled_cfg(11));
    auto run = [&] {
        BybModel model = small_model(12);
        FinetuneOptions opts;
        opts.plan = {kSecondsPerDay, kSecondsPerDay, 8 * kSecondsPerDay};
        opts.seed = 5;
        opts.log_wall_time = false;
        return finetune(model, data, "modal-5d", opts);
    };
    FinetuneResult a = run();
    FinetuneResult b = run();
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].loss == b.rows[i].loss);
    CHECK((snapshot(a.head.named_params("")) == snapshot(b.head.named_params(""))).all());
}
