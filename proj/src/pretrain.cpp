#include "byb/pretrain.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "byb/checkpoint.hpp"
#include "byb/rng.hpp"

namespace byb {

void LossConfig::validate() const {
    if (temperature <= 0.0) throw ConfigError("loss temperature must be positive");
}

namespace {

void check_finite(const char* who, const Tensor& t) {
    if (!t.values().allFinite()) throw NumericError(std::string(who) + ": non-finite input");
}

Tensor as_rows(const Tensor& t) {
    return t.rank() == 1 ? reshape(t, {1, t.size()}) : t;
}

}  // namespace

Tensor loss_ce(const Tensor& pred, const Tensor& target, double temperature,
               LossConfig::CeForm form) {
    if (pred.shape() != target.shape())
        throw ShapeError("loss_ce: pred " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
    check_finite("loss_ce", pred);
    check_finite("loss_ce", target);
    Tensor p = as_rows(pred);
    Tensor q = as_rows(target);
    Tensor weights, logs;
    if (form == LossConfig::CeForm::distillation) {
        weights = softmax(q, 1, temperature);
        logs = log_softmax(p, 1, temperature);
    } else {
        weights = softmax(p, 1, temperature);
        logs = log_softmax(q, 1, temperature);
    }
    return scale(mean(sum(elementwise_multiply(weights, logs), 1)), -1.0);
}

Tensor loss_mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("loss_mse: pred " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
    Tensor diff = subtract(pred, target);
    return mean(elementwise_multiply(diff, diff));
}

Tensor one_hot_rows(const std::vector<int>& labels, Index num_classes) {
    Vec v = Vec::Zero(static_cast<Index>(labels.size()) * num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw BoundsError("class label " + std::to_string(labels[i]) + " out of [0," +
                              std::to_string(num_classes) + ")");
        v[static_cast<Index>(i) * num_classes + labels[i]] = 1.0;
    }
    return Tensor::from_array({static_cast<Index>(labels.size()), num_classes}, std::move(v), false);
}

Tensor classification_ce(const Tensor& logits, const Tensor& one_hot) {
    Tensor lp = log_softmax(logits, 1);
    return scale(mean(sum(elementwise_multiply(lp, one_hot), 1)), -1.0);
}

CausalLoss causal_loss(const Tensor& h, const PooledSequence& pooled,
                       const PredictorParams* predictor, const EncoderParams& teacher,
                       const UbsSample& sample, const WindowPlan& plan, const LossConfig& cfg) {
    cfg.validate();
    const SupervisionTargets targets = supervision_targets(teacher, sample, plan);
    std::vector<Index> rows;  // H row k-1 <-> prediction window k
    for (Index k = 0; k < h.rows(); ++k)
        if (pooled.valid[static_cast<std::size_t>(k)] && targets.valid[static_cast<std::size_t>(k)])
            rows.push_back(k);
    if (rows.empty()) return {};

    Tensor preds = gather_rows(h, rows);
    if (predictor) preds = predict(*predictor, preds);
    Tensor targs = gather_rows(targets.embeddings, rows);

    CausalLoss out;
    out.windows = static_cast<Index>(rows.size());
    out.loss = cfg.kind == LossConfig::Kind::mse
                   ? loss_mse(preds, targs)
                   : loss_ce(preds, targs, cfg.temperature, cfg.ce_form);
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(NamedTensors params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& [name, t] : params_) {
        m_.push_back(Vec::Zero(t.size()));
        v_.push_back(Vec::Zero(t.size()));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        if (!p.has_grad()) continue;
        const Vec& g = p.grad();
        if (!g.allFinite()) throw NumericError("NaN gradient in " + params_[i].first);
        if (cfg_.weight_decay != 0.0) p.values() *= (1.0 - cfg_.lr * cfg_.weight_decay);
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
        p.values() -= cfg_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.eps);
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

NamedTensors BybModel::trainable_params() const {
    NamedTensors out = encoders.student.named_params("student.");
    for (auto& e : seq.named_params("seqmodel.")) out.push_back(std::move(e));
    for (auto& e : predictor.named_params("predictor.")) out.push_back(std::move(e));
    return out;
}

NamedTensors BybModel::checkpoint_tensors() const {
    NamedTensors out = encoders.student.named_params("student.");
    for (auto& e : encoders.teacher.named_params("teacher.")) out.push_back(std::move(e));
    for (auto& e : seq.named_params("seqmodel.")) out.push_back(std::move(e));
    for (auto& e : predictor.named_params("predictor.")) out.push_back(std::move(e));
    return out;
}

BybModel init_byb_model(Index d_model, std::uint32_t max_id, Index m_max,
                        const SeqModelConfig& seq_cfg, std::uint64_t seed, double m_ema) {
    if (seq_cfg.d_model != d_model)
        throw ConfigError("sequence model d_model must match the encoder dimension");
    BybModel m;
    m.encoders = make_encoder_pair(d_model, max_id, m_max, seed, m_ema);
    m.seq = init_seq_model(seq_cfg, seed);
    m.predictor = init_predictor(d_model, seed);
    return m;
}

BybModel byb_model_from_checkpoint(const NamedTensors& entries, const SeqModelConfig& seq_cfg,
                                   Index m_max, bool trainable) {
    BybModel m;
    m.encoders.student = encoder_from_checkpoint(entries, "student.", trainable, m_max);
    m.encoders.teacher = encoder_from_checkpoint(entries, "teacher.", false, m_max);
    m.seq = seq_model_from_checkpoint(entries, "seqmodel.", seq_cfg, trainable);
    m.predictor = predictor_from_checkpoint(entries, "predictor.", trainable);
    return m;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string metrics_csv_header() {
    return "step,epoch,loss,windows_contributing,samples_skipped,wall_ms";
}

std::string metrics_csv_line(const MetricsRow& r) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.17g,%lld,%lld,%.3f",
                  static_cast<long long>(r.step), r.epoch, r.loss,
                  static_cast<long long>(r.windows_contributing),
                  static_cast<long long>(r.samples_skipped), r.wall_ms);
    return buf;
}

PretrainStats pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts) {
    if (dataset.empty()) throw ConfigError("pretrain: empty dataset");
    if (opts.batch_size < 1) throw ConfigError("pretrain: batch size must be >= 1");
    opts.plan.validate();
    opts.loss.validate();

    Adam adam(model.trainable_params(), opts.adam);
    PretrainStats stats;
    std::ofstream metrics;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        metrics.open(opts.out_dir + "/metrics.csv", std::ios::trunc);
        if (!metrics) throw IoError("cannot open metrics.csv under " + opts.out_dir);
        metrics << metrics_csv_header() << '\n';
    }

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(opts.seed, 0x85u + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += opts.batch_size) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::size_t end = std::min(order.size(), at + opts.batch_size);

            GradientTape tape;
            Tensor batch_loss;
            std::int64_t windows = 0, skipped = 0, used = 0;
            for (std::size_t i = at; i < end; ++i) {
                const UbsSample& sample = dataset[order[i]];
                PooledSequence pooled = encode_pooled_days(model.encoders.student, sample, opts.plan);
                if (!pooled.any_valid()) {
                    ++skipped;
                    continue;
                }
                Tensor h = encode_sequence(model.seq, pooled);
                CausalLoss cl =
                    causal_loss(h, pooled, opts.use_predictor ? &model.predictor : nullptr,
                                model.encoders.teacher, sample, opts.plan, opts.loss);
                if (cl.windows == 0) {
                    ++skipped;
                    continue;
                }
                windows += cl.windows;
                ++used;
                batch_loss = batch_loss.defined() ? add(batch_loss, cl.loss) : cl.loss;
            }
            if (used == 0) continue;  // nothing to learn from in this batch
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(used));

            tape.backward(batch_loss);
            adam.step();
            adam.zero_grad();
            ema_update(model.encoders);
            ++step;

            MetricsRow row;
            row.step = step;
            row.epoch = epoch;
            row.loss = batch_loss.item();
            row.windows_contributing = windows;
            row.samples_skipped = skipped;
            if (opts.log_wall_time) {
                row.wall_ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count();
            }
            stats.rows.push_back(row);
            if (metrics.is_open()) metrics << metrics_csv_line(row) << '\n';
            if (opts.progress && step % 50 == 0)
                *opts.progress << "step " << step << " epoch " << epoch << " loss " << row.loss
                               << "\n";
            if (opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 &&
                !opts.out_dir.empty())
                save_checkpoint(opts.out_dir + "/checkpoint_step" + std::to_string(step) + ".bybt",
                                model.checkpoint_tensors());
        }
    }
    stats.steps = step;
    if (!opts.out_dir.empty())
        save_checkpoint(opts.out_dir + "/checkpoint.bybt", model.checkpoint_tensors());
    return stats;
}

}  // namespace byb
