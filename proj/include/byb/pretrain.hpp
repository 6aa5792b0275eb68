#pragma once

// Pretraining objective (causal embedding-prediction loss over all
// observation sub-windows), Adam with decoupled weight decay, and the full
// training loop: student encode -> pool -> sequence model -> predictor vs.
// detached teacher supervision, then EMA teacher update.

#include <ostream>
#include <string>
#include <vector>

#include "byb/data.hpp"
#include "byb/encoder.hpp"
#include "byb/seq_model.hpp"
#include "byb/tensor.hpp"

namespace byb {

struct LossConfig {
    enum class Kind { cross_entropy, mse };
    enum class CeForm { distillation, literal };

    Kind kind = Kind::cross_entropy;
    double temperature = 0.1;
    CeForm ce_form = CeForm::distillation;

    void validate() const;
};

// Cross-entropy between temperature-softmaxed embeddings. Distillation form
// (default) puts the detached target in the weight slot:
//   -sum_i softmax(target/tau)_i * log softmax(pred/tau)_i
// The literal form swaps the roles. Rank-1 inputs give the single-pair loss;
// rank-2 inputs average the per-row losses.
Tensor loss_ce(const Tensor& pred, const Tensor& target, double temperature,
               LossConfig::CeForm form = LossConfig::CeForm::distillation);

// Mean squared error, averaged over every element (for rank-2 inputs this is
// the mean over rows of the per-row (1/d)*||pred-target||^2).
Tensor loss_mse(const Tensor& pred, const Tensor& target);

// Row-per-sample one-hot matrix for integer class targets.
Tensor one_hot_rows(const std::vector<int>& labels, Index num_classes);

// Mean cross-entropy of softmax(logits) rows against one-hot targets.
Tensor classification_ce(const Tensor& logits, const Tensor& one_hot);

struct CausalLoss {
    Tensor loss;       // undefined when windows == 0
    Index windows = 0; // contributing prediction windows
};

// Sum over valid windows k of l(predict(H[k]), supervision(k)), normalized by
// the contributing-window count. Windows whose day position is empty or whose
// prediction window has no events are skipped. predictor may be null
// (ablation: H[k] feeds the loss directly).
CausalLoss causal_loss(const Tensor& h, const PooledSequence& pooled,
                       const PredictorParams* predictor, const EncoderParams& teacher,
                       const UbsSample& sample, const WindowPlan& plan, const LossConfig& cfg);

struct AdamConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with decoupled weight decay (param shrinks by lr*wd before the
// moment update). Parameters without a populated gradient are skipped.
class Adam {
public:
    Adam(NamedTensors params, AdamConfig cfg);

    void step();
    void zero_grad();
    std::int64_t step_count() const { return t_; }
    const NamedTensors& params() const { return params_; }

private:
    NamedTensors params_;
    AdamConfig cfg_;
    std::vector<Vec> m_, v_;
    std::int64_t t_ = 0;
};

struct BybModel {
    EncoderPair encoders;
    SeqModelParams seq;
    PredictorParams predictor;

    NamedTensors trainable_params() const;  // student encoder + seq model + predictor
    NamedTensors checkpoint_tensors() const;
};

BybModel init_byb_model(Index d_model, std::uint32_t max_id, Index m_max,
                        const SeqModelConfig& seq_cfg, std::uint64_t seed, double m_ema = 0.995);
BybModel byb_model_from_checkpoint(const NamedTensors& entries, const SeqModelConfig& seq_cfg,
                                   Index m_max, bool trainable);

struct MetricsRow {
    std::int64_t step = 0;
    int epoch = 0;
    double loss = 0.0;
    std::int64_t windows_contributing = 0;
    std::int64_t samples_skipped = 0;
    double wall_ms = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);

struct PretrainOptions {
    WindowPlan plan;
    LossConfig loss;
    AdamConfig adam;
    int epochs = 2;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    bool use_predictor = true;   // ablation flag: no-predictor
    int checkpoint_every = 0;    // steps between checkpoints; 0 disables
    std::string out_dir;         // when set: metrics.csv + checkpoint.bybt
    bool log_wall_time = true;   // false pins the wall_ms column to 0 for reproducible files
    std::ostream* progress = nullptr;
};

struct PretrainStats {
    std::vector<MetricsRow> rows;
    std::int64_t steps = 0;
};

PretrainStats pretrain(const Dataset& dataset, BybModel& model, const PretrainOptions& opts);

}  // namespace byb
