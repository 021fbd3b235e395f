// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "termprob/corpus.hpp"
#include "termprob/gradcheck.hpp"
#include "termprob/retriever.hpp"

namespace termprob {

class BatchCompositionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StageBudget {
  CurriculumStage stage;
  std::size_t steps;
};

struct TrainingConfig {
  std::size_t batch_size = 32;
  std::size_t max_bank_per_batch = 100;
  double peak_lr = 1e-4;
  double init_lr = 1e-7;
  std::size_t warmup_steps = 500;
  std::size_t max_epochs = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double pooling_epsilon = 1e-6;
  // Explicit per-stage step budgets. Empty means max_epochs worth of steps
  // split 30% / 30% / 40% over word, phrase and real-term stages.
  std::vector<StageBudget> stage_schedule;
  std::size_t epochs_per_validation = 1;
  // Stop after this many validations without a recall@10 gain; 0 disables.
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 1;

  std::vector<StageBudget> resolved_schedule(std::size_t train_utterances) const;
  void validate() const;
};

// Split of a step budget into the 30/30/40 default.
std::vector<StageBudget> default_schedule(std::size_t total_steps);

// ---------------------------------------------------------------------------
// loss

struct LossResult {
  double loss = 0.0;
  std::vector<double> dlogit;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Mean of -log p over positives plus mean of -log(1-p) over negatives.
// Probabilities are clamped to [1e-7, 1-1e-7] inside the logs only.
LossResult dual_bce_loss(const std::vector<double>& probs, const std::vector<std::uint8_t>& labels);

// ---------------------------------------------------------------------------
// batches

struct TrainingPair {
  std::size_t utterance;  // index into Corpus::utterances
  std::size_t candidate;  // index into Batch::candidates
  std::uint8_t label;
};

struct Batch {
  CurriculumStage stage = CurriculumStage::Word;
  std::vector<std::size_t> utterances;
  std::vector<TokenSeq> candidates;
  std::vector<std::uint8_t> labels;  // utterance-major, utterances x candidates
  std::size_t dropped_positives = 0;

  std::vector<TrainingPair> pairs() const;
};

// Builds one batch from the given utterance indices. The candidate list
// holds every stage-sampled positive (subsampled uniformly if they alone
// exceed the cap) followed by negatives up to the cap. Labels come from a
// substring scan of each transcript.
Batch build_batch(const Corpus& corpus, const std::vector<std::size_t>& utterances,
                  CurriculumStage stage, const TrainingConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// forward + analytic backward over a batch

template <typename T>
struct BatchView {
  std::vector<const BasicTensor2<T>*> speech;  // valid frames only
  std::vector<const BasicTensor2<T>*> terms;   // valid tokens only
  std::vector<std::uint8_t> labels;            // speech-major
  std::uint64_t dropout_seed = 0;
};

inline std::uint64_t pair_dropout_seed(std::uint64_t batch_seed, std::size_t u, std::size_t c) {
  return mix_seed(batch_seed, (std::uint64_t{u} << 32) | c);
}

// Returns the batch loss and, when `grad` is non-null, accumulates the exact
// gradient of that loss into it.
template <typename T>
double batch_loss_and_grad(const BasicRetrieverParams<T>& params, const BatchView<T>& batch,
                           double pooling_epsilon, ScoreMode mode, BasicRetrieverParams<T>* grad,
                           std::vector<double>* probs_out = nullptr);

// Same loss through the reference score_term path, one pair at a time.
template <typename T>
double reference_batch_loss(const BasicRetrieverParams<T>& params, const BatchView<T>& batch,
                            double pooling_epsilon, ScoreMode mode);

struct GradCheckConfig {
  std::size_t dim = 16;
  std::size_t heads = 4;
  std::size_t max_frames = 8;
  std::size_t max_tokens = 4;
  std::size_t utterances = 2;
  std::size_t candidates = 3;
  double fd_eps = 1e-4;
  bool token_pooling = true;
  bool dropout = true;  // train mode with fixed per-pair masks
  std::uint64_t seed = 1;
};

// Random parameters (non-zero head and biases) and a random batch; compares
// the analytic batch gradient against central differences of the reference
// loss, all in double precision.
GradCheckResult run_gradcheck(const GradCheckConfig& cfg);

// Config number `index` of a seeded random sweep: d in {8, 16, 32}, H in
// {1, 2, 4}, frame and token bounds and the remaining fields from `base`.
GradCheckConfig sample_gradcheck_config(const GradCheckConfig& base, std::uint64_t seed, std::size_t index);

// ---------------------------------------------------------------------------
// optimizer and schedule

struct AdamState {
  RetrieverParams m;
  RetrieverParams v;
  static AdamState zeros_like(const RetrieverParams& p) { return {p.zeros_like(), p.zeros_like()}; }
};

// Bias-corrected Adam with decoupled weight decay:
// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p). Throws NumericError
// naming the tensor if any gradient entry is non-finite; nothing is updated.
void adamw_step(RetrieverParams& params, const RetrieverParams& grads, AdamState& state,
                std::size_t step, double lr, const TrainingConfig& cfg);

// Scales grads in place to the given global L2 norm; returns the pre-clip norm.
double clip_global_norm(RetrieverParams& grads, double max_norm);

// Linear warmup from init_lr (step 1) to peak_lr (step warmup_steps), then
// cosine annealing towards 0 at total_steps.
double lr_at(std::size_t step, const TrainingConfig& cfg, std::size_t total_steps);

// ---------------------------------------------------------------------------
// curriculum driver

struct StepLog {
  std::size_t step;
  CurriculumStage stage;
  double lr;
  double loss;
};

struct EpochLog {
  std::size_t epoch;
  CurriculumStage stage;
  std::size_t step;
  double recall_at_10;
};

struct TrainResult {
  RetrieverParams params;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::vector<std::pair<CurriculumStage, RetrieverParams>> stage_checkpoints;
  std::size_t clipped_steps = 0;
  bool diverged = false;
  bool early_stopped = false;
  std::string message;
};

struct CurriculumOptions {
  ModelShape shape;
  double dropout_p = 0.1;
  bool token_pooling = true;
  bool tie_query_key = true;
  // Validation recall@10 for the current parameters; unset skips validation.
  std::function<double(const RetrieverParams&)> validate;
  // When set, stage-boundary checkpoints are also written here.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const StepLog&)> on_step;
};

TrainResult run_curriculum(const Corpus& corpus, const TrainingConfig& cfg,
                           const CurriculumOptions& options);

// Resumes from existing parameters instead of a fresh initialization.
TrainResult run_curriculum(const Corpus& corpus, const TrainingConfig& cfg,
                           const CurriculumOptions& options, RetrieverParams initial);

void write_step_log(const std::filesystem::path& path, const std::vector<StepLog>& steps);
void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochLog>& epochs);

}  // namespace termprob
