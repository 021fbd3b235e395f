// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "termprob/baseline.hpp"
#include "termprob/serving.hpp"
#include "termprob/training.hpp"

namespace termprob {

inline const std::vector<std::size_t> kReportKs{10, 20, 30, 40, 50};

struct RecallReport {
  std::string label;
  std::string scorer;
  std::vector<std::size_t> ks;
  std::vector<double> recall;     // percent, one per k
  std::vector<std::size_t> hits;  // one per k
  std::size_t n_gold = 0;
  std::size_t n_utterances = 0;

  double at(std::size_t k) const;
};

// Unique bank terms whose token sequence occurs in the transcript.
std::vector<TermId> gold_terms(const TokenSeq& transcript, const TermBank& bank);

struct RecallCount {
  std::size_t hits = 0;
  std::size_t gold = 0;
  double percent = 0.0;
};

// Micro average: total hits over total gold terms. With `macro` set, the
// per-utterance ratios are averaged instead (utterances without gold skipped).
RecallCount recall_count(const std::vector<RetrievalResult>& results, const std::vector<std::vector<TermId>>& gold,
                         const TermBank& bank, std::size_t k, bool macro = false);

double recall_at_k(const std::vector<RetrievalResult>& results, const std::vector<std::vector<TermId>>& gold,
                   const TermBank& bank, std::size_t k, bool macro = false);

RecallReport make_report(const std::string& label, const std::string& scorer,
                         const std::vector<RetrievalResult>& results, const std::vector<std::vector<TermId>>& gold,
                         const TermBank& bank, const std::vector<std::size_t>& ks, bool macro = false);

struct EvalSet {
  std::vector<const SpeechFeatures*> speech;
  std::vector<std::vector<TermId>> gold;
};

// Speech and gold terms for every utterance of `split`, gold drawn from `bank`.
EvalSet make_eval_set(const Corpus& corpus, const std::string& split, const TermBank& bank);

RecallReport evaluate_a2p(const RetrieverParams& params, const ServingBank& bank, const EvalSet& set,
                          const std::vector<std::size_t>& ks, const std::string& label = "a2p",
                          const ServingOptions& options = {}, bool macro = false);

RecallReport evaluate_cosine(const DenseIndex& index, const TermBank& bank, const EvalSet& set,
                             const std::vector<std::size_t>& ks, const std::string& label = "cosine",
                             bool macro = false);

// ---------------------------------------------------------------------------
// bank-size sweep

struct SweepPoint {
  std::string scorer;
  std::size_t bank_size = 0;
  std::uint64_t seed = 0;
  double recall = 0.0;
};

// For every seed and size, the bank is the base bank plus size - |base|
// distractors drawn from the pool with that seed.
std::vector<SweepPoint> sweep_bank_size(const RetrieverParams& params, const ToyEncoder& encoder,
                                        const TermBank& base_bank, const TermBank& distractor_pool,
                                        const EvalSet& set, const std::vector<std::size_t>& sizes, std::size_t k,
                                        const std::vector<std::uint64_t>& seeds, const ServingOptions& options = {});

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points);

// ---------------------------------------------------------------------------
// ablations

enum class AblationArm { FullA2P, NoPooling, RealTermOnly, PhraseOnly, WordOnly };

std::string_view arm_name(AblationArm arm);  // full, nopool, realonly, phrase, word
AblationArm parse_arm(std::string_view name);

// Training config and options for one arm; everything but the named
// component is copied from the base.
void configure_arm(AblationArm arm, std::size_t total_steps, TrainingConfig& cfg, CurriculumOptions& options);

struct AblationRow {
  AblationArm arm;
  bool ok = false;
  std::string message;
  RecallReport report;
  double train_seconds = 0.0;
};

std::vector<AblationRow> run_ablations(const Corpus& corpus, const TrainingConfig& base_cfg,
                                       const CurriculumOptions& base_options, std::size_t total_steps,
                                       const std::vector<AblationArm>& arms, const std::vector<std::size_t>& ks,
                                       const ServingOptions& serving = {});

// ---------------------------------------------------------------------------
// report files

void write_reports_csv(const std::filesystem::path& path, const std::vector<RecallReport>& reports);
std::string reports_markdown(const std::vector<RecallReport>& reports);
void write_ablation_tables(const std::filesystem::path& dir, const std::vector<AblationRow>& rows);

}  // namespace termprob
