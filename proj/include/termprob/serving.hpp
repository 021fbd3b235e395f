// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "termprob/corpus.hpp"
#include "termprob/retriever.hpp"

namespace termprob {

struct RetrievedTerm {
  TermId term_id = 0;
  std::string src;
  std::string tgt;
  double prob = 0.0;  // cosine similarity for the baseline scorer
  std::size_t rank = 0;
};

struct StageTiming {
  double feature_ms = 0.0;
  double scoring_ms = 0.0;
  double topk_ms = 0.0;
  double total_ms = 0.0;
};

struct RetrievalResult {
  std::vector<RetrievedTerm> entries;
  StageTiming timing;
  std::string scorer = "a2p";
  bool scores_are_similarities = false;
};

// Indices of the k largest scores in descending order. Equal scores rank by
// ascending key; without keys the index itself is the key. Runs a bounded
// heap, O(m log k).
std::vector<std::size_t> top_k_select(std::span<const float> scores, std::size_t k,
                                      std::span<const TermId> keys = {});

// A bank ready for serving under one parameter set. Immutable once built.
struct ServingBank {
  TermBank bank;
  std::vector<TermFeatures> features;
  PreparedBank prepared;
  std::uint64_t version = 0;
};

std::shared_ptr<const ServingBank> make_serving_bank(const RetrieverParams& params, const ToyEncoder& encoder,
                                                     TermBank bank);

// Holds the live bank. swap() publishes a new bank; readers that already hold
// the old pointer finish on it.
class BankRegistry {
 public:
  explicit BankRegistry(std::shared_ptr<const ServingBank> initial);
  std::shared_ptr<const ServingBank> current() const;
  // Returns the version number assigned to the new bank.
  std::uint64_t swap(std::shared_ptr<const ServingBank> next);

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const ServingBank> bank_;
  std::uint64_t next_version_ = 1;
};

struct ServingOptions {
  std::size_t score_batch = 256;
  double pooling_epsilon = 1e-6;
};

RetrievalResult retrieve(const RetrieverParams& params, const ServingBank& bank, const SpeechFeatures& speech,
                         std::size_t k, const ServingOptions& options = {});

// ---------------------------------------------------------------------------
// prompts

enum class PromptTask { Transcribe, Translate };

struct PromptTemplate {
  std::string source_language = "English";
  std::string target_language = "Chinese";
  // For translation: list "src→tgt" pairs, or source terms only.
  bool st_term_pairs = true;
};

PromptTask parse_prompt_task(std::string_view name);  // "asr" or "st"

std::string build_prompt(const PromptTemplate& tmpl, PromptTask task, const RetrievalResult& retrieved);

// ---------------------------------------------------------------------------
// latency

struct LatencyRow {
  std::string scorer;
  std::size_t bank_size = 0;
  std::size_t queries = 0;
  double feature_ms = 0.0;
  double scoring_ms = 0.0;
  double topk_ms = 0.0;
  double total_ms = 0.0;
  double p95_scoring_ms = 0.0;
  double p95_topk_ms = 0.0;
  double p95_total_ms = 0.0;
  double topk_share = 0.0;  // mean topk_ms / mean total_ms
};

struct LatencyQuery {
  const SpeechFeatures* speech;
};

// Times `queries` retrievals (after `warmup` discarded ones) at each bank
// size for the A2P scorer and the cosine baseline. Banks are built as the
// base bank followed by distractors, truncated to each size.
std::vector<LatencyRow> bench_latency(const RetrieverParams& params, const ToyEncoder& encoder,
                                      const TermBank& full_bank, const std::vector<std::size_t>& bank_sizes,
                                      const std::vector<const SpeechFeatures*>& speech, std::size_t queries,
                                      std::size_t k, std::size_t warmup = 5, const ServingOptions& options = {});

void write_latency_csv(const std::filesystem::path& path, const std::vector<LatencyRow>& rows);

}  // namespace termprob
