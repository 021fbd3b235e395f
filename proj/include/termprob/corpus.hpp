// SPDX-License-Identifier: Apache-2.0
//
// Data model, on-disk formats and the seeded toy encoder that stands in for a
// pretrained audio encoder. Speech frames are noisy copies of the same frozen
// token embeddings the term side uses, so the speech/term correspondence is
// learnable but never trivially readable.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "termprob/rng.hpp"
#include "termprob/tensor.hpp"

namespace termprob {

using TokenId = std::uint32_t;
using TermId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SpeechFeatures {
  std::string utterance_id;
  Tensor2 frames;  // T x d, rows past the valid prefix are padding
  Mask frame_mask;
};

struct TermFeatures {
  TermId term_id = 0;
  Tensor2 tokens;  // L x d
  Mask token_mask;
  std::string surface;
};

struct TermSpan {
  TermId term_id = 0;
  std::size_t begin = 0;  // token offsets, [begin, end)
  std::size_t end = 0;
};

struct Utterance {
  std::string id;
  std::string split;  // "train", "valid" or "test"
  TokenSeq token_ids;
  std::vector<TermSpan> terms;
  std::string features_path;  // relative to the corpus directory
};

struct TermEntry {
  TermId term_id = 0;
  std::string src;
  std::string tgt;
  TokenSeq token_ids;
};

struct TokenSeqHash {
  std::size_t operator()(const TokenSeq& s) const {
    std::uint64_t h = 0x84222325cbf29ce4ULL;
    for (auto t : s) h = mix_seed(h, t);
    return static_cast<std::size_t>(h);
  }
};

// Term ids and token sequences are both unique within a bank.
class TermBank {
 public:
  void add(TermEntry entry);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<TermEntry>& entries() const { return entries_; }
  const TermEntry& at(std::size_t index) const { return entries_.at(index); }
  std::optional<std::size_t> index_of(TermId id) const;
  std::optional<std::size_t> index_of(const TokenSeq& tokens) const;
  bool contains(TermId id) const { return index_of(id).has_value(); }

 private:
  std::vector<TermEntry> entries_;
  std::unordered_map<TermId, std::size_t> by_id_;
  std::unordered_map<TokenSeq, std::size_t, TokenSeqHash> by_tokens_;
};

struct ToyEncoderConfig {
  std::size_t vocab_size = 500;
  std::size_t embed_dim = 64;
  std::size_t frames_min = 1;
  std::size_t frames_max = 3;
  double noise_sigma = 0.1;
  double filler_rate = 0.15;
  // Norm of every token embedding; the same scale is applied to noise.
  double feature_scale = 12.0;
  // Share of a token embedding that lies along one common direction, the
  // toy analog of voiced speech. Filler frames carry none of it.
  double voicing = 0.5;
  // The last `term_vocab` token ids form the specialized lexicon: terms are
  // spelled only with them and filler words never use them. 0 shares the
  // whole vocabulary.
  std::size_t term_vocab = 200;
  // How far lexicon embeddings lean out of the subspace common words use;
  // only meaningful with term_vocab > 0.
  double lexicon_shift = 0.5;
  std::uint64_t seed = 7;

  std::size_t common_begin() const { return 0; }
  std::size_t common_end() const { return term_vocab ? vocab_size - term_vocab : vocab_size; }
  std::size_t term_begin() const { return term_vocab ? vocab_size - term_vocab : 0; }
};

// Frozen embedding table plus the frame synthesizer.
class ToyEncoder {
 public:
  explicit ToyEncoder(const ToyEncoderConfig& cfg);

  const ToyEncoderConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.embed_dim; }
  std::span<const float> embedding(TokenId token) const;
  std::span<const float> filler() const { return filler_; }

  // Frames for a token sequence. `rng` drives repetition, fillers and noise.
  SpeechFeatures encode(const std::string& utterance_id, const TokenSeq& tokens, Rng& rng) const;
  TermFeatures embed_term(const TermEntry& term) const;
  TermFeatures embed_tokens(TermId id, const TokenSeq& tokens, std::string surface = {}) const;

 private:
  ToyEncoderConfig cfg_;
  Tensor2 table_;
  std::vector<float> filler_;
};

std::string token_surface(TokenId token);
std::string term_surface(const TokenSeq& tokens);
std::string target_surface(const TokenSeq& tokens);

bool occurs_in(const TokenSeq& haystack, const TokenSeq& needle);

struct CorpusLayout {
  std::size_t n_train = 2000;
  std::size_t n_valid = 100;
  std::size_t n_test = 200;
  std::size_t bank_size = 583;        // terms used by test utterances
  std::size_t train_term_pool = 150;  // disjoint terms used by training utterances
  std::size_t min_tokens = 8;         // filler words per utterance, before terms
  std::size_t max_tokens = 16;
  std::size_t min_terms = 1;
  std::size_t max_terms = 2;
  // Probability that a training utterance carries annotated real terms.
  // Only these feed the real-term stage.
  double real_term_fraction = 0.3;
  // Probability that a training utterance contains terms at all, annotated
  // or not. Unannotated occurrences still reach the word and phrase stages.
  double term_occurrence = 1.0;
  // Relative frequency of term lengths 1, 2, 3, 4.
  std::vector<double> term_length_weights{0.05, 0.4, 0.35, 0.2};
};

struct Corpus {
  ToyEncoderConfig encoder;
  std::vector<Utterance> utterances;
  std::vector<SpeechFeatures> features;  // parallel to utterances
  TermBank bank;         // evaluation bank
  TermBank train_terms;  // real terms annotated in training utterances

  std::vector<std::size_t> split_indices(std::string_view split) const;
};

Corpus generate_corpus(const ToyEncoderConfig& cfg, const CorpusLayout& layout);

// Pool of terms that occur in no utterance of `corpus` and are not in `exclude`.
TermBank generate_distractors(const Corpus& corpus, std::size_t count, TermId first_id,
                              std::uint64_t seed);

enum class CurriculumStage { Word, Phrase, RealTerm };

std::string_view stage_name(CurriculumStage stage);
CurriculumStage parse_stage(std::string_view name);

// Positive term token sequences for one utterance at one stage. Returns
// nullopt for a RealTerm draw on an utterance without annotated terms.
std::optional<std::vector<TokenSeq>> sample_stage_terms(const Utterance& utt,
                                                        const TermBank& annotated,
                                                        CurriculumStage stage, Rng& rng);

// Feature file: "A2PF" | u16 version | u8 dtype | u32 rows | u32 cols | f32 LE payload.
void write_features(const std::filesystem::path& path, const SpeechFeatures& features);
SpeechFeatures read_features(const std::filesystem::path& path);

void write_bank(const std::filesystem::path& path, const TermBank& bank);
TermBank read_bank(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const std::vector<Utterance>& utts);
std::vector<Utterance> read_manifest(const std::filesystem::path& path);

void write_encoder_config(const std::filesystem::path& path, const ToyEncoderConfig& cfg);
ToyEncoderConfig read_encoder_config(const std::filesystem::path& path);

// Writes manifest.jsonl, bank.jsonl, train_terms.jsonl, encoder.json and one
// feature file per utterance; returns the corpus hash.
std::string save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// FNV-1a over the manifest, both banks and every feature payload, hex encoded.
std::string corpus_hash(const Corpus& corpus);

}  // namespace termprob
