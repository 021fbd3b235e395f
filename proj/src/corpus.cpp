// SPDX-License-Identifier: Apache-2.0

#include "termprob/corpus.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace termprob {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// TermBank

void TermBank::add(TermEntry entry) {
  if (entry.token_ids.empty()) {
    throw std::invalid_argument("term " + std::to_string(entry.term_id) + " has no tokens");
  }
  if (by_id_.count(entry.term_id)) {
    throw std::invalid_argument("duplicate term id " + std::to_string(entry.term_id));
  }
  if (by_tokens_.count(entry.token_ids)) {
    throw std::invalid_argument("term " + std::to_string(entry.term_id) + " ('" + entry.src +
                                "') duplicates the token sequence of term " +
                                std::to_string(entries_[by_tokens_.at(entry.token_ids)].term_id));
  }
  by_id_[entry.term_id] = entries_.size();
  by_tokens_[entry.token_ids] = entries_.size();
  entries_.push_back(std::move(entry));
}

std::optional<std::size_t> TermBank::index_of(TermId id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> TermBank::index_of(const TokenSeq& tokens) const {
  auto it = by_tokens_.find(tokens);
  if (it == by_tokens_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// surfaces

namespace {
constexpr std::array<const char*, 16> kOnsets{"b", "d", "f", "g", "k", "l", "m", "n",
                                              "p", "r", "s", "t", "v", "z", "sh", "tr"};
constexpr std::array<const char*, 8> kVowels{"a", "e", "i", "o", "u", "ai", "ou", "ei"};
}  // namespace

std::string token_surface(TokenId token) {
  // Two syllables plus a tail, unique for ids below 16*8*16*8*4.
  std::string s;
  TokenId t = token;
  for (int i = 0; i < 2; ++i) {
    s += kOnsets[t % kOnsets.size()];
    t /= kOnsets.size();
    s += kVowels[t % kVowels.size()];
    t /= kVowels.size();
  }
  if (t > 0) s += std::to_string(t);
  return s;
}

std::string term_surface(const TokenSeq& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += token_surface(tokens[i]);
  }
  return s;
}

std::string target_surface(const TokenSeq& tokens) {
  // Toy "translation": reversed token order, upper-cased.
  std::string s;
  for (std::size_t i = tokens.size(); i-- > 0;) {
    std::string w = token_surface(tokens[i]);
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::toupper(c); });
    if (!s.empty()) s += '-';
    s += w;
  }
  return s;
}

bool occurs_in(const TokenSeq& haystack, const TokenSeq& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

// ---------------------------------------------------------------------------
// ToyEncoder

ToyEncoder::ToyEncoder(const ToyEncoderConfig& cfg) : cfg_(cfg) {
  if (cfg.vocab_size == 0 || cfg.embed_dim == 0) {
    throw std::invalid_argument("toy encoder needs vocab_size > 0 and embed_dim > 0");
  }
  if (cfg.frames_min < 1 || cfg.frames_max < cfg.frames_min) {
    throw std::invalid_argument("toy encoder frame range must satisfy 1 <= min <= max");
  }
  if (cfg.filler_rate < 0.0 || cfg.filler_rate >= 1.0 || cfg.noise_sigma < 0.0) {
    throw std::invalid_argument("toy encoder needs filler_rate in [0,1) and noise_sigma >= 0");
  }
  const std::size_t d = cfg.embed_dim;
  Rng rng = make_rng(cfg.seed, "encoder/embeddings");

  auto unit = [&](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  };
  std::vector<double> voiced(d);
  for (auto& x : voiced) x = standard_normal(rng);
  unit(voiced);

  // Component orthogonal to the voicing direction, unit length.
  auto orthogonal_unit = [&]() {
    std::vector<double> v(d);
    for (auto& x : v) x = standard_normal(rng);
    double proj = 0.0;
    for (std::size_t k = 0; k < d; ++k) proj += v[k] * voiced[k];
    for (std::size_t k = 0; k < d; ++k) v[k] -= proj * voiced[k];
    unit(v);
    return v;
  };

  const double a = std::sqrt(std::clamp(cfg.voicing, 0.0, 1.0));
  const double b = std::sqrt(1.0 - a * a);
  table_ = Tensor2(cfg.vocab_size, d);

  // With a lexicon shift, common words live in one half of the unvoiced
  // space and lexicon tokens lean into the other half.
  const double shift = std::clamp(cfg.lexicon_shift, 0.0, 1.0);
  std::vector<std::vector<double>> basis;
  if (shift > 0.0 && cfg.term_vocab > 0) {
    while (basis.size() + 1 < d) {
      auto v = orthogonal_unit();
      for (const auto& e : basis) {
        double p = 0.0;
        for (std::size_t k = 0; k < d; ++k) p += v[k] * e[k];
        for (std::size_t k = 0; k < d; ++k) v[k] -= p * e[k];
      }
      unit(v);
      basis.push_back(std::move(v));
    }
  }
  const std::size_t half = basis.size() / 2;
  auto in_span = [&](std::size_t lo, std::size_t hi) {
    std::vector<double> v(d, 0.0);
    for (std::size_t i = lo; i < hi; ++i) {
      const double g = standard_normal(rng);
      for (std::size_t k = 0; k < d; ++k) v[k] += g * basis[i][k];
    }
    unit(v);
    return v;
  };

  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    std::vector<double> r;
    if (basis.empty()) {
      r = orthogonal_unit();
    } else if (t < cfg.term_begin()) {
      r = in_span(0, half);
    } else {
      const auto common = in_span(0, half);
      const auto lex = in_span(half, basis.size());
      r.resize(d);
      for (std::size_t k = 0; k < d; ++k) r[k] = std::sqrt(1.0 - shift) * common[k] + std::sqrt(shift) * lex[k];
    }
    for (std::size_t k = 0; k < d; ++k)
      table_(t, k) = static_cast<float>(cfg.feature_scale * (a * voiced[k] + b * r[k]));
  }
  const auto f = orthogonal_unit();
  filler_.resize(d);
  for (std::size_t k = 0; k < d; ++k) filler_[k] = static_cast<float>(cfg.feature_scale * f[k]);
}

std::span<const float> ToyEncoder::embedding(TokenId token) const {
  if (token >= cfg_.vocab_size) {
    throw std::out_of_range("token id " + std::to_string(token) + " outside vocabulary of " +
                            std::to_string(cfg_.vocab_size));
  }
  return table_.row(token);
}

SpeechFeatures ToyEncoder::encode(const std::string& utterance_id, const TokenSeq& tokens,
                                  Rng& rng) const {
  const std::size_t d = cfg_.embed_dim;
  const double noise = cfg_.noise_sigma * cfg_.feature_scale / std::sqrt(static_cast<double>(d));
  std::vector<float> data;
  std::size_t rows = 0;
  auto emit = [&](std::span<const float> base) {
    for (std::size_t k = 0; k < d; ++k) {
      double v = base[k];
      if (noise > 0.0) v += noise * standard_normal(rng);
      data.push_back(static_cast<float>(v));
    }
    ++rows;
  };
  for (TokenId t : tokens) {
    if (cfg_.filler_rate > 0.0 && uniform01(rng) < cfg_.filler_rate) emit(filler_);
    const auto reps = uniform_int(rng, cfg_.frames_min, cfg_.frames_max);
    for (std::uint64_t r = 0; r < reps; ++r) emit(embedding(t));
  }
  if (rows == 0) throw std::invalid_argument("utterance " + utterance_id + " has no tokens");
  SpeechFeatures out;
  out.utterance_id = utterance_id;
  out.frames = Tensor2(rows, d, std::move(data));
  out.frame_mask = Mask(rows, 1);
  return out;
}

TermFeatures ToyEncoder::embed_tokens(TermId id, const TokenSeq& tokens,
                                      std::string surface) const {
  TermFeatures tf;
  tf.term_id = id;
  tf.tokens = Tensor2(tokens.size(), cfg_.embed_dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto e = embedding(tokens[i]);
    std::copy(e.begin(), e.end(), tf.tokens.row(i).begin());
  }
  tf.token_mask = Mask(tokens.size(), 1);
  tf.surface = surface.empty() ? term_surface(tokens) : std::move(surface);
  return tf;
}

TermFeatures ToyEncoder::embed_term(const TermEntry& term) const {
  return embed_tokens(term.term_id, term.token_ids, term.src);
}

// ---------------------------------------------------------------------------
// corpus generation

std::vector<std::size_t> Corpus::split_indices(std::string_view split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < utterances.size(); ++i)
    if (utterances[i].split == split) out.push_back(i);
  return out;
}

namespace {

std::size_t draw_weighted(Rng& rng, const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

double constructible_terms(std::size_t vocab, std::size_t max_len) {
  double n = 0.0, p = 1.0;
  for (std::size_t l = 1; l <= max_len; ++l) {
    p *= static_cast<double>(vocab);
    n += p;
  }
  return n;
}

TermEntry make_term(TermId id, TokenSeq tokens) {
  TermEntry e;
  e.term_id = id;
  e.src = term_surface(tokens);
  e.tgt = target_surface(tokens);
  e.token_ids = std::move(tokens);
  return e;
}

}  // namespace

Corpus generate_corpus(const ToyEncoderConfig& cfg, const CorpusLayout& layout) {
  if (cfg.vocab_size < 50) throw std::invalid_argument("generate_corpus: vocab_size must be >= 50");
  if (layout.bank_size < 10) throw std::invalid_argument("generate_corpus: bank_size must be >= 10");
  if (layout.min_tokens < 4 || layout.max_tokens < layout.min_tokens) {
    throw std::invalid_argument("generate_corpus: need 4 <= min_tokens <= max_tokens");
  }
  if (layout.term_length_weights.empty()) {
    throw std::invalid_argument("generate_corpus: term_length_weights is empty");
  }
  const std::size_t max_len = layout.term_length_weights.size();
  const std::size_t wanted = layout.bank_size + layout.train_term_pool;
  // Keep generation well clear of exhausting the sequence space.
  if (cfg.term_vocab >= cfg.vocab_size || (cfg.term_vocab > 0 && cfg.vocab_size - cfg.term_vocab < 10)) {
    throw std::invalid_argument("generate_corpus: term_vocab must leave at least 10 common tokens");
  }
  const std::size_t term_lex = cfg.vocab_size - cfg.term_begin();
  if (static_cast<double>(wanted) > 0.5 * constructible_terms(term_lex, max_len)) {
    throw CapacityError("generate_corpus: " + std::to_string(wanted) +
                        " distinct terms requested but the vocabulary only supports " +
                        std::to_string(static_cast<std::uint64_t>(
                            constructible_terms(term_lex, max_len))));
  }

  Corpus corpus;
  corpus.encoder = cfg;
  ToyEncoder encoder(cfg);

  Rng term_rng = make_rng(cfg.seed, "corpus/terms");
  std::unordered_set<TokenSeq, TokenSeqHash> seen;
  auto draw_term = [&]() {
    for (;;) {
      const std::size_t len = draw_weighted(term_rng, layout.term_length_weights) + 1;
      TokenSeq t(len);
      for (auto& tok : t) tok = static_cast<TokenId>(uniform_int(term_rng, cfg.term_begin(), cfg.vocab_size - 1));
      if (seen.insert(t).second) return t;
    }
  };
  TermId next_id = 0;
  for (std::size_t i = 0; i < layout.bank_size; ++i) corpus.bank.add(make_term(next_id++, draw_term()));
  for (std::size_t i = 0; i < layout.train_term_pool; ++i)
    corpus.train_terms.add(make_term(next_id++, draw_term()));

  Rng utt_rng = make_rng(cfg.seed, "corpus/utterances");
  Rng frame_rng = make_rng(cfg.seed, "corpus/frames");
  // One draw per utterance: below `annotate_prob` the terms are inserted and
  // annotated, below `occur_prob` they are inserted but left unannotated.
  auto make_utterances = [&](std::size_t count, const std::string& split, const TermBank& pool,
                             double annotate_prob, double occur_prob) {
    for (std::size_t n = 0; n < count; ++n) {
      Utterance u;
      char id[32];
      std::snprintf(id, sizeof id, "%s-%05zu", split.c_str(), n);
      u.id = id;
      u.split = split;
      const auto len = uniform_int(utt_rng, layout.min_tokens, layout.max_tokens);
      for (std::uint64_t i = 0; i < len; ++i)
        u.token_ids.push_back(static_cast<TokenId>(uniform_int(utt_rng, 0, cfg.common_end() - 1)));
      const double draw = pool.empty() ? 1.0 : uniform01(utt_rng);
      if (draw < std::max(annotate_prob, occur_prob)) {
        const auto k = uniform_int(utt_rng, layout.min_terms, layout.max_terms);
        std::vector<std::size_t> chosen;
        for (std::uint64_t i = 0; i < k; ++i) {
          const auto idx = static_cast<std::size_t>(uniform_int(utt_rng, 0, pool.size() - 1));
          if (std::find(chosen.begin(), chosen.end(), idx) != chosen.end()) continue;
          chosen.push_back(idx);
          const auto& term = pool.at(idx).token_ids;
          // Insert between words, never inside an earlier term.
          std::vector<std::size_t> slots;
          for (std::size_t p = 0; p <= u.token_ids.size(); ++p) {
            bool inside = false;
            for (const auto& span : u.terms) inside |= span.begin < p && p < span.end;
            if (!inside) slots.push_back(p);
          }
          const auto pos = slots[static_cast<std::size_t>(uniform_int(utt_rng, 0, slots.size() - 1))];
          u.token_ids.insert(u.token_ids.begin() + static_cast<std::ptrdiff_t>(pos), term.begin(),
                             term.end());
          for (auto& span : u.terms) {
            if (span.begin >= pos) {
              span.begin += term.size();
              span.end += term.size();
            }
          }
          u.terms.push_back({pool.at(idx).term_id, pos, pos + term.size()});
        }
        std::sort(u.terms.begin(), u.terms.end(),
                  [](const TermSpan& a, const TermSpan& b) { return a.begin < b.begin; });
        if (draw >= annotate_prob) u.terms.clear();
      }
      u.features_path = "features/" + u.id + ".a2pf";
      corpus.features.push_back(encoder.encode(u.id, u.token_ids, frame_rng));
      corpus.utterances.push_back(std::move(u));
    }
  };
  make_utterances(layout.n_train, "train", corpus.train_terms, layout.real_term_fraction, layout.term_occurrence);
  make_utterances(layout.n_valid, "valid", corpus.bank, 1.0, 1.0);
  make_utterances(layout.n_test, "test", corpus.bank, 1.0, 1.0);
  return corpus;
}

TermBank generate_distractors(const Corpus& corpus, std::size_t count, TermId first_id,
                              std::uint64_t seed) {
  const std::size_t vocab = corpus.encoder.vocab_size;
  const std::size_t first_token = corpus.encoder.term_begin();
  if (static_cast<double>(count) > 0.25 * constructible_terms(vocab - first_token, 4)) {
    throw CapacityError("distractor pool of " + std::to_string(count) + " exceeds vocabulary capacity");
  }
  Rng rng = make_rng(seed, "corpus/distractors");
  const std::vector<double> weights{0.2, 0.35, 0.3, 0.15};
  TermBank out;
  TermId id = first_id;
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > 100 * count + 1000) {
      throw CapacityError("could not draw " + std::to_string(count) + " distractors");
    }
    TokenSeq t(draw_weighted(rng, weights) + 1);
    for (auto& tok : t) tok = static_cast<TokenId>(uniform_int(rng, first_token, vocab - 1));
    if (corpus.bank.index_of(t) || corpus.train_terms.index_of(t) || out.index_of(t)) continue;
    bool present = false;
    for (const auto& u : corpus.utterances)
      if (u.split == "test" && occurs_in(u.token_ids, t)) {
        present = true;
        break;
      }
    if (present) continue;
    out.add(make_term(id++, std::move(t)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// curriculum sampling

std::string_view stage_name(CurriculumStage stage) {
  switch (stage) {
    case CurriculumStage::Word: return "word";
    case CurriculumStage::Phrase: return "phrase";
    case CurriculumStage::RealTerm: return "real";
  }
  return "?";
}

CurriculumStage parse_stage(std::string_view name) {
  if (name == "word") return CurriculumStage::Word;
  if (name == "phrase") return CurriculumStage::Phrase;
  if (name == "real" || name == "realterm") return CurriculumStage::RealTerm;
  throw std::invalid_argument("unknown curriculum stage '" + std::string(name) + "'");
}

std::optional<std::vector<TokenSeq>> sample_stage_terms(const Utterance& utt,
                                                        const TermBank& annotated,
                                                        CurriculumStage stage, Rng& rng) {
  const auto& toks = utt.token_ids;
  if (toks.size() < 4) {
    throw std::invalid_argument("utterance " + utt.id + " has fewer than 4 tokens");
  }
  std::vector<TokenSeq> out;
  auto add_unique = [&](TokenSeq s) {
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(std::move(s));
  };
  switch (stage) {
    case CurriculumStage::Word: {
      const auto n = uniform_int(rng, 1, 3);
      for (std::uint64_t i = 0; i < n; ++i)
        add_unique({toks[static_cast<std::size_t>(uniform_int(rng, 0, toks.size() - 1))]});
      break;
    }
    case CurriculumStage::Phrase: {
      const auto n = uniform_int(rng, 1, 3);
      for (std::uint64_t i = 0; i < n; ++i) {
        const auto len = static_cast<std::size_t>(uniform_int(rng, 1, 4));
        const auto start = static_cast<std::size_t>(uniform_int(rng, 0, toks.size() - len));
        add_unique(TokenSeq(toks.begin() + static_cast<std::ptrdiff_t>(start),
                            toks.begin() + static_cast<std::ptrdiff_t>(start + len)));
      }
      break;
    }
    case CurriculumStage::RealTerm: {
      if (utt.terms.empty()) return std::nullopt;
      for (const auto& span : utt.terms) {
        const auto idx = annotated.index_of(span.term_id);
        if (!idx) {
          throw ProtocolError("utterance " + utt.id + " annotates unknown term " +
                              std::to_string(span.term_id));
        }
        add_unique(annotated.at(*idx).token_ids);
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// feature files

namespace {

constexpr char kFeatureMagic[4] = {'A', '2', 'P', 'F'};
constexpr std::uint16_t kFeatureVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& buf, std::size_t off) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::string encode_features(const SpeechFeatures& f) {
  const std::size_t valid = count_valid(f.frame_mask);
  if (f.frames.cols() == 0 || valid == 0) {
    throw std::invalid_argument("write_features: empty feature matrix for " + f.utterance_id);
  }
  std::string buf(kFeatureMagic, 4);
  put_le<std::uint16_t>(buf, kFeatureVersion);
  put_le<std::uint8_t>(buf, kDtypeF32);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(valid));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(f.frames.cols()));
  for (std::size_t r = 0; r < valid; ++r)
    for (float v : f.frames.row(r)) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
  return buf;
}

}  // namespace

void write_features(const std::filesystem::path& path, const SpeechFeatures& features) {
  write_file(path, encode_features(features));
}

SpeechFeatures read_features(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  constexpr std::size_t kHeader = 4 + 2 + 1 + 4 + 4;
  if (buf.size() < 4 || std::memcmp(buf.data(), kFeatureMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic, expected A2PF", 0);
  }
  if (buf.size() < kHeader) throw FormatError(path.string() + ": truncated header", buf.size());
  const auto version = get_le<std::uint16_t>(buf, 4);
  if (version != kFeatureVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version), 4);
  }
  const auto dtype = get_le<std::uint8_t>(buf, 6);
  if (dtype != kDtypeF32) {
    throw FormatError(path.string() + ": unsupported dtype " + std::to_string(dtype), 6);
  }
  const auto rows = get_le<std::uint32_t>(buf, 7);
  const auto cols = get_le<std::uint32_t>(buf, 11);
  if (rows == 0 || cols == 0) throw FormatError(path.string() + ": zero dimension", 7);
  const std::uint64_t need = kHeader + std::uint64_t{rows} * cols * 4;
  if (buf.size() < need) {
    throw FormatError(path.string() + ": truncated payload, expected " + std::to_string(need) +
                          " bytes, file has " + std::to_string(buf.size()),
                      buf.size());
  }
  if (buf.size() > need) throw FormatError(path.string() + ": trailing bytes after payload", need);
  std::vector<float> data(std::size_t{rows} * cols);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = std::bit_cast<float>(get_le<std::uint32_t>(buf, kHeader + 4 * i));
  SpeechFeatures f;
  f.utterance_id = path.stem().string();
  f.frames = Tensor2(rows, cols, std::move(data));
  f.frame_mask = Mask(rows, 1);
  return f;
}

// ---------------------------------------------------------------------------
// JSON-lines files

namespace {

template <typename F>
void for_each_json_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      f(json::parse(line));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string bank_to_jsonl(const TermBank& bank) {
  std::string out;
  for (const auto& e : bank.entries()) {
    json j{{"term_id", e.term_id}, {"src", e.src}, {"tgt", e.tgt}, {"token_ids", e.token_ids}};
    out += j.dump() + "\n";
  }
  return out;
}

std::string manifest_to_jsonl(const std::vector<Utterance>& utts) {
  std::string out;
  for (const auto& u : utts) {
    json terms = json::array();
    for (const auto& s : u.terms) terms.push_back({{"term_id", s.term_id}, {"span", {s.begin, s.end}}});
    json j{{"id", u.id}, {"split", u.split}, {"features", u.features_path},
           {"tokens", u.token_ids}, {"terms", terms}};
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace

void write_bank(const std::filesystem::path& path, const TermBank& bank) {
  write_file(path, bank_to_jsonl(bank));
}

TermBank read_bank(const std::filesystem::path& path) {
  TermBank bank;
  for_each_json_line(path, [&](const json& j) {
    TermEntry e;
    e.term_id = j.at("term_id").get<TermId>();
    e.src = j.at("src").get<std::string>();
    e.tgt = j.value("tgt", std::string{});
    e.token_ids = j.at("token_ids").get<TokenSeq>();
    bank.add(std::move(e));
  });
  return bank;
}

void write_manifest(const std::filesystem::path& path, const std::vector<Utterance>& utts) {
  write_file(path, manifest_to_jsonl(utts));
}

std::vector<Utterance> read_manifest(const std::filesystem::path& path) {
  std::vector<Utterance> out;
  for_each_json_line(path, [&](const json& j) {
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.split = j.value("split", std::string{"test"});
    u.features_path = j.at("features").get<std::string>();
    u.token_ids = j.at("tokens").get<TokenSeq>();
    for (const auto& t : j.at("terms")) {
      const auto span = t.at("span");
      TermSpan s{t.at("term_id").get<TermId>(), span.at(0).get<std::size_t>(),
                 span.at(1).get<std::size_t>()};
      if (s.end <= s.begin || s.end > u.token_ids.size()) {
        throw std::runtime_error(path.string() + ": utterance " + u.id + " has an invalid span");
      }
      u.terms.push_back(s);
    }
    out.push_back(std::move(u));
  });
  return out;
}

void write_encoder_config(const std::filesystem::path& path, const ToyEncoderConfig& cfg) {
  json j{{"vocab_size", cfg.vocab_size},   {"embed_dim", cfg.embed_dim},
         {"frames_min", cfg.frames_min},   {"frames_max", cfg.frames_max},
         {"noise_sigma", cfg.noise_sigma}, {"filler_rate", cfg.filler_rate},
         {"feature_scale", cfg.feature_scale}, {"voicing", cfg.voicing},
         {"term_vocab", cfg.term_vocab}, {"lexicon_shift", cfg.lexicon_shift},
         {"seed", cfg.seed}};
  write_file(path, j.dump(2) + "\n");
}

ToyEncoderConfig read_encoder_config(const std::filesystem::path& path) {
  const json j = json::parse(read_file(path));
  ToyEncoderConfig c;
  c.vocab_size = j.at("vocab_size");
  c.embed_dim = j.at("embed_dim");
  c.frames_min = j.at("frames_min");
  c.frames_max = j.at("frames_max");
  c.noise_sigma = j.at("noise_sigma");
  c.filler_rate = j.at("filler_rate");
  c.feature_scale = j.at("feature_scale");
  c.voicing = j.at("voicing");
  c.term_vocab = j.value("term_vocab", std::size_t{0});
  c.lexicon_shift = j.value("lexicon_shift", 0.0);
  c.seed = j.at("seed");
  return c;
}

std::string corpus_hash(const Corpus& corpus) {
  std::uint64_t h = fnv1a64(manifest_to_jsonl(corpus.utterances));
  h = fnv1a64(bank_to_jsonl(corpus.bank), h);
  h = fnv1a64(bank_to_jsonl(corpus.train_terms), h);
  for (const auto& f : corpus.features) h = fnv1a64(encode_features(f), h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  write_manifest(dir / "manifest.jsonl", corpus.utterances);
  write_bank(dir / "bank.jsonl", corpus.bank);
  write_bank(dir / "train_terms.jsonl", corpus.train_terms);
  write_encoder_config(dir / "encoder.json", corpus.encoder);
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i)
    write_features(dir / corpus.utterances[i].features_path, corpus.features[i]);
  return corpus_hash(corpus);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.encoder = read_encoder_config(dir / "encoder.json");
  c.utterances = read_manifest(dir / "manifest.jsonl");
  c.bank = read_bank(dir / "bank.jsonl");
  if (std::filesystem::exists(dir / "train_terms.jsonl")) c.train_terms = read_bank(dir / "train_terms.jsonl");
  for (const auto& u : c.utterances) {
    auto f = read_features(dir / u.features_path);
    f.utterance_id = u.id;
    if (f.frames.cols() != c.encoder.embed_dim) {
      throw std::runtime_error(u.features_path + ": feature dim " + std::to_string(f.frames.cols()) +
                               " does not match encoder dim " + std::to_string(c.encoder.embed_dim));
    }
    c.features.push_back(std::move(f));
  }
  return c;
}

}  // namespace termprob
