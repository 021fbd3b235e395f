// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <set>

#include "termprob/corpus.hpp"

using namespace termprob;
namespace fs = std::filesystem;

namespace {

CorpusLayout small_layout() {
  CorpusLayout l;
  l.n_train = 60;
  l.n_valid = 10;
  l.n_test = 20;
  l.bank_size = 40;
  l.train_term_pool = 50;
  l.real_term_fraction = 0.5;
  l.term_occurrence = 0.5;
  return l;
}

ToyEncoderConfig small_encoder() {
  ToyEncoderConfig c;
  c.vocab_size = 120;
  c.embed_dim = 16;
  c.term_vocab = 50;
  c.lexicon_shift = 0.5;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("termprob-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("occurs_in is a contiguous subsequence test") {
  CHECK(occurs_in({1, 2, 3, 4}, {2, 3}));
  CHECK_FALSE(occurs_in({1, 2, 3, 4}, {2, 4}));
  CHECK_FALSE(occurs_in({1, 2}, {1, 2, 3}));
  CHECK_FALSE(occurs_in({1, 2}, {}));
}

TEST_CASE("term bank rejects empty, duplicate id and duplicate spelling") {
  TermBank b;
  b.add({1, "a", "A", {3, 4}});
  CHECK_THROWS(b.add({2, "x", "X", {}}));
  CHECK_THROWS(b.add({1, "y", "Y", {5}}));
  CHECK_THROWS(b.add({3, "z", "Z", {3, 4}}));
  CHECK(b.index_of(TokenSeq{3, 4}).value() == 0);
  CHECK_FALSE(b.index_of(TermId{9}).has_value());
}

TEST_CASE("surfaces are distinct per token and the target form is deterministic") {
  std::set<std::string> seen;
  for (TokenId t = 0; t < 2000; ++t) seen.insert(token_surface(t));
  CHECK(seen.size() == 2000);
  CHECK(target_surface({1, 2}) == target_surface({1, 2}));
  CHECK(target_surface({1, 2}) != target_surface({2, 1}));
}

TEST_CASE("toy encoder embeddings have the configured norm") {
  const auto cfg = small_encoder();
  ToyEncoder enc(cfg);
  for (TokenId t = 0; t < cfg.vocab_size; ++t) {
    double n = 0.0;
    for (float x : enc.embedding(t)) n += static_cast<double>(x) * x;
    CHECK(std::sqrt(n) == doctest::Approx(cfg.feature_scale).epsilon(1e-5));
  }
  CHECK_THROWS_AS(enc.embedding(static_cast<TokenId>(cfg.vocab_size)), std::out_of_range);
}

TEST_CASE("toy encoder emits between min and max frames per token") {
  auto cfg = small_encoder();
  cfg.filler_rate = 0.0;
  cfg.frames_min = 2;
  cfg.frames_max = 3;
  ToyEncoder enc(cfg);
  Rng rng = make_rng(1, "t");
  const auto f = enc.encode("u", {1, 2, 3, 4}, rng);
  CHECK(f.frames.rows() >= 8);
  CHECK(f.frames.rows() <= 12);
  CHECK(count_valid(f.frame_mask) == f.frames.rows());
}

TEST_CASE("generated corpus respects the layout") {
  const auto cfg = small_encoder();
  const auto layout = small_layout();
  const auto c = generate_corpus(cfg, layout);
  CHECK(c.bank.size() == layout.bank_size);
  CHECK(c.train_terms.size() == layout.train_term_pool);
  CHECK(c.split_indices("train").size() == layout.n_train);
  CHECK(c.split_indices("test").size() == layout.n_test);
  for (const auto& e : c.bank.entries()) CHECK_FALSE(c.train_terms.index_of(e.token_ids).has_value());
  for (const auto& e : c.bank.entries())
    for (auto t : e.token_ids) CHECK(t >= cfg.term_begin());

  for (const auto& u : c.utterances) {
    const TermBank& pool = u.split == "train" ? c.train_terms : c.bank;
    if (u.split != "train") CHECK(!u.terms.empty());
    for (const auto& span : u.terms) {
      const auto& term = pool.at(pool.index_of(span.term_id).value()).token_ids;
      CHECK(TokenSeq(u.token_ids.begin() + span.begin, u.token_ids.begin() + span.end) == term);
    }
    // Filler words never come from the term lexicon (every occurrence is
    // annotated in this layout).
    std::size_t lexicon_tokens = 0;
    for (auto t : u.token_ids) lexicon_tokens += t >= cfg.term_begin();
    std::size_t span_tokens = 0;
    for (const auto& span : u.terms) span_tokens += span.end - span.begin;
    CHECK(lexicon_tokens == span_tokens);
  }
}

TEST_CASE("unannotated training utterances still contain terms") {
  const auto cfg = small_encoder();
  auto layout = small_layout();
  layout.n_train = 200;
  layout.real_term_fraction = 0.2;
  layout.term_occurrence = 1.0;
  const auto c = generate_corpus(cfg, layout);
  std::size_t annotated = 0;
  for (auto i : c.split_indices("train")) {
    const auto& u = c.utterances[i];
    annotated += !u.terms.empty();
    bool has_lexicon = false;
    for (auto t : u.token_ids) has_lexicon |= t >= cfg.term_begin();
    CHECK(has_lexicon);
  }
  CHECK(annotated > 20);
  CHECK(annotated < 60);
}

TEST_CASE("corpus generation is deterministic per seed") {
  auto cfg = small_encoder();
  const auto a = corpus_hash(generate_corpus(cfg, small_layout()));
  const auto b = corpus_hash(generate_corpus(cfg, small_layout()));
  cfg.seed += 1;
  const auto c = corpus_hash(generate_corpus(cfg, small_layout()));
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("too many terms for the lexicon is a capacity error") {
  auto cfg = small_encoder();
  cfg.vocab_size = 60;
  cfg.term_vocab = 2;
  CHECK_THROWS_AS(generate_corpus(cfg, small_layout()), CapacityError);
}

TEST_CASE("distractors avoid banks and test transcripts") {
  const auto c = generate_corpus(small_encoder(), small_layout());
  const auto d = generate_distractors(c, 200, 10000, 3);
  CHECK(d.size() == 200);
  for (const auto& e : d.entries()) {
    CHECK_FALSE(c.bank.index_of(e.token_ids).has_value());
    CHECK_FALSE(c.train_terms.index_of(e.token_ids).has_value());
    for (const auto& u : c.utterances)
      if (u.split == "test") CHECK_FALSE(occurs_in(u.token_ids, e.token_ids));
  }
}

TEST_CASE("stage sampling draws words, spans and annotated terms") {
  const auto c = generate_corpus(small_encoder(), small_layout());
  Rng rng = make_rng(4, "stage");
  for (auto i : c.split_indices("train")) {
    const auto& u = c.utterances[i];
    const auto words = sample_stage_terms(u, c.train_terms, CurriculumStage::Word, rng).value();
    CHECK(words.size() >= 1);
    CHECK(words.size() <= 3);
    for (const auto& w : words) {
      CHECK(w.size() == 1);
      CHECK(occurs_in(u.token_ids, w));
    }
    const auto phrases = sample_stage_terms(u, c.train_terms, CurriculumStage::Phrase, rng).value();
    for (const auto& p : phrases) {
      CHECK(p.size() >= 1);
      CHECK(p.size() <= 4);
      CHECK(occurs_in(u.token_ids, p));
    }
    const auto real = sample_stage_terms(u, c.train_terms, CurriculumStage::RealTerm, rng);
    CHECK(real.has_value() == !u.terms.empty());
  }
  Utterance tiny{"x", "train", {1, 2, 3}, {}, ""};
  CHECK_THROWS(sample_stage_terms(tiny, c.train_terms, CurriculumStage::Word, rng));
  CHECK(parse_stage("phrase") == CurriculumStage::Phrase);
  CHECK_THROWS(parse_stage("sentence"));
}

TEST_CASE("feature files round-trip bit-exactly and reject corruption") {
  const auto dir = scratch_dir("features");
  const auto c = generate_corpus(small_encoder(), small_layout());
  const auto& f = c.features.front();
  write_features(dir / "a.a2pf", f);
  const auto g = read_features(dir / "a.a2pf");
  CHECK(g.frames == f.frames);
  write_features(dir / "b.a2pf", g);
  CHECK(slurp(dir / "a.a2pf") == slurp(dir / "b.a2pf"));

  auto bytes = slurp(dir / "a.a2pf");
  {
    std::ofstream(dir / "bad_magic.a2pf", std::ios::binary) << "XXXX" << bytes.substr(4);
    CHECK_THROWS_AS(read_features(dir / "bad_magic.a2pf"), FormatError);
  }
  {
    std::ofstream(dir / "short.a2pf", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    try {
      read_features(dir / "short.a2pf");
      FAIL("truncated file accepted");
    } catch (const FormatError& e) {
      CHECK(e.offset() > 0);
    }
  }
  {
    std::ofstream(dir / "long.a2pf", std::ios::binary) << bytes << "zz";
    CHECK_THROWS_AS(read_features(dir / "long.a2pf"), FormatError);
  }
}

TEST_CASE("saved corpus reloads with the same hash") {
  const auto dir = scratch_dir("corpus");
  const auto c = generate_corpus(small_encoder(), small_layout());
  const auto h = save_corpus(c, dir);
  const auto back = load_corpus(dir);
  CHECK(corpus_hash(back) == h);
  CHECK(back.encoder.term_vocab == c.encoder.term_vocab);
  CHECK(back.encoder.lexicon_shift == c.encoder.lexicon_shift);
  CHECK(back.utterances.size() == c.utterances.size());
  CHECK(back.features[5].frames == c.features[5].frames);
}
