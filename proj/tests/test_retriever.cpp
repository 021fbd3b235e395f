// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "termprob/retriever.hpp"

using namespace termprob;
namespace fs = std::filesystem;

namespace {

Tensor2 random_rows(Rng& rng, std::size_t r, std::size_t c) {
  Tensor2 t(r, c);
  for (auto& x : t.data()) x = static_cast<float>(standard_normal(rng));
  return t;
}

RetrieverParams random_params(std::uint64_t seed, std::size_t d = 8, std::size_t h = 2) {
  auto p = init_params(d, h, 0.1, seed, false);
  Rng rng = make_rng(seed, "test/params");
  for (auto* t : {&p.bq, &p.bk, &p.bv, &p.bo, &p.head_w})
    for (auto& x : t->data()) x = static_cast<float>(0.3 * standard_normal(rng));
  p.head_b(0, 0) = 0.2f;
  return p;
}

SpeechFeatures speech_of(Tensor2 frames) {
  SpeechFeatures s{"u", std::move(frames), {}};
  s.frame_mask = Mask(s.frames.rows(), 1);
  return s;
}

TermFeatures term_of(TermId id, Tensor2 tokens) {
  TermFeatures t{id, std::move(tokens), {}, ""};
  t.token_mask = Mask(t.tokens.rows(), 1);
  return t;
}

Tensor2 identity(std::size_t d) {
  Tensor2 t(d, d);
  for (std::size_t i = 0; i < d; ++i) t(i, i) = 1.0f;
  return t;
}

}  // namespace

TEST_CASE("a fresh model scores every pair at exactly one half") {
  const auto p = init_params(16, 4, 0.1, 3);
  CHECK(p.wk == p.wq);
  Rng rng = make_rng(2, "zero-head");
  for (int i = 0; i < 10; ++i) {
    const auto tr = score_term(p, speech_of(random_rows(rng, 7, 16)), term_of(1, random_rows(rng, 3, 16)), 1e-6,
                               ScoreMode::Infer);
    CHECK(tr.prob == 0.5f);
  }
  CHECK(init_params(16, 4, 0.1, 3, false).wk != p.wq);
}

TEST_CASE("one frame, identity projections: hand-computed output") {
  // Attention over a single frame is 1, so every token reads out the frame.
  const std::size_t d = 2;
  RetrieverParams p;
  p.dim = d;
  p.heads = 1;
  p.dropout_p = 0.0;
  p.wq = p.wk = p.wv = p.wo = identity(d);
  p.bq = p.bk = p.bv = p.bo = Tensor2(1, d);
  p.head_w = Tensor2::from_rows({{1.0f, -1.0f}});
  p.head_b = Tensor2(1, 1, 0.5f);
  const auto s = speech_of(Tensor2::from_rows({{2.0f, 1.0f}}));
  const auto t = term_of(1, Tensor2::from_rows({{1.0f, 0.0f}, {0.0f, 3.0f}}));
  const double eps = 1e-6;
  const auto tr = score_term(p, s, t, eps, ScoreMode::Infer);
  // sum = 2 * (2, 1); pooled = sum / (2 + eps); residual = (0.5, 1.5).
  const double px = 4.0 / (2.0 + eps), py = 2.0 / (2.0 + eps);
  CHECK(tr.s_pooled(0, 0) == doctest::Approx(px));
  CHECK(tr.residual(0, 1) == doctest::Approx(1.5));
  const double logit = (0.5 + px) - (1.5 + py) + 0.5;
  CHECK(tr.logit == doctest::Approx(logit).epsilon(1e-6));
  CHECK(tr.prob == doctest::Approx(1.0 / (1.0 + std::exp(-logit))).epsilon(1e-6));

  // Without pooling the head reads each token row (both equal the frame).
  p.token_pooling = false;
  const auto np = score_term(p, s, t, eps, ScoreMode::Infer);
  CHECK(np.logit == doctest::Approx(2.0 - 1.0 + 0.5).epsilon(1e-6));
}

TEST_CASE("masked padding does not change the score") {
  const auto p = random_params(5);
  Rng rng = make_rng(6, "pad");
  const auto frames = random_rows(rng, 6, 8), tokens = random_rows(rng, 3, 8);
  const auto base = score_term(p, speech_of(frames), term_of(1, tokens), 1e-6, ScoreMode::Infer);

  Tensor2 fpad(9, 8), tpad(5, 8);
  for (std::size_t i = 0; i < 6; ++i) std::copy(frames.row(i).begin(), frames.row(i).end(), fpad.row(i).begin());
  for (std::size_t i = 0; i < 3; ++i) std::copy(tokens.row(i).begin(), tokens.row(i).end(), tpad.row(i).begin());
  for (auto& x : fpad.row(7)) x = 1e4f;  // garbage in masked rows
  for (auto& x : tpad.row(4)) x = -1e4f;
  SpeechFeatures s{"u", fpad, Mask{1, 1, 1, 1, 1, 1, 0, 0, 0}};
  TermFeatures t{1, tpad, Mask{1, 1, 1, 0, 0}, ""};
  const auto padded = score_term(p, s, t, 1e-6, ScoreMode::Infer);
  CHECK(padded.logit == doctest::Approx(base.logit).epsilon(1e-5));
  for (const auto& a : padded.attention)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 6; j < 9; ++j) CHECK(a(i, j) == 0.0f);
}

TEST_CASE("degenerate and mismatched inputs are rejected") {
  const auto p = random_params(7);
  Rng rng = make_rng(7, "bad");
  const auto s = speech_of(random_rows(rng, 4, 8));
  const auto t = term_of(1, random_rows(rng, 2, 8));
  SpeechFeatures silent{"u", s.frames, Mask(4, 0)};
  TermFeatures empty{1, t.tokens, Mask(2, 0), ""};
  CHECK_THROWS_AS(score_term(p, silent, t, 1e-6, ScoreMode::Infer), DegenerateInputError);
  CHECK_THROWS_AS(score_term(p, s, empty, 1e-6, ScoreMode::Infer), DegenerateInputError);
  CHECK_THROWS_AS(score_term(p, speech_of(random_rows(rng, 4, 6)), t, 1e-6, ScoreMode::Infer), DimensionError);
  CHECK_THROWS_AS(score_term(p, s, t, 1e-6, ScoreMode::Train), std::invalid_argument);
  CHECK_THROWS_AS(init_params(10, 4, 0.1, 1), ConfigError);
}

TEST_CASE("train-mode dropout is a pure function of the pair seed") {
  const auto p = random_params(8);
  Rng rng = make_rng(8, "drop");
  const auto s = speech_of(random_rows(rng, 10, 8));
  const auto t = term_of(1, random_rows(rng, 3, 8));
  const auto a = score_term(p, s, t, 1e-6, ScoreMode::Train, 42);
  const auto b = score_term(p, s, t, 1e-6, ScoreMode::Train, 42);
  const auto c = score_term(p, s, t, 1e-6, ScoreMode::Train, 43);
  const auto inf = score_term(p, s, t, 1e-6, ScoreMode::Infer);
  CHECK(a.logit == b.logit);
  CHECK(a.logit != c.logit);
  CHECK(a.logit != inf.logit);

  std::size_t dropped = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 20; ++j, ++total) dropped += !dropout_keep(seed, 0.1, 0, i, j);
  CHECK(static_cast<double>(dropped) / total == doctest::Approx(0.1).epsilon(0.1));
  CHECK(dropout_keep(1, 0.0, 0, 0, 0));
}

TEST_CASE("batched bank scoring agrees with the reference path") {
  const auto p = random_params(9, 16, 4);
  Rng rng = make_rng(9, "bank");
  const auto s = speech_of(random_rows(rng, 12, 16));
  std::vector<TermFeatures> terms;
  for (TermId id = 0; id < 37; ++id) terms.push_back(term_of(id, random_rows(rng, 1 + id % 4, 16)));
  for (std::size_t batch : {1u, 5u, 64u}) {
    const auto scores = score_bank(p, s, terms, batch, 1e-6);
    REQUIRE(scores.size() == terms.size());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const auto ref = score_term(p.cast<double>(), s.frames.cast<double>(), s.frame_mask,
                                  terms[i].tokens.cast<double>(), terms[i].token_mask, 1e-6, ScoreMode::Infer);
      CHECK(std::abs(scores[i] - ref.prob) < 1e-6);
    }
  }
  auto nopool = p;
  nopool.token_pooling = false;
  const auto scores = score_bank(nopool, s, terms, 8, 1e-6);
  for (std::size_t i = 0; i < terms.size(); ++i)
    CHECK(std::abs(scores[i] - score_term(nopool, s, terms[i], 1e-6, ScoreMode::Infer).prob) < 1e-6);
}

TEST_CASE("checkpoints round-trip and report bad files") {
  const auto dir = fs::temp_directory_path() / "termprob-test-ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = random_params(10, 16, 4);
  p.token_pooling = false;
  save_checkpoint(dir / "m.ckpt", p);
  const auto q = load_checkpoint(dir / "m.ckpt", ModelShape{16, 4});
  CHECK(q.token_pooling == false);
  CHECK(q.dropout_p == p.dropout_p);
  p.visit([&](const char* name, const Tensor2& t) {
    q.visit([&](const char* other, const Tensor2& u) {
      if (std::string(name) == other) CHECK(t == u);
    });
  });
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", ModelShape{32, 4}), ConfigError);
  CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));

  std::ifstream in(dir / "m.ckpt", std::ios::binary);
  std::string bytes{std::istreambuf_iterator<char>(in), {}};
  std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);
  std::ofstream(dir / "magic.ckpt", std::ios::binary) << "NOPE" << bytes.substr(4);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), FormatError);
}
