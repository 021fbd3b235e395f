// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "termprob/training.hpp"

using namespace termprob;

namespace {

Corpus tiny_corpus() {
  ToyEncoderConfig enc;
  enc.vocab_size = 150;
  enc.embed_dim = 16;
  enc.term_vocab = 60;
  enc.lexicon_shift = 0.5;
  enc.feature_scale = 12.0;
  CorpusLayout l;
  l.n_train = 64;
  l.n_valid = 8;
  l.n_test = 8;
  l.bank_size = 30;
  l.train_term_pool = 40;
  return generate_corpus(enc, l);
}

}  // namespace

TEST_CASE("dual loss: hand example and gradient") {
  // Positives 0.8 and 0.6, negative 0.3.
  const auto r = dual_bce_loss({0.8, 0.3, 0.6}, {1, 0, 1});
  const double expect = -(std::log(0.8) + std::log(0.6)) / 2.0 - std::log(0.7);
  CHECK(r.loss == doctest::Approx(expect).epsilon(1e-12));
  CHECK(r.positives == 2);
  CHECK(r.dlogit[0] == doctest::Approx(-0.1));
  CHECK(r.dlogit[1] == doctest::Approx(0.3));
  CHECK(r.dlogit[2] == doctest::Approx(-0.2));
  // At p = 0.5 everywhere the loss is 2 ln 2 whatever the group sizes.
  CHECK(dual_bce_loss({0.5, 0.5, 0.5, 0.5}, {1, 0, 0, 0}).loss == doctest::Approx(2.0 * std::log(2.0)));
}

TEST_CASE("dual loss: group balance and guards") {
  // Adding more negatives at the same probability leaves the loss unchanged.
  const double a = dual_bce_loss({0.9, 0.2}, {1, 0}).loss;
  const double b = dual_bce_loss({0.9, 0.2, 0.2, 0.2}, {1, 0, 0, 0}).loss;
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK_THROWS_AS(dual_bce_loss({0.4, 0.6}, {1, 1}), BatchCompositionError);
  CHECK_THROWS_AS(dual_bce_loss({0.4}, {1, 0}), DimensionError);
  CHECK(std::isfinite(dual_bce_loss({0.0, 1.0}, {1, 0}).loss));
}

TEST_CASE("default schedule splits 30/30/40 and keeps the total") {
  for (std::size_t total : {1u, 10u, 99u, 3131u}) {
    const auto s = default_schedule(total);
    REQUIRE(s.size() == 3);
    CHECK(s[0].stage == CurriculumStage::Word);
    CHECK(s[2].stage == CurriculumStage::RealTerm);
    CHECK(s[0].steps + s[1].steps + s[2].steps == total);
  }
  const auto s = default_schedule(100);
  CHECK(s[0].steps == 30);
  CHECK(s[2].steps == 40);
  TrainingConfig cfg;
  cfg.stage_schedule = {{CurriculumStage::RealTerm, 5}, {CurriculumStage::Word, 5}};
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("learning rate: linear warmup then cosine decay") {
  TrainingConfig cfg;
  cfg.init_lr = 1e-7;
  cfg.peak_lr = 1e-4;
  cfg.warmup_steps = 11;
  CHECK(lr_at(1, cfg, 111) == doctest::Approx(1e-7));
  CHECK(lr_at(6, cfg, 111) == doctest::Approx(1e-7 + 0.5 * (1e-4 - 1e-7)));
  CHECK(lr_at(11, cfg, 111) == doctest::Approx(1e-4));
  CHECK(lr_at(61, cfg, 111) == doctest::Approx(0.5e-4));
  CHECK(lr_at(111, cfg, 111) == doctest::Approx(0.0));
  for (std::size_t s = 12; s < 111; ++s) CHECK(lr_at(s + 1, cfg, 111) <= lr_at(s, cfg, 111));
}

TEST_CASE("adamw: first step moves each weight by lr * (sign + wd * p)") {
  auto p = init_params(8, 2, 0.0, 1);
  const auto before = p;
  auto g = p.zeros_like();
  for (auto& x : g.wq.data()) x = 0.5f;
  for (auto& x : g.head_w.data()) x = -2.0f;
  auto st = AdamState::zeros_like(p);
  TrainingConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 1e-3;
  adamw_step(p, g, st, 1, lr, cfg);
  // Bias-corrected moments give m_hat / sqrt(v_hat) = sign(g) on step 1.
  for (std::size_t i = 0; i < p.wq.size(); ++i) {
    const double b = before.wq.data()[i];
    const double expect = b - lr * (0.5 / (0.5 + cfg.adam_eps) + cfg.weight_decay * b);
    CHECK(p.wq.data()[i] == doctest::Approx(expect).epsilon(1e-6));
  }
  CHECK(p.head_w(0, 0) == doctest::Approx(lr * 2.0 / (2.0 + cfg.adam_eps)).epsilon(1e-6));
  // Zero-gradient tensors only decay.
  CHECK(p.wv(0, 0) == doctest::Approx(before.wv(0, 0) * (1.0 - lr * cfg.weight_decay)).epsilon(1e-7));

  auto bad = g;
  bad.wo(1, 1) = NAN;
  const auto frozen = p;
  try {
    adamw_step(p, bad, st, 2, lr, cfg);
    FAIL("non-finite gradient accepted");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("wo") != std::string::npos);
  }
  CHECK(p.wq == frozen.wq);
}

TEST_CASE("global norm clipping") {
  auto g = init_params(4, 1, 0.0, 1).zeros_like();
  g.head_w(0, 0) = 3.0f;
  g.head_b(0, 0) = 4.0f;
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.head_w(0, 0) == doctest::Approx(0.6));
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g.head_b(0, 0) == doctest::Approx(0.8));
}

TEST_CASE("batches: labels match a substring oracle and respect the cap") {
  const auto c = tiny_corpus();
  const auto train = c.split_indices("train");
  std::vector<std::size_t> ids(train.begin(), train.begin() + 16);
  TrainingConfig cfg;
  cfg.max_bank_per_batch = 20;
  for (auto stage : {CurriculumStage::Word, CurriculumStage::Phrase, CurriculumStage::RealTerm}) {
    Rng rng = make_rng(3, "batch");
    const auto b = build_batch(c, ids, stage, cfg, rng);
    CHECK(b.candidates.size() <= cfg.max_bank_per_batch);
    CHECK(std::set<TokenSeq>(b.candidates.begin(), b.candidates.end()).size() == b.candidates.size());
    CHECK(b.labels.size() == b.utterances.size() * b.candidates.size());
    std::size_t pos = 0;
    for (const auto& pr : b.pairs()) {
      const bool oracle = occurs_in(c.utterances[pr.utterance].token_ids, b.candidates[pr.candidate]);
      CHECK(pr.label == oracle);
      pos += pr.label;
    }
    CHECK(pos > 0);
    CHECK(pos < b.labels.size());
  }
  cfg.max_bank_per_batch = 3;
  Rng rng = make_rng(4, "cap");
  const auto capped = build_batch(c, ids, CurriculumStage::Word, cfg, rng);
  CHECK(capped.candidates.size() == 3);
  CHECK(capped.dropped_positives > 0);
}

TEST_CASE("analytic gradient matches central differences") {
  for (bool pooling : {true, false})
    for (bool dropout : {true, false}) {
      GradCheckConfig g;
      g.token_pooling = pooling;
      g.dropout = dropout;
      g.seed = 3 + pooling * 2 + dropout;
      const auto r = run_gradcheck(g);
      CHECK(r.max_rel_error < 1e-4);
      CHECK(r.checked > 1000);
    }
}

TEST_CASE("fast batch loss equals the reference loss") {
  const auto c = tiny_corpus();
  auto p = init_params(16, 4, 0.1, 7, false);
  Rng rng = make_rng(7, "loss");
  for (auto& x : p.head_w.data()) x = static_cast<float>(0.5 * standard_normal(rng));
  ToyEncoder enc(c.encoder);
  std::vector<Tensor2> speech, terms;
  std::vector<std::uint8_t> labels;
  for (std::size_t u = 0; u < 3; ++u) speech.push_back(c.features[u].frames);
  for (std::size_t t = 0; t < 4; ++t) terms.push_back(enc.embed_term(c.train_terms.at(t)).tokens);
  BatchView<float> v;
  for (auto& s : speech) v.speech.push_back(&s);
  for (auto& t : terms) v.terms.push_back(&t);
  for (std::size_t i = 0; i < 12; ++i) v.labels.push_back(i % 3 == 0);
  v.dropout_seed = 11;
  for (auto mode : {ScoreMode::Train, ScoreMode::Infer}) {
    const double fast = batch_loss_and_grad(p, v, 1e-6, mode, static_cast<RetrieverParams*>(nullptr));
    const double ref = reference_batch_loss(p, v, 1e-6, mode);
    CHECK(fast == doctest::Approx(ref).epsilon(1e-5));
  }
}

TEST_CASE("fresh model starts at 2 ln 2 and one step raises positive scores") {
  const auto c = tiny_corpus();
  const auto train = c.split_indices("train");
  std::vector<std::size_t> ids(train.begin(), train.begin() + 16);
  TrainingConfig cfg;
  cfg.max_bank_per_batch = 30;
  Rng rng = make_rng(5, "step");
  const auto b = build_batch(c, ids, CurriculumStage::Word, cfg, rng);
  ToyEncoder enc(c.encoder);
  std::vector<Tensor2> terms;
  for (const auto& t : b.candidates) terms.push_back(enc.embed_tokens(0, t).tokens);
  BatchView<float> v;
  for (auto u : b.utterances) v.speech.push_back(&c.features[u].frames);
  for (auto& t : terms) v.terms.push_back(&t);
  v.labels = b.labels;

  auto p = init_params(16, 4, 0.0, 5);
  auto g = p.zeros_like();
  std::vector<double> probs;
  const double loss0 = batch_loss_and_grad(p, v, 1e-6, ScoreMode::Infer, &g, &probs);
  CHECK(loss0 == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
  auto st = AdamState::zeros_like(p);
  adamw_step(p, g, st, 1, 1e-3, cfg);
  std::vector<double> after;
  const double loss1 = batch_loss_and_grad(p, v, 1e-6, ScoreMode::Infer, static_cast<RetrieverParams*>(nullptr), &after);
  CHECK(loss1 < loss0);
  double pos0 = 0, pos1 = 0;
  for (std::size_t i = 0; i < after.size(); ++i)
    if (v.labels[i]) pos0 += probs[i], pos1 += after[i];
  CHECK(pos1 > pos0);
}

TEST_CASE("curriculum run is deterministic and logs every step") {
  const auto c = tiny_corpus();
  TrainingConfig cfg;
  cfg.batch_size = 8;
  cfg.max_bank_per_batch = 24;
  cfg.peak_lr = 1e-2;
  cfg.warmup_steps = 5;
  cfg.stage_schedule = {{CurriculumStage::Word, 6}, {CurriculumStage::Phrase, 6}, {CurriculumStage::RealTerm, 8}};
  CurriculumOptions opt;
  opt.shape = {16, 4};
  int validations = 0;
  opt.validate = [&](const RetrieverParams&) { return 0.1 * ++validations; };
  const auto a = run_curriculum(c, cfg, opt);
  validations = 0;
  const auto b = run_curriculum(c, cfg, opt);
  CHECK_FALSE(a.diverged);
  CHECK(a.params.wq == b.params.wq);
  CHECK(a.params.head_w == b.params.head_w);
  CHECK(a.steps.size() <= 20);
  CHECK(a.steps.size() >= 15);
  CHECK(a.stage_checkpoints.size() == 3);
  for (const auto& s : a.steps) CHECK(std::isfinite(s.loss));
  CHECK(a.steps.back().stage == CurriculumStage::RealTerm);
  CHECK_FALSE(a.epochs.empty());
}
