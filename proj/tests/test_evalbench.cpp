// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "termprob/config.hpp"
#include "termprob/evalbench.hpp"

using namespace termprob;
namespace fs = std::filesystem;

namespace {

TermBank letters() {
  TermBank b;
  b.add({1, "a", "A", {1}});
  b.add({2, "bc", "BC", {2, 3}});
  b.add({3, "d", "D", {4}});
  b.add({4, "cd", "CD", {3, 4}});
  return b;
}

RetrievalResult ranked(std::vector<TermId> ids) {
  RetrievalResult r;
  for (std::size_t i = 0; i < ids.size(); ++i) r.entries.push_back({ids[i], "", "", 1.0 - 0.1 * i, i + 1});
  return r;
}

}  // namespace

TEST_CASE("gold terms are the unique bank entries present in the transcript") {
  const auto b = letters();
  CHECK(gold_terms({1, 2, 3, 4, 1}, b) == std::vector<TermId>{1, 2, 3, 4});
  CHECK(gold_terms({2, 4}, b) == std::vector<TermId>{3});
  CHECK(gold_terms({9}, b).empty());
}

TEST_CASE("recall at k: hand-computed micro and macro averages") {
  const auto b = letters();
  const std::vector<RetrievalResult> res{ranked({1, 3, 2, 4}), ranked({4, 1, 2, 3})};
  const std::vector<std::vector<TermId>> gold{{1, 2}, {2, 3, 4}};
  // k=1: hits 1 + 1 over 5 gold.
  CHECK(recall_at_k(res, gold, b, 1) == doctest::Approx(40.0));
  // k=2: utterance 1 finds {1}, utterance 2 finds {4}.
  CHECK(recall_at_k(res, gold, b, 2) == doctest::Approx(40.0));
  CHECK(recall_at_k(res, gold, b, 3) == doctest::Approx(80.0));
  // Macro at k=3: (2/2 + 2/3) / 2.
  CHECK(recall_at_k(res, gold, b, 3, true) == doctest::Approx(250.0 / 3.0));
  CHECK(recall_at_k(res, gold, b, 4) == doctest::Approx(100.0));
  const auto c = recall_count(res, gold, b, 3);
  CHECK(c.hits == 4);
  CHECK(c.gold == 5);
}

TEST_CASE("recall is monotone in k and rejects protocol violations") {
  const auto b = letters();
  const std::vector<RetrievalResult> res{ranked({3, 4, 1, 2}), ranked({2, 1, 4, 3})};
  const std::vector<std::vector<TermId>> gold{{1, 2}, {3}};
  double last = 0.0;
  for (std::size_t k = 1; k <= 4; ++k) {
    const double r = recall_at_k(res, gold, b, k);
    CHECK(r >= last);
    last = r;
  }
  CHECK_THROWS_AS(recall_at_k(res, {{1}, {99}}, b, 3), ProtocolError);
  CHECK_THROWS(recall_at_k(res, {{1}}, b, 3));
  const auto rep = make_report("x", "a2p", res, gold, b, {1, 4});
  CHECK(rep.at(4) == doctest::Approx(100.0));
  CHECK(rep.n_gold == 3);
  CHECK(rep.n_utterances == 2);
}

TEST_CASE("ablation arm names round-trip and configure their schedules") {
  for (auto a : {AblationArm::FullA2P, AblationArm::NoPooling, AblationArm::RealTermOnly, AblationArm::PhraseOnly,
                 AblationArm::WordOnly})
    CHECK(parse_arm(arm_name(a)) == a);
  CHECK_THROWS(parse_arm("nothing"));
  TrainingConfig cfg;
  CurriculumOptions opt;
  configure_arm(AblationArm::PhraseOnly, 100, cfg, opt);
  REQUIRE(cfg.stage_schedule.size() == 1);
  CHECK(cfg.stage_schedule[0].stage == CurriculumStage::Phrase);
  CHECK(cfg.stage_schedule[0].steps == 100);
  TrainingConfig c2;
  CurriculumOptions o2;
  configure_arm(AblationArm::NoPooling, 100, c2, o2);
  CHECK_FALSE(o2.token_pooling);
  CHECK(c2.stage_schedule.size() == 3);
}

TEST_CASE("bank-size sweep covers every size and seed for both scorers") {
  ToyEncoderConfig e;
  e.vocab_size = 150;
  e.embed_dim = 16;
  e.term_vocab = 60;
  CorpusLayout l;
  l.n_train = 10;
  l.n_valid = 4;
  l.n_test = 12;
  l.bank_size = 30;
  l.train_term_pool = 20;
  const auto corpus = generate_corpus(e, l);
  const ToyEncoder enc(corpus.encoder);
  const auto pool = generate_distractors(corpus, 70, 100000, 5);
  const auto set = make_eval_set(corpus, "test", corpus.bank);
  const auto params = init_params(16, 4, 0.1, 1);
  const auto pts = sweep_bank_size(params, enc, corpus.bank, pool, set, {30, 60, 100}, 10, {1, 2, 3});
  CHECK(pts.size() == 18);
  for (const auto& p : pts) {
    CHECK(p.recall >= 0.0);
    CHECK(p.recall <= 100.0);
  }
  CHECK_THROWS(sweep_bank_size(params, enc, corpus.bank, pool, set, {200}, 10, {1}));
  CHECK_THROWS(sweep_bank_size(params, enc, corpus.bank, corpus.bank, set, {40}, 10, {1}));
}

TEST_CASE("engine config text round-trips and names bad lines") {
  EngineConfig c;
  c.embed_dim = 32;
  c.heads = 4;
  c.dropout_p = 0.25;
  c.seed = 99;
  c.corpus_dir = "x/y";
  CHECK(parse_config_text(config_to_text(c)) == c);
  CHECK(c.resolved_bank() == (fs::path("x/y") / "bank.jsonl").string());

  const auto dir = fs::temp_directory_path() / "termprob-test-config";
  fs::create_directories(dir);
  save_config(dir / "engine.conf", c);
  CHECK(load_config(dir / "engine.conf") == c);

  try {
    parse_config_text("version = 1\nheads = 4\nspeed = 3\n", "cfg");
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("cfg:3") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config_text("heads = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("version = 1\nembed_dim = 30\nheads = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("version = 1\ndropout_p = 1.5\n"), ConfigError);
}
