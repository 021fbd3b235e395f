// SPDX-License-Identifier: Apache-2.0
//
// termprob: command-line front end for corpus generation, training,
// retrieval, evaluation and benchmarking.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "termprob/baseline.hpp"
#include "termprob/config.hpp"
#include "termprob/evalbench.hpp"
#include "termprob/serving.hpp"
#include "termprob/training.hpp"

using json = nlohmann::json;
using namespace termprob;
namespace fs = std::filesystem;

namespace {

// Global options. Each one is only applied over the config file when given.
struct GlobalFlags {
  std::string config_path;
  std::size_t d = 64;
  std::size_t heads = 8;
  double dropout = 0.1;
  double epsilon = 1e-6;
  std::uint64_t seed = 1;
  std::string corpus, bank, checkpoint_dir, reports_dir;
};

struct TrainFlags {
  TrainingConfig cfg;
  std::size_t steps = 0;  // 0: derive from max_epochs
  std::string schedule;
  bool no_pooling = false;
  bool untied = false;
};

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const auto v = std::stoull(item, &pos);
    if (pos != item.size()) throw std::invalid_argument("bad list element '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw std::invalid_argument("empty list '" + s + "'");
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<StageBudget> parse_schedule(const std::string& s) {
  std::vector<StageBudget> out;
  for (const auto& item : split_csv(s)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("schedule entry '" + item + "' needs stage:steps");
    out.push_back({parse_stage(item.substr(0, colon)), std::stoull(item.substr(colon + 1))});
  }
  return out;
}

void add_train_options(CLI::App* sub, TrainFlags& t) {
  sub->add_option("--batch-size", t.cfg.batch_size, "Utterances per batch");
  sub->add_option("--max-bank", t.cfg.max_bank_per_batch, "Candidate terms per batch");
  sub->add_option("--peak-lr", t.cfg.peak_lr, "Learning rate after warmup");
  sub->add_option("--init-lr", t.cfg.init_lr, "Learning rate at step 1");
  sub->add_option("--warmup", t.cfg.warmup_steps, "Linear warmup steps");
  sub->add_option("--epochs", t.cfg.max_epochs, "Total epochs when --steps is not given");
  sub->add_option("--steps", t.steps, "Total step budget split 30/30/40 over stages (0: use --epochs)");
  sub->add_option("--schedule", t.schedule, "Explicit budgets, e.g. word:300,phrase:300,real:400");
  sub->add_option("--weight-decay", t.cfg.weight_decay, "AdamW decoupled weight decay");
  sub->add_option("--clip", t.cfg.clip_norm, "Global gradient norm clip");
  sub->add_option("--patience", t.cfg.early_stop_patience, "Validations without gain before stopping (0: off)");
  sub->add_option("--validate-every", t.cfg.epochs_per_validation, "Epochs between validation passes");
  sub->add_flag("--no-pooling", t.no_pooling, "Score every term token separately (ablation)");
  sub->add_flag("--untied-init", t.untied, "Draw the key projection independently of the query projection");
}

json result_json(const RetrievalResult& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"term_id", e.term_id}, {"src", e.src}, {"tgt", e.tgt}, {"prob", e.prob}, {"rank", e.rank}});
  }
  json j{{"scorer", r.scorer},
         {"entries", entries},
         {"timing",
          {{"feature_ms", r.timing.feature_ms},
           {"scoring_ms", r.timing.scoring_ms},
           {"topk_ms", r.timing.topk_ms},
           {"total_ms", r.timing.total_ms}}}};
  if (r.scores_are_similarities) j["scores_are_similarities"] = true;
  return j;
}

json report_json(const RecallReport& r) {
  json rec = json::object();
  for (std::size_t i = 0; i < r.ks.size(); ++i) rec["recall@" + std::to_string(r.ks[i])] = r.recall[i];
  return {{"label", r.label},   {"scorer", r.scorer},     {"recall", rec},
          {"n_gold", r.n_gold}, {"hits", r.hits},         {"n_utterances", r.n_utterances}};
}

RetrieverParams load_model(const std::string& path, const EngineConfig& e) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return load_checkpoint(path, ModelShape{e.embed_dim, e.heads});
}

fs::path encoder_for_bank(const std::string& bank, const std::string& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  return fs::path(bank).parent_path() / "encoder.json";
}

// Base bank followed by distractors, enough for `largest` entries.
TermBank extended_bank(const Corpus& corpus, const TermBank& base, std::size_t largest, std::uint64_t seed) {
  TermBank out = base;
  if (largest > base.size()) {
    TermId next = 0;
    for (const auto& e : corpus.bank.entries()) next = std::max(next, e.term_id + 1);
    for (const auto& e : corpus.train_terms.entries()) next = std::max(next, e.term_id + 1);
    const auto extra = generate_distractors(corpus, largest - base.size(), next, seed);
    for (const auto& e : extra.entries()) out.add(e);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-to-term presence retrieval toolkit"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags g;
  app.add_option("--config", g.config_path, "Engine config file (key = value)");
  auto* o_d = app.add_option("--d", g.d, "Embedding dimension");
  auto* o_heads = app.add_option("--heads", g.heads, "Attention heads");
  auto* o_dropout = app.add_option("--dropout", g.dropout, "Attention dropout during training");
  auto* o_eps = app.add_option("--epsilon", g.epsilon, "Pooling denominator epsilon");
  auto* o_seed = app.add_option("--seed", g.seed, "Root random seed");
  auto* o_corpus = app.add_option("--corpus", g.corpus, "Corpus directory");
  auto* o_bank = app.add_option("--bank", g.bank, "Term bank JSONL");
  auto* o_ckdir = app.add_option("--checkpoint-dir", g.checkpoint_dir, "Checkpoint directory");
  auto* o_repdir = app.add_option("--reports-dir", g.reports_dir, "Report directory");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  ToyEncoderConfig enc;
  CorpusLayout layout;
  gen->add_option("--vocab", enc.vocab_size, "Vocabulary size");
  gen->add_option("--term-vocab", enc.term_vocab, "Tokens reserved for terms (0: shared vocabulary)");
  gen->add_option("--lexicon-shift", enc.lexicon_shift, "How far term tokens leave the common subspace");
  gen->add_option("--frames-min", enc.frames_min, "Minimum frames per token");
  gen->add_option("--frames-max", enc.frames_max, "Maximum frames per token");
  gen->add_option("--noise", enc.noise_sigma, "Frame noise, relative to feature scale");
  gen->add_option("--filler-rate", enc.filler_rate, "Probability of a filler frame before a token");
  gen->add_option("--scale", enc.feature_scale, "Token embedding norm");
  gen->add_option("--voicing", enc.voicing, "Shared-direction share of each embedding");
  gen->add_option("--n-train", layout.n_train, "Training utterances");
  gen->add_option("--n-valid", layout.n_valid, "Validation utterances");
  gen->add_option("--n-test", layout.n_test, "Test utterances");
  gen->add_option("--bank-size", layout.bank_size, "Evaluation bank terms");
  gen->add_option("--train-terms", layout.train_term_pool, "Terms annotated in training utterances");
  gen->add_option("--real-term-fraction", layout.real_term_fraction, "Share of training utterances with annotated terms");
  gen->add_option("--term-occurrence", layout.term_occurrence, "Share of training utterances containing terms");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory (default: corpus_dir)");

  // train
  auto* train = app.add_subcommand("train", "Run the three-stage curriculum");
  TrainFlags tf;
  add_train_options(train, tf);

  // eval
  auto* eval = app.add_subcommand("eval", "Recall@k on a corpus split");
  std::string eval_ckpt, eval_ks = "10,20,30,40,50", eval_split = "test", sweep_sizes;
  bool eval_macro = false, eval_baseline = false;
  std::size_t sweep_seeds = 3, sweep_k = 50;
  eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint (default: <checkpoint_dir>/model.ckpt)");
  eval->add_option("--k", eval_ks, "Comma-separated k values");
  eval->add_option("--split", eval_split, "Corpus split to evaluate");
  eval->add_flag("--macro", eval_macro, "Average recall per utterance instead of over all gold terms");
  eval->add_flag("--baseline", eval_baseline, "Also evaluate the cosine baseline");
  eval->add_option("--sweep-sizes", sweep_sizes, "Bank sizes for a distractor sweep, e.g. 583,1000,5000,10000");
  eval->add_option("--sweep-seeds", sweep_seeds, "Distractor draws per sweep size");
  eval->add_option("--sweep-k", sweep_k, "k used by the sweep");

  // retrieve / baseline-retrieve
  auto* ret = app.add_subcommand("retrieve", "Top-k terms for one utterance");
  std::string ret_ckpt, ret_features, ret_encoder, ret_task, ret_src_lang = "English", ret_tgt_lang = "Chinese";
  std::size_t ret_k = 10;
  bool ret_source_only = false;
  ret->add_option("--checkpoint", ret_ckpt, "Model checkpoint")->required();
  ret->add_option("--features", ret_features, "Utterance feature file")->required();
  ret->add_option("--k", ret_k, "Terms to return");
  ret->add_option("--encoder", ret_encoder, "Encoder config (default: next to the bank)");
  ret->add_option("--prompt-task", ret_task, "Also render a prompt: asr or st")->check(CLI::IsMember({"asr", "st"}));
  ret->add_flag("--source-only", ret_source_only, "ST prompts list source terms only");
  ret->add_option("--source-lang", ret_src_lang, "Prompt source language");
  ret->add_option("--target-lang", ret_tgt_lang, "Prompt target language");

  auto* bret = app.add_subcommand("baseline-retrieve", "Top-k terms by cosine similarity");
  std::string bret_features, bret_encoder;
  std::size_t bret_k = 10;
  bret->add_option("--features", bret_features, "Utterance feature file")->required();
  bret->add_option("--k", bret_k, "Terms to return");
  bret->add_option("--encoder", bret_encoder, "Encoder config (default: next to the bank)");

  // bench
  auto* bench = app.add_subcommand("bench", "Latency per bank size");
  std::string bench_ckpt, bench_sizes = "583,1000,5000,10000", bench_out;
  std::size_t bench_queries = 200, bench_k = 50, bench_warmup = 5;
  bench->add_option("--checkpoint", bench_ckpt, "Model checkpoint (default: <checkpoint_dir>/model.ckpt)");
  bench->add_option("--bank-sizes", bench_sizes, "Comma-separated bank sizes");
  bench->add_option("--queries", bench_queries, "Timed queries per size");
  bench->add_option("--warmup", bench_warmup, "Untimed queries per size");
  bench->add_option("--k", bench_k, "Terms retrieved per query");
  bench->add_option("--out", bench_out, "CSV path (default: <reports_dir>/latency.csv)");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and evaluate ablation arms");
  std::string abl_arms = "full,nopool,realonly,phrase,word", abl_out;
  TrainFlags af;
  af.cfg.early_stop_patience = 0;
  add_train_options(abl, af);
  abl->add_option("--arms", abl_arms, "Comma-separated arms");
  abl->add_option("--out", abl_out, "Output directory (default: <reports_dir>/ablation)");

  // prompt
  auto* pr = app.add_subcommand("prompt", "Render a terminology prompt");
  std::string pr_task = "asr", pr_terms, pr_targets, pr_retrieval, pr_src = "English", pr_tgt = "Chinese";
  bool pr_source_only = false;
  pr->add_option("--task", pr_task, "asr or st")->check(CLI::IsMember({"asr", "st"}));
  pr->add_option("--terms", pr_terms, "Comma-separated source terms");
  pr->add_option("--targets", pr_targets, "Comma-separated target terms, parallel to --terms");
  pr->add_option("--retrieval", pr_retrieval, "JSON written by retrieve");
  pr->add_flag("--source-only", pr_source_only, "ST prompts list source terms only");
  pr->add_option("--source-lang", pr_src, "Source language");
  pr->add_option("--target-lang", pr_tgt, "Target language");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  GradCheckConfig gcc;
  std::size_t gc_configs = 1;
  double gc_tol = 1e-4;
  gc->add_option("--configs", gc_configs, "Random configurations to check (d in {8,16,32}, H in {1,2,4})");
  gc->add_option("--max-frames", gcc.max_frames, "Upper bound on frames per utterance");
  gc->add_option("--max-tokens", gcc.max_tokens, "Upper bound on tokens per term");
  gc->add_option("--fd-eps", gcc.fd_eps, "Central difference step");
  gc->add_option("--tolerance", gc_tol, "Pass threshold on max relative error");
  gc->add_flag_function("--no-dropout", [&](std::int64_t) { gcc.dropout = false; }, "Check in inference mode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    EngineConfig engine;
    if (!g.config_path.empty()) engine = load_config(g.config_path);
    if (o_d->count()) engine.embed_dim = g.d;
    if (o_heads->count()) engine.heads = g.heads;
    if (o_dropout->count()) engine.dropout_p = g.dropout;
    if (o_eps->count()) engine.pooling_epsilon = g.epsilon;
    if (o_seed->count()) engine.seed = g.seed;
    if (o_corpus->count()) engine.corpus_dir = g.corpus;
    if (o_bank->count()) engine.bank_path = g.bank;
    if (o_ckdir->count()) engine.checkpoint_dir = g.checkpoint_dir;
    if (o_repdir->count()) engine.reports_dir = g.reports_dir;
    engine.validate();
    const fs::path default_ckpt = fs::path(engine.checkpoint_dir) / "model.ckpt";
    const ServingOptions serving{256, engine.pooling_epsilon};

    auto training_setup = [&](TrainFlags& t, std::size_t n_train) {
      t.cfg.seed = engine.seed;
      t.cfg.pooling_epsilon = engine.pooling_epsilon;
      if (!t.schedule.empty()) {
        t.cfg.stage_schedule = parse_schedule(t.schedule);
      } else if (t.steps > 0) {
        t.cfg.stage_schedule = default_schedule(t.steps);
      }
      CurriculumOptions opts;
      opts.shape = {engine.embed_dim, engine.heads};
      opts.dropout_p = engine.dropout_p;
      opts.token_pooling = !t.no_pooling;
      opts.tie_query_key = !t.untied;
      std::size_t total = 0;
      for (const auto& s : t.cfg.resolved_schedule(n_train)) total += s.steps;
      return std::pair{opts, total};
    };

    if (app.got_subcommand(gen)) {
      enc.embed_dim = engine.embed_dim;
      enc.seed = engine.seed;
      const fs::path out = gen_out.empty() ? fs::path(engine.corpus_dir) : fs::path(gen_out);
      const auto corpus = generate_corpus(enc, layout);
      const auto hash = save_corpus(corpus, out);
      std::cout << json{{"corpus_hash", hash},
                        {"dir", out.string()},
                        {"utterances", corpus.utterances.size()},
                        {"bank_terms", corpus.bank.size()},
                        {"train_terms", corpus.train_terms.size()}}
                       .dump()
                << '\n';
      return 0;
    }

    if (app.got_subcommand(train)) {
      const auto corpus = load_corpus(engine.corpus_dir);
      if (corpus.encoder.embed_dim != engine.embed_dim) {
        throw ConfigError("corpus dim " + std::to_string(corpus.encoder.embed_dim) + " differs from d=" +
                          std::to_string(engine.embed_dim));
      }
      auto [opts, total] = training_setup(tf, corpus.split_indices("train").size());
      const ToyEncoder encoder(corpus.encoder);
      const EvalSet valid = make_eval_set(corpus, "valid", corpus.bank);
      if (!valid.speech.empty()) {
        opts.validate = [&](const RetrieverParams& p) {
          const auto sb = make_serving_bank(p, encoder, corpus.bank);
          return evaluate_a2p(p, *sb, valid, {10}, "valid", serving).recall[0];
        };
      }
      opts.checkpoint_dir = fs::path(engine.checkpoint_dir);
      fs::create_directories(engine.checkpoint_dir);
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = run_curriculum(corpus, tf.cfg, opts);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_checkpoint(default_ckpt, res.params);
      write_step_log(fs::path(engine.checkpoint_dir) / "steps.csv", res.steps);
      write_epoch_log(fs::path(engine.checkpoint_dir) / "epochs.csv", res.epochs);
      json summary{{"checkpoint", default_ckpt.string()},
                   {"steps", res.steps.size()},
                   {"total_steps", total},
                   {"final_loss", res.steps.empty() ? 0.0 : res.steps.back().loss},
                   {"clipped_steps", res.clipped_steps},
                   {"diverged", res.diverged},
                   {"early_stopped", res.early_stopped},
                   {"seconds", secs}};
      if (!res.epochs.empty()) summary["valid_recall@10"] = res.epochs.back().recall_at_10;
      if (!res.message.empty()) summary["message"] = res.message;
      std::cout << summary.dump() << '\n';
      return res.diverged ? 2 : 0;
    }

    if (app.got_subcommand(eval)) {
      const auto corpus = load_corpus(engine.corpus_dir);
      const auto params = load_model(eval_ckpt.empty() ? default_ckpt.string() : eval_ckpt, engine);
      const TermBank bank = engine.bank_path.empty() ? corpus.bank : read_bank(engine.bank_path);
      const ToyEncoder encoder(corpus.encoder);
      const auto ks = parse_sizes(eval_ks);
      const EvalSet set = make_eval_set(corpus, eval_split, bank);
      const auto sb = make_serving_bank(params, encoder, bank);
      std::vector<RecallReport> reports{evaluate_a2p(params, *sb, set, ks, "a2p", serving, eval_macro)};
      if (eval_baseline) {
        const auto index = build_dense_index(bank, sb->features);
        reports.push_back(evaluate_cosine(index, bank, set, ks, "cosine", eval_macro));
      }
      const fs::path dir = engine.reports_dir;
      write_reports_csv(dir / "recall.csv", reports);
      {
        std::ofstream md(dir / "recall.md");
        md << reports_markdown(reports);
      }
      json out{{"reports", json::array()}};
      for (const auto& r : reports) out["reports"].push_back(report_json(r));
      if (!sweep_sizes.empty()) {
        const auto sizes = parse_sizes(sweep_sizes);
        const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
        const auto full = extended_bank(corpus, bank, largest, engine.seed);
        TermBank pool;
        for (std::size_t i = bank.size(); i < full.size(); ++i) pool.add(full.at(i));
        std::vector<std::uint64_t> seeds;
        for (std::size_t s = 0; s < sweep_seeds; ++s) seeds.push_back(engine.seed + s);
        const auto pts = sweep_bank_size(params, encoder, bank, pool, set, sizes, sweep_k, seeds, serving);
        write_sweep_csv(dir / "sweep.csv", pts);
        json sw = json::array();
        for (const auto& p : pts)
          sw.push_back({{"scorer", p.scorer}, {"bank_size", p.bank_size}, {"seed", p.seed}, {"recall", p.recall}});
        out["sweep"] = sw;
      }
      std::cout << out.dump() << '\n';
      return 0;
    }

    if (app.got_subcommand(ret) || app.got_subcommand(bret)) {
      const bool cosine = app.got_subcommand(bret);
      const std::string bank_path = engine.resolved_bank();
      if (!fs::exists(bank_path)) throw std::runtime_error("bank not found: " + bank_path);
      const auto features_path = cosine ? bret_features : ret_features;
      if (!fs::exists(features_path)) throw std::runtime_error("features not found: " + features_path);
      const auto enc_path = encoder_for_bank(bank_path, cosine ? bret_encoder : ret_encoder);
      if (!fs::exists(enc_path)) throw std::runtime_error("encoder config not found: " + enc_path.string());
      const ToyEncoder encoder(read_encoder_config(enc_path));
      const TermBank bank = read_bank(bank_path);
      const SpeechFeatures speech = read_features(features_path);
      json out;
      if (cosine) {
        const auto index = build_dense_index(bank, encoder);
        out = result_json(cosine_retrieve(index, speech, bret_k));
      } else {
        const auto params = load_model(ret_ckpt, engine);
        const auto sb = make_serving_bank(params, encoder, bank);
        const auto res = retrieve(params, *sb, speech, ret_k, serving);
        out = result_json(res);
        if (!ret_task.empty()) {
          PromptTemplate tmpl{ret_src_lang, ret_tgt_lang, !ret_source_only};
          out["prompt"] = build_prompt(tmpl, parse_prompt_task(ret_task), res);
        }
      }
      std::cout << out.dump() << '\n';
      return 0;
    }

    if (app.got_subcommand(bench)) {
      const auto corpus = load_corpus(engine.corpus_dir);
      const auto params = load_model(bench_ckpt.empty() ? default_ckpt.string() : bench_ckpt, engine);
      const auto sizes = parse_sizes(bench_sizes);
      const auto full = extended_bank(corpus, corpus.bank, *std::max_element(sizes.begin(), sizes.end()),
                                      engine.seed);
      std::vector<const SpeechFeatures*> speech;
      for (auto i : corpus.split_indices("test")) speech.push_back(&corpus.features[i]);
      const auto rows = bench_latency(params, ToyEncoder(corpus.encoder), full, sizes, speech, bench_queries,
                                      bench_k, bench_warmup, serving);
      const fs::path out = bench_out.empty() ? fs::path(engine.reports_dir) / "latency.csv" : fs::path(bench_out);
      write_latency_csv(out, rows);
      std::ifstream in(out);
      std::cout << in.rdbuf();
      return 0;
    }

    if (app.got_subcommand(abl)) {
      const auto corpus = load_corpus(engine.corpus_dir);
      auto [opts, total] = training_setup(af, corpus.split_indices("train").size());
      std::vector<AblationArm> arms;
      for (const auto& a : split_csv(abl_arms)) arms.push_back(parse_arm(a));
      const auto rows = run_ablations(corpus, af.cfg, opts, total, arms, kReportKs, serving);
      const fs::path dir = abl_out.empty() ? fs::path(engine.reports_dir) / "ablation" : fs::path(abl_out);
      write_ablation_tables(dir, rows);
      json out = json::array();
      for (const auto& r : rows) {
        json row{{"arm", arm_name(r.arm)}, {"ok", r.ok}, {"train_seconds", r.train_seconds}};
        if (r.ok) row["report"] = report_json(r.report);
        if (!r.message.empty()) row["message"] = r.message;
        out.push_back(row);
      }
      std::cout << json{{"dir", dir.string()}, {"arms", out}}.dump() << '\n';
      bool any_ok = false;
      for (const auto& r : rows) any_ok |= r.ok;
      return any_ok ? 0 : 2;
    }

    if (app.got_subcommand(pr)) {
      RetrievalResult res;
      if (!pr_retrieval.empty()) {
        std::ifstream in(pr_retrieval);
        if (!in) throw std::runtime_error("cannot open retrieval file " + pr_retrieval);
        const json j = json::parse(in);
        for (const auto& e : j.at("entries"))
          res.entries.push_back({e.at("term_id").get<TermId>(), e.at("src").get<std::string>(),
                                 e.at("tgt").get<std::string>(), e.at("prob").get<double>(),
                                 e.at("rank").get<std::size_t>()});
      } else {
        const auto src = split_csv(pr_terms);
        const auto tgt = split_csv(pr_targets);
        if (!tgt.empty() && tgt.size() != src.size()) {
          throw std::invalid_argument("--targets must list one entry per --terms entry");
        }
        for (std::size_t i = 0; i < src.size(); ++i)
          res.entries.push_back({static_cast<TermId>(i), src[i], tgt.empty() ? src[i] : tgt[i], 1.0, i + 1});
      }
      PromptTemplate tmpl{pr_src, pr_tgt, !pr_source_only};
      std::cout << build_prompt(tmpl, parse_prompt_task(pr_task), res) << '\n';
      return 0;
    }

    if (app.got_subcommand(gc)) {
      // Without explicit --d/--heads each config draws its own small shape.
      double worst = 0.0;
      GradCheckEntry worst_entry;
      std::size_t checked = 0;
      for (std::size_t i = 0; i < gc_configs; ++i) {
        auto one = sample_gradcheck_config(gcc, engine.seed, i);
        if (o_d->count()) one.dim = engine.embed_dim;
        if (o_heads->count()) one.heads = engine.heads;
        const auto r = run_gradcheck(one);
        checked += r.checked;
        if (i == 0 || r.max_rel_error > worst) {
          worst = r.max_rel_error;
          worst_entry = r.worst;
        }
      }
      const bool pass = worst < gc_tol;
      std::cout << json{{"max_rel_error", worst},
                        {"worst_tensor", worst_entry.tensor},
                        {"worst_index", worst_entry.index},
                        {"analytic", worst_entry.analytic},
                        {"numeric", worst_entry.numeric},
                        {"checked", checked},
                        {"pass", pass}}
                       .dump()
                << '\n';
      return pass ? 0 : 2;
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << '\n';
    return 2;
  }
  return 1;
}
