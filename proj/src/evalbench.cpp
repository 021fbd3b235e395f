// SPDX-License-Identifier: Apache-2.0

#include "termprob/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace termprob {

double RecallReport::at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw std::out_of_range("recall report has no entry for k=" + std::to_string(k));
}

std::vector<TermId> gold_terms(const TokenSeq& transcript, const TermBank& bank) {
  std::vector<TermId> out;
  for (const auto& e : bank.entries())
    if (occurs_in(transcript, e.token_ids)) out.push_back(e.term_id);
  return out;
}

RecallCount recall_count(const std::vector<RetrievalResult>& results, const std::vector<std::vector<TermId>>& gold,
                         const TermBank& bank, std::size_t k, bool macro) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  if (results.size() != gold.size()) {
    throw DimensionError("recall_at_k: " + std::to_string(results.size()) + " results for " +
                         std::to_string(gold.size()) + " gold sets");
  }
  RecallCount rc;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  for (std::size_t u = 0; u < results.size(); ++u) {
    const std::set<TermId> uniq(gold[u].begin(), gold[u].end());
    for (auto id : uniq) {
      if (!bank.contains(id)) throw ProtocolError("gold term " + std::to_string(id) + " is not in the bank");
    }
    std::set<TermId> top;
    const auto& e = results[u].entries;
    for (std::size_t r = 0; r < std::min(k, e.size()); ++r) top.insert(e[r].term_id);
    std::size_t h = 0;
    for (auto id : uniq) h += top.count(id);
    rc.hits += h;
    rc.gold += uniq.size();
    if (!uniq.empty()) {
      macro_sum += static_cast<double>(h) / static_cast<double>(uniq.size());
      ++macro_n;
    }
  }
  if (macro) {
    rc.percent = macro_n ? 100.0 * macro_sum / static_cast<double>(macro_n) : 0.0;
  } else {
    rc.percent = rc.gold ? 100.0 * static_cast<double>(rc.hits) / static_cast<double>(rc.gold) : 0.0;
  }
  return rc;
}

double recall_at_k(const std::vector<RetrievalResult>& results, const std::vector<std::vector<TermId>>& gold,
                   const TermBank& bank, std::size_t k, bool macro) {
  return recall_count(results, gold, bank, k, macro).percent;
}

RecallReport make_report(const std::string& label, const std::string& scorer,
                         const std::vector<RetrievalResult>& results, const std::vector<std::vector<TermId>>& gold,
                         const TermBank& bank, const std::vector<std::size_t>& ks, bool macro) {
  RecallReport r;
  r.label = label;
  r.scorer = scorer;
  r.ks = ks;
  r.n_utterances = results.size();
  for (auto k : ks) {
    const auto rc = recall_count(results, gold, bank, k, macro);
    r.recall.push_back(rc.percent);
    r.hits.push_back(rc.hits);
    r.n_gold = rc.gold;
  }
  return r;
}

EvalSet make_eval_set(const Corpus& corpus, const std::string& split, const TermBank& bank) {
  EvalSet set;
  for (auto i : corpus.split_indices(split)) {
    set.speech.push_back(&corpus.features[i]);
    set.gold.push_back(gold_terms(corpus.utterances[i].token_ids, bank));
  }
  return set;
}

namespace {
std::size_t max_k(const std::vector<std::size_t>& ks) {
  if (ks.empty()) throw std::invalid_argument("no k values requested");
  return *std::max_element(ks.begin(), ks.end());
}
}  // namespace

RecallReport evaluate_a2p(const RetrieverParams& params, const ServingBank& bank, const EvalSet& set,
                          const std::vector<std::size_t>& ks, const std::string& label,
                          const ServingOptions& options, bool macro) {
  const std::size_t k = max_k(ks);
  std::vector<RetrievalResult> results;
  results.reserve(set.speech.size());
  for (const auto* sp : set.speech) results.push_back(retrieve(params, bank, *sp, k, options));
  return make_report(label, "a2p", results, set.gold, bank.bank, ks, macro);
}

RecallReport evaluate_cosine(const DenseIndex& index, const TermBank& bank, const EvalSet& set,
                             const std::vector<std::size_t>& ks, const std::string& label, bool macro) {
  const std::size_t k = max_k(ks);
  std::vector<RetrievalResult> results;
  results.reserve(set.speech.size());
  for (const auto* sp : set.speech) results.push_back(cosine_retrieve(index, *sp, k));
  return make_report(label, "cosine", results, set.gold, bank, ks, macro);
}

// ---------------------------------------------------------------------------

std::vector<SweepPoint> sweep_bank_size(const RetrieverParams& params, const ToyEncoder& encoder,
                                        const TermBank& base_bank, const TermBank& distractor_pool,
                                        const EvalSet& set, const std::vector<std::size_t>& sizes, std::size_t k,
                                        const std::vector<std::uint64_t>& seeds, const ServingOptions& options) {
  for (const auto& g : set.gold)
    for (auto id : g)
      if (distractor_pool.contains(id)) throw ProtocolError("distractor pool contains gold term " + std::to_string(id));
  for (const auto& e : distractor_pool.entries()) {
    if (base_bank.index_of(e.token_ids)) {
      throw ProtocolError("distractor '" + e.src + "' duplicates a base bank term");
    }
  }
  std::vector<SweepPoint> out;
  // Prepared features for the base and the pool are reused across sizes.
  const auto base_serving = make_serving_bank(params, encoder, base_bank);
  const auto pool_serving = make_serving_bank(params, encoder, distractor_pool);
  for (auto seed : seeds) {
    std::vector<std::size_t> order(distractor_pool.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "eval/sweep");
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng, 0, i - 1))]);
    for (auto m : sizes) {
      if (m < base_bank.size()) {
        throw std::invalid_argument("sweep size " + std::to_string(m) + " is below the base bank size");
      }
      const std::size_t extra = m - base_bank.size();
      if (extra > distractor_pool.size()) {
        throw CapacityError("sweep size " + std::to_string(m) + " needs " + std::to_string(extra) +
                            " distractors but the pool holds " + std::to_string(distractor_pool.size()));
      }
      ServingBank sb = *base_serving;
      for (std::size_t i = 0; i < extra; ++i) {
        const auto j = order[i];
        sb.bank.add(distractor_pool.at(j));
        sb.features.push_back(pool_serving->features[j]);
        sb.prepared.term_ids.push_back(pool_serving->prepared.term_ids[j]);
        sb.prepared.queries.push_back(pool_serving->prepared.queries[j]);
        sb.prepared.term_logit.push_back(pool_serving->prepared.term_logit[j]);
      }
      const auto index = build_dense_index(sb.bank, sb.features);
      const std::vector<std::size_t> ks{k};
      out.push_back({"a2p", m, seed, evaluate_a2p(params, sb, set, ks, "a2p", options).recall[0]});
      out.push_back({"cosine", m, seed, evaluate_cosine(index, sb.bank, set, ks).recall[0]});
    }
  }
  return out;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "scorer,bank_size,seed,recall\n" << std::fixed << std::setprecision(4);
  for (const auto& p : points) out << p.scorer << ',' << p.bank_size << ',' << p.seed << ',' << p.recall << '\n';
}

// ---------------------------------------------------------------------------

std::string_view arm_name(AblationArm arm) {
  switch (arm) {
    case AblationArm::FullA2P: return "full";
    case AblationArm::NoPooling: return "nopool";
    case AblationArm::RealTermOnly: return "realonly";
    case AblationArm::PhraseOnly: return "phrase";
    case AblationArm::WordOnly: return "word";
  }
  return "?";
}

AblationArm parse_arm(std::string_view name) {
  for (auto a : {AblationArm::FullA2P, AblationArm::NoPooling, AblationArm::RealTermOnly, AblationArm::PhraseOnly,
                 AblationArm::WordOnly})
    if (arm_name(a) == name) return a;
  throw std::invalid_argument("unknown ablation arm '" + std::string(name) +
                              "' (expected full, nopool, realonly, phrase or word)");
}

void configure_arm(AblationArm arm, std::size_t total_steps, TrainingConfig& cfg, CurriculumOptions& options) {
  switch (arm) {
    case AblationArm::FullA2P:
    case AblationArm::NoPooling:
      if (cfg.stage_schedule.empty()) cfg.stage_schedule = default_schedule(total_steps);
      options.token_pooling = arm == AblationArm::FullA2P;
      break;
    case AblationArm::RealTermOnly:
      cfg.stage_schedule = {{CurriculumStage::RealTerm, total_steps}};
      break;
    case AblationArm::PhraseOnly:
      cfg.stage_schedule = {{CurriculumStage::Phrase, total_steps}};
      break;
    case AblationArm::WordOnly:
      cfg.stage_schedule = {{CurriculumStage::Word, total_steps}};
      break;
  }
}

std::vector<AblationRow> run_ablations(const Corpus& corpus, const TrainingConfig& base_cfg,
                                       const CurriculumOptions& base_options, std::size_t total_steps,
                                       const std::vector<AblationArm>& arms, const std::vector<std::size_t>& ks,
                                       const ServingOptions& serving) {
  const ToyEncoder encoder(corpus.encoder);
  const EvalSet test = make_eval_set(corpus, "test", corpus.bank);
  std::vector<AblationRow> rows;
  for (auto arm : arms) {
    AblationRow row;
    row.arm = arm;
    TrainingConfig cfg = base_cfg;
    cfg.stage_schedule.clear();
    CurriculumOptions opts = base_options;
    opts.token_pooling = true;
    configure_arm(arm, total_steps, cfg, opts);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto res = run_curriculum(corpus, cfg, opts);
      row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (res.diverged) {
        row.message = res.message;
      } else {
        const auto sb = make_serving_bank(res.params, encoder, corpus.bank);
        row.report = evaluate_a2p(res.params, *sb, test, ks, std::string(arm_name(arm)), serving);
        row.ok = true;
      }
    } catch (const std::exception& e) {
      row.message = e.what();
    }
    if (!row.ok) std::cerr << "ablation arm " << arm_name(arm) << " failed: " << row.message << "\n";
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------

void write_reports_csv(const std::filesystem::path& path, const std::vector<RecallReport>& reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "label,scorer,k,recall,hits,n_gold,n_utterances\n" << std::fixed << std::setprecision(4);
  for (const auto& r : reports)
    for (std::size_t i = 0; i < r.ks.size(); ++i)
      out << r.label << ',' << r.scorer << ',' << r.ks[i] << ',' << r.recall[i] << ',' << r.hits[i] << ','
          << r.n_gold << ',' << r.n_utterances << '\n';
}

std::string reports_markdown(const std::vector<RecallReport>& reports) {
  std::ostringstream md;
  if (reports.empty()) return "";
  const auto& ks = reports.front().ks;
  md << "| Setting |";
  for (auto k : ks) md << " k=" << k << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < ks.size(); ++i) md << "---|";
  md << '\n' << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    md << "| " << r.label << " |";
    for (auto v : r.recall) md << ' ' << v << " |";
    md << '\n';
  }
  return md.str();
}

void write_ablation_tables(const std::filesystem::path& dir, const std::vector<AblationRow>& rows) {
  std::filesystem::create_directories(dir);
  std::vector<RecallReport> ok;
  std::ofstream csv(dir / "ablation.csv");
  csv << "arm,status,k,recall,train_seconds,message\n" << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    if (r.ok) {
      ok.push_back(r.report);
      for (std::size_t i = 0; i < r.report.ks.size(); ++i)
        csv << arm_name(r.arm) << ",ok," << r.report.ks[i] << ',' << r.report.recall[i] << ',' << r.train_seconds
            << ",\n";
    } else {
      csv << arm_name(r.arm) << ",failed,,," << r.train_seconds << ",\"" << r.message << "\"\n";
    }
  }
  std::ofstream md(dir / "ablation.md");
  md << reports_markdown(ok);
  for (const auto& r : rows)
    if (!r.ok) md << "| " << arm_name(r.arm) << " | failed: " << r.message << " |\n";
}

}  // namespace termprob
