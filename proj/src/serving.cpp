// SPDX-License-Identifier: Apache-2.0

#include "termprob/serving.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "termprob/baseline.hpp"

namespace termprob {

namespace {
using Clock = std::chrono::steady_clock;
double ms_since(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}
}  // namespace

std::vector<std::size_t> top_k_select(std::span<const float> scores, std::size_t k, std::span<const TermId> keys) {
  if (k < 1) throw std::invalid_argument("top_k_select: k must be >= 1");
  if (!keys.empty() && keys.size() != scores.size()) {
    throw DimensionError("top_k_select: " + std::to_string(keys.size()) + " keys for " +
                         std::to_string(scores.size()) + " scores");
  }
  auto key = [&](std::size_t i) -> std::uint64_t { return keys.empty() ? i : keys[i]; };
  // `better(a, b)`: a ranks ahead of b.
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return key(a) < key(b);
  };
  const std::size_t m = scores.size();
  const std::size_t kk = std::min(k, m);
  std::vector<std::size_t> heap;
  heap.reserve(kk);
  // With `better` as the comparator the heap top is the worst kept entry.
  for (std::size_t i = 0; i < m; ++i) {
    if (heap.size() < kk) {
      heap.push_back(i);
      std::push_heap(heap.begin(), heap.end(), better);
    } else if (better(i, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), better);
      heap.back() = i;
      std::push_heap(heap.begin(), heap.end(), better);
    }
  }
  std::sort_heap(heap.begin(), heap.end(), better);
  return heap;
}

std::shared_ptr<const ServingBank> make_serving_bank(const RetrieverParams& params, const ToyEncoder& encoder,
                                                     TermBank bank) {
  if (bank.empty()) throw std::invalid_argument("make_serving_bank: empty bank");
  auto sb = std::make_shared<ServingBank>();
  sb->features.reserve(bank.size());
  for (const auto& e : bank.entries()) sb->features.push_back(encoder.embed_term(e));
  sb->prepared = prepare_bank(params, sb->features);
  sb->bank = std::move(bank);
  return sb;
}

BankRegistry::BankRegistry(std::shared_ptr<const ServingBank> initial) { swap(std::move(initial)); }

std::shared_ptr<const ServingBank> BankRegistry::current() const {
  std::lock_guard lock(mu_);
  return bank_;
}

std::uint64_t BankRegistry::swap(std::shared_ptr<const ServingBank> next) {
  if (!next) throw std::invalid_argument("BankRegistry::swap: null bank");
  auto copy = std::make_shared<ServingBank>(*next);
  std::lock_guard lock(mu_);
  copy->version = next_version_++;
  bank_ = std::move(copy);
  return bank_->version;
}

RetrievalResult retrieve(const RetrieverParams& params, const ServingBank& bank, const SpeechFeatures& speech,
                         std::size_t k, const ServingOptions& options) {
  if (k < 1) throw std::invalid_argument("retrieve: k must be >= 1");
  if (bank.bank.empty()) throw std::invalid_argument("retrieve: empty bank");
  RetrievalResult res;
  const auto t0 = Clock::now();
  const auto prepared = prepare_speech(params, speech);
  const auto t1 = Clock::now();
  const auto probs =
      score_prepared(params, bank.prepared, prepared, options.score_batch, options.pooling_epsilon);
  const auto t2 = Clock::now();
  const auto top = top_k_select(probs, k, bank.prepared.term_ids);
  const auto t3 = Clock::now();

  res.entries.reserve(top.size());
  for (std::size_t r = 0; r < top.size(); ++r) {
    const auto& e = bank.bank.at(top[r]);
    res.entries.push_back({e.term_id, e.src, e.tgt, probs[top[r]], r + 1});
  }
  res.timing = {ms_since(t0, t1), ms_since(t1, t2), ms_since(t2, t3), ms_since(t0, t3)};
  return res;
}

// ---------------------------------------------------------------------------

PromptTask parse_prompt_task(std::string_view name) {
  if (name == "asr") return PromptTask::Transcribe;
  if (name == "st") return PromptTask::Translate;
  throw std::invalid_argument("unknown prompt task '" + std::string(name) + "' (expected asr or st)");
}

std::string build_prompt(const PromptTemplate& tmpl, PromptTask task, const RetrievalResult& retrieved) {
  std::string out = "This is an " + tmpl.source_language + " audio recording. ";
  if (task == PromptTask::Transcribe) {
    out += "Please transcribe this audio into " + tmpl.source_language + " text.";
  } else {
    out += "Please translate this audio into " + tmpl.target_language + " text.";
  }
  if (retrieved.entries.empty()) return out;
  out += " Specialized terminology may appear in the audio. Please accurately recognize these terms. "
         "Potential technical terms include: ";
  for (std::size_t i = 0; i < retrieved.entries.size(); ++i) {
    const auto& e = retrieved.entries[i];
    if (i) out += ", ";
    out += e.src;
    if (task == PromptTask::Translate && tmpl.st_term_pairs) out += "→" + e.tgt;
  }
  out += '.';
  return out;
}

// ---------------------------------------------------------------------------

namespace {

double p95(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(v.size()))) - 1;
  return v[std::min(idx, v.size() - 1)];
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

LatencyRow summarize(const std::string& scorer, std::size_t m, const std::vector<StageTiming>& t) {
  std::vector<double> f, s, k, tot;
  for (const auto& x : t) {
    f.push_back(x.feature_ms);
    s.push_back(x.scoring_ms);
    k.push_back(x.topk_ms);
    tot.push_back(x.total_ms);
  }
  LatencyRow r;
  r.scorer = scorer;
  r.bank_size = m;
  r.queries = t.size();
  r.feature_ms = mean(f);
  r.scoring_ms = mean(s);
  r.topk_ms = mean(k);
  r.total_ms = mean(tot);
  r.p95_scoring_ms = p95(s);
  r.p95_topk_ms = p95(k);
  r.p95_total_ms = p95(tot);
  r.topk_share = r.total_ms > 0.0 ? r.topk_ms / r.total_ms : 0.0;
  return r;
}

}  // namespace

std::vector<LatencyRow> bench_latency(const RetrieverParams& params, const ToyEncoder& encoder,
                                      const TermBank& full_bank, const std::vector<std::size_t>& bank_sizes,
                                      const std::vector<const SpeechFeatures*>& speech, std::size_t queries,
                                      std::size_t k, std::size_t warmup, const ServingOptions& options) {
  if (speech.empty()) throw std::invalid_argument("bench_latency: no utterances");
  if (queries < 30) throw std::invalid_argument("bench_latency: need at least 30 timed queries");
  struct Arm {
    std::shared_ptr<const ServingBank> serving;
    DenseIndex index;
    std::vector<StageTiming> a2p, cos;
  };
  std::vector<Arm> arms;
  for (std::size_t m : bank_sizes) {
    if (m == 0 || m > full_bank.size()) {
      throw CapacityError("bench_latency: bank size " + std::to_string(m) + " exceeds the " +
                          std::to_string(full_bank.size()) + " available terms");
    }
    TermBank bank;
    for (std::size_t i = 0; i < m; ++i) bank.add(full_bank.at(i));
    auto serving = make_serving_bank(params, encoder, bank);
    auto index = build_dense_index(bank, serving->features);
    arms.push_back({std::move(serving), std::move(index), {}, {}});
  }
  // Sizes are interleaved query by query so machine-speed drift during the
  // run lands on every size alike instead of bending the size curve.
  for (std::size_t q = 0; q < warmup + queries; ++q) {
    const auto& sp = *speech[q % speech.size()];
    for (auto& arm : arms) {
      const auto r1 = retrieve(params, *arm.serving, sp, k, options);
      const auto r2 = cosine_retrieve(arm.index, sp, k);
      if (q >= warmup) {
        arm.a2p.push_back(r1.timing);
        arm.cos.push_back(r2.timing);
      }
    }
  }
  std::vector<LatencyRow> rows;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    rows.push_back(summarize("a2p", bank_sizes[i], arms[i].a2p));
    rows.push_back(summarize("cosine", bank_sizes[i], arms[i].cos));
  }
  return rows;
}

void write_latency_csv(const std::filesystem::path& path, const std::vector<LatencyRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "scorer,bank_size,queries,feature_ms,scoring_ms,topk_ms,total_ms,p95_scoring_ms,p95_topk_ms,"
         "p95_total_ms,topk_share\n";
  out.precision(6);
  for (const auto& r : rows) {
    out << r.scorer << ',' << r.bank_size << ',' << r.queries << ',' << r.feature_ms << ',' << r.scoring_ms << ','
        << r.topk_ms << ',' << r.total_ms << ',' << r.p95_scoring_ms << ',' << r.p95_topk_ms << ','
        << r.p95_total_ms << ',' << r.topk_share << '\n';
  }
}

}  // namespace termprob
