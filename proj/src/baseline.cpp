// SPDX-License-Identifier: Apache-2.0

#include "termprob/baseline.hpp"

#include <chrono>
#include <cmath>

namespace termprob {

namespace {
using Clock = std::chrono::steady_clock;
double ms_since(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}
}  // namespace

std::vector<float> embed_for_index(const Tensor2& features, const Mask& mask) {
  if (mask.size() != features.rows()) {
    throw DimensionError("embed_for_index: mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(features.rows()) + " rows");
  }
  const std::size_t d = features.cols();
  std::vector<double> acc(d, 0.0);
  std::size_t n = 0;
  for (std::size_t r = 0; r < features.rows(); ++r) {
    if (!mask[r]) continue;
    ++n;
    for (std::size_t k = 0; k < d; ++k) acc[k] += features(r, k);
  }
  if (n == 0) throw DegenerateMaskError("embed_for_index: no valid rows");
  double norm = 0.0;
  for (auto& x : acc) {
    x /= static_cast<double>(n);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw DegenerateEmbeddingError("embed_for_index: pooled vector has zero norm");
  std::vector<float> out(d);
  for (std::size_t k = 0; k < d; ++k) out[k] = static_cast<float>(acc[k] / norm);
  return out;
}

DenseIndex build_dense_index(const TermBank& bank, const std::vector<TermFeatures>& features) {
  if (features.size() != bank.size()) {
    throw DimensionError("build_dense_index: " + std::to_string(features.size()) + " feature sets for " +
                         std::to_string(bank.size()) + " terms");
  }
  DenseIndex idx;
  const std::size_t d = features.empty() ? 0 : features.front().tokens.cols();
  idx.vectors = Tensor2(bank.size(), d);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto v = embed_for_index(features[i].tokens, features[i].token_mask);
    std::copy(v.begin(), v.end(), idx.vectors.row(i).begin());
    idx.entries.push_back(bank.at(i));
    idx.term_ids.push_back(bank.at(i).term_id);
  }
  return idx;
}

DenseIndex build_dense_index(const TermBank& bank, const ToyEncoder& encoder) {
  std::vector<TermFeatures> feats;
  feats.reserve(bank.size());
  for (const auto& e : bank.entries()) feats.push_back(encoder.embed_term(e));
  return build_dense_index(bank, feats);
}

RetrievalResult cosine_retrieve(const DenseIndex& index, const SpeechFeatures& speech, std::size_t k) {
  if (index.size() == 0) throw std::invalid_argument("cosine_retrieve: empty index");
  if (k < 1) throw std::invalid_argument("cosine_retrieve: k must be >= 1");
  RetrievalResult res;
  res.scorer = "cosine";
  res.scores_are_similarities = true;

  const auto t0 = Clock::now();
  const auto q = embed_for_index(speech.frames, speech.frame_mask);
  if (q.size() != index.vectors.cols()) {
    throw DimensionError("cosine_retrieve: query dim " + std::to_string(q.size()) + " vs index dim " +
                         std::to_string(index.vectors.cols()));
  }
  const auto t1 = Clock::now();
  std::vector<float> scores(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto row = index.vectors.row(i);
    double s = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) s += static_cast<double>(row[c]) * q[c];
    scores[i] = static_cast<float>(s);
  }
  const auto t2 = Clock::now();
  const auto top = top_k_select(scores, k, index.term_ids);
  const auto t3 = Clock::now();

  res.entries.reserve(top.size());
  for (std::size_t r = 0; r < top.size(); ++r) {
    const auto& e = index.entries[top[r]];
    res.entries.push_back({e.term_id, e.src, e.tgt, scores[top[r]], r + 1});
  }
  res.timing = {ms_since(t0, t1), ms_since(t1, t2), ms_since(t2, t3), ms_since(t0, t3)};
  return res;
}

}  // namespace termprob
