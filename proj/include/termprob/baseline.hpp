// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "termprob/corpus.hpp"
#include "termprob/serving.hpp"

namespace termprob {

class DegenerateEmbeddingError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Masked mean over valid rows, L2-normalized.
std::vector<float> embed_for_index(const Tensor2& features, const Mask& mask);

// Exhaustive cosine index over mean-pooled term embeddings.
struct DenseIndex {
  std::vector<TermEntry> entries;
  std::vector<TermId> term_ids;
  Tensor2 vectors;  // m x d, unit rows

  std::size_t size() const { return entries.size(); }
};

DenseIndex build_dense_index(const TermBank& bank, const std::vector<TermFeatures>& features);
DenseIndex build_dense_index(const TermBank& bank, const ToyEncoder& encoder);

// Scores are cosine similarities; the result is flagged accordingly.
RetrievalResult cosine_retrieve(const DenseIndex& index, const SpeechFeatures& speech, std::size_t k);

}  // namespace termprob
