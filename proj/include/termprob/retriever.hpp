// SPDX-License-Identifier: Apache-2.0
//
// Single-layer cross-attention presence scorer. Term tokens are the queries,
// speech frames the keys and values. Per-token attention outputs are masked,
// summed over the term length and divided by (valid tokens + eps); the mean
// term embedding is added back as a residual and a linear head plus sigmoid
// gives the presence probability.

#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "termprob/corpus.hpp"
#include "termprob/rng.hpp"
#include "termprob/tensor.hpp"

namespace termprob {

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ScoreMode { Train, Infer };

struct ModelShape {
  std::size_t dim = 64;
  std::size_t heads = 8;
};

template <typename T>
struct BasicRetrieverParams {
  std::size_t dim = 0;
  std::size_t heads = 1;
  double dropout_p = 0.1;
  // false = pooling ablation: the head scores each raw token row and the
  // logits are averaged; no masked sum, no residual.
  bool token_pooling = true;

  BasicTensor2<T> wq, wk, wv, wo;  // d x d, applied as x * W
  BasicTensor2<T> bq, bk, bv, bo;  // 1 x d
  BasicTensor2<T> head_w;          // 1 x d
  BasicTensor2<T> head_b;          // 1 x 1

  std::size_t head_dim() const { return dim / heads; }

  template <typename F>
  void visit(F&& f) {
    f("wq", wq); f("wk", wk); f("wv", wv); f("wo", wo);
    f("bq", bq); f("bk", bk); f("bv", bv); f("bo", bo);
    f("head_w", head_w); f("head_b", head_b);
  }
  template <typename F>
  void visit(F&& f) const {
    f("wq", wq); f("wk", wk); f("wv", wv); f("wo", wo);
    f("bq", bq); f("bk", bk); f("bv", bv); f("bo", bo);
    f("head_w", head_w); f("head_b", head_b);
  }

  // Zero tensors with this parameter set's shapes, for gradient buffers.
  BasicRetrieverParams zeros_like() const {
    BasicRetrieverParams z = *this;
    z.visit([](const char*, BasicTensor2<T>& t) { t.fill(T(0)); });
    return z;
  }

  template <typename U>
  BasicRetrieverParams<U> cast() const {
    BasicRetrieverParams<U> out;
    out.dim = dim;
    out.heads = heads;
    out.dropout_p = dropout_p;
    out.token_pooling = token_pooling;
    out.wq = wq.template cast<U>(); out.wk = wk.template cast<U>();
    out.wv = wv.template cast<U>(); out.wo = wo.template cast<U>();
    out.bq = bq.template cast<U>(); out.bk = bk.template cast<U>();
    out.bv = bv.template cast<U>(); out.bo = bo.template cast<U>();
    out.head_w = head_w.template cast<U>(); out.head_b = head_b.template cast<U>();
    return out;
  }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw ConfigError("retriever dim " + std::to_string(dim) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    auto expect = [](const char* name, const BasicTensor2<T>& t, std::size_t r, std::size_t c) {
      if (t.rows() != r || t.cols() != c) {
        throw ConfigError(std::string("parameter ") + name + " has shape " + t.shape() +
                          ", expected " + BasicTensor2<T>::shape_string(r, c));
      }
    };
    expect("wq", wq, dim, dim); expect("wk", wk, dim, dim);
    expect("wv", wv, dim, dim); expect("wo", wo, dim, dim);
    expect("bq", bq, 1, dim); expect("bk", bk, 1, dim);
    expect("bv", bv, 1, dim); expect("bo", bo, 1, dim);
    expect("head_w", head_w, 1, dim); expect("head_b", head_b, 1, 1);
  }
};

using RetrieverParams = BasicRetrieverParams<float>;

// Projections ~ U(-1/sqrt(d), 1/sqrt(d)), biases and head zero. With
// `tie_query_key` the key projection starts as a copy of the query projection.
RetrieverParams init_params(std::size_t dim, std::size_t heads, double dropout_p,
                            std::uint64_t seed, bool tie_query_key = true);

// Inverted-dropout keep decision for attention entry (head, query row, key
// column) of one scored pair. Depends only on its arguments.
inline bool dropout_keep(std::uint64_t pair_seed, double p, std::size_t head, std::size_t row,
                         std::size_t col) {
  if (p <= 0.0) return true;
  return hashed_uniform(pair_seed, head, (std::uint64_t{row} << 32) | col) >= p;
}

template <typename T>
struct BasicScoreTrace {
  std::vector<BasicTensor2<T>> attention;  // per head, L x T, post-softmax, pre-dropout
  BasicTensor2<T> s_attn;                  // L x d
  BasicTensor2<T> s_masked;                // L x d
  BasicTensor2<T> s_sum;                   // 1 x d
  T m_sum = T(0);
  BasicTensor2<T> s_pooled;  // 1 x d
  BasicTensor2<T> residual;  // 1 x d, mean of the valid term tokens
  BasicTensor2<T> s_final;   // 1 x d
  T logit = T(0);
  T prob = T(0);
};

using ScoreTrace = BasicScoreTrace<float>;

// Reference forward pass, written operation by operation with the tensor
// kernels. `dropout_seed` is required in Train mode.
template <typename T>
BasicScoreTrace<T> score_term(const BasicRetrieverParams<T>& params,
                              const BasicTensor2<T>& frames, const Mask& frame_mask,
                              const BasicTensor2<T>& tokens, const Mask& token_mask,
                              double pooling_epsilon, ScoreMode mode,
                              std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  const std::size_t d = params.dim, H = params.heads, dh = params.head_dim();
  if (frames.cols() != d || tokens.cols() != d) {
    throw DimensionError("score_term: feature dims " + frames.shape() + " / " + tokens.shape() +
                         " do not match model dim " + std::to_string(d));
  }
  if (frame_mask.size() != frames.rows() || token_mask.size() != tokens.rows()) {
    throw DimensionError("score_term: mask length does not match feature rows");
  }
  const std::size_t n_frames = count_valid(frame_mask), n_tokens = count_valid(token_mask);
  if (n_frames == 0) throw DegenerateInputError("score_term: every speech frame is masked");
  if (n_tokens == 0) throw DegenerateInputError("score_term: every term token is masked");
  if (mode == ScoreMode::Train && params.dropout_p > 0.0 && !dropout_seed) {
    throw std::invalid_argument("score_term: train mode needs a dropout seed");
  }
  const bool drop = mode == ScoreMode::Train && params.dropout_p > 0.0;
  const double keep_scale = drop ? 1.0 / (1.0 - params.dropout_p) : 1.0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto q = matmul(tokens, params.wq);
  add_row_bias(q, params.bq);
  auto k = matmul(frames, params.wk);
  add_row_bias(k, params.bk);
  auto v = matmul(frames, params.wv);
  add_row_bias(v, params.bv);

  const std::size_t L = tokens.rows(), Tn = frames.rows();
  BasicScoreTrace<T> tr;
  BasicTensor2<T> concat(L, d);
  for (std::size_t h = 0; h < H; ++h) {
    BasicTensor2<T> qh(L, dh), kh(Tn, dh), vh(Tn, dh);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t c = 0; c < dh; ++c) qh(i, c) = q(i, h * dh + c);
    for (std::size_t j = 0; j < Tn; ++j)
      for (std::size_t c = 0; c < dh; ++c) {
        kh(j, c) = k(j, h * dh + c);
        vh(j, c) = v(j, h * dh + c);
      }
    auto scores = matmul(qh, transpose(kh));
    for (auto& s : scores.data()) s = static_cast<T>(s * scale);
    auto attn = masked_softmax_rows(scores, frame_mask);
    auto dropped = attn;
    if (drop) {
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < Tn; ++j)
          dropped(i, j) = dropout_keep(*dropout_seed, params.dropout_p, h, i, j)
                              ? static_cast<T>(attn(i, j) * keep_scale)
                              : T(0);
    }
    auto oh = matmul(dropped, vh);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t c = 0; c < dh; ++c) concat(i, h * dh + c) = oh(i, c);
    tr.attention.push_back(std::move(attn));
  }
  tr.s_attn = matmul(concat, params.wo);
  add_row_bias(tr.s_attn, params.bo);

  tr.s_masked = tr.s_attn;
  for (std::size_t i = 0; i < L; ++i)
    if (!token_mask[i])
      for (auto& x : tr.s_masked.row(i)) x = T(0);

  tr.s_sum = BasicTensor2<T>(1, d);
  tr.residual = BasicTensor2<T>(1, d);
  for (std::size_t c = 0; c < d; ++c) {
    double s = 0.0, r = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      s += tr.s_masked(i, c);
      if (token_mask[i]) r += tokens(i, c);
    }
    tr.s_sum(0, c) = static_cast<T>(s);
    tr.residual(0, c) = static_cast<T>(r / static_cast<double>(n_tokens));
  }
  tr.m_sum = static_cast<T>(n_tokens);
  tr.s_pooled = BasicTensor2<T>(1, d);
  tr.s_final = BasicTensor2<T>(1, d);
  for (std::size_t c = 0; c < d; ++c) {
    tr.s_pooled(0, c) = static_cast<T>(tr.s_sum(0, c) / (static_cast<double>(tr.m_sum) + pooling_epsilon));
    tr.s_final(0, c) = tr.residual(0, c) + tr.s_pooled(0, c);
  }

  double logit = 0.0;
  if (params.token_pooling) {
    for (std::size_t c = 0; c < d; ++c) logit += static_cast<double>(params.head_w(0, c)) * tr.s_final(0, c);
    logit += params.head_b(0, 0);
  } else {
    for (std::size_t i = 0; i < L; ++i) {
      if (!token_mask[i]) continue;
      double row = params.head_b(0, 0);
      for (std::size_t c = 0; c < d; ++c) row += static_cast<double>(params.head_w(0, c)) * tr.s_attn(i, c);
      logit += row;
    }
    logit /= static_cast<double>(n_tokens);
  }
  tr.logit = static_cast<T>(logit);
  tr.prob = sigmoid(tr.logit);
  return tr;
}

ScoreTrace score_term(const RetrieverParams& params, const SpeechFeatures& speech,
                      const TermFeatures& term, double pooling_epsilon, ScoreMode mode,
                      std::optional<std::uint64_t> dropout_seed = std::nullopt);

// Term-side work that does not depend on the utterance: per-token query
// projections and the residual part of the logit.
struct PreparedBank {
  std::vector<TermId> term_ids;
  std::vector<Tensor2> queries;     // L_i x d, valid rows only
  std::vector<double> term_logit;   // head_w . mean(tokens) + head_b (pooled), head_b (ablation)
  std::size_t dim = 0;
  std::size_t size() const { return term_ids.size(); }
};

PreparedBank prepare_bank(const RetrieverParams& params, const std::vector<TermFeatures>& terms);

// Utterance-side work shared by every term: keys and per-head value readouts.
struct PreparedSpeech {
  Tensor2 keys;                         // T x d, valid frames only
  std::vector<std::vector<double>> readout;  // [head][frame] = (Wo head_w)_h . v_h
  double bias_readout = 0.0;            // head_w . bo
};

PreparedSpeech prepare_speech(const RetrieverParams& params, const SpeechFeatures& speech);

// Presence probabilities for every prepared term, processed `batch` terms at
// a time. Terms inside a batch are padded to the longest one and masked.
std::vector<float> score_prepared(const RetrieverParams& params, const PreparedBank& bank,
                                  const PreparedSpeech& speech, std::size_t batch,
                                  double pooling_epsilon);

std::vector<float> score_bank(const RetrieverParams& params, const SpeechFeatures& speech,
                              const std::vector<TermFeatures>& terms, std::size_t batch,
                              double pooling_epsilon);

// Checkpoint container: "A2PC" | u32 header length | JSON header | per tensor
// (u64 byte length | f32 LE payload) in header order.
void save_checkpoint(const std::filesystem::path& path, const RetrieverParams& params);
RetrieverParams load_checkpoint(const std::filesystem::path& path,
                                std::optional<ModelShape> expected = std::nullopt);

}  // namespace termprob
