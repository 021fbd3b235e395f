// SPDX-License-Identifier: Apache-2.0

#include "termprob/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace termprob {

// ---------------------------------------------------------------------------
// config

std::vector<StageBudget> default_schedule(std::size_t total_steps) {
  const auto word = static_cast<std::size_t>(std::llround(0.3 * static_cast<double>(total_steps)));
  const auto phrase = static_cast<std::size_t>(std::llround(0.3 * static_cast<double>(total_steps)));
  return {{CurriculumStage::Word, word},
          {CurriculumStage::Phrase, phrase},
          {CurriculumStage::RealTerm, total_steps - word - phrase}};
}

std::vector<StageBudget> TrainingConfig::resolved_schedule(std::size_t train_utterances) const {
  if (!stage_schedule.empty()) return stage_schedule;
  const std::size_t per_epoch = (train_utterances + batch_size - 1) / std::max<std::size_t>(batch_size, 1);
  return default_schedule(max_epochs * std::max<std::size_t>(per_epoch, 1));
}

void TrainingConfig::validate() const {
  if (batch_size == 0 || max_bank_per_batch == 0) {
    throw std::invalid_argument("batch_size and max_bank_per_batch must be positive");
  }
  if (!(init_lr > 0.0) || init_lr > peak_lr) throw std::invalid_argument("need 0 < init_lr <= peak_lr");
  if (warmup_steps < 1) throw std::invalid_argument("warmup_steps must be >= 1");
  // Stages must appear in curriculum order; skipped stages are fine.
  int last = -1;
  for (const auto& s : stage_schedule) {
    const int rank = static_cast<int>(s.stage);
    if (rank <= last) {
      throw std::invalid_argument("stage_schedule must run word -> phrase -> real without repeats");
    }
    last = rank;
  }
}

// ---------------------------------------------------------------------------
// loss

LossResult dual_bce_loss(const std::vector<double>& probs, const std::vector<std::uint8_t>& labels) {
  if (probs.size() != labels.size()) {
    throw DimensionError("dual_bce_loss: " + std::to_string(probs.size()) + " probabilities vs " +
                         std::to_string(labels.size()) + " labels");
  }
  LossResult r;
  for (auto y : labels) (y ? r.positives : r.negatives)++;
  if (r.positives == 0 || r.negatives == 0) {
    throw BatchCompositionError("dual_bce_loss: batch has " + std::to_string(r.positives) +
                                " positives and " + std::to_string(r.negatives) +
                                " negatives; both groups are required");
  }
  constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
  double pos = 0.0, neg = 0.0;
  r.dlogit.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kLo, kHi);
    if (labels[i]) {
      pos -= std::log(p);
      r.dlogit[i] = (probs[i] - 1.0) / static_cast<double>(r.positives);
    } else {
      neg -= std::log(1.0 - p);
      r.dlogit[i] = probs[i] / static_cast<double>(r.negatives);
    }
  }
  r.loss = pos / static_cast<double>(r.positives) + neg / static_cast<double>(r.negatives);
  return r;
}

// ---------------------------------------------------------------------------
// batches

std::vector<TrainingPair> Batch::pairs() const {
  std::vector<TrainingPair> out;
  out.reserve(labels.size());
  for (std::size_t u = 0; u < utterances.size(); ++u)
    for (std::size_t c = 0; c < candidates.size(); ++c)
      out.push_back({utterances[u], c, labels[u * candidates.size() + c]});
  return out;
}

Batch build_batch(const Corpus& corpus, const std::vector<std::size_t>& utterances,
                  CurriculumStage stage, const TrainingConfig& cfg, Rng& rng) {
  if (utterances.empty()) throw std::invalid_argument("build_batch: no utterances for this stage");
  Batch b;
  b.stage = stage;
  std::vector<TokenSeq> positives;
  for (auto idx : utterances) {
    const auto& utt = corpus.utterances.at(idx);
    auto sampled = sample_stage_terms(utt, corpus.train_terms, stage, rng);
    if (!sampled) continue;
    b.utterances.push_back(idx);
    for (auto& s : *sampled)
      if (std::find(positives.begin(), positives.end(), s) == positives.end()) positives.push_back(std::move(s));
  }
  if (b.utterances.empty()) throw std::invalid_argument("build_batch: no utterance has data for this stage");

  const std::size_t cap = cfg.max_bank_per_batch;
  if (positives.size() > cap) {
    for (std::size_t i = positives.size() - 1; i > 0; --i)
      std::swap(positives[i], positives[static_cast<std::size_t>(uniform_int(rng, 0, i))]);
    b.dropped_positives = positives.size() - cap;
    positives.resize(cap);
    std::cerr << "build_batch: " << b.dropped_positives << " positives dropped to respect the cap of "
              << cap << "\n";
  }
  b.candidates = positives;

  // Word and phrase negatives are cut from other training transcripts so they
  // follow the same token distribution as the positives.
  std::vector<std::size_t> donors;
  if (stage != CurriculumStage::RealTerm) {
    for (std::size_t i = 0; i < corpus.utterances.size(); ++i)
      if (corpus.utterances[i].split == "train" && corpus.utterances[i].token_ids.size() >= 4) donors.push_back(i);
  }
  std::size_t attempts = 0;
  while (b.candidates.size() < cap && attempts++ < 50 * cap) {
    TokenSeq neg;
    if (stage == CurriculumStage::RealTerm) {
      if (corpus.train_terms.empty()) break;
      neg = corpus.train_terms.at(static_cast<std::size_t>(uniform_int(rng, 0, corpus.train_terms.size() - 1))).token_ids;
    } else {
      if (donors.empty()) break;
      const auto& toks = corpus.utterances[donors[static_cast<std::size_t>(uniform_int(rng, 0, donors.size() - 1))]].token_ids;
      const std::size_t len = stage == CurriculumStage::Word ? 1 : static_cast<std::size_t>(uniform_int(rng, 1, 4));
      const auto start = static_cast<std::size_t>(uniform_int(rng, 0, toks.size() - len));
      neg.assign(toks.begin() + static_cast<std::ptrdiff_t>(start), toks.begin() + static_cast<std::ptrdiff_t>(start + len));
    }
    if (std::find(b.candidates.begin(), b.candidates.end(), neg) != b.candidates.end()) continue;
    b.candidates.push_back(std::move(neg));
  }

  b.labels.resize(b.utterances.size() * b.candidates.size());
  for (std::size_t u = 0; u < b.utterances.size(); ++u) {
    const auto& toks = corpus.utterances[b.utterances[u]].token_ids;
    for (std::size_t c = 0; c < b.candidates.size(); ++c)
      b.labels[u * b.candidates.size() + c] = occurs_in(toks, b.candidates[c]) ? 1 : 0;
  }
  return b;
}

// ---------------------------------------------------------------------------
// forward + backward

namespace {

template <typename T>
BasicTensor2<T> project(const BasicTensor2<T>& x, const BasicTensor2<T>& w, const BasicTensor2<T>& b) {
  auto y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

// dW += X^T dY, db += colsum(dY), with dY held in double.
template <typename T>
void accumulate_linear_grad(const BasicTensor2<T>& x, const std::vector<double>& dy, std::size_t d,
                            BasicTensor2<T>& dw, BasicTensor2<T>& db) {
  const std::size_t n = x.rows();
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += static_cast<double>(x(r, a)) * dy[r * d + k];
      dw(a, k) += static_cast<T>(s);
    }
  }
  for (std::size_t k = 0; k < d; ++k) {
    double s = 0.0;
    for (std::size_t r = 0; r < n; ++r) s += dy[r * d + k];
    db(0, k) += static_cast<T>(s);
  }
}

}  // namespace

template <typename T>
double batch_loss_and_grad(const BasicRetrieverParams<T>& params, const BatchView<T>& batch,
                           double pooling_epsilon, ScoreMode mode, BasicRetrieverParams<T>* grad,
                           std::vector<double>* probs_out) {
  params.validate();
  const std::size_t U = batch.speech.size(), C = batch.terms.size();
  const std::size_t d = params.dim, H = params.heads, dh = params.head_dim();
  if (batch.labels.size() != U * C) {
    throw DimensionError("batch has " + std::to_string(batch.labels.size()) + " labels for " +
                         std::to_string(U) + " x " + std::to_string(C) + " pairs");
  }
  const bool drop = mode == ScoreMode::Train && params.dropout_p > 0.0;
  const double keep_scale = drop ? 1.0 / (1.0 - params.dropout_p) : 1.0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool pool = params.token_pooling;

  std::vector<BasicTensor2<T>> Q(C), K(U), V(U);
  std::vector<std::vector<double>> resid(C, std::vector<double>(d, 0.0));
  for (std::size_t c = 0; c < C; ++c) {
    const auto& y = *batch.terms[c];
    if (y.rows() == 0 || y.cols() != d) throw DegenerateInputError("batch term " + std::to_string(c) + " is empty or mis-shaped");
    Q[c] = project(y, params.wq, params.bq);
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t k = 0; k < d; ++k) resid[c][k] += y(i, k);
    for (auto& x : resid[c]) x /= static_cast<double>(y.rows());
  }
  for (std::size_t u = 0; u < U; ++u) {
    const auto& x = *batch.speech[u];
    if (x.rows() == 0 || x.cols() != d) throw DegenerateInputError("batch utterance " + std::to_string(u) + " is empty or mis-shaped");
    K[u] = project(x, params.wk, params.bk);
    V[u] = project(x, params.wv, params.bv);
  }

  struct PairState {
    std::vector<T> attn;         // H x L x T, pre-dropout
    std::vector<double> osum;    // sum over term rows of the concatenated head outputs
    std::vector<double> pooled;  // (osum Wo + n bo) / (n + eps), or / n for the ablation
    double logit = 0.0;
  };
  std::vector<PairState> st(U * C);
  std::vector<double> scores;
  std::vector<double> probs(U * C);

  for (std::size_t u = 0; u < U; ++u) {
    const std::size_t Tn = K[u].rows();
    scores.resize(Tn);
    for (std::size_t c = 0; c < C; ++c) {
      auto& ps = st[u * C + c];
      const std::size_t L = Q[c].rows();
      const std::uint64_t seed = pair_dropout_seed(batch.dropout_seed, u, c);
      ps.attn.assign(H * L * Tn, T(0));
      ps.osum.assign(d, 0.0);
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
          double mx = -INFINITY;
          for (std::size_t j = 0; j < Tn; ++j) {
            double s = 0.0;
            for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) s += static_cast<double>(Q[c](i, k)) * K[u](j, k);
            scores[j] = s * scale;
            mx = std::max(mx, scores[j]);
          }
          double denom = 0.0;
          for (std::size_t j = 0; j < Tn; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            denom += scores[j];
          }
          T* a = &ps.attn[(h * L + i) * Tn];
          for (std::size_t j = 0; j < Tn; ++j) {
            a[j] = static_cast<T>(scores[j] / denom);
            double w = a[j];
            if (drop) w = dropout_keep(seed, params.dropout_p, h, i, j) ? w * keep_scale : 0.0;
            if (w == 0.0) continue;
            for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) ps.osum[k] += w * V[u](j, k);
          }
        }
      }
      const double n = static_cast<double>(L);
      const double denom = pool ? n + pooling_epsilon : n;
      ps.pooled.assign(d, 0.0);
      double logit = params.head_b(0, 0);
      for (std::size_t k = 0; k < d; ++k) {
        double s = n * params.bo(0, k);
        for (std::size_t a = 0; a < d; ++a) s += ps.osum[a] * params.wo(a, k);
        ps.pooled[k] = s / denom;
        logit += static_cast<double>(params.head_w(0, k)) * (ps.pooled[k] + (pool ? resid[c][k] : 0.0));
      }
      ps.logit = logit;
      probs[u * C + c] = 1.0 / (1.0 + std::exp(-logit));
    }
  }

  const LossResult lr = dual_bce_loss(probs, batch.labels);
  if (probs_out) *probs_out = probs;
  if (!grad) return lr.loss;

  auto& g = *grad;
  std::vector<double> u_vec(d, 0.0);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) u_vec[a] += static_cast<double>(params.wo(a, b)) * params.head_w(0, b);

  std::vector<double> osum_acc(d, 0.0), dhw(d, 0.0);
  double bo_acc = 0.0, dhb = 0.0;
  std::vector<std::vector<double>> dQ(C);
  for (std::size_t c = 0; c < C; ++c) dQ[c].assign(Q[c].rows() * d, 0.0);
  std::vector<double> dK, dV, dA;
  std::vector<std::vector<double>> readout(H), colw(H);

  for (std::size_t u = 0; u < U; ++u) {
    const std::size_t Tn = K[u].rows();
    dK.assign(Tn * d, 0.0);
    dV.assign(Tn * d, 0.0);
    dA.resize(Tn);
    for (std::size_t h = 0; h < H; ++h) {
      readout[h].assign(Tn, 0.0);
      colw[h].assign(Tn, 0.0);
      for (std::size_t j = 0; j < Tn; ++j)
        for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) readout[h][j] += u_vec[k] * V[u](j, k);
    }
    for (std::size_t c = 0; c < C; ++c) {
      const auto& ps = st[u * C + c];
      const double gl = lr.dlogit[u * C + c];
      const std::size_t L = Q[c].rows();
      const double n = static_cast<double>(L);
      const double cc = gl / (pool ? n + pooling_epsilon : n);
      const std::uint64_t seed = pair_dropout_seed(batch.dropout_seed, u, c);

      for (std::size_t k = 0; k < d; ++k) dhw[k] += gl * (ps.pooled[k] + (pool ? resid[c][k] : 0.0));
      dhb += gl;
      for (std::size_t a = 0; a < d; ++a) osum_acc[a] += cc * ps.osum[a];
      bo_acc += cc * n;

      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
          const T* a = &ps.attn[(h * L + i) * Tn];
          double dot = 0.0;
          for (std::size_t j = 0; j < Tn; ++j) {
            double m = keep_scale;
            if (drop && !dropout_keep(seed, params.dropout_p, h, i, j)) m = 0.0;
            dA[j] = cc * readout[h][j] * m;
            colw[h][j] += cc * a[j] * m;
            dot += static_cast<double>(a[j]) * dA[j];
          }
          double* dq = &dQ[c][i * d];
          for (std::size_t j = 0; j < Tn; ++j) {
            const double ds = static_cast<double>(a[j]) * (dA[j] - dot) * scale;
            if (ds == 0.0) continue;
            double* dk = &dK[j * d];
            for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) {
              dq[k] += ds * K[u](j, k);
              dk[k] += ds * Q[c](i, k);
            }
          }
        }
      }
    }
    for (std::size_t j = 0; j < Tn; ++j)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) dV[j * d + k] = colw[h][j] * u_vec[k];
    accumulate_linear_grad(*batch.speech[u], dK, d, g.wk, g.bk);
    accumulate_linear_grad(*batch.speech[u], dV, d, g.wv, g.bv);
  }
  for (std::size_t c = 0; c < C; ++c) accumulate_linear_grad(*batch.terms[c], dQ[c], d, g.wq, g.bq);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) g.wo(a, b) += static_cast<T>(osum_acc[a] * params.head_w(0, b));
  for (std::size_t b = 0; b < d; ++b) {
    g.bo(0, b) += static_cast<T>(bo_acc * params.head_w(0, b));
    g.head_w(0, b) += static_cast<T>(dhw[b]);
  }
  g.head_b(0, 0) += static_cast<T>(dhb);
  return lr.loss;
}

template <typename T>
double reference_batch_loss(const BasicRetrieverParams<T>& params, const BatchView<T>& batch,
                            double pooling_epsilon, ScoreMode mode) {
  const std::size_t U = batch.speech.size(), C = batch.terms.size();
  std::vector<double> probs(U * C);
  for (std::size_t u = 0; u < U; ++u) {
    const Mask fm(batch.speech[u]->rows(), 1);
    for (std::size_t c = 0; c < C; ++c) {
      const Mask tm(batch.terms[c]->rows(), 1);
      const auto tr = score_term<T>(params, *batch.speech[u], fm, *batch.terms[c], tm, pooling_epsilon,
                                    mode, pair_dropout_seed(batch.dropout_seed, u, c));
      // Recompute the sigmoid in double so the loss is as smooth as T allows.
      probs[u * C + c] = 1.0 / (1.0 + std::exp(-static_cast<double>(tr.logit)));
    }
  }
  return dual_bce_loss(probs, batch.labels).loss;
}

template double batch_loss_and_grad<float>(const BasicRetrieverParams<float>&, const BatchView<float>&,
                                           double, ScoreMode, BasicRetrieverParams<float>*,
                                           std::vector<double>*);
template double batch_loss_and_grad<double>(const BasicRetrieverParams<double>&, const BatchView<double>&,
                                            double, ScoreMode, BasicRetrieverParams<double>*,
                                            std::vector<double>*);
template double reference_batch_loss<float>(const BasicRetrieverParams<float>&, const BatchView<float>&,
                                            double, ScoreMode);
template double reference_batch_loss<double>(const BasicRetrieverParams<double>&,
                                             const BatchView<double>&, double, ScoreMode);

GradCheckResult run_gradcheck(const GradCheckConfig& cfg) {
  if (cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0) {
    throw ConfigError("gradcheck: d=" + std::to_string(cfg.dim) + " is not divisible by H=" +
                      std::to_string(cfg.heads));
  }
  if (cfg.max_frames < 1 || cfg.max_tokens < 1 || cfg.utterances < 1 || cfg.candidates < 2) {
    throw std::invalid_argument("gradcheck: batch needs frames, tokens, one utterance and two candidates");
  }
  Rng rng = make_rng(cfg.seed, "gradcheck");
  auto params = init_params(cfg.dim, cfg.heads, cfg.dropout ? 0.1 : 0.0, mix_seed(cfg.seed, 1), false)
                    .cast<double>();
  params.token_pooling = cfg.token_pooling;
  const double a = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  params.visit([&](const char* name, Tensor2d& t) {
    // Projections keep their init; biases and head get random values so
    // every gradient path is exercised.
    const std::string n = name;
    if (n[0] == 'w') return;
    for (auto& x : t.data()) x = a * (2.0 * uniform01(rng) - 1.0);
  });

  std::vector<Tensor2d> speech, terms;
  auto random_rows = [&](std::size_t max_rows) {
    Tensor2d t(static_cast<std::size_t>(uniform_int(rng, 1, max_rows)), cfg.dim);
    for (auto& x : t.data()) x = standard_normal(rng);
    return t;
  };
  for (std::size_t u = 0; u < cfg.utterances; ++u) speech.push_back(random_rows(cfg.max_frames));
  for (std::size_t c = 0; c < cfg.candidates; ++c) terms.push_back(random_rows(cfg.max_tokens));
  BatchView<double> view;
  for (const auto& s : speech) view.speech.push_back(&s);
  for (const auto& t : terms) view.terms.push_back(&t);
  view.labels.resize(cfg.utterances * cfg.candidates);
  for (std::size_t i = 0; i < view.labels.size(); ++i) view.labels[i] = static_cast<std::uint8_t>(i % 2);
  view.dropout_seed = mix_seed(cfg.seed, 2);
  const ScoreMode mode = cfg.dropout ? ScoreMode::Train : ScoreMode::Infer;
  const double eps = 1e-6;

  auto grads = params.zeros_like();
  batch_loss_and_grad(params, view, eps, mode, &grads);
  std::vector<NamedParam> named;
  std::vector<std::string> names;
  std::vector<Tensor2d*> values;
  std::vector<const Tensor2d*> analytic;
  params.visit([&](const char* n, Tensor2d& t) {
    names.emplace_back(n);
    values.push_back(&t);
  });
  grads.visit([&](const char*, const Tensor2d& t) { analytic.push_back(&t); });
  for (std::size_t i = 0; i < names.size(); ++i) named.push_back({names[i], values[i], analytic[i]});
  return finite_diff_check([&] { return reference_batch_loss(params, view, eps, mode); }, named, cfg.fd_eps);
}

GradCheckConfig sample_gradcheck_config(const GradCheckConfig& base, std::uint64_t seed, std::size_t index) {
  static constexpr std::size_t kDims[] = {8, 16, 32};
  static constexpr std::size_t kHeads[] = {1, 2, 4};
  Rng rng = make_rng(mix_seed(seed, index), "gradcheck/config");
  GradCheckConfig c = base;
  c.dim = kDims[uniform_int(rng, 0, 2)];
  c.heads = kHeads[uniform_int(rng, 0, 2)];
  c.token_pooling = uniform01(rng) < 0.75;
  c.seed = mix_seed(seed, index + 1);
  return c;
}

// ---------------------------------------------------------------------------
// optimizer

void adamw_step(RetrieverParams& params, const RetrieverParams& grads, AdamState& state,
                std::size_t step, double lr, const TrainingConfig& cfg) {
  if (step < 1) throw std::invalid_argument("adamw_step: step must be >= 1");
  grads.visit([](const char* name, const Tensor2& g) {
    if (!g.all_finite()) throw NumericError(std::string("adamw_step: non-finite gradient in ") + name);
  });
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));

  std::vector<Tensor2*> p_list, m_list, v_list;
  std::vector<const Tensor2*> g_list;
  params.visit([&](const char*, Tensor2& t) { p_list.push_back(&t); });
  state.m.visit([&](const char*, Tensor2& t) { m_list.push_back(&t); });
  state.v.visit([&](const char*, Tensor2& t) { v_list.push_back(&t); });
  grads.visit([&](const char*, const Tensor2& t) { g_list.push_back(&t); });
  for (std::size_t t = 0; t < p_list.size(); ++t) {
    auto& p = p_list[t]->data();
    auto& m = m_list[t]->data();
    auto& v = v_list[t]->data();
    const auto& g = g_list[t]->data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps) + cfg.weight_decay * p[i];
      p[i] = static_cast<float>(p[i] - lr * update);
    }
  }
}

double clip_global_norm(RetrieverParams& grads, double max_norm) {
  double sq = 0.0;
  grads.visit([&](const char*, const Tensor2& t) {
    for (float x : t.data()) sq += static_cast<double>(x) * x;
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    grads.visit([&](const char*, Tensor2& t) {
      for (float& x : t.data()) x = static_cast<float>(x * s);
    });
  }
  return norm;
}

double lr_at(std::size_t step, const TrainingConfig& cfg, std::size_t total_steps) {
  const std::size_t warmup = std::min(cfg.warmup_steps, std::max<std::size_t>(total_steps, 1));
  if (step <= warmup) {
    if (warmup <= 1) return cfg.peak_lr;
    const double f = static_cast<double>(step - 1) / static_cast<double>(warmup - 1);
    return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * f;
  }
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(total_steps - warmup, 1));
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(progress, 1.0)));
}

// ---------------------------------------------------------------------------
// curriculum

namespace {

// Valid-prefix copies of utterance frames, built once per run.
std::vector<Tensor2> valid_frames(const Corpus& corpus) {
  std::vector<Tensor2> out;
  out.reserve(corpus.features.size());
  for (const auto& f : corpus.features) {
    const std::size_t n = count_valid(f.frame_mask);
    Tensor2 t(n, f.frames.cols());
    std::copy(f.frames.data().begin(), f.frames.data().begin() + static_cast<std::ptrdiff_t>(n * f.frames.cols()),
              t.data().begin());
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TrainResult run_curriculum(const Corpus& corpus, const TrainingConfig& cfg, const CurriculumOptions& options) {
  return run_curriculum(corpus, cfg, options,
                        init_params(options.shape.dim, options.shape.heads, options.dropout_p,
                                    substream_seed(cfg.seed, "train/init"), options.tie_query_key));
}

TrainResult run_curriculum(const Corpus& corpus, const TrainingConfig& cfg, const CurriculumOptions& options,
                           RetrieverParams initial) {
  cfg.validate();
  initial.token_pooling = options.token_pooling;
  initial.validate();
  if (initial.dim != corpus.encoder.embed_dim) {
    throw ConfigError("model dim " + std::to_string(initial.dim) + " does not match corpus dim " +
                      std::to_string(corpus.encoder.embed_dim));
  }
  const auto train_idx = corpus.split_indices("train");
  if (train_idx.empty()) throw std::invalid_argument("run_curriculum: corpus has no training utterances");
  const auto schedule = cfg.resolved_schedule(train_idx.size());
  std::size_t total_steps = 0;
  for (const auto& s : schedule) total_steps += s.steps;

  std::vector<std::size_t> annotated;
  for (auto i : train_idx)
    if (!corpus.utterances[i].terms.empty()) annotated.push_back(i);
  for (const auto& s : schedule) {
    if (s.steps > 0 && s.stage == CurriculumStage::RealTerm && annotated.empty()) {
      throw std::invalid_argument("run_curriculum: real-term stage has no annotated utterances");
    }
  }

  ToyEncoder encoder(corpus.encoder);
  const auto frames = valid_frames(corpus);
  Rng batch_rng = make_rng(cfg.seed, "train/batches");
  const std::uint64_t dropout_root = substream_seed(cfg.seed, "train/dropout");

  TrainResult result;
  result.params = std::move(initial);
  AdamState adam = AdamState::zeros_like(result.params);
  RetrieverParams last_good = result.params;

  std::size_t step = 0, epoch = 0;
  const CurriculumStage final_stage = schedule.empty() ? CurriculumStage::RealTerm : schedule.back().stage;
  for (const auto& budget : schedule) {
    if (budget.steps == 0) continue;
    std::vector<std::size_t> pool = budget.stage == CurriculumStage::RealTerm ? annotated : train_idx;
    std::size_t cursor = pool.size();
    std::size_t stage_epochs = 0;
    double best_recall = -1.0;
    std::size_t stagnant = 0;
    bool stop_stage = false;

    for (std::size_t s = 0; s < budget.steps && !stop_stage; ++s) {
      if (cursor >= pool.size()) {
        for (std::size_t i = pool.size() - 1; i > 0; --i)
          std::swap(pool[i], pool[static_cast<std::size_t>(uniform_int(batch_rng, 0, i))]);
        cursor = 0;
      }
      const std::size_t take = std::min(cfg.batch_size, pool.size() - cursor);
      std::vector<std::size_t> chosen(pool.begin() + static_cast<std::ptrdiff_t>(cursor),
                                      pool.begin() + static_cast<std::ptrdiff_t>(cursor + take));
      cursor += take;
      ++step;

      Batch batch = build_batch(corpus, chosen, budget.stage, cfg, batch_rng);
      std::vector<Tensor2> term_tokens;
      term_tokens.reserve(batch.candidates.size());
      for (const auto& cand : batch.candidates) term_tokens.push_back(encoder.embed_tokens(0, cand).tokens);
      BatchView<float> view;
      for (auto u : batch.utterances) view.speech.push_back(&frames[u]);
      for (const auto& t : term_tokens) view.terms.push_back(&t);
      view.labels = batch.labels;
      view.dropout_seed = mix_seed(dropout_root, step);

      const double lr = lr_at(step, cfg, total_steps);
      RetrieverParams grads = result.params.zeros_like();
      double loss = 0.0;
      bool ok = true;
      try {
        loss = batch_loss_and_grad(result.params, view, cfg.pooling_epsilon, ScoreMode::Train, &grads);
        if (!std::isfinite(loss)) ok = false;
        if (ok) {
          if (clip_global_norm(grads, cfg.clip_norm) > cfg.clip_norm) ++result.clipped_steps;
          adamw_step(result.params, grads, adam, step, lr, cfg);
        }
      } catch (const NumericError& e) {
        ok = false;
        result.message = e.what();
      } catch (const BatchCompositionError&) {
        // A batch where every pair shares one label carries no dual-objective
        // signal; skip it.
        continue;
      }
      if (!ok || !result.params.wq.all_finite()) {
        result.diverged = true;
        if (result.message.empty()) result.message = "loss became non-finite at step " + std::to_string(step);
        result.params = last_good;
        return result;
      }
      result.steps.push_back({step, budget.stage, lr, loss});
      if (options.on_step) options.on_step(result.steps.back());

      if (cursor >= pool.size()) {
        ++epoch;
        ++stage_epochs;
        last_good = result.params;
        if (options.validate && cfg.epochs_per_validation > 0 && stage_epochs % cfg.epochs_per_validation == 0) {
          const double r = options.validate(result.params);
          result.epochs.push_back({epoch, budget.stage, step, r});
          // Early stopping only ends the final stage; earlier stages keep their full budget.
          if (budget.stage == final_stage && cfg.early_stop_patience > 0) {
            if (r > best_recall) {
              best_recall = r;
              stagnant = 0;
            } else if (++stagnant >= cfg.early_stop_patience) {
              stop_stage = true;
              result.early_stopped = true;
            }
          }
        }
      }
    }
    last_good = result.params;
    result.stage_checkpoints.emplace_back(budget.stage, result.params);
    if (options.checkpoint_dir) {
      save_checkpoint(*options.checkpoint_dir / ("stage-" + std::string(stage_name(budget.stage)) + ".ckpt"),
                      result.params);
    }
  }
  return result;
}

void write_step_log(const std::filesystem::path& path, const std::vector<StepLog>& steps) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,stage,lr,loss\n";
  out.precision(9);
  for (const auto& s : steps) out << s.step << ',' << stage_name(s.stage) << ',' << s.lr << ',' << s.loss << '\n';
}

void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochLog>& epochs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,stage,step,recall@10\n";
  out.precision(6);
  for (const auto& e : epochs)
    out << e.epoch << ',' << stage_name(e.stage) << ',' << e.step << ',' << e.recall_at_10 << '\n';
}

}  // namespace termprob
