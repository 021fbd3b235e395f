// SPDX-License-Identifier: Apache-2.0

#include "termprob/retriever.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace termprob {

RetrieverParams init_params(std::size_t dim, std::size_t heads, double dropout_p,
                            std::uint64_t seed, bool tie_query_key) {
  RetrieverParams p;
  p.dim = dim;
  p.heads = heads;
  p.dropout_p = dropout_p;
  if (heads == 0 || dim == 0 || dim % heads != 0) {
    throw ConfigError("retriever dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
  Rng rng = make_rng(seed, "retriever/init");
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  auto uniform_matrix = [&]() {
    Tensor2 w(dim, dim);
    for (auto& x : w.data()) x = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
    return w;
  };
  p.wq = uniform_matrix();
  p.wk = tie_query_key ? p.wq : uniform_matrix();
  p.wv = uniform_matrix();
  p.wo = uniform_matrix();
  p.bq = p.bk = p.bv = p.bo = Tensor2(1, dim);
  p.head_w = Tensor2(1, dim);
  p.head_b = Tensor2(1, 1);
  return p;
}

ScoreTrace score_term(const RetrieverParams& params, const SpeechFeatures& speech,
                      const TermFeatures& term, double pooling_epsilon, ScoreMode mode,
                      std::optional<std::uint64_t> dropout_seed) {
  return score_term<float>(params, speech.frames, speech.frame_mask, term.tokens, term.token_mask,
                           pooling_epsilon, mode, dropout_seed);
}

// ---------------------------------------------------------------------------
// batched inference

PreparedBank prepare_bank(const RetrieverParams& params, const std::vector<TermFeatures>& terms) {
  params.validate();
  const std::size_t d = params.dim;
  PreparedBank bank;
  bank.dim = d;
  bank.term_ids.reserve(terms.size());
  for (const auto& t : terms) {
    if (t.tokens.cols() != d) {
      throw DimensionError("term " + std::to_string(t.term_id) + " has dim " +
                           std::to_string(t.tokens.cols()) + ", model dim is " + std::to_string(d));
    }
    const std::size_t n = count_valid(t.token_mask);
    if (n == 0) {
      throw DegenerateInputError("term " + std::to_string(t.term_id) + ": every token is masked");
    }
    Tensor2 valid(n, d);
    std::size_t r = 0;
    for (std::size_t i = 0; i < t.tokens.rows(); ++i)
      if (t.token_mask[i]) {
        std::copy(t.tokens.row(i).begin(), t.tokens.row(i).end(), valid.row(r).begin());
        ++r;
      }
    auto q = matmul(valid, params.wq);
    add_row_bias(q, params.bq);
    double logit = params.head_b(0, 0);
    if (params.token_pooling) {
      for (std::size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += valid(i, c);
        logit += static_cast<double>(params.head_w(0, c)) * (mean / static_cast<double>(n));
      }
    }
    bank.term_ids.push_back(t.term_id);
    bank.queries.push_back(std::move(q));
    bank.term_logit.push_back(logit);
  }
  return bank;
}

PreparedSpeech prepare_speech(const RetrieverParams& params, const SpeechFeatures& speech) {
  params.validate();
  const std::size_t d = params.dim, H = params.heads, dh = params.head_dim();
  if (speech.frames.cols() != d) {
    throw DimensionError("speech features have dim " + std::to_string(speech.frames.cols()) +
                         ", model dim is " + std::to_string(d));
  }
  const std::size_t n = count_valid(speech.frame_mask);
  if (n == 0) throw DegenerateInputError("utterance " + speech.utterance_id + ": every frame is masked");
  Tensor2 valid(n, d);
  std::size_t r = 0;
  for (std::size_t j = 0; j < speech.frames.rows(); ++j)
    if (speech.frame_mask[j]) {
      std::copy(speech.frames.row(j).begin(), speech.frames.row(j).end(), valid.row(r).begin());
      ++r;
    }
  PreparedSpeech ps;
  ps.keys = matmul(valid, params.wk);
  add_row_bias(ps.keys, params.bk);
  auto values = matmul(valid, params.wv);
  add_row_bias(values, params.bv);

  // u = Wo * head_w: the head only ever sees values through this vector.
  std::vector<double> u(d, 0.0);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) u[a] += static_cast<double>(params.wo(a, b)) * params.head_w(0, b);
  ps.readout.assign(H, std::vector<double>(n, 0.0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += u[c] * values(j, c);
      ps.readout[h][j] = s;
    }
  for (std::size_t c = 0; c < d; ++c) ps.bias_readout += static_cast<double>(params.head_w(0, c)) * params.bo(0, c);
  return ps;
}

std::vector<float> score_prepared(const RetrieverParams& params, const PreparedBank& bank,
                                  const PreparedSpeech& speech, std::size_t batch,
                                  double pooling_epsilon) {
  if (bank.size() == 0) throw std::invalid_argument("score_bank: bank is empty");
  if (batch == 0) batch = 1;
  const std::size_t d = params.dim, H = params.heads, dh = params.head_dim();
  const std::size_t T = speech.keys.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<float> probs(bank.size());

  std::vector<double> row_scores(T);
  Tensor2 block;
  Mask block_mask;
  for (std::size_t start = 0; start < bank.size(); start += batch) {
    const std::size_t stop = std::min(bank.size(), start + batch);
    std::size_t max_len = 0;
    for (std::size_t t = start; t < stop; ++t) max_len = std::max(max_len, bank.queries[t].rows());
    // Padded query block, one max_len slab per term.
    block = Tensor2((stop - start) * max_len, d);
    block_mask.assign(block.rows(), 0);
    for (std::size_t t = start; t < stop; ++t) {
      const auto& q = bank.queries[t];
      const std::size_t base = (t - start) * max_len;
      for (std::size_t i = 0; i < q.rows(); ++i) {
        std::copy(q.row(i).begin(), q.row(i).end(), block.row(base + i).begin());
        block_mask[base + i] = 1;
      }
    }
    for (std::size_t t = start; t < stop; ++t) {
      const std::size_t base = (t - start) * max_len;
      double attended = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < max_len; ++i) {
        if (!block_mask[base + i]) continue;
        ++n;
        const float* qrow = &block(base + i, 0);
        for (std::size_t h = 0; h < H; ++h) {
          double mx = -INFINITY;
          for (std::size_t j = 0; j < T; ++j) {
            const float* krow = &speech.keys(j, h * dh);
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(qrow[h * dh + c]) * krow[c];
            row_scores[j] = s * scale;
            mx = std::max(mx, row_scores[j]);
          }
          double denom = 0.0, weighted = 0.0;
          for (std::size_t j = 0; j < T; ++j) {
            const double e = std::exp(row_scores[j] - mx);
            denom += e;
            weighted += e * speech.readout[h][j];
          }
          attended += weighted / denom;
        }
      }
      const double nn = static_cast<double>(n);
      const double body = attended + nn * speech.bias_readout;
      const double logit = bank.term_logit[t] +
                           (params.token_pooling ? body / (nn + pooling_epsilon) : body / nn);
      probs[t] = sigmoid(static_cast<float>(logit));
    }
  }
  return probs;
}

std::vector<float> score_bank(const RetrieverParams& params, const SpeechFeatures& speech,
                              const std::vector<TermFeatures>& terms, std::size_t batch,
                              double pooling_epsilon) {
  if (terms.empty()) throw std::invalid_argument("score_bank: bank is empty");
  PreparedBank bank;
  try {
    bank = prepare_bank(params, terms);
  } catch (const std::exception& e) {
    throw DegenerateInputError(std::string("score_bank: ") + e.what());
  }
  return score_prepared(params, bank, prepare_speech(params, speech), batch, pooling_epsilon);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

using json = nlohmann::json;
constexpr char kCheckpointMagic[4] = {'A', '2', 'P', 'C'};
constexpr int kCheckpointVersion = 1;

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& buf, std::size_t off) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RetrieverParams& params) {
  params.validate();
  json header{{"format_version", kCheckpointVersion}, {"d", params.dim},
              {"heads", params.heads}, {"dropout_p", params.dropout_p},
              {"token_pooling", params.token_pooling}};
  json tensors = json::array();
  params.visit([&](const char* name, const Tensor2& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  header["tensors"] = tensors;
  const std::string h = header.dump();

  std::string buf(kCheckpointMagic, 4);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(h.size()));
  buf += h;
  params.visit([&](const char*, const Tensor2& t) {
    put_le<std::uint64_t>(buf, std::uint64_t{t.size()} * 4);
    for (float v : t.data()) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
  });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("short write to checkpoint " + path.string());
}

RetrieverParams load_checkpoint(const std::filesystem::path& path, std::optional<ModelShape> expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad checkpoint magic, expected A2PC", 0);
  }
  const auto hlen = get_le<std::uint32_t>(buf, 4);
  if (buf.size() < 8 + std::size_t{hlen}) throw FormatError(path.string() + ": truncated header", buf.size());
  json header;
  try {
    header = json::parse(buf.substr(8, hlen));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what(), 8);
  }
  const int version = header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version), 8);
  }
  RetrieverParams p;
  p.dim = header.at("d").get<std::size_t>();
  p.heads = header.at("heads").get<std::size_t>();
  p.dropout_p = header.at("dropout_p").get<double>();
  p.token_pooling = header.value("token_pooling", true);
  if (expected && (expected->dim != p.dim || expected->heads != p.heads)) {
    throw ConfigError("checkpoint " + path.string() + " has d=" + std::to_string(p.dim) +
                      " heads=" + std::to_string(p.heads) + " but the engine is configured for d=" +
                      std::to_string(expected->dim) + " heads=" + std::to_string(expected->heads));
  }

  std::size_t off = 8 + hlen;
  std::size_t idx = 0;
  const auto& listed = header.at("tensors");
  p.visit([&](const char* name, Tensor2& t) {
    if (idx >= listed.size() || listed[idx].at("name").get<std::string>() != name) {
      throw FormatError(path.string() + ": tensor " + name + " missing from header", 8);
    }
    const auto rows = listed[idx].at("rows").get<std::size_t>();
    const auto cols = listed[idx].at("cols").get<std::size_t>();
    ++idx;
    if (off + 8 > buf.size()) throw FormatError(path.string() + ": tensor " + name + " truncated", off);
    const auto bytes = get_le<std::uint64_t>(buf, off);
    if (bytes != std::uint64_t{rows} * cols * 4) {
      throw FormatError(path.string() + ": tensor " + name + " declares " + std::to_string(bytes) +
                            " bytes, expected " + std::to_string(rows * cols * 4),
                        off);
    }
    off += 8;
    if (off + bytes > buf.size()) {
      throw FormatError(path.string() + ": tensor " + name + " payload truncated", buf.size());
    }
    std::vector<float> data(rows * cols);
    for (std::size_t i = 0; i < data.size(); ++i)
      data[i] = std::bit_cast<float>(get_le<std::uint32_t>(buf, off + 4 * i));
    off += bytes;
    t = Tensor2(rows, cols, std::move(data));
  });
  if (off != buf.size()) throw FormatError(path.string() + ": trailing bytes after last tensor", off);
  p.validate();
  return p;
}

}  // namespace termprob
