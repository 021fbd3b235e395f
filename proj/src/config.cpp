// SPDX-License-Identifier: Apache-2.0

#include "termprob/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "termprob/retriever.hpp"

namespace termprob {

void EngineConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
  if (!(pooling_epsilon > 0.0)) throw ConfigError("pooling_epsilon must be > 0");
}

std::string EngineConfig::resolved_bank() const {
  return bank_path.empty() ? (std::filesystem::path(corpus_dir) / "bank.jsonl").string() : bank_path;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v, const std::string& where) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc{} || res.ptr != end) throw ConfigError(where + ": cannot parse '" + v + "'");
  return out;
}

}  // namespace

std::string config_to_text(const EngineConfig& c) {
  std::ostringstream out;
  out << "version = " << EngineConfig::kVersion << '\n'
      << "embed_dim = " << c.embed_dim << '\n'
      << "heads = " << c.heads << '\n'
      << "dropout_p = " << fmt_double(c.dropout_p) << '\n'
      << "pooling_epsilon = " << fmt_double(c.pooling_epsilon) << '\n'
      << "seed = " << c.seed << '\n'
      << "corpus_dir = " << c.corpus_dir << '\n'
      << "bank_path = " << c.bank_path << '\n'
      << "checkpoint_dir = " << c.checkpoint_dir << '\n'
      << "reports_dir = " << c.reports_dir << '\n';
  return out.str();
}

EngineConfig parse_config_text(const std::string& text, const std::string& source) {
  EngineConfig c;
  bool have_version = false;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(n);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "version") {
      const int v = parse_number<int>(val, where);
      if (v != EngineConfig::kVersion) {
        throw ConfigError(where + ": unsupported config version " + val + " (expected " +
                          std::to_string(EngineConfig::kVersion) + ")");
      }
      have_version = true;
    } else if (key == "embed_dim") {
      c.embed_dim = parse_number<std::size_t>(val, where);
    } else if (key == "heads") {
      c.heads = parse_number<std::size_t>(val, where);
    } else if (key == "dropout_p") {
      c.dropout_p = parse_number<double>(val, where);
    } else if (key == "pooling_epsilon") {
      c.pooling_epsilon = parse_number<double>(val, where);
    } else if (key == "seed") {
      c.seed = parse_number<std::uint64_t>(val, where);
    } else if (key == "corpus_dir") {
      c.corpus_dir = val;
    } else if (key == "bank_path") {
      c.bank_path = val;
    } else if (key == "checkpoint_dir") {
      c.checkpoint_dir = val;
    } else if (key == "reports_dir") {
      c.reports_dir = val;
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
  if (!have_version) throw ConfigError(source + ": missing 'version' line");
  c.validate();
  return c;
}

EngineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

void save_config(const std::filesystem::path& path, const EngineConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config file " + path.string());
  out << config_to_text(cfg);
}

}  // namespace termprob
