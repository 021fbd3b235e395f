// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace termprob {

// Engine-wide settings shared by every subcommand. Stored as `key = value`
// lines; `#` starts a comment. The file must declare `version = 1`.
struct EngineConfig {
  static constexpr int kVersion = 1;

  std::size_t embed_dim = 64;
  std::size_t heads = 8;
  double dropout_p = 0.1;
  double pooling_epsilon = 1e-6;
  std::uint64_t seed = 1;
  std::string corpus_dir = "data/corpus";
  std::string bank_path;  // empty: <corpus_dir>/bank.jsonl
  std::string checkpoint_dir = "runs/checkpoints";
  std::string reports_dir = "runs/reports";

  void validate() const;
  std::string resolved_bank() const;
  bool operator==(const EngineConfig&) const = default;
};

std::string config_to_text(const EngineConfig& cfg);
EngineConfig parse_config_text(const std::string& text, const std::string& source = "<config>");
EngineConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const EngineConfig& cfg);

}  // namespace termprob
