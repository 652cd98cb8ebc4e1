#pragma once

// Single-file run configuration with dotted-key overrides.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vpcsv/charmap.hpp"
#include "vpcsv/dataset.hpp"
#include "vpcsv/metrics.hpp"
#include "vpcsv/storylm.hpp"
#include "vpcsv/vqvae.hpp"

namespace vpcsv::cli {

/// Invalid configuration; `key()` is the dotted name at fault.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int runs = 3;

  data::DatasetConfig dataset;

  vq::VqVaeConfig vqvae;
  vq::VqTrainConfig vqvae_train;

  cm::ClassifierTrainConfig charmap_train;
  double gamma = 0.5;
  double threshold = 0.5;

  lm::StoryLmConfig storylm;
  lm::LmTrainConfig lm_train;  // variant and seed are filled per run
  std::string schedule = "alternate";
  int top_k_tokens = 10;
  lm::DecodeConfig decode;

  eval::Averaging averaging = eval::Averaging::micro;
  bool story_level_accuracy = false;  // headline frame accuracy per story instead of per frame
  double fid_eps = 1e-6;
  int panel_stories = 4;

  std::filesystem::path workdir = "work";
  std::filesystem::path manifest;     // empty: <workdir>/data/manifest.json
  std::filesystem::path checkpoints;  // empty: <workdir>/checkpoints

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys and bad values throw.
  static RunConfig from_json(const nlohmann::json& j);
  /// Reads `path` (empty: defaults), applies `key=value` overrides in order,
  /// then VPCSV_WORKDIR.
  static RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

  /// sha256 over the canonical JSON without the paths section, so moving the
  /// workdir keeps the hash.
  std::string hash() const;

  std::filesystem::path manifest_path() const;
  std::filesystem::path checkpoint_dir() const;
  /// Seed of run k (0-based) for LM training and decoding.
  std::uint64_t run_seed(int run) const { return seed + static_cast<std::uint64_t>(run); }
};

/// Applies one `a.b.c=value` override. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

}  // namespace vpcsv::cli
