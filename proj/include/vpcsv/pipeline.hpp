#pragma once

// Experiment commands. Each reads its prerequisites from the workdir, writes
// its own artifacts and embeds the config hash in every one (JSON fields, or a
// `<file>.meta.json` sidecar for checkpoints; frame PNGs are covered by the
// tokens.json next to them).
//
// Layout under the workdir:
//   data/                      manifest.json and samples (unless paths.manifest)
//   checkpoints/               vqvae.ckpt, charmap.ckpt
//   plans/                     <split>.json, token_stats.json
//   <variant>/run_<k>/         lm.ckpt, train_log.jsonl, <split>/<id>/, report.json
//   <variant>/                 report.json, report.csv (mean over runs)
//   report/                    table.csv, table.json, panels/<id>.png

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vpcsv/config.hpp"
#include "vpcsv/metrics.hpp"
#include "vpcsv/storylm.hpp"

namespace vpcsv::cli {

/// An upstream artifact is absent; the CLI exits with status 2.
class MissingPrerequisite : public std::runtime_error {
 public:
  explicit MissingPrerequisite(const std::filesystem::path& path)
      : std::runtime_error("missing prerequisite: " + path.string()), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Line-delimited JSON events.
class Logger {
 public:
  explicit Logger(std::ostream* out = nullptr) : out_(out) {}
  void log(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const;

 private:
  std::ostream* out_;
};

/// Hash of the config sections a stage depends on: data, vqvae, charmap,
/// plans, lm, generate, eval. Artifacts carry it next to the full hash and
/// a mismatch on an existing output means "recompute".
std::string stage_hash(const RunConfig& config, const std::string& stage);

std::filesystem::path vqvae_path(const RunConfig& config);
std::filesystem::path classifier_path(const RunConfig& config);
std::filesystem::path plans_path(const RunConfig& config, const std::string& split);
std::filesystem::path token_stats_path(const RunConfig& config);
std::filesystem::path variant_dir(const RunConfig& config, lm::Variant variant);
std::filesystem::path run_dir(const RunConfig& config, lm::Variant variant, int run);
std::filesystem::path outputs_dir(const RunConfig& config, lm::Variant variant, int run, const std::string& split);
std::filesystem::path report_dir(const RunConfig& config);

void datagen(const RunConfig& config, const Logger& log = Logger());
void train_vqvae(const RunConfig& config, const Logger& log = Logger());
void train_charmap(const RunConfig& config, const Logger& log = Logger());
/// Tokenizes every split, builds character plans and the token statistics
/// (from the training split only).
void extract_plans(const RunConfig& config, const Logger& log = Logger());
/// Trains run `run`, or every run when run < 0.
void train_lm(const RunConfig& config, lm::Variant variant, int run = -1, const Logger& log = Logger());
void generate(const RunConfig& config, lm::Variant variant, const std::string& split = "test", int run = -1,
              const Logger& log = Logger());
/// Scores every run's test outputs and writes the per-run and mean reports.
/// Returns the mean.
eval::EvalReport evaluate(const RunConfig& config, lm::Variant variant, const Logger& log = Logger());
/// Combined table across the four variants plus the comparison panels.
nlohmann::json report(const RunConfig& config, const Logger& log = Logger());

/// Every stage in order for all variants, then the report.
nlohmann::json run_all(const RunConfig& config, const Logger& log = Logger());

const std::vector<lm::Variant>& all_variants();

}  // namespace vpcsv::cli
