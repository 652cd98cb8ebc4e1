#pragma once

// Automatic story-visualization metrics: character F1, exact-match frame
// accuracy, Fréchet distance over classifier features and the
// character-token coverage ratio; plus the per-system report.

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vpcsv/charmap.hpp"
#include "vpcsv/image.hpp"

namespace vpcsv::eval {

using CharSet = std::set<int>;

struct SetCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  SetCounts& operator+=(const SetCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

SetCounts count_sets(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold);
/// 2TP / (2TP + FP + FN); 1 when there is nothing to find and nothing found.
double f1_from_counts(const SetCounts& c);

enum class Averaging { micro, macro };

/// Micro: counts pooled over frames and characters. Macro: mean of per-class
/// F1 over classes that occur in pred or gold.
double character_f1(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold,
                    Averaging averaging = Averaging::micro);
/// Fraction of frames whose predicted set equals the gold set.
double frame_accuracy(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold);
/// Fraction of consecutive groups of `frames_per_story` frames that are all exact.
double story_accuracy(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold, int frames_per_story);

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
/// Sample mean and unbiased covariance of the rows; needs rows > cols.
Gaussian fit_gaussian(const Eigen::MatrixXd& features);
/// |m1 - m2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) with eps*I added to both
/// covariances. The trace of the square root comes from the eigenvalues of
/// S1^(1/2) S2 S1^(1/2), negatives clamped to zero.
double frechet_distance(const Gaussian& a, const Gaussian& b, double eps = 1e-6);
double frechet_distance(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b, double eps = 1e-6);

/// |{t in T : t in z}| / |T| for one story; T must be nonempty.
double story_coverage(const std::vector<int>& z, const std::set<int>& T);
/// Mean over stories with nonempty T; throws when every T is empty.
double coverage_ratio(const std::vector<std::vector<int>>& generated_z, const std::vector<std::set<int>>& T_per_story);

class MissingOutputsError : public std::runtime_error {
 public:
  explicit MissingOutputsError(std::vector<std::string> ids);
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;
};

struct StoryRow {
  std::string id;
  SetCounts counts;
  int frames = 0;
  int exact_frames = 0;
  double coverage = -1.0;  // -1 when the story's T is empty
  double f1() const { return f1_from_counts(counts); }
};

struct EvalReport {
  std::string system;
  double character_f1 = 0.0;  // headline, per `averaging`
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double frame_accuracy = 0.0;
  double story_accuracy = 0.0;
  double fid = 0.0;
  double coverage_ratio = 0.0;
  std::string averaging = "micro";
  int runs = 1;
  std::vector<StoryRow> stories;
  nlohmann::json config = nlohmann::json::object();  // seed, checkpoints, gamma, lambda, hashes

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  static std::string csv_header();
  std::string csv_row() const;
  /// Largest deviation between the headline numbers and the breakdown rows.
  double breakdown_mismatch() const;
};

struct GoldStory {
  std::string id;
  std::vector<Image8> frames;
  std::vector<std::vector<bool>> mentions;
  std::set<int> constraint_codes;  // T for coverage, codebook indices
};

struct SystemStory {
  std::string id;
  std::vector<Image8> frames;
  std::vector<int> z;
};

struct EvalOptions {
  Averaging averaging = Averaging::micro;
  double threshold = 0.5;
  double fid_eps = 1e-6;
};

/// Scores one system's outputs against the gold test stories with the frozen
/// classifier. Every gold id must have an output.
EvalReport evaluate(const cm::Classifier<float>& classifier, const std::vector<GoldStory>& gold,
                    const std::vector<SystemStory>& outputs, const EvalOptions& options = {});

/// Mean of the headline numbers over runs. The result carries no breakdown
/// rows (each run keeps its own).
EvalReport mean_report(const std::vector<EvalReport>& runs);

/// Classifier features [N, Ch] for a list of frames, in batches.
Eigen::MatrixXd classifier_features(const cm::Classifier<float>& classifier, const std::vector<Image8>& frames);

}  // namespace vpcsv::eval
