#pragma once

// Character classifier, Grad-CAM heatmaps and the max-merge / threshold rule
// that turns a frame's token grid into a character plan.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <vector>

#include "vpcsv/image.hpp"
#include "vpcsv/ops.hpp"
#include "vpcsv/optim.hpp"
#include "vpcsv/vqvae.hpp"

namespace vpcsv::cm {

/// Plan symbol for cells outside every character region.
inline constexpr int kMask = -1;

struct ClassifierConfig {
  int num_classes = 8;
  int height = 32;
  int width = 32;
  int channels1 = 32;
  int channels2 = 64;
  int channels3 = 64;
};

template <typename Scalar>
struct ClassifierOutput {
  Tensor<Scalar> logits;       // [N, C]
  Tensor<Scalar> activations;  // final conv map A, [N, F, F, Ch]
};

/// conv3x3 -> conv3x3/2 -> conv3x3/2 (ReLU each) -> global average -> linear.
template <typename Scalar>
class Classifier {
 public:
  Classifier(const ClassifierConfig& config, std::uint64_t seed);

  const ClassifierConfig& config() const { return config_; }
  int num_classes() const { return config_.num_classes; }
  /// Side of the final feature map.
  int feature_size() const { return config_.height / 4; }

  ClassifierOutput<Scalar> forward(const Tensor<Scalar>& images) const;
  /// Globally pooled final activations [N, Ch]; the image embedding for the
  /// Fréchet distance.
  Tensor<Scalar> features(const Tensor<Scalar>& images) const;

  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

 private:
  Tensor<Scalar> trunk(const Tensor<Scalar>& images) const;

  ClassifierConfig config_;
  ParameterSet<Scalar> params_;
};

/// Row-major grid of reals in [0, 1].
struct Heatmap {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  Heatmap() = default;
  Heatmap(int r, int c, double fill = 0.0) : rows(r), cols(c), values(static_cast<std::size_t>(r * c), fill) {}
  double& at(int r, int c) { return values[static_cast<std::size_t>(r * cols + c)]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r * cols + c)]; }
  double max() const;
  bool operator==(const Heatmap&) const = default;
};

struct RegionMask {
  int size = 0;
  std::vector<bool> keep;  // row-major p x p
  bool at(int r, int c) const { return keep[static_cast<std::size_t>(r * size + c)]; }
  int count() const;
  bool operator==(const RegionMask&) const = default;
};

/// Token grid with kMask in dropped cells.
struct CharacterPlan {
  int size = 0;
  std::vector<int> tokens;
  int mask_count() const;
  bool operator==(const CharacterPlan&) const = default;
};

/// ids with sigmoid(logit) > threshold.
std::set<int> characters_from_logits(const float* logits, int num_classes, double threshold = 0.5);
std::set<int> predict_characters(const Classifier<float>& model, const Image8& image, double threshold = 0.5);
std::vector<std::set<int>> predict_characters(const Classifier<float>& model, const std::vector<Image8>& images,
                                              double threshold = 0.5);

/// Grad-CAM for one class over a batch, at feature-map resolution,
/// max-normalized. An all-zero raw map stays all zero.
template <typename Scalar>
std::vector<Heatmap> gradcam_features(const Classifier<Scalar>& model, const Tensor<Scalar>& images, int character_id);
/// Single image, upsampled by nearest neighbour to `target_size` (defaults to
/// the image side).
Heatmap gradcam(const Classifier<float>& model, const Image8& image, int character_id, int target_size = 0);

Heatmap upsample_nearest(const Heatmap& map, int factor);
/// Mean over non-overlapping patch x patch blocks.
Heatmap pool_mean(const Heatmap& map, int patch);
/// Elementwise maximum; throws on an empty list or mismatched shapes.
Heatmap merge_heatmaps(const std::vector<Heatmap>& maps);
/// keep = merged >= gamma; gamma must lie in [0, 1].
RegionMask token_mask(const Heatmap& merged, double gamma);
CharacterPlan make_plan(const vq::TokenGrid& grid, const RegionMask& mask);
CharacterPlan all_mask_plan(int size);

/// Heatmaps for each mentioned character (from the labels, not the
/// classifier's predictions), brought to the token grid, merged and
/// thresholded. No mentions gives an all-MASK plan.
CharacterPlan frame_plan(const Classifier<float>& model, const Image8& frame, const std::vector<bool>& mentions,
                         const vq::TokenGrid& grid, double gamma);
/// Token-resolution region mask for the mentioned characters of one frame.
RegionMask frame_region(const Classifier<float>& model, const Image8& frame, const std::vector<bool>& mentions,
                        int grid_size, double gamma);

struct ClassifierTrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
};

struct ClassifierEpochLog {
  int epoch = 0;
  double loss = 0.0;
  double val_subset_accuracy = 0.0;
  std::vector<ClassMetrics> per_class;
};

struct ClassifierEval {
  double subset_accuracy = 0.0;
  std::vector<ClassMetrics> per_class;
};

ClassifierEval evaluate_classifier(const Classifier<float>& model, const std::vector<Image8>& frames,
                                   const std::vector<std::vector<bool>>& labels, double threshold = 0.5);

/// Per-class binary cross-entropy with Adam. Labels are the frame mentions.
std::vector<ClassifierEpochLog> train_classifier(Classifier<float>& model, const std::vector<Image8>& frames,
                                                 const std::vector<std::vector<bool>>& labels,
                                                 const std::vector<Image8>& val_frames,
                                                 const std::vector<std::vector<bool>>& val_labels,
                                                 const ClassifierTrainConfig& config,
                                                 const std::function<void(const ClassifierEpochLog&)>& on_epoch = {});

void save_classifier(const Classifier<float>& model, const std::filesystem::path& path);
Classifier<float> load_classifier(const std::filesystem::path& path);

extern template class Classifier<float>;
extern template class Classifier<double>;

}  // namespace vpcsv::cm
