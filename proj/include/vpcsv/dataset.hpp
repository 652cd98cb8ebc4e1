#pragma once

// Synthetic sprite stories: every frame is a procedural background with up to
// three character sprites, paired with a templated paragraph that names exactly
// the characters drawn, plus the exact union-of-silhouettes mask.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vpcsv/image.hpp"

namespace vpcsv::data {

enum class ShapeKind { circle, square, triangle, cross, ring, star, diamond, bar, hourglass, saltire, frame, semicircle };

inline constexpr int kMaxCharacters = 12;
inline constexpr int kMaxPerFrame = 3;
inline constexpr int kMaxParagraphTokens = 12;
inline constexpr int kGridSlots = 3;  // slots per axis for sprite placement

struct Sprite {
  int character_id = 0;
  ShapeKind shape = ShapeKind::circle;
  std::array<std::uint8_t, 3> color{};
  std::string name;
};

enum class BackgroundKind { solid, gradient, checker };

struct Background {
  std::string word;
  BackgroundKind kind = BackgroundKind::solid;
  std::array<std::uint8_t, 3> primary{};
  std::array<std::uint8_t, 3> secondary{};
};

struct Placement {
  int character_id = 0;
  int slot = 0;     // 0..8, row-major over a 3x3 grid; named in the paragraph
  int cx = 0;       // sprite bbox center in pixels
  int cy = 0;
  double scale = 1.0;
  bool operator==(const Placement&) const = default;
};

struct SceneSpec {
  int frame_index = 0;
  std::vector<Placement> placed;
  int background_id = 0;
  bool operator==(const SceneSpec&) const = default;
};

struct DatasetConfig {
  int num_characters = 8;
  int frames_per_story = 5;
  int height = 32;
  int width = 32;
  int train = 512;
  int val = 64;
  int test = 64;
  int sprite_size = 10;  // bbox side in pixels at scale 1
};

/// Closed template vocabulary; id 0 is the padding word.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);
  static Vocabulary build(const std::vector<Sprite>& sprites, const std::vector<Background>& backgrounds);

  int id(const std::string& word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

struct StorySample {
  std::string id;
  std::vector<std::vector<int>> story;       // n paragraphs of vocabulary ids
  std::vector<Image8> frames;                // n RGB images
  std::vector<std::vector<bool>> mentions;   // n x C
  std::vector<Image8> true_masks;            // n single-channel 0/1 masks
  std::vector<SceneSpec> scenes;
  bool operator==(const StorySample&) const = default;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  DatasetConfig config;
  std::vector<std::string> vocabulary;
  std::map<std::string, std::vector<std::string>> splits;  // split -> sample dirs relative to root
  std::string dataset_hash;                                 // over every sample file
  std::filesystem::path root;                               // directory holding manifest.json

  int num_characters() const { return config.num_characters; }
  std::filesystem::path sample_dir(const std::string& split, std::size_t index) const;
  const std::vector<std::string>& split(const std::string& name) const;
};

std::vector<Sprite> make_sprites(int num_characters);
std::vector<Background> make_backgrounds(std::uint64_t seed);

/// Rasterizes background then sprites. Returns (RGB image, 0/1 mask).
std::pair<Image8, Image8> render_frame(const SceneSpec& scene, const std::vector<Sprite>& sprites,
                                       const std::vector<Background>& backgrounds, int height, int width,
                                       int sprite_size);
/// Silhouette test in sprite-local coordinates u, v in [-1, 1].
bool inside_shape(ShapeKind shape, double u, double v);
/// Pixel bbox [x0, x1) x [y0, y1) of a placement.
std::array<int, 4> sprite_bbox(const Placement& p, int sprite_size);

std::vector<std::string> slot_words();
/// One paragraph per scene naming exactly the placed characters.
std::vector<std::vector<int>> story_text(const std::vector<SceneSpec>& scenes, const std::vector<Sprite>& sprites,
                                         const std::vector<Background>& backgrounds, const Vocabulary& vocab);
/// Character ids whose name token occurs in the paragraph.
std::vector<bool> mentioned_characters(const std::vector<int>& paragraph, const std::vector<Sprite>& sprites,
                                       const Vocabulary& vocab);
std::string paragraph_string(const std::vector<int>& paragraph, const Vocabulary& vocab);

/// Samples one story deterministically from its own seed.
StorySample generate_story(std::uint64_t sample_seed, const std::string& id, const DatasetConfig& config,
                           const std::vector<Sprite>& sprites, const std::vector<Background>& backgrounds,
                           const Vocabulary& vocab);

/// Writes manifest.json and one directory per sample under `root`.
DatasetManifest generate_dataset(const DatasetConfig& config, std::uint64_t seed, const std::filesystem::path& root);

void save_sample(const StorySample& sample, const std::filesystem::path& dir);
StorySample load_sample(const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& manifest_path);
std::vector<StorySample> load_split(const DatasetManifest& manifest, const std::string& split);

/// Human-readable invariant violations; empty when the sample is well formed.
std::vector<std::string> validate_sample(const StorySample& sample, const DatasetConfig& config);

}  // namespace vpcsv::data
