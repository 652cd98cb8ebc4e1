#include "vpcsv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vpcsv/hashing.hpp"
#include "vpcsv/rng.hpp"

namespace vpcsv::data {

using nlohmann::json;

namespace {

constexpr int kPlacementAttempts = 100;
constexpr int kRegenerations = 10;
constexpr int kJitter = 2;
constexpr double kMaxOverlap = 0.25;

const std::array<const char*, kMaxCharacters> kNames = {"ada", "bo", "cyd", "dot", "eli", "fin",
                                                        "gus", "hal", "ivy", "jo", "kai", "lu"};

const std::array<std::array<std::uint8_t, 3>, kMaxCharacters> kColors = {{{220, 30, 30},
                                                                          {30, 60, 220},
                                                                          {240, 200, 0},
                                                                          {200, 0, 200},
                                                                          {0, 200, 220},
                                                                          {255, 120, 0},
                                                                          {120, 230, 0},
                                                                          {255, 105, 180},
                                                                          {110, 40, 160},
                                                                          {130, 70, 20},
                                                                          {0, 128, 128},
                                                                          {10, 10, 10}}};

// Cumulative weights for 0..3 characters in a frame.
constexpr std::array<double, 4> kCountWeights = {0.12, 0.33, 0.33, 0.22};

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "file not found");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot write");
  out << text;
}

json parse_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(path, std::string("malformed JSON: ") + e.what());
  }
}

std::array<std::uint8_t, 3> jitter_color(std::array<std::uint8_t, 3> base, Rng& rng) {
  for (auto& c : base) {
    const int v = static_cast<int>(c) + static_cast<int>(rng.below(25)) - 12;
    c = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
  }
  return base;
}

int slot_center(int slot_index, int extent, int sprite_size) {
  const int margin = sprite_size / 2 + kJitter;
  return margin + slot_index * (extent - 2 * margin) / (kGridSlots - 1);
}

double bbox_overlap_fraction(const Placement& a, const Placement& b, int sprite_size) {
  const auto ba = sprite_bbox(a, sprite_size);
  const auto bb = sprite_bbox(b, sprite_size);
  const int w = std::min(ba[1], bb[1]) - std::max(ba[0], bb[0]);
  const int h = std::min(ba[3], bb[3]) - std::max(ba[2], bb[2]);
  if (w <= 0 || h <= 0) return 0.0;
  const double area_a = double(ba[1] - ba[0]) * (ba[3] - ba[2]);
  const double area_b = double(bb[1] - bb[0]) * (bb[3] - bb[2]);
  return double(w) * h / std::min(area_a, area_b);
}

bool in_bounds(const Placement& p, const DatasetConfig& config) {
  const auto b = sprite_bbox(p, config.sprite_size);
  return b[0] >= 0 && b[2] >= 0 && b[1] <= config.width && b[3] <= config.height;
}

bool try_place(SceneSpec& scene, const std::vector<int>& characters, const DatasetConfig& config, Rng& rng) {
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    scene.placed.clear();
    std::vector<int> slots(kGridSlots * kGridSlots);
    std::iota(slots.begin(), slots.end(), 0);
    bool ok = true;
    for (int c : characters) {
      const auto pick = static_cast<std::size_t>(rng.below(slots.size()));
      const int slot = slots[pick];
      slots.erase(slots.begin() + static_cast<std::ptrdiff_t>(pick));
      Placement p;
      p.character_id = c;
      p.slot = slot;
      p.scale = rng.uniform() < 0.5 ? 1.0 : 0.8;
      p.cx = slot_center(slot % kGridSlots, config.width, config.sprite_size) + static_cast<int>(rng.below(2 * kJitter + 1)) - kJitter;
      p.cy = slot_center(slot / kGridSlots, config.height, config.sprite_size) + static_cast<int>(rng.below(2 * kJitter + 1)) - kJitter;
      if (!in_bounds(p, config)) ok = false;
      for (const auto& q : scene.placed) {
        if (bbox_overlap_fraction(p, q, config.sprite_size) > kMaxOverlap) ok = false;
      }
      scene.placed.push_back(p);
      if (!ok) break;
    }
    if (ok) return true;
  }
  return false;
}

json scene_to_json(const SceneSpec& s) {
  json placed = json::array();
  for (const auto& p : s.placed) {
    placed.push_back({{"character", p.character_id}, {"slot", p.slot}, {"cx", p.cx}, {"cy", p.cy}, {"scale", p.scale}});
  }
  return {{"frame", s.frame_index}, {"background", s.background_id}, {"placed", placed}};
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.frame_index = j.at("frame").get<int>();
  s.background_id = j.at("background").get<int>();
  for (const auto& p : j.at("placed")) {
    s.placed.push_back({p.at("character").get<int>(), p.at("slot").get<int>(), p.at("cx").get<int>(),
                        p.at("cy").get<int>(), p.at("scale").get<double>()});
  }
  return s;
}

std::string split_prefix(const std::string& split) { return split; }

}  // namespace

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocabulary: duplicate word " + words_[i]);
    }
  }
}

Vocabulary Vocabulary::build(const std::vector<Sprite>& sprites, const std::vector<Background>& backgrounds) {
  std::vector<std::string> words = {"<pad>", "and", "in", "the", "is", "empty"};
  for (const auto& s : sprites) words.push_back(s.name);
  for (const auto& w : slot_words()) words.push_back(w);
  for (const auto& b : backgrounds) words.push_back(b.word);
  return Vocabulary(std::move(words));
}

int Vocabulary::id(const std::string& word) const {
  const auto it = index_.find(word);
  if (it == index_.end()) throw std::out_of_range("vocabulary: unknown word " + word);
  return it->second;
}

std::vector<std::string> slot_words() {
  return {"upleft", "up", "upright", "left", "center", "right", "downleft", "down", "downright"};
}

// ---------------------------------------------------------------- assets

std::vector<Sprite> make_sprites(int num_characters) {
  if (num_characters < 1 || num_characters > kMaxCharacters) {
    throw std::invalid_argument("num_characters must be in [1, " + std::to_string(kMaxCharacters) + "]");
  }
  std::vector<Sprite> sprites;
  for (int c = 0; c < num_characters; ++c) {
    sprites.push_back({c, static_cast<ShapeKind>(c), kColors[static_cast<std::size_t>(c)], kNames[static_cast<std::size_t>(c)]});
  }
  return sprites;
}

std::vector<Background> make_backgrounds(std::uint64_t seed) {
  Rng rng(Rng::derive(seed, "palette"));
  std::vector<Background> bgs = {
      {"meadow", BackgroundKind::solid, {110, 150, 90}, {110, 150, 90}},
      {"beach", BackgroundKind::gradient, {125, 165, 195}, {205, 190, 145}},
      {"night", BackgroundKind::solid, {40, 45, 80}, {40, 45, 80}},
      {"room", BackgroundKind::checker, {175, 155, 125}, {140, 120, 95}},
      {"snow", BackgroundKind::gradient, {185, 190, 200}, {230, 230, 235}},
      {"forest", BackgroundKind::checker, {70, 100, 70}, {50, 78, 55}},
  };
  for (auto& b : bgs) {
    b.primary = jitter_color(b.primary, rng);
    b.secondary = b.kind == BackgroundKind::solid ? b.primary : jitter_color(b.secondary, rng);
  }
  return bgs;
}

// ---------------------------------------------------------------- rendering

bool inside_shape(ShapeKind shape, double u, double v) {
  const double r2 = u * u + v * v;
  switch (shape) {
    case ShapeKind::circle: return r2 <= 1.0;
    case ShapeKind::square: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::triangle: return std::abs(u) <= (v + 1.0) / 2.0;
    case ShapeKind::cross: return std::abs(u) <= 0.3 || std::abs(v) <= 0.3;
    case ShapeKind::ring: return r2 <= 1.0 && r2 >= 0.3;
    case ShapeKind::star: {
      const double r = std::sqrt(r2);
      const double theta = std::atan2(v, u);
      return r <= 0.55 + 0.45 * std::cos(5.0 * theta + 1.5707963267948966);
    }
    case ShapeKind::diamond: return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeKind::bar: return std::abs(v) <= 0.4;
    case ShapeKind::hourglass: return std::abs(u) <= std::abs(v) + 0.1;
    case ShapeKind::saltire: return std::abs(std::abs(u) - std::abs(v)) <= 0.35;
    case ShapeKind::frame: return std::max(std::abs(u), std::abs(v)) >= 0.5;
    case ShapeKind::semicircle: return r2 <= 1.0 && v >= -0.1;
  }
  return false;
}

std::array<int, 4> sprite_bbox(const Placement& p, int sprite_size) {
  const int size = static_cast<int>(std::lround(sprite_size * p.scale));
  const int x0 = p.cx - size / 2;
  const int y0 = p.cy - size / 2;
  return {x0, x0 + size, y0, y0 + size};
}

std::pair<Image8, Image8> render_frame(const SceneSpec& scene, const std::vector<Sprite>& sprites,
                                       const std::vector<Background>& backgrounds, int height, int width,
                                       int sprite_size) {
  if (scene.background_id < 0 || scene.background_id >= static_cast<int>(backgrounds.size())) {
    throw std::invalid_argument("render_frame: unknown background " + std::to_string(scene.background_id));
  }
  if (scene.placed.size() > static_cast<std::size_t>(kMaxPerFrame)) {
    throw std::invalid_argument("render_frame: more than 3 sprites in a frame");
  }
  Image8 image(height, width, 3);
  Image8 mask(height, width, 1);
  const auto& bg = backgrounds[static_cast<std::size_t>(scene.background_id)];
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      std::array<std::uint8_t, 3> color = bg.primary;
      if (bg.kind == BackgroundKind::gradient) {
        const double t = height > 1 ? double(y) / (height - 1) : 0.0;
        for (int c = 0; c < 3; ++c) {
          color[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(
              std::lround((1.0 - t) * bg.primary[static_cast<std::size_t>(c)] + t * bg.secondary[static_cast<std::size_t>(c)]));
        }
      } else if (bg.kind == BackgroundKind::checker && ((x / 4 + y / 4) % 2 == 1)) {
        color = bg.secondary;
      }
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = color[static_cast<std::size_t>(c)];
    }
  }
  for (const auto& p : scene.placed) {
    if (p.character_id < 0 || p.character_id >= static_cast<int>(sprites.size())) {
      throw std::invalid_argument("render_frame: unknown character " + std::to_string(p.character_id));
    }
    const auto box = sprite_bbox(p, sprite_size);
    if (box[0] < 0 || box[2] < 0 || box[1] > width || box[3] > height) {
      throw std::invalid_argument("render_frame: sprite of character " + std::to_string(p.character_id) +
                                  " lies outside the image");
    }
    const auto& sprite = sprites[static_cast<std::size_t>(p.character_id)];
    const double size = box[1] - box[0];
    for (int y = box[2]; y < box[3]; ++y) {
      for (int x = box[0]; x < box[1]; ++x) {
        const double u = 2.0 * (x + 0.5 - box[0]) / size - 1.0;
        const double v = 2.0 * (y + 0.5 - box[2]) / size - 1.0;
        if (!inside_shape(sprite.shape, u, v)) continue;
        for (int c = 0; c < 3; ++c) image.at(y, x, c) = sprite.color[static_cast<std::size_t>(c)];
        mask.at(y, x) = 1;
      }
    }
  }
  return {std::move(image), std::move(mask)};
}

// ---------------------------------------------------------------- text

std::vector<std::vector<int>> story_text(const std::vector<SceneSpec>& scenes, const std::vector<Sprite>& sprites,
                                         const std::vector<Background>& backgrounds, const Vocabulary& vocab) {
  const auto slots = slot_words();
  std::vector<std::vector<int>> paragraphs;
  for (const auto& scene : scenes) {
    const std::string& bg = backgrounds.at(static_cast<std::size_t>(scene.background_id)).word;
    std::vector<int> words;
    if (scene.placed.empty()) {
      words = {vocab.id("the"), vocab.id(bg), vocab.id("is"), vocab.id("empty")};
    } else {
      for (std::size_t i = 0; i < scene.placed.size(); ++i) {
        if (i) words.push_back(vocab.id("and"));
        words.push_back(vocab.id(sprites.at(static_cast<std::size_t>(scene.placed[i].character_id)).name));
        words.push_back(vocab.id(slots.at(static_cast<std::size_t>(scene.placed[i].slot))));
      }
      words.push_back(vocab.id("in"));
      words.push_back(vocab.id(bg));
    }
    paragraphs.push_back(std::move(words));
  }
  return paragraphs;
}

std::vector<bool> mentioned_characters(const std::vector<int>& paragraph, const std::vector<Sprite>& sprites,
                                       const Vocabulary& vocab) {
  std::vector<bool> out(sprites.size(), false);
  for (int token : paragraph) {
    for (const auto& s : sprites) {
      if (token == vocab.id(s.name)) out[static_cast<std::size_t>(s.character_id)] = true;
    }
  }
  return out;
}

std::string paragraph_string(const std::vector<int>& paragraph, const Vocabulary& vocab) {
  std::string out;
  for (int t : paragraph) {
    if (!out.empty()) out += ' ';
    out += vocab.word(t);
  }
  return out;
}

// ---------------------------------------------------------------- generation

StorySample generate_story(std::uint64_t sample_seed, const std::string& id, const DatasetConfig& config,
                           const std::vector<Sprite>& sprites, const std::vector<Background>& backgrounds,
                           const Vocabulary& vocab) {
  for (int regen = 0; regen < kRegenerations; ++regen) {
    Rng rng(Rng::derive(sample_seed, "regen", static_cast<std::uint64_t>(regen)));
    std::vector<SceneSpec> scenes;
    int background = static_cast<int>(rng.below(backgrounds.size()));
    bool ok = true;
    for (int f = 0; f < config.frames_per_story && ok; ++f) {
      if (f > 0 && rng.uniform() < 0.3) background = static_cast<int>(rng.below(backgrounds.size()));
      const double u = rng.uniform();
      int count = 0;
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        acc += kCountWeights[static_cast<std::size_t>(k)];
        if (u < acc) {
          count = k;
          break;
        }
        count = k;
      }
      count = std::min(count, config.num_characters);
      std::vector<int> pool(static_cast<std::size_t>(config.num_characters));
      std::iota(pool.begin(), pool.end(), 0);
      std::vector<int> chosen;
      for (int k = 0; k < count; ++k) {
        const auto pick = static_cast<std::size_t>(rng.below(pool.size()));
        chosen.push_back(pool[pick]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      }
      SceneSpec scene;
      scene.frame_index = f;
      scene.background_id = background;
      ok = try_place(scene, chosen, config, rng);
      scenes.push_back(std::move(scene));
    }
    if (!ok) continue;

    StorySample sample;
    sample.id = id;
    sample.scenes = scenes;
    sample.story = story_text(scenes, sprites, backgrounds, vocab);
    for (const auto& scene : scenes) {
      auto [image, mask] = render_frame(scene, sprites, backgrounds, config.height, config.width, config.sprite_size);
      sample.frames.push_back(std::move(image));
      sample.true_masks.push_back(std::move(mask));
      std::vector<bool> m(static_cast<std::size_t>(config.num_characters), false);
      for (const auto& p : scene.placed) m[static_cast<std::size_t>(p.character_id)] = true;
      sample.mentions.push_back(std::move(m));
    }
    return sample;
  }
  throw std::runtime_error("generate_story: no valid sprite placement for sample " + id + " after " +
                           std::to_string(kRegenerations) + " regenerations");
}

std::filesystem::path DatasetManifest::sample_dir(const std::string& split_name, std::size_t index) const {
  return root / split(split_name).at(index);
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  const auto it = splits.find(name);
  if (it == splits.end()) throw std::out_of_range("manifest: unknown split " + name);
  return it->second;
}

DatasetManifest generate_dataset(const DatasetConfig& config, std::uint64_t seed, const std::filesystem::path& root) {
  if (config.frames_per_story < 1 || config.height < 16 || config.width < 16 || config.train < 0 || config.val < 0 ||
      config.test < 0) {
    throw std::invalid_argument("generate_dataset: invalid dataset configuration");
  }
  const auto sprites = make_sprites(config.num_characters);
  const auto backgrounds = make_backgrounds(seed);
  const auto vocab = Vocabulary::build(sprites, backgrounds);

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.config = config;
  manifest.vocabulary = vocab.words();
  manifest.root = root;
  std::filesystem::create_directories(root);

  std::set<std::string> train_keys;
  std::vector<std::string> files;
  const std::vector<std::pair<std::string, int>> splits = {{"train", config.train}, {"val", config.val}, {"test", config.test}};
  for (const auto& [split, count] : splits) {
    auto& list = manifest.splits[split];
    for (int i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%s_%05d", split.c_str(), i);
      StorySample sample;
      for (std::uint64_t salt = 0;; ++salt) {
        sample = generate_story(Rng::derive(seed, split, static_cast<std::uint64_t>(i) + (salt << 32)), name, config,
                                sprites, backgrounds, vocab);
        json key = json::array();
        for (const auto& s : sample.scenes) key.push_back(scene_to_json(s));
        const std::string k = key.dump();
        if (split == "train") {
          train_keys.insert(k);
          break;
        }
        if (split != "test" || !train_keys.count(k)) break;
      }
      const std::string rel = split_prefix(split) + "/" + name;
      save_sample(sample, root / rel);
      list.push_back(rel);
      for (int f = 0; f < config.frames_per_story; ++f) {
        files.push_back(rel + "/frame_" + std::to_string(f) + ".png");
        files.push_back(rel + "/mask_" + std::to_string(f) + ".png");
      }
      files.push_back(rel + "/story.json");
    }
  }

  std::sort(files.begin(), files.end());
  std::string digest_input;
  for (const auto& f : files) digest_input += f + ":" + sha256_file(root / f) + "\n";
  manifest.dataset_hash = sha256_hex(digest_input);

  json j;
  j["version"] = manifest.version;
  j["seed"] = manifest.seed;
  j["num_characters"] = config.num_characters;
  j["frames_per_story"] = config.frames_per_story;
  j["height"] = config.height;
  j["width"] = config.width;
  j["sprite_size"] = config.sprite_size;
  j["vocabulary"] = manifest.vocabulary;
  json js = json::object();
  for (const auto& [split, list] : manifest.splits) js[split] = {{"count", list.size()}, {"samples", list}};
  j["splits"] = js;
  j["dataset_hash"] = manifest.dataset_hash;
  write_text(root / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

// ---------------------------------------------------------------- persistence

void save_sample(const StorySample& sample, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t f = 0; f < sample.frames.size(); ++f) {
    write_png(dir / ("frame_" + std::to_string(f) + ".png"), sample.frames[f]);
    Image8 mask = sample.true_masks.at(f);
    for (auto& v : mask.data) v = v ? 255 : 0;
    write_png(dir / ("mask_" + std::to_string(f) + ".png"), mask);
  }
  json scenes = json::array();
  for (const auto& s : sample.scenes) scenes.push_back(scene_to_json(s));
  json j = {{"id", sample.id}, {"paragraphs", sample.story}, {"mentions", sample.mentions}, {"scenes", scenes}};
  write_text(dir / "story.json", j.dump(1) + "\n");
}

StorySample load_sample(const std::filesystem::path& dir) {
  const auto story_path = dir / "story.json";
  const json j = parse_json(story_path);
  StorySample sample;
  try {
    sample.id = j.at("id").get<std::string>();
    sample.story = j.at("paragraphs").get<std::vector<std::vector<int>>>();
    sample.mentions = j.at("mentions").get<std::vector<std::vector<bool>>>();
    for (const auto& s : j.at("scenes")) sample.scenes.push_back(scene_from_json(s));
  } catch (const json::exception& e) {
    throw IoError(story_path, std::string("missing or mistyped field: ") + e.what());
  }
  for (std::size_t f = 0; f < sample.story.size(); ++f) {
    sample.frames.push_back(read_png(dir / ("frame_" + std::to_string(f) + ".png"), 3));
    Image8 mask = read_png(dir / ("mask_" + std::to_string(f) + ".png"), 1);
    for (auto& v : mask.data) v = v > 127 ? 1 : 0;
    sample.true_masks.push_back(std::move(mask));
  }
  return sample;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  const json j = parse_json(manifest_path);
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config.num_characters = j.at("num_characters").get<int>();
    m.config.frames_per_story = j.at("frames_per_story").get<int>();
    m.config.height = j.at("height").get<int>();
    m.config.width = j.at("width").get<int>();
    m.config.sprite_size = j.at("sprite_size").get<int>();
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    for (const auto& [split, entry] : j.at("splits").items()) {
      m.splits[split] = entry.at("samples").get<std::vector<std::string>>();
      if (entry.at("count").get<std::size_t>() != m.splits[split].size()) {
        throw IoError(manifest_path, "split " + split + " count does not match its sample list");
      }
    }
    m.dataset_hash = j.at("dataset_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError(manifest_path, std::string("missing or mistyped field: ") + e.what());
  }
  m.config.train = m.splits.count("train") ? static_cast<int>(m.splits["train"].size()) : 0;
  m.config.val = m.splits.count("val") ? static_cast<int>(m.splits["val"].size()) : 0;
  m.config.test = m.splits.count("test") ? static_cast<int>(m.splits["test"].size()) : 0;
  m.root = manifest_path.parent_path();
  return m;
}

std::vector<StorySample> load_split(const DatasetManifest& manifest, const std::string& split) {
  std::vector<StorySample> out;
  for (std::size_t i = 0; i < manifest.split(split).size(); ++i) out.push_back(load_sample(manifest.sample_dir(split, i)));
  return out;
}

std::vector<std::string> validate_sample(const StorySample& sample, const DatasetConfig& config) {
  std::vector<std::string> problems;
  const auto n = static_cast<std::size_t>(config.frames_per_story);
  auto fail = [&](const std::string& what) { problems.push_back(sample.id + ": " + what); };
  if (sample.story.size() != n) fail("expected " + std::to_string(n) + " paragraphs");
  if (sample.frames.size() != n || sample.true_masks.size() != n || sample.mentions.size() != n || sample.scenes.size() != n) {
    fail("per-frame field counts disagree");
    return problems;
  }
  const auto sprites = make_sprites(config.num_characters);
  for (std::size_t f = 0; f < n; ++f) {
    const auto& frame = sample.frames[f];
    const auto& mask = sample.true_masks[f];
    if (frame.height != config.height || frame.width != config.width || frame.channels != 3) fail("frame shape");
    if (mask.height != config.height || mask.width != config.width || mask.channels != 1) fail("mask shape");
    if (sample.story[f].size() > static_cast<std::size_t>(kMaxParagraphTokens)) fail("paragraph too long");
    if (sample.mentions[f].size() != static_cast<std::size_t>(config.num_characters)) fail("mention vector length");
    const auto& scene = sample.scenes[f];
    if (scene.placed.size() > static_cast<std::size_t>(kMaxPerFrame)) fail("more than 3 sprites");
    std::vector<bool> placed(static_cast<std::size_t>(config.num_characters), false);
    for (const auto& p : scene.placed) {
      if (p.character_id < 0 || p.character_id >= config.num_characters) {
        fail("character id out of range");
        continue;
      }
      placed[static_cast<std::size_t>(p.character_id)] = true;
      if (!in_bounds(p, config)) fail("sprite outside the image");
    }
    for (std::size_t a = 0; a < scene.placed.size(); ++a)
      for (std::size_t b = a + 1; b < scene.placed.size(); ++b)
        if (bbox_overlap_fraction(scene.placed[a], scene.placed[b], config.sprite_size) > kMaxOverlap) fail("sprites overlap");
    if (sample.mentions[f] != placed) fail("mentions differ from placed characters in frame " + std::to_string(f));
    bool any_mention = std::any_of(sample.mentions[f].begin(), sample.mentions[f].end(), [](bool b) { return b; });
    bool any_mask = std::any_of(mask.data.begin(), mask.data.end(), [](std::uint8_t v) { return v != 0; });
    if (any_mention != any_mask) fail("mask/mention disagreement in frame " + std::to_string(f));
  }
  return problems;
}

}  // namespace vpcsv::data
