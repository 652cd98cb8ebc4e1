#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "vpcsv/dataset.hpp"
#include "vpcsv/image.hpp"

using namespace vpcsv;
using namespace vpcsv::data;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vpcsv_test_dataset_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

int count_nonzero(const Image8& mask) {
  int n = 0;
  for (auto v : mask.data) n += v != 0;
  return n;
}

struct World {
  std::vector<Sprite> sprites = make_sprites(8);
  std::vector<Background> backgrounds = make_backgrounds(7);
  Vocabulary vocab = Vocabulary::build(sprites, backgrounds);
};

}  // namespace

TEST_CASE("sprites are pairwise distinguishable") {
  const auto sprites = make_sprites(12);
  std::set<ShapeKind> shapes;
  std::set<std::array<std::uint8_t, 3>> colors;
  for (const auto& s : sprites) {
    shapes.insert(s.shape);
    colors.insert(s.color);
  }
  CHECK(shapes.size() == 12);
  CHECK(colors.size() == 12);
  CHECK_THROWS(make_sprites(13));
}

TEST_CASE("empty scene renders background only with an empty mask") {
  World w;
  SceneSpec scene{0, {}, 0};
  const auto [image, mask] = render_frame(scene, w.sprites, w.backgrounds, 32, 32, 10);
  CHECK(count_nonzero(mask) == 0);
  // solid background: every pixel equals the primary color
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) CHECK(image.at(y, x, 0) == w.backgrounds[0].primary[0]);
}

TEST_CASE("centered circle covers the rasterized disc and stays in its bbox") {
  World w;
  REQUIRE(w.sprites[0].shape == ShapeKind::circle);
  const Placement p{0, 4, 16, 16, 1.0};
  SceneSpec scene{0, {p}, 0};
  const auto [image, mask] = render_frame(scene, w.sprites, w.backgrounds, 32, 32, 10);
  // pixel centers of a 10x10 box inside the inscribed disc
  CHECK(count_nonzero(mask) == 80);
  const auto box = sprite_bbox(p, 10);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (mask.at(y, x)) {
        CHECK(x >= box[0]);
        CHECK(x < box[1]);
        CHECK(y >= box[2]);
        CHECK(y < box[3]);
        CHECK(image.at(y, x, 0) == w.sprites[0].color[0]);
      }
}

TEST_CASE("two-sprite mask is the union of single-sprite masks") {
  World w;
  const Placement a{1, 0, 7, 7, 1.0};
  const Placement b{5, 8, 24, 24, 0.8};
  const auto ma = render_frame({0, {a}, 2}, w.sprites, w.backgrounds, 32, 32, 10).second;
  const auto mb = render_frame({0, {b}, 2}, w.sprites, w.backgrounds, 32, 32, 10).second;
  const auto mab = render_frame({0, {a, b}, 2}, w.sprites, w.backgrounds, 32, 32, 10).second;
  for (std::size_t i = 0; i < mab.data.size(); ++i) CHECK(mab.data[i] == (ma.data[i] | mb.data[i]));
}

TEST_CASE("out-of-bounds placement is rejected") {
  World w;
  SceneSpec scene{0, {Placement{0, 0, 2, 16, 1.0}}, 0};
  CHECK_THROWS_AS(render_frame(scene, w.sprites, w.backgrounds, 32, 32, 10), std::invalid_argument);
}

TEST_CASE("paragraphs name exactly the placed characters") {
  World w;
  const std::vector<SceneSpec> scenes = {{0, {Placement{2, 4, 16, 16, 1.0}}, 1}, {1, {}, 3}};
  const auto text = story_text(scenes, w.sprites, w.backgrounds, w.vocab);
  REQUIRE(text.size() == 2);
  const auto m0 = mentioned_characters(text[0], w.sprites, w.vocab);
  for (int c = 0; c < 8; ++c) CHECK(m0[static_cast<std::size_t>(c)] == (c == 2));
  CHECK(paragraph_string(text[0], w.vocab) == w.sprites[2].name + " center in " + w.backgrounds[1].word);
  CHECK(paragraph_string(text[1], w.vocab) == "the " + w.backgrounds[3].word + " is empty");
  const auto m1 = mentioned_characters(text[1], w.sprites, w.vocab);
  CHECK(std::count(m1.begin(), m1.end(), true) == 0);
}

TEST_CASE("vocabulary reserves id 0 for padding and stays small") {
  World w;
  CHECK(w.vocab.word(0) == "<pad>");
  CHECK(w.vocab.size() <= 40);
  CHECK_THROWS(w.vocab.id("zeppelin"));
}

TEST_CASE("generated corpus: determinism, counts and invariants") {
  DatasetConfig config;
  config.train = 512;
  config.val = 8;
  config.test = 16;
  const auto root_a = scratch("a");
  const auto root_b = scratch("b");
  const auto a = generate_dataset(config, 11, root_a);
  const auto b = generate_dataset(config, 11, root_b);
  CHECK(a.dataset_hash == b.dataset_hash);
  CHECK(a.split("train").size() == 512);
  CHECK(a.split("val").size() == 8);
  CHECK(a.split("test").size() == 16);

  const auto loaded = load_manifest(root_a / "manifest.json");
  CHECK(loaded.dataset_hash == a.dataset_hash);
  CHECK(loaded.vocabulary == a.vocabulary);

  const auto train = load_split(loaded, "train");
  REQUIRE(train.size() == 512);
  std::array<int, 4> histogram{};
  std::set<std::string> train_keys;
  for (const auto& s : train) {
    CHECK(validate_sample(s, config).empty());
    CHECK(s.frames.size() == 5);
    for (std::size_t f = 0; f < 5; ++f) {
      CHECK(s.mentions[f].size() == 8);
      histogram[s.scenes[f].placed.size()] += 1;
      CHECK(s.story[f].size() <= static_cast<std::size_t>(kMaxParagraphTokens));
      const bool any_mention = std::count(s.mentions[f].begin(), s.mentions[f].end(), true) > 0;
      CHECK(any_mention == (count_nonzero(s.true_masks[f]) > 0));
    }
    std::string key;
    for (const auto& sc : s.scenes) {
      key += std::to_string(sc.background_id) + ";";
      for (const auto& p : sc.placed) key += std::to_string(p.character_id) + "@" + std::to_string(p.cx) + "," +
                                             std::to_string(p.cy) + ";";
      key += "|";
    }
    train_keys.insert(key);
  }
  for (int k = 0; k < 4; ++k) CHECK(histogram[static_cast<std::size_t>(k)] > 0);

  for (const auto& s : load_split(loaded, "test")) {
    std::string key;
    for (const auto& sc : s.scenes) {
      key += std::to_string(sc.background_id) + ";";
      for (const auto& p : sc.placed) key += std::to_string(p.character_id) + "@" + std::to_string(p.cx) + "," +
                                             std::to_string(p.cy) + ";";
      key += "|";
    }
    CHECK(train_keys.count(key) == 0);
  }
  std::filesystem::remove_all(root_b);
  std::filesystem::remove_all(root_a);
}

TEST_CASE("save then load is lossless; truncated PNG names the file") {
  World w;
  DatasetConfig config;
  const auto sample = generate_story(99, "s", config, w.sprites, w.backgrounds, w.vocab);
  const auto dir = scratch("roundtrip");
  save_sample(sample, dir);
  const auto back = load_sample(dir);
  CHECK(back.story == sample.story);
  CHECK(back.frames == sample.frames);
  CHECK(back.mentions == sample.mentions);
  CHECK(back.true_masks == sample.true_masks);
  CHECK(back.scenes == sample.scenes);

  const auto png = dir / "frame_2.png";
  const auto full = std::filesystem::file_size(png);
  std::filesystem::resize_file(png, full / 2);
  try {
    load_sample(dir);
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    CHECK(e.path() == png);
    CHECK(std::string(e.what()).find("frame_2.png") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_sample(dir), IoError);
}
