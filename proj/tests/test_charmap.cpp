#include <doctest.h>

#include <filesystem>

#include "charmap_oracles.hpp"
#include "gradcheck.hpp"
#include "vpcsv/charmap.hpp"

using namespace vpcsv;
using namespace vpcsv::cm;
using vpcsv::testing::gradcheck;
using vpcsv::testing::random_tensor;

namespace {

ClassifierConfig tiny_classifier() {
  ClassifierConfig c;
  c.num_classes = 3;
  c.height = 8;
  c.width = 8;
  c.channels1 = 3;
  c.channels2 = 4;
  c.channels3 = 5;
  return c;
}

Heatmap from_values(int side, std::vector<double> v) {
  Heatmap h(side, side);
  h.values = std::move(v);
  return h;
}

Image8 random_image(int side, Rng& rng) {
  Image8 img(side, side, 3);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

}  // namespace

TEST_CASE("prediction thresholds sigmoid probabilities") {
  const float logits[4] = {5.0f, -5.0f, -5.0f, -5.0f};
  CHECK(characters_from_logits(logits, 4) == std::set<int>{0});
  CHECK(characters_from_logits(logits, 4, 1.0).empty());
  const float zero[2] = {0.0f, 0.0f};
  CHECK(characters_from_logits(zero, 2, 0.5).empty());  // strict inequality
}

TEST_CASE("merge_heatmaps examples") {
  const auto a = from_values(2, {0.3, 0.1, 0.9, 0.0});
  const auto b = from_values(2, {0.7, 0.0, 0.2, 0.0});
  CHECK(merge_heatmaps({a}) == a);
  CHECK(merge_heatmaps({a, Heatmap(2, 2)}) == a);
  CHECK(merge_heatmaps({a, b}).at(0, 0) == 0.7);
  CHECK(merge_heatmaps({a, b}).at(1, 0) == 0.9);
  CHECK_THROWS_AS(merge_heatmaps({}), std::invalid_argument);
  CHECK_THROWS_AS(merge_heatmaps({a, Heatmap(3, 3)}), std::invalid_argument);
}

TEST_CASE("merge is a max semilattice and thresholds are monotone") {
  const auto semi = vpcsv::testing::check_merge_semilattice(2000, 5);
  CHECK(semi.failures == 0);
  const auto mono = vpcsv::testing::check_gamma_monotonicity(2000, 6);
  CHECK(mono.failures == 0);
}

TEST_CASE("token_mask boundaries") {
  const auto h = from_values(2, {1.0, 0.5, 0.0, 1.0});
  CHECK(token_mask(h, 0.0).count() == 4);
  CHECK(token_mask(h, 1.0).count() == 2);
  CHECK(token_mask(h, 0.5).count() == 3);
  CHECK_THROWS_AS(token_mask(h, 1.0 + 1e-9), std::invalid_argument);
  CHECK_THROWS_AS(token_mask(h, -0.1), std::invalid_argument);
}

TEST_CASE("make_plan keeps or masks cells") {
  std::vector<int> flat(64);
  for (int i = 0; i < 64; ++i) flat[static_cast<std::size_t>(i)] = (i * 5) % 64;
  const vq::TokenGrid grid(8, flat);
  RegionMask all{8, std::vector<bool>(64, true)};
  RegionMask none{8, std::vector<bool>(64, false)};
  CHECK(make_plan(grid, all).tokens == flat);
  CHECK(make_plan(grid, none).mask_count() == 64);
  RegionMask some{8, std::vector<bool>(64, false)};
  for (int i = 0; i < 64; i += 3) some.keep[static_cast<std::size_t>(i)] = true;
  const auto plan = make_plan(grid, some);
  CHECK(plan.mask_count() == 64 - some.count());
  for (int i = 0; i < 64; ++i)
    CHECK(plan.tokens[static_cast<std::size_t>(i)] == (some.keep[static_cast<std::size_t>(i)] ? flat[static_cast<std::size_t>(i)] : kMask));
  CHECK_THROWS(make_plan(vq::TokenGrid(4, std::vector<int>(16)), all));
}

TEST_CASE("pooling and upsampling of heatmaps") {
  const auto h = from_values(2, {1.0, 0.0, 0.25, 0.5});
  const auto up = upsample_nearest(h, 4);
  CHECK(up.rows == 8);
  CHECK(up.at(7, 7) == 0.5);
  CHECK(up.at(3, 4) == 0.0);
  CHECK(pool_mean(up, 4) == h);
  const auto pooled = pool_mean(from_values(2, {1.0, 0.0, 0.0, 0.0}), 2);
  CHECK(pooled.at(0, 0) == 0.25);
  CHECK_THROWS(pool_mean(up, 3));
}

TEST_CASE("classifier loss gradients match finite differences") {
  Classifier<double> model(tiny_classifier(), 3);
  Rng rng(4);
  const auto x = random_tensor({2, 8, 8, 3}, rng, 0, 1, false);
  auto targets = Tensor<double>::from_data({2, 3}, (VectorX<double>(6) << 1, 0, 1, 0, 0, 1).finished());
  std::vector<Tensor<double>> params;
  for (auto& [_, t] : model.parameters()) params.push_back(t);
  const auto r = gradcheck([&] { return bce_with_logits(model.forward(x).logits, targets); }, params);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("gradcam: contract, analytic channel weights and scale invariance") {
  Classifier<double> model(tiny_classifier(), 7);
  Rng rng(8);
  const auto x = random_tensor({3, 8, 8, 3}, rng, 0, 1, false);
  for (int c = 0; c < 3; ++c) {
    const auto maps = gradcam_features(model, x, c);
    REQUIRE(maps.size() == 3);
    // the head is linear after global pooling, so the pooled gradient is W[:, c] / F^2
    const auto A = model.forward(x).activations;
    const auto& W = model.parameters().at("head.w");
    for (int n = 0; n < 3; ++n) {
      Heatmap expect(2, 2);
      for (int s = 0; s < 4; ++s) {
        double v = 0;
        for (int ch = 0; ch < 5; ++ch) v += W.data()[ch * 3 + c] / 4.0 * A.data()[(n * 4 + s) * 5 + ch];
        expect.values[static_cast<std::size_t>(s)] = std::max(0.0, v);
      }
      const double peak = expect.max();
      for (std::size_t s = 0; s < 4; ++s) {
        if (peak > 0) expect.values[s] /= peak;
        CHECK(maps[static_cast<std::size_t>(n)].values[s] == doctest::Approx(expect.values[s]).epsilon(1e-12));
        CHECK(maps[static_cast<std::size_t>(n)].values[s] >= 0.0);
        CHECK(maps[static_cast<std::size_t>(n)].values[s] <= 1.0);
      }
      const double m = maps[static_cast<std::size_t>(n)].max();
      CHECK((m == 1.0 || m == 0.0));
    }
    // scale the class column of the head by a positive factor
    auto before = maps;
    auto W2 = model.parameters().at("head.w");
    for (int ch = 0; ch < 5; ++ch) W2.data()[ch * 3 + c] *= 3.7;
    const auto after = gradcam_features(model, x, c);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t s = 0; s < 4; ++s) CHECK(std::abs(after[n].values[s] - before[n].values[s]) < 1e-5);
  }
  CHECK_THROWS_AS(gradcam_features(model, x, 3), std::out_of_range);
  CHECK_THROWS_AS(gradcam_features(model, x, -1), std::out_of_range);
}

TEST_CASE("frame without mentions yields an all-MASK plan") {
  ClassifierConfig config;
  Classifier<float> model(config, 1);
  Rng rng(2);
  const auto img = random_image(32, rng);
  const vq::TokenGrid grid(8, std::vector<int>(64, 5));
  const auto plan = frame_plan(model, img, std::vector<bool>(8, false), grid, 0.5);
  CHECK(plan == all_mask_plan(8));
  const auto full = gradcam(model, img, 2);
  CHECK(full.rows == 32);
  CHECK(full.cols == 32);
}

TEST_CASE("classifier training is deterministic and checkpoints round-trip") {
  auto config = tiny_classifier();
  Rng rng(9);
  std::vector<Image8> frames;
  std::vector<std::vector<bool>> labels;
  for (int i = 0; i < 12; ++i) {
    frames.push_back(random_image(8, rng));
    labels.push_back({rng.below(2) == 1, rng.below(2) == 1, false});
  }
  ClassifierTrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 5;
  Classifier<float> a(config, 1), b(config, 1);
  const auto la = train_classifier(a, frames, labels, frames, labels, tc);
  const auto lb = train_classifier(b, frames, labels, frames, labels, tc);
  CHECK(la.back().loss == lb.back().loss);
  for (const auto& [name, t] : a.parameters()) CHECK(t.data() == b.parameters().at(name).data());
  CHECK(la.back().per_class.size() == 3);

  const auto path = std::filesystem::temp_directory_path() / "vpcsv_test_classifier.ckpt";
  save_classifier(a, path);
  const auto loaded = load_classifier(path);
  for (const auto& [name, t] : a.parameters()) CHECK(t.data() == loaded.parameters().at(name).data());
  std::filesystem::remove(path);
}
