#include <doctest.h>

#include <filesystem>

#include "gradcheck.hpp"
#include "vq_oracles.hpp"
#include "vpcsv/vqvae.hpp"

using namespace vpcsv;
using namespace vpcsv::vq;
using vpcsv::testing::gradcheck;
using vpcsv::testing::random_tensor;

namespace {

VqVaeConfig tiny_config() {
  VqVaeConfig c;
  c.codebook_size = 3;
  c.code_dim = 2;
  c.hidden = 4;
  c.height = 8;
  c.width = 8;
  return c;
}

std::vector<Image8> random_frames(int count, int side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image8> frames;
  for (int i = 0; i < count; ++i) {
    Image8 img(side, side, 3);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
    frames.push_back(std::move(img));
  }
  return frames;
}

}  // namespace

TEST_CASE("default encoder produces an 8x8xD grid and is deterministic") {
  VqVae<float> model(VqVaeConfig{}, 1);
  const auto x = frames_to_tensor(random_frames(2, 32, 5));
  const auto a = model.encode(x);
  const auto b = model.encode(x);
  CHECK(a.shape() == Shape{2, 8, 8, 32});
  CHECK(a.data() == b.data());
  CHECK(a.data().allFinite());
  CHECK_THROWS_AS(model.encode(Tensor<float>::zeros({1, 16, 16, 3})), ShapeError);
}

TEST_CASE("decoder output has image shape and lies in [0, 1]") {
  VqVae<float> model(VqVaeConfig{}, 1);
  Rng rng(3);
  Eigen::VectorXf z(2 * 8 * 8 * 32);
  for (Index i = 0; i < z.size(); ++i) z[i] = static_cast<float>(rng.uniform(-3, 3));
  const auto zq = Tensor<float>::from_data({2, 8, 8, 32}, z);
  const auto out = model.decode(zq);
  CHECK(out.shape() == Shape{2, 32, 32, 3});
  CHECK(out.data().minCoeff() >= 0.0f);
  CHECK(out.data().maxCoeff() <= 1.0f);
  CHECK(model.decode(zq).data() == out.data());
  CHECK_THROWS_AS(model.decode(Tensor<float>::zeros({1, 4, 4, 32})), ShapeError);
}

TEST_CASE("nearest code: inspection example and tie rule") {
  const auto codebook = Tensor<double>::from_data({3, 2}, (VectorX<double>(6) << 0, 0, 1, 1, 2, 2).finished());
  const double cell[2] = {0.9, 1.2};
  CHECK(nearest_code(cell, codebook) == 1);
  const double tie01[2] = {0.5, 0.5};
  CHECK(nearest_code(tie01, codebook) == 0);
  const double tie12[2] = {1.5, 1.5};
  CHECK(nearest_code(tie12, codebook) == 1);
  // duplicated entries: the first copy wins
  const auto dup = Tensor<double>::from_data({3, 2}, (VectorX<double>(6) << 5, 5, 1, 1, 1, 1).finished());
  const double cell2[2] = {1, 1};
  CHECK(nearest_code(cell2, dup) == 1);
}

TEST_CASE("quantize agrees with brute force on random cells") {
  Rng rng(17);
  const auto codebook = random_tensor({64, 32}, rng, -1, 1, false);
  const auto z = random_tensor({10, 10, 10, 32}, rng, -1, 1, false);
  const auto q = quantize(z, codebook);
  CHECK(vpcsv::testing::brute_force_agreement(z, codebook, q.indices) == 1.0);
  CHECK(q.codes.shape() == z.shape());
  for (std::size_t c = 0; c < q.indices.size(); ++c)
    for (Index d = 0; d < 32; ++d)
      CHECK(q.codes.data()[static_cast<Index>(c) * 32 + d] == codebook.data()[q.indices[c] * 32 + d]);
}

TEST_CASE("loss terms vanish when features sit on codebook entries") {
  VqVae<double> model(tiny_config(), 2);
  auto& P = model.parameters();
  // constant encoder output equal to entry 1
  P.at("enc.c4.w").data().setZero();
  P.at("enc.c4.b").data() = model.codebook().data().segment(2, 2);
  Rng rng(4);
  const auto x = random_tensor({2, 8, 8, 3}, rng, 0, 1, false);
  const auto losses = model.loss(x);
  CHECK(losses.codebook.item() == 0.0);
  CHECK(losses.commit.item() == 0.0);
  for (int idx : losses.indices) CHECK(idx == 1);

  // the decoded image of a constant code is reproduced exactly
  NoGradGuard guard;
  const auto target = model.decode(quantize(model.encode(x), model.codebook()).codes);
  CHECK(model.loss(target).recon.item() == 0.0);
}

TEST_CASE("loss terms match hand evaluation on a tiny instance") {
  VqVae<double> model(tiny_config(), 9);
  Rng rng(10);
  const auto x = random_tensor({1, 8, 8, 3}, rng, 0, 1, false);
  const auto losses = model.loss(x);
  const auto expected = vpcsv::testing::direct_vq_losses(model, x);
  CHECK(losses.recon.item() == doctest::Approx(expected.recon).epsilon(1e-12));
  CHECK(losses.codebook.item() == doctest::Approx(expected.codebook).epsilon(1e-12));
  CHECK(losses.commit.item() == doctest::Approx(expected.commit).epsilon(1e-12));
  CHECK(losses.total.item() == doctest::Approx(expected.recon + expected.codebook + expected.commit).epsilon(1e-12));
}

TEST_CASE("encoder input gradient matches finite differences") {
  VqVae<double> model(tiny_config(), 5);
  Rng rng(6);
  auto x = random_tensor({1, 8, 8, 3}, rng, 0, 1, true);
  const auto r = gradcheck([&] { return sum(model.encode(x)); }, {x});
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("each loss term has correct gradients toward the parameters it trains") {
  VqVae<double> model(tiny_config(), 7);
  Rng rng(8);
  const auto x = random_tensor({2, 8, 8, 3}, rng, 0, 1, false);
  const auto r = vpcsv::testing::vq_term_gradchecks(model, x);
  CHECK(r.recon_decoder < 1e-3);
  CHECK(r.codebook_codebook < 1e-3);
  CHECK(r.commit_encoder < 1e-3);
}

TEST_CASE("gradient routing follows the stop-gradient structure") {
  VqVae<double> model(tiny_config(), 11);
  Rng rng(12);
  const auto x = random_tensor({2, 8, 8, 3}, rng, 0, 1, false);
  const auto r = vpcsv::testing::vq_routing(model, x, rng);
  CHECK(r.recon_to_codebook == 0.0);
  CHECK(r.recon_to_encoder > 0.0);
  CHECK(r.recon_to_decoder > 0.0);
  CHECK(r.codebook_to_encoder == 0.0);
  CHECK(r.codebook_to_decoder == 0.0);
  CHECK(r.codebook_to_codebook > 0.0);
  CHECK(r.commit_to_codebook == 0.0);
  CHECK(r.commit_to_decoder == 0.0);
  CHECK(r.commit_to_encoder > 0.0);
  CHECK(r.max_change_under_perturbation < 1e-6);
  CHECK(r.straight_through_mismatch == 0.0);
}

TEST_CASE("token grids flatten row-major and round-trip") {
  std::vector<int> flat(64);
  for (int i = 0; i < 64; ++i) flat[static_cast<std::size_t>(i)] = i % 7;
  const auto grid = TokenGrid::unflatten(flat, 8);
  CHECK(grid.at(1, 0) == flat[8]);
  CHECK(grid.at(7, 7) == flat[63]);
  CHECK(TokenGrid::unflatten(grid.flatten(), 8) == grid);
  CHECK_THROWS(TokenGrid(8, std::vector<int>(63)));
}

TEST_CASE("tokenize then detokenize equals decoding the quantized codes") {
  VqVae<float> model(VqVaeConfig{}, 21);
  const auto frames = random_frames(5, 32, 22);
  const auto grids = tokenize(model, frames);
  REQUIRE(grids.size() == 5);
  std::size_t total = 0;
  for (const auto& g : grids) {
    total += g.flatten().size();
    for (int idx : g.indices) {
      CHECK(idx >= 0);
      CHECK(idx < 64);
    }
  }
  CHECK(total == 320);
  NoGradGuard guard;
  const auto direct = tensor_to_frames(model.decode(quantize(model.encode(frames_to_tensor(frames)), model.codebook()).codes));
  CHECK(detokenize(model, grids) == direct);
  auto bad = grids;
  bad[0].indices[3] = 64;
  CHECK_THROWS_AS(detokenize(model, bad), std::out_of_range);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  auto config = tiny_config();
  config.codebook_size = 8;
  const auto frames = random_frames(12, 8, 30);
  VqTrainConfig train;
  train.epochs = 2;
  train.batch_size = 4;
  train.seed = 3;

  VqVae<float> straight(config, 1);
  const auto full = train_vqvae(straight, frames, train);

  const auto path = std::filesystem::temp_directory_path() / "vpcsv_test_vq_resume.ckpt";
  std::filesystem::remove(path);
  VqVae<float> first(config, 1);
  auto half = train;
  half.epochs = 1;
  train_vqvae(first, frames, half, path);
  VqVae<float> resumed(config, 999);  // different init, overwritten by the checkpoint
  const auto rest = train_vqvae(resumed, frames, train, path);
  REQUIRE(rest.step_losses.size() == 3);
  REQUIRE(full.step_losses.size() == 6);
  for (std::size_t i = 0; i < 3; ++i) CHECK(rest.step_losses[i] == full.step_losses[3 + i]);
  REQUIRE(rest.log.size() == 2);
  CHECK(rest.log[0].recon == doctest::Approx(full.log[0].recon).epsilon(1e-6));
  for (const auto& [name, t] : resumed.parameters()) CHECK(t.data() == straight.parameters().at(name).data());

  save_vqvae(resumed, path);
  const auto loaded = load_vqvae(path);
  CHECK(loaded.codebook().data() == resumed.codebook().data());
  std::filesystem::remove(path);
}

TEST_CASE("non-finite loss aborts training and keeps the last checkpoint") {
  auto config = tiny_config();
  const auto frames = random_frames(4, 8, 31);
  const auto path = std::filesystem::temp_directory_path() / "vpcsv_test_vq_nan.ckpt";
  std::filesystem::remove(path);
  VqVae<float> model(config, 1);
  VqTrainConfig train;
  train.epochs = 1;
  train.batch_size = 4;
  train_vqvae(model, frames, train, path);
  const auto before = std::filesystem::file_size(path);
  model.parameters().at("dec.t2.b").data()[0] = std::numeric_limits<float>::quiet_NaN();
  train.epochs = 2;
  // load from checkpoint would repair the NaN, so train without resuming
  CHECK_THROWS_AS(train_vqvae(model, frames, train), NonFiniteError);
  CHECK(std::filesystem::file_size(path) == before);
  std::filesystem::remove(path);
}
