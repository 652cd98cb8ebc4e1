#include "vpcsv/vqvae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vpcsv/checkpoint.hpp"

namespace vpcsv::vq {

TokenGrid::TokenGrid(int p, std::vector<int> flat) : size(p), indices(std::move(flat)) {
  if (p <= 0 || indices.size() != static_cast<std::size_t>(p) * static_cast<std::size_t>(p))
    throw std::invalid_argument("token grid: expected " + std::to_string(p * p) + " indices, got " +
                                std::to_string(indices.size()));
}

template <typename Scalar>
int nearest_code(const Scalar* cell, const Tensor<Scalar>& codebook) {
  const Index K = codebook.dim(0);
  const Index D = codebook.dim(1);
  const Scalar* entries = codebook.data().data();
  int best = 0;
  double best_dist = 0.0;
  for (Index k = 0; k < K; ++k) {
    double dist = 0.0;
    for (Index d = 0; d < D; ++d) {
      const double diff = static_cast<double>(cell[d]) - static_cast<double>(entries[k * D + d]);
      dist += diff * diff;
    }
    // strict comparison keeps the first (smallest) index on ties
    if (k == 0 || dist < best_dist) {
      best = static_cast<int>(k);
      best_dist = dist;
    }
  }
  return best;
}

template <typename Scalar>
Quantized<Scalar> quantize(const Tensor<Scalar>& z_e, const Tensor<Scalar>& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) < 2) throw ShapeError("quantize: codebook must be [K>=2, D]");
  const Index D = codebook.dim(1);
  if (z_e.rank() < 1 || z_e.dim(-1) != D)
    throw ShapeError("quantize: feature dim " + shape_str(z_e.shape()) + " vs codebook " + shape_str(codebook.shape()));
  const Index cells = z_e.numel() / D;
  Quantized<Scalar> out;
  out.indices.resize(static_cast<std::size_t>(cells));
  const Scalar* z = z_e.data().data();
  for (Index c = 0; c < cells; ++c) out.indices[static_cast<std::size_t>(c)] = nearest_code(z + c * D, codebook);
  out.codes = reshape(embedding(codebook, std::span<const int>(out.indices)), z_e.shape());
  out.straight = straight_through(out.codes, z_e);
  return out;
}

namespace {

template <typename Scalar>
void add_conv(ParameterSet<Scalar>& params, const std::string& name, Shape weight_shape, Index fan_in,
              Index fan_out, Index out_channels, Rng& rng) {
  params.add(name + ".w", glorot_uniform<Scalar>(std::move(weight_shape), fan_in, fan_out, rng));
  params.add(name + ".b", Tensor<Scalar>::zeros({out_channels}));
}

}  // namespace

template <typename Scalar>
VqVae<Scalar>::VqVae(const VqVaeConfig& config, std::uint64_t seed) : config_(config) {
  if (config.codebook_size < 2) throw std::invalid_argument("vqvae: codebook_size must be >= 2");
  if (config.code_dim < 1 || config.hidden < 1) throw std::invalid_argument("vqvae: code_dim and hidden must be >= 1");
  if (config.height % 4 != 0 || config.width != config.height)
    throw std::invalid_argument("vqvae: images must be square with side divisible by 4");
  Rng rng(Rng::derive(seed, "vqvae-init"));
  const Index h = config.hidden;
  const Index d = config.code_dim;
  add_conv(params_, "enc.c1", {4, 4, 3, h}, 16 * 3, 16 * h, h, rng);
  add_conv(params_, "enc.c2", {4, 4, h, h}, 16 * h, 16 * h, h, rng);
  add_conv(params_, "enc.c3", {3, 3, h, h}, 9 * h, 9 * h, h, rng);
  add_conv(params_, "enc.c4", {1, 1, h, d}, h, d, d, rng);
  add_conv(params_, "dec.c1", {3, 3, d, h}, 9 * d, 9 * h, h, rng);
  add_conv(params_, "dec.t1", {h, 4, 4, h}, 16 * h, 16 * h, h, rng);
  add_conv(params_, "dec.t2", {h, 4, 4, 3}, 16 * h, 16 * 3, 3, rng);
  const double bound = 1.0 / config.codebook_size;
  params_.add("codebook", uniform_init<Scalar>({config.codebook_size, d}, bound, rng));
}

template <typename Scalar>
Tensor<Scalar> VqVae<Scalar>::encode(const Tensor<Scalar>& images) const {
  if (images.rank() != 4 || images.dim(1) != config_.height || images.dim(2) != config_.width || images.dim(3) != 3)
    throw ShapeError("encode: expected [N, " + std::to_string(config_.height) + ", " + std::to_string(config_.width) +
                     ", 3], got " + shape_str(images.shape()));
  const auto& P = params_;
  auto x = relu(conv2d(images, P.at("enc.c1.w"), P.at("enc.c1.b"), {2, 1}));
  x = relu(conv2d(x, P.at("enc.c2.w"), P.at("enc.c2.b"), {2, 1}));
  x = relu(conv2d(x, P.at("enc.c3.w"), P.at("enc.c3.b"), {1, 1}));
  return conv2d(x, P.at("enc.c4.w"), P.at("enc.c4.b"), {1, 0});
}

template <typename Scalar>
Tensor<Scalar> VqVae<Scalar>::decode(const Tensor<Scalar>& z_q) const {
  const Index p = grid_size();
  if (z_q.rank() != 4 || z_q.dim(1) != p || z_q.dim(2) != p || z_q.dim(3) != config_.code_dim)
    throw ShapeError("decode: expected [N, " + std::to_string(p) + ", " + std::to_string(p) + ", " +
                     std::to_string(config_.code_dim) + "], got " + shape_str(z_q.shape()));
  const auto& P = params_;
  auto x = relu(conv2d(z_q, P.at("dec.c1.w"), P.at("dec.c1.b"), {1, 1}));
  x = relu(conv_transpose2d(x, P.at("dec.t1.w"), P.at("dec.t1.b"), {2, 1}));
  return sigmoid(conv_transpose2d(x, P.at("dec.t2.w"), P.at("dec.t2.b"), {2, 1}));
}

template <typename Scalar>
VqLosses<Scalar> VqVae<Scalar>::loss(const Tensor<Scalar>& images) const {
  const auto z_e = encode(images);
  auto q = quantize(z_e, codebook());
  const auto x_hat = decode(q.straight);
  const auto dim = static_cast<Scalar>(config_.code_dim);
  VqLosses<Scalar> out;
  out.recon = squared_error(x_hat, images);
  // squared_error averages over D too; scaling by D gives the per-cell squared norm
  out.codebook = scale(squared_error(stop_gradient(z_e), q.codes), dim);
  out.commit = scale(squared_error(stop_gradient(q.codes), z_e), static_cast<Scalar>(config_.beta) * dim);
  out.total = add(add(out.recon, out.codebook), out.commit);
  out.indices = std::move(q.indices);
  return out;
}

template <typename Scalar>
std::vector<std::string> VqVae<Scalar>::encoder_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : params_)
    if (name.rfind("enc.", 0) == 0) names.push_back(name);
  return names;
}

template <typename Scalar>
std::vector<std::string> VqVae<Scalar>::decoder_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : params_)
    if (name.rfind("dec.", 0) == 0) names.push_back(name);
  return names;
}

Tensor<float> frames_to_tensor(const std::vector<Image8>& frames) {
  if (frames.empty()) throw std::invalid_argument("frames_to_tensor: no frames");
  const int h = frames[0].height;
  const int w = frames[0].width;
  Eigen::VectorXf data(static_cast<Index>(frames.size()) * h * w * 3);
  Index offset = 0;
  for (const auto& f : frames) {
    if (f.height != h || f.width != w || f.channels != 3)
      throw ShapeError("frames_to_tensor: frames must share one RGB size");
    for (const auto v : f.data) data[offset++] = static_cast<float>(v) / 255.0f;
  }
  return Tensor<float>::from_data({static_cast<Index>(frames.size()), h, w, 3}, std::move(data));
}

std::vector<Image8> tensor_to_frames(const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(3) != 3) throw ShapeError("tensor_to_frames: expected [N, H, W, 3]");
  const auto n = images.dim(0), h = images.dim(1), w = images.dim(2);
  std::vector<Image8> frames;
  frames.reserve(static_cast<std::size_t>(n));
  const float* src = images.data().data();
  for (Index i = 0; i < n; ++i) {
    Image8 img(static_cast<int>(h), static_cast<int>(w), 3);
    for (Index j = 0; j < h * w * 3; ++j) {
      const float v = std::clamp(src[i * h * w * 3 + j], 0.0f, 1.0f);
      img.data[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    frames.push_back(std::move(img));
  }
  return frames;
}

std::vector<TokenGrid> tokenize(const VqVae<float>& model, const std::vector<Image8>& frames) {
  NoGradGuard no_grad;
  const int p = model.grid_size();
  const auto q = quantize(model.encode(frames_to_tensor(frames)), model.codebook());
  std::vector<TokenGrid> grids;
  const std::size_t cells = static_cast<std::size_t>(p) * static_cast<std::size_t>(p);
  for (std::size_t i = 0; i < frames.size(); ++i)
    grids.emplace_back(p, std::vector<int>(q.indices.begin() + static_cast<std::ptrdiff_t>(i * cells),
                                           q.indices.begin() + static_cast<std::ptrdiff_t>((i + 1) * cells)));
  return grids;
}

std::vector<Image8> detokenize(const VqVae<float>& model, const std::vector<TokenGrid>& grids) {
  NoGradGuard no_grad;
  const int p = model.grid_size();
  const int K = model.config().codebook_size;
  std::vector<int> flat;
  for (const auto& g : grids) {
    if (g.size != p) throw std::invalid_argument("detokenize: grid size " + std::to_string(g.size));
    for (const int idx : g.indices) {
      if (idx < 0 || idx >= K)
        throw std::out_of_range("detokenize: index " + std::to_string(idx) + " outside codebook of " +
                                std::to_string(K));
      flat.push_back(idx);
    }
  }
  const auto codes = reshape(embedding(model.codebook(), std::span<const int>(flat)),
                             {static_cast<Index>(grids.size()), p, p, model.config().code_dim});
  return tensor_to_frames(model.decode(codes));
}

namespace {

Checkpoint model_checkpoint(const VqVae<float>& model) {
  Checkpoint ck;
  const auto& c = model.config();
  ck.put_scalar("config/codebook_size", c.codebook_size);
  ck.put_scalar("config/code_dim", c.code_dim);
  ck.put_scalar("config/hidden", c.hidden);
  ck.put_scalar("config/beta", c.beta);
  ck.put_scalar("config/height", c.height);
  ck.put_scalar("config/width", c.width);
  ck.put_parameters(model.parameters());
  return ck;
}

VqVaeConfig config_from(const Checkpoint& ck) {
  VqVaeConfig c;
  c.codebook_size = static_cast<int>(ck.get_scalar("config/codebook_size"));
  c.code_dim = static_cast<int>(ck.get_scalar("config/code_dim"));
  c.hidden = static_cast<int>(ck.get_scalar("config/hidden"));
  c.beta = ck.get_scalar("config/beta");
  c.height = static_cast<int>(ck.get_scalar("config/height"));
  c.width = static_cast<int>(ck.get_scalar("config/width"));
  return c;
}

}  // namespace

void save_vqvae(const VqVae<float>& model, const std::filesystem::path& path) { model_checkpoint(model).save(path); }

VqVae<float> load_vqvae(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path);
  VqVae<float> model(config_from(ck), 0);
  ck.load_parameters(model.parameters());
  return model;
}

VqTrainResult train_vqvae(VqVae<float>& model, const std::vector<Image8>& frames, const VqTrainConfig& config,
                          const std::filesystem::path& checkpoint_path,
                          const std::function<void(const VqEpochLog&)>& on_epoch) {
  if (frames.empty()) throw std::invalid_argument("train_vqvae: no training frames");
  if (config.batch_size < 1 || config.epochs < 0) throw std::invalid_argument("train_vqvae: bad batch_size/epochs");
  auto& params = model.parameters();
  AdamState<float> adam;
  adam.config.lr = config.lr;
  int start_epoch = 0;
  VqTrainResult result;
  if (!checkpoint_path.empty() && std::filesystem::exists(checkpoint_path)) {
    const auto ck = Checkpoint::load(checkpoint_path);
    ck.load_parameters(params);
    ck.load_adam(adam, params);
    adam.config.lr = config.lr;
    start_epoch = static_cast<int>(ck.get_scalar("train/epochs_done"));
    for (int e = 0; e < start_epoch; ++e) {
      VqEpochLog log;
      log.epoch = e;
      const std::string key = "train/log/" + std::to_string(e);
      if (ck.contains(key)) {
        const auto& row = ck.get(key).values;
        log.recon = row[0];
        log.codebook = row[1];
        log.commit = row[2];
        log.total = row[3];
        log.usage = row[4];
      }
      result.log.push_back(log);
    }
  }

  const auto all = frames_to_tensor(frames);
  const Index n = all.dim(0);
  const Index frame_numel = all.numel() / n;
  const int K = model.config().codebook_size;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle(Rng::derive(config.seed, "vqvae-shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    std::vector<char> used(static_cast<std::size_t>(K), 0);
    double sums[4] = {0, 0, 0, 0};
    Index seen = 0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index b = std::min<Index>(config.batch_size, n - start);
      Eigen::VectorXf batch(b * frame_numel);
      for (Index i = 0; i < b; ++i)
        batch.segment(i * frame_numel, frame_numel) =
            all.data().segment(order[static_cast<std::size_t>(start + i)] * frame_numel, frame_numel);
      const auto images = Tensor<float>::from_data({b, all.dim(1), all.dim(2), all.dim(3)}, std::move(batch));
      params.zero_grad();
      const auto losses = model.loss(images);
      const double total = losses.total.item();
      if (!std::isfinite(total))
        throw NonFiniteError("vqvae: non-finite loss at epoch " + std::to_string(epoch) + ", step starting at frame " +
                                 std::to_string(start),
                             "total");
      backward(losses.total);
      adam_step(params, adam);
      for (const int idx : losses.indices) used[static_cast<std::size_t>(idx)] = 1;
      sums[0] += losses.recon.item() * static_cast<double>(b);
      sums[1] += losses.codebook.item() * static_cast<double>(b);
      sums[2] += losses.commit.item() * static_cast<double>(b);
      sums[3] += total * static_cast<double>(b);
      seen += b;
      result.step_losses.push_back(total);
    }
    VqEpochLog log;
    log.epoch = epoch;
    log.recon = sums[0] / static_cast<double>(seen);
    log.codebook = sums[1] / static_cast<double>(seen);
    log.commit = sums[2] / static_cast<double>(seen);
    log.total = sums[3] / static_cast<double>(seen);
    log.usage = static_cast<double>(std::count(used.begin(), used.end(), 1)) / K;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (!checkpoint_path.empty()) {
      auto ck = model_checkpoint(model);
      ck.put_adam(adam, params);
      ck.put_scalar("train/epochs_done", epoch + 1);
      for (const auto& row : result.log) {
        Eigen::VectorXf v(5);
        v << static_cast<float>(row.recon), static_cast<float>(row.codebook), static_cast<float>(row.commit),
            static_cast<float>(row.total), static_cast<float>(row.usage);
        ck.put("train/log/" + std::to_string(row.epoch), {5}, v);
      }
      ck.save(checkpoint_path);
    }
  }
  return result;
}

template class VqVae<float>;
template class VqVae<double>;
template Quantized<float> quantize(const Tensor<float>&, const Tensor<float>&);
template Quantized<double> quantize(const Tensor<double>&, const Tensor<double>&);
template int nearest_code(const float*, const Tensor<float>&);
template int nearest_code(const double*, const Tensor<double>&);

}  // namespace vpcsv::vq
