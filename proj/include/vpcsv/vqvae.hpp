#pragma once

// Visual tokenizer: strided conv encoder to a p x p x D grid, nearest-codebook
// quantization with a straight-through decoder path, transposed-conv decoder.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vpcsv/image.hpp"
#include "vpcsv/ops.hpp"
#include "vpcsv/optim.hpp"

namespace vpcsv::vq {

/// p x p codebook indices, row-major. The flat order is the sequence order
/// used by the language model.
struct TokenGrid {
  int size = 0;
  std::vector<int> indices;

  TokenGrid() = default;
  TokenGrid(int p, std::vector<int> flat);
  int at(int row, int col) const { return indices[static_cast<std::size_t>(row * size + col)]; }
  const std::vector<int>& flatten() const { return indices; }
  static TokenGrid unflatten(const std::vector<int>& flat, int p) { return TokenGrid(p, flat); }
  bool operator==(const TokenGrid&) const = default;
};

struct VqVaeConfig {
  int codebook_size = 64;  // K
  int code_dim = 32;       // D
  int hidden = 64;
  double beta = 0.25;
  int height = 32;
  int width = 32;
};

template <typename Scalar>
struct Quantized {
  std::vector<int> indices;     // one per cell, row-major over [N, p, p]
  Tensor<Scalar> codes;         // e_k per cell, gradient reaches the codebook
  Tensor<Scalar> straight;      // value of codes, gradient passes to z_e
};

template <typename Scalar>
struct VqLosses {
  Tensor<Scalar> recon;
  Tensor<Scalar> codebook;
  Tensor<Scalar> commit;
  Tensor<Scalar> total;
  std::vector<int> indices;
};

/// Nearest entry by squared L2; ties go to the smaller index.
template <typename Scalar>
Quantized<Scalar> quantize(const Tensor<Scalar>& z_e, const Tensor<Scalar>& codebook);

/// Index of the nearest codebook row for one D-vector (ties to the smaller index).
template <typename Scalar>
int nearest_code(const Scalar* cell, const Tensor<Scalar>& codebook);

template <typename Scalar>
class VqVae {
 public:
  VqVae(const VqVaeConfig& config, std::uint64_t seed);

  const VqVaeConfig& config() const { return config_; }
  int grid_size() const { return config_.height / 4; }

  /// [N, H, W, 3] in [0, 1] -> z_e [N, p, p, D]
  Tensor<Scalar> encode(const Tensor<Scalar>& images) const;
  /// [N, p, p, D] -> [N, H, W, 3] squashed to [0, 1]
  Tensor<Scalar> decode(const Tensor<Scalar>& z_q) const;
  /// Reconstruction, codebook and commitment terms for a batch of images.
  VqLosses<Scalar> loss(const Tensor<Scalar>& images) const;

  const Tensor<Scalar>& codebook() const { return params_.at("codebook"); }
  Tensor<Scalar>& codebook() { return params_.at("codebook"); }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  /// Parameter names belonging to the encoder / decoder stacks.
  std::vector<std::string> encoder_parameter_names() const;
  std::vector<std::string> decoder_parameter_names() const;

 private:
  VqVaeConfig config_;
  ParameterSet<Scalar> params_;
};

/// Stacks 8-bit RGB frames into a float [N, H, W, 3] tensor in [0, 1].
Tensor<float> frames_to_tensor(const std::vector<Image8>& frames);
std::vector<Image8> tensor_to_frames(const Tensor<float>& images);

std::vector<TokenGrid> tokenize(const VqVae<float>& model, const std::vector<Image8>& frames);
/// Rejects indices >= K.
std::vector<Image8> detokenize(const VqVae<float>& model, const std::vector<TokenGrid>& grids);

struct VqTrainConfig {
  int epochs = 25;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct VqEpochLog {
  int epoch = 0;
  double recon = 0.0;
  double codebook = 0.0;
  double commit = 0.0;
  double total = 0.0;
  double usage = 0.0;  // fraction of entries selected at least once this epoch
};

struct VqTrainResult {
  std::vector<VqEpochLog> log;
  std::vector<double> step_losses;  // total loss of every step run by this call
};

/// Trains with Adam over shuffled single frames. When `checkpoint_path` is
/// non-empty the state is saved after every epoch, and an existing checkpoint
/// there is resumed from. A non-finite loss throws and leaves the last
/// checkpoint in place.
VqTrainResult train_vqvae(VqVae<float>& model, const std::vector<Image8>& frames, const VqTrainConfig& config,
                          const std::filesystem::path& checkpoint_path = {},
                          const std::function<void(const VqEpochLog&)>& on_epoch = {});

void save_vqvae(const VqVae<float>& model, const std::filesystem::path& path);
VqVae<float> load_vqvae(const std::filesystem::path& path);

extern template class VqVae<float>;
extern template class VqVae<double>;

}  // namespace vpcsv::vq
