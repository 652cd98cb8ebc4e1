#include "vpcsv/charmap.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vpcsv/checkpoint.hpp"

namespace vpcsv::cm {

template <typename Scalar>
Classifier<Scalar>::Classifier(const ClassifierConfig& config, std::uint64_t seed) : config_(config) {
  if (config.num_classes < 1) throw std::invalid_argument("classifier: num_classes must be >= 1");
  if (config.height % 4 != 0 || config.width != config.height)
    throw std::invalid_argument("classifier: images must be square with side divisible by 4");
  Rng rng(Rng::derive(seed, "classifier-init"));
  const Index c1 = config.channels1, c2 = config.channels2, c3 = config.channels3;
  params_.add("conv1.w", glorot_uniform<Scalar>({3, 3, 3, c1}, 27, 9 * c1, rng));
  params_.add("conv1.b", Tensor<Scalar>::zeros({c1}));
  params_.add("conv2.w", glorot_uniform<Scalar>({3, 3, c1, c2}, 9 * c1, 9 * c2, rng));
  params_.add("conv2.b", Tensor<Scalar>::zeros({c2}));
  params_.add("conv3.w", glorot_uniform<Scalar>({3, 3, c2, c3}, 9 * c2, 9 * c3, rng));
  params_.add("conv3.b", Tensor<Scalar>::zeros({c3}));
  params_.add("head.w", glorot_uniform<Scalar>({c3, config.num_classes}, c3, config.num_classes, rng));
  params_.add("head.b", Tensor<Scalar>::zeros({config.num_classes}));
}

template <typename Scalar>
Tensor<Scalar> Classifier<Scalar>::trunk(const Tensor<Scalar>& images) const {
  if (images.rank() != 4 || images.dim(1) != config_.height || images.dim(2) != config_.width || images.dim(3) != 3)
    throw ShapeError("classifier: expected [N, " + std::to_string(config_.height) + ", " +
                     std::to_string(config_.width) + ", 3], got " + shape_str(images.shape()));
  const auto& P = params_;
  auto x = relu(conv2d(images, P.at("conv1.w"), P.at("conv1.b"), {1, 1}));
  // 3x3 stride-2 convolutions with one pixel of padding halve the side
  x = relu(conv2d(x, P.at("conv2.w"), P.at("conv2.b"), {2, 1}));
  return relu(conv2d(x, P.at("conv3.w"), P.at("conv3.b"), {2, 1}));
}

template <typename Scalar>
ClassifierOutput<Scalar> Classifier<Scalar>::forward(const Tensor<Scalar>& images) const {
  ClassifierOutput<Scalar> out;
  out.activations = trunk(images);
  out.logits = linear(global_avg_pool(out.activations), params_.at("head.w"), params_.at("head.b"));
  return out;
}

template <typename Scalar>
Tensor<Scalar> Classifier<Scalar>::features(const Tensor<Scalar>& images) const {
  return global_avg_pool(trunk(images));
}

double Heatmap::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

int RegionMask::count() const { return static_cast<int>(std::count(keep.begin(), keep.end(), true)); }

int CharacterPlan::mask_count() const { return static_cast<int>(std::count(tokens.begin(), tokens.end(), kMask)); }

std::set<int> characters_from_logits(const float* logits, int num_classes, double threshold) {
  std::set<int> out;
  for (int c = 0; c < num_classes; ++c) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[c])));
    if (p > threshold) out.insert(c);
  }
  return out;
}

std::vector<std::set<int>> predict_characters(const Classifier<float>& model, const std::vector<Image8>& images,
                                              double threshold) {
  std::vector<std::set<int>> out;
  if (images.empty()) return out;
  NoGradGuard guard;
  const int C = model.num_classes();
  for (std::size_t start = 0; start < images.size(); start += 256) {
    const std::vector<Image8> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                    images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), start + 256)));
    const auto logits = model.forward(vq::frames_to_tensor(chunk)).logits;
    for (std::size_t i = 0; i < chunk.size(); ++i)
      out.push_back(characters_from_logits(logits.data().data() + i * static_cast<std::size_t>(C), C, threshold));
  }
  return out;
}

std::set<int> predict_characters(const Classifier<float>& model, const Image8& image, double threshold) {
  return predict_characters(model, std::vector<Image8>{image}, threshold).front();
}

template <typename Scalar>
std::vector<Heatmap> gradcam_features(const Classifier<Scalar>& model, const Tensor<Scalar>& images, int character_id) {
  const int C = model.num_classes();
  if (character_id < 0 || character_id >= C)
    throw std::out_of_range("gradcam: character id " + std::to_string(character_id) + " outside [0, " +
                            std::to_string(C) + ")");
  Tensor<Scalar> A;
  {
    NoGradGuard guard;
    A = model.forward(images).activations;
  }
  // private tape: a fresh leaf for the activations and detached head weights
  auto leaf = A.detach();
  leaf.set_requires_grad(true);
  const auto logits = linear(global_avg_pool(leaf), model.parameters().at("head.w").detach(),
                             model.parameters().at("head.b").detach());
  auto onehot = Tensor<Scalar>::zeros({C});
  onehot.data()[character_id] = Scalar(1);
  backward(sum(mul(logits, onehot)));
  const auto grad = leaf.grad();

  const Index N = A.dim(0), F = A.dim(1), W = A.dim(2), Ch = A.dim(3);
  std::vector<Heatmap> maps;
  for (Index n = 0; n < N; ++n) {
    const Index base = n * F * W * Ch;
    VectorX<double> weights = VectorX<double>::Zero(Ch);
    for (Index s = 0; s < F * W; ++s)
      for (Index ch = 0; ch < Ch; ++ch) weights[ch] += static_cast<double>(grad[base + s * Ch + ch]);
    weights /= static_cast<double>(F * W);
    Heatmap map(static_cast<int>(F), static_cast<int>(W));
    for (Index s = 0; s < F * W; ++s) {
      double v = 0.0;
      for (Index ch = 0; ch < Ch; ++ch) v += weights[ch] * static_cast<double>(A.data()[base + s * Ch + ch]);
      map.values[static_cast<std::size_t>(s)] = std::max(0.0, v);
    }
    const double peak = map.max();
    if (peak > 0.0)
      for (auto& v : map.values) v /= peak;
    maps.push_back(std::move(map));
  }
  return maps;
}

Heatmap upsample_nearest(const Heatmap& map, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  Heatmap out(map.rows * factor, map.cols * factor);
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out.at(r, c) = map.at(r / factor, c / factor);
  return out;
}

Heatmap pool_mean(const Heatmap& map, int patch) {
  if (patch < 1 || map.rows % patch != 0 || map.cols % patch != 0)
    throw std::invalid_argument("pool_mean: patch " + std::to_string(patch) + " does not tile " +
                                std::to_string(map.rows) + "x" + std::to_string(map.cols));
  Heatmap out(map.rows / patch, map.cols / patch);
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) out.at(r / patch, c / patch) += map.at(r, c);
  for (auto& v : out.values) v /= static_cast<double>(patch * patch);
  return out;
}

Heatmap gradcam(const Classifier<float>& model, const Image8& image, int character_id, int target_size) {
  const auto maps = gradcam_features(model, vq::frames_to_tensor({image}), character_id);
  const int side = target_size > 0 ? target_size : image.height;
  const int F = model.feature_size();
  if (side % F != 0) throw std::invalid_argument("gradcam: target size must be a multiple of the feature side");
  return upsample_nearest(maps.front(), side / F);
}

Heatmap merge_heatmaps(const std::vector<Heatmap>& maps) {
  if (maps.empty()) throw std::invalid_argument("merge_heatmaps: no heatmaps to merge");
  Heatmap out = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    if (maps[i].rows != out.rows || maps[i].cols != out.cols)
      throw std::invalid_argument("merge_heatmaps: shape mismatch");
    for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] = std::max(out.values[k], maps[i].values[k]);
  }
  return out;
}

RegionMask token_mask(const Heatmap& merged, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("token_mask: gamma must lie in [0, 1]");
  if (merged.rows != merged.cols) throw std::invalid_argument("token_mask: heatmap must be square");
  RegionMask mask;
  mask.size = merged.rows;
  mask.keep.resize(merged.values.size());
  for (std::size_t k = 0; k < merged.values.size(); ++k) mask.keep[k] = merged.values[k] >= gamma;
  return mask;
}

CharacterPlan make_plan(const vq::TokenGrid& grid, const RegionMask& mask) {
  if (grid.size != mask.size) throw std::invalid_argument("make_plan: grid and mask sizes differ");
  CharacterPlan plan{grid.size, grid.indices};
  for (std::size_t k = 0; k < plan.tokens.size(); ++k)
    if (!mask.keep[k]) plan.tokens[k] = kMask;
  return plan;
}

CharacterPlan all_mask_plan(int size) {
  return CharacterPlan{size, std::vector<int>(static_cast<std::size_t>(size * size), kMask)};
}

RegionMask frame_region(const Classifier<float>& model, const Image8& frame, const std::vector<bool>& mentions,
                        int grid_size, double gamma) {
  std::vector<Heatmap> maps;
  const auto images = vq::frames_to_tensor({frame});
  for (std::size_t c = 0; c < mentions.size(); ++c) {
    if (!mentions[c]) continue;
    // pixel resolution, then mean-pooled to one value per token patch
    const auto map = gradcam_features(model, images, static_cast<int>(c)).front();
    const auto pixels = upsample_nearest(map, frame.height / model.feature_size());
    maps.push_back(pool_mean(pixels, frame.height / grid_size));
  }
  if (maps.empty()) {
    RegionMask none;
    none.size = grid_size;
    none.keep.assign(static_cast<std::size_t>(grid_size * grid_size), false);
    return none;
  }
  return token_mask(merge_heatmaps(maps), gamma);
}

CharacterPlan frame_plan(const Classifier<float>& model, const Image8& frame, const std::vector<bool>& mentions,
                         const vq::TokenGrid& grid, double gamma) {
  return make_plan(grid, frame_region(model, frame, mentions, grid.size, gamma));
}

ClassifierEval evaluate_classifier(const Classifier<float>& model, const std::vector<Image8>& frames,
                                   const std::vector<std::vector<bool>>& labels, double threshold) {
  const int C = model.num_classes();
  const auto predicted = predict_characters(model, frames, threshold);
  std::vector<double> tp(static_cast<std::size_t>(C)), fp(tp), fn(tp);
  int exact = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    bool all = true;
    for (int c = 0; c < C; ++c) {
      const bool p = predicted[i].count(c) > 0;
      const bool t = labels[i][static_cast<std::size_t>(c)];
      tp[static_cast<std::size_t>(c)] += p && t;
      fp[static_cast<std::size_t>(c)] += p && !t;
      fn[static_cast<std::size_t>(c)] += !p && t;
      all = all && p == t;
    }
    exact += all;
  }
  ClassifierEval out;
  out.subset_accuracy = frames.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(frames.size());
  for (std::size_t c = 0; c < static_cast<std::size_t>(C); ++c) {
    ClassMetrics m;
    m.precision = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    m.recall = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
    out.per_class.push_back(m);
  }
  return out;
}

std::vector<ClassifierEpochLog> train_classifier(Classifier<float>& model, const std::vector<Image8>& frames,
                                                 const std::vector<std::vector<bool>>& labels,
                                                 const std::vector<Image8>& val_frames,
                                                 const std::vector<std::vector<bool>>& val_labels,
                                                 const ClassifierTrainConfig& config,
                                                 const std::function<void(const ClassifierEpochLog&)>& on_epoch) {
  if (frames.empty() || frames.size() != labels.size())
    throw std::invalid_argument("train_classifier: frames and labels must be non-empty and aligned");
  const int C = model.num_classes();
  for (const auto& l : labels)
    if (static_cast<int>(l.size()) != C) throw std::invalid_argument("train_classifier: label width != num_classes");
  auto& params = model.parameters();
  AdamState<float> adam;
  adam.config.lr = config.lr;
  const auto all = vq::frames_to_tensor(frames);
  const Index n = all.dim(0);
  const Index frame_numel = all.numel() / n;
  std::vector<ClassifierEpochLog> log;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle(Rng::derive(config.seed, "classifier-shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double loss_sum = 0.0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index b = std::min<Index>(config.batch_size, n - start);
      Eigen::VectorXf batch(b * frame_numel);
      Eigen::VectorXf targets(b * C);
      for (Index i = 0; i < b; ++i) {
        const Index src = order[static_cast<std::size_t>(start + i)];
        batch.segment(i * frame_numel, frame_numel) = all.data().segment(src * frame_numel, frame_numel);
        for (int c = 0; c < C; ++c)
          targets[i * C + c] = labels[static_cast<std::size_t>(src)][static_cast<std::size_t>(c)] ? 1.0f : 0.0f;
      }
      params.zero_grad();
      const auto images = Tensor<float>::from_data({b, all.dim(1), all.dim(2), all.dim(3)}, std::move(batch));
      const auto loss = bce_with_logits(model.forward(images).logits, Tensor<float>::from_data({b, C}, targets));
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NonFiniteError("classifier: non-finite loss at epoch " + std::to_string(epoch), "loss");
      backward(loss);
      adam_step(params, adam);
      loss_sum += value * static_cast<double>(b);
    }
    ClassifierEpochLog entry;
    entry.epoch = epoch;
    entry.loss = loss_sum / static_cast<double>(n);
    if (!val_frames.empty()) {
      const auto eval = evaluate_classifier(model, val_frames, val_labels);
      entry.val_subset_accuracy = eval.subset_accuracy;
      entry.per_class = eval.per_class;
    }
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

void save_classifier(const Classifier<float>& model, const std::filesystem::path& path) {
  Checkpoint ck;
  const auto& c = model.config();
  ck.put_scalar("config/num_classes", c.num_classes);
  ck.put_scalar("config/height", c.height);
  ck.put_scalar("config/width", c.width);
  ck.put_scalar("config/channels1", c.channels1);
  ck.put_scalar("config/channels2", c.channels2);
  ck.put_scalar("config/channels3", c.channels3);
  ck.put_parameters(model.parameters());
  ck.save(path);
}

Classifier<float> load_classifier(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path);
  ClassifierConfig c;
  c.num_classes = static_cast<int>(ck.get_scalar("config/num_classes"));
  c.height = static_cast<int>(ck.get_scalar("config/height"));
  c.width = static_cast<int>(ck.get_scalar("config/width"));
  c.channels1 = static_cast<int>(ck.get_scalar("config/channels1"));
  c.channels2 = static_cast<int>(ck.get_scalar("config/channels2"));
  c.channels3 = static_cast<int>(ck.get_scalar("config/channels3"));
  Classifier<float> model(c, 0);
  ck.load_parameters(model.parameters());
  return model;
}

template class Classifier<float>;
template class Classifier<double>;
template std::vector<Heatmap> gradcam_features(const Classifier<float>&, const Tensor<float>&, int);
template std::vector<Heatmap> gradcam_features(const Classifier<double>&, const Tensor<double>&, int);

}  // namespace vpcsv::cm
