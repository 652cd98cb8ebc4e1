#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vpcsv/storylm.hpp"

namespace vpcsv::lm {

namespace {

using RowVec = Eigen::RowVectorXf;
using ConstMat = ConstMapRM<float>;

RowVec layer_norm_row(const RowVec& x, const Eigen::VectorXf& g, const Eigen::VectorXf& b) {
  const Eigen::RowVectorXd xd = x.cast<double>();
  const double mu = xd.mean();
  const double var = (xd.array() - mu).square().mean();
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  const RowVec xhat = ((xd.array() - mu) * inv).matrix().cast<float>();
  return (xhat.array() * g.transpose().array() + b.transpose().array()).matrix();
}

}  // namespace

struct KvDecoder::Impl {
  const StoryLm<float>& model;
  Index d, H, dh, F, V, max_len;
  int layers;
  int pos = 0;
  std::vector<MatrixRM<float>> keys, values;
  Eigen::VectorXf logits;

  explicit Impl(const StoryLm<float>& m)
      : model(m),
        d(m.config().dim),
        H(m.config().heads),
        dh(m.config().dim / m.config().heads),
        F(m.config().ff),
        V(m.layout().vocab_size()),
        max_len(m.max_length()),
        layers(m.config().layers) {
    for (int l = 0; l < layers; ++l) {
      keys.emplace_back(MatrixRM<float>::Zero(max_len, d));
      values.emplace_back(MatrixRM<float>::Zero(max_len, d));
    }
  }

  ConstMat mat(const std::string& name, Index rows, Index cols) const {
    return ConstMat(model.parameters().at(name).data().data(), rows, cols);
  }
  const Eigen::VectorXf& vec(const std::string& name) const { return model.parameters().at(name).data(); }

  const Eigen::VectorXf& feed(int token) {
    if (pos >= max_len) throw std::out_of_range("decoder: sequence longer than the model's maximum");
    if (token < 0 || token >= V) throw std::invalid_argument("decoder: token id " + std::to_string(token));
    RowVec x = mat("tok_emb", V, d).row(token) + mat("pos_emb", max_len, d).row(pos);
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int l = 0; l < layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      const RowVec h = layer_norm_row(x, vec(p + "ln1.g"), vec(p + "ln1.b"));
      const RowVec q = h * mat(p + "q.w", d, d) + vec(p + "q.b").transpose();
      keys[static_cast<std::size_t>(l)].row(pos) = h * mat(p + "k.w", d, d) + vec(p + "k.b").transpose();
      values[static_cast<std::size_t>(l)].row(pos) = h * mat(p + "v.w", d, d) + vec(p + "v.b").transpose();
      RowVec ctx(d);
      for (Index head = 0; head < H; ++head) {
        const auto K = keys[static_cast<std::size_t>(l)].block(0, head * dh, pos + 1, dh);
        const auto Vv = values[static_cast<std::size_t>(l)].block(0, head * dh, pos + 1, dh);
        Eigen::VectorXf s = K * q.segment(head * dh, dh).transpose();
        const float mx = s.maxCoeff() * scale;
        s = (s.array() * scale - mx).exp().matrix();
        s /= static_cast<float>(s.cast<double>().sum());
        ctx.segment(head * dh, dh) = s.transpose() * Vv;
      }
      x += ctx * mat(p + "o.w", d, d) + vec(p + "o.b").transpose();
      const RowVec h2 = layer_norm_row(x, vec(p + "ln2.g"), vec(p + "ln2.b"));
      RowVec f = h2 * mat(p + "ff1.w", d, F) + vec(p + "ff1.b").transpose();
      f = f.cwiseMax(0.0f);
      x += f * mat(p + "ff2.w", F, d) + vec(p + "ff2.b").transpose();
    }
    const RowVec out = layer_norm_row(x, vec("ln_f.g"), vec("ln_f.b"));
    logits = (out * mat("head.w", d, V)).transpose() + vec("head.b");
    ++pos;
    return logits;
  }
};

KvDecoder::KvDecoder(const StoryLm<float>& model) : impl_(std::make_unique<Impl>(model)) {}
KvDecoder::~KvDecoder() = default;
const Eigen::VectorXf& KvDecoder::feed(int token) { return impl_->feed(token); }
int KvDecoder::position() const { return impl_->pos; }
void KvDecoder::reset() { impl_->pos = 0; }

int choose_token(const Eigen::VectorXf& logits, const std::vector<bool>& allowed, const DecodeConfig& config,
                 Rng& rng) {
  std::vector<int> ids;
  for (int i = 0; i < static_cast<int>(logits.size()); ++i)
    if (allowed[static_cast<std::size_t>(i)]) ids.push_back(i);
  if (ids.empty()) throw std::invalid_argument("choose_token: empty alphabet");
  const bool greedy = config.strategy == "greedy" || config.temperature <= 0.0;
  if (!greedy && config.strategy != "topk" && config.strategy != "temperature")
    throw std::invalid_argument("unknown decode strategy '" + config.strategy + "'");
  if (greedy) {
    int best = ids.front();
    for (int id : ids)
      if (logits[id] > logits[best]) best = id;
    return best;
  }
  if (config.strategy == "topk") {
    const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(config.k, 1)), 1, ids.size());
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    ids.resize(k);
  }
  double mx = -INFINITY;
  for (int id : ids) mx = std::max(mx, static_cast<double>(logits[id]));
  std::vector<double> w(ids.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    w[i] = std::exp((static_cast<double>(logits[ids[i]]) - mx) / config.temperature);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return ids[i];
  }
  return ids.back();
}

std::vector<bool> plan_alphabet(const Layout& layout) {
  std::vector<bool> a(static_cast<std::size_t>(layout.vocab_size()), false);
  for (int k = 0; k < layout.codebook_size; ++k) a[static_cast<std::size_t>(layout.visual(k))] = true;
  a[static_cast<std::size_t>(layout.mask())] = true;
  return a;
}

std::vector<bool> visual_alphabet(const Layout& layout) {
  std::vector<bool> a(static_cast<std::size_t>(layout.vocab_size()), false);
  for (int k = 0; k < layout.codebook_size; ++k) a[static_cast<std::size_t>(layout.visual(k))] = true;
  return a;
}

namespace {

const Eigen::VectorXf* feed_all(KvDecoder& dec, const std::vector<int>& tokens) {
  const Eigen::VectorXf* last = nullptr;
  for (int t : tokens) last = &dec.feed(t);
  return last;
}

std::vector<int> prefix(const Layout& layout, const std::vector<std::vector<int>>& story) {
  std::vector<int> out{layout.bos()};
  const auto st = layout.story_tokens(story);
  out.insert(out.end(), st.begin(), st.end());
  out.push_back(layout.plan());
  return out;
}

/// Decodes `count` tokens from `alphabet` after the already-fed prefix.
std::vector<int> decode_span(KvDecoder& dec, const Eigen::VectorXf* logits, int count,
                             const std::vector<bool>& alphabet, const DecodeConfig& config, Rng& rng) {
  std::vector<int> out;
  for (int i = 0; i < count; ++i) {
    const int t = choose_token(*logits, alphabet, config, rng);
    out.push_back(t);
    if (i + 1 < count) logits = &dec.feed(t);
  }
  return out;
}

}  // namespace

std::vector<int> generate_plan(const StoryLm<float>& model, const std::vector<std::vector<int>>& story,
                               const DecodeConfig& config, Rng& rng) {
  const auto& layout = model.layout();
  KvDecoder dec(model);
  const auto* logits = feed_all(dec, prefix(layout, story));
  auto ids = decode_span(dec, logits, layout.visual_length(), plan_alphabet(layout), config, rng);
  for (auto& t : ids) t = t == layout.mask() ? kPlanMask : layout.code_of(t);
  return ids;
}

std::vector<int> generate_completion(const StoryLm<float>& model, const std::vector<std::vector<int>>& story,
                                     const std::vector<int>& plan, const DecodeConfig& config, Rng& rng) {
  const auto& layout = model.layout();
  // the completion layout up to and including GEN
  auto seq = completion_sequence(layout, story, plan, std::vector<int>(static_cast<std::size_t>(layout.visual_length()), 0));
  seq.tokens.resize(static_cast<std::size_t>(seq.target_begin));
  KvDecoder dec(model);
  const auto* logits = feed_all(dec, seq.tokens);
  auto ids = decode_span(dec, logits, layout.visual_length(), visual_alphabet(layout), config, rng);
  for (auto& t : ids) t = layout.code_of(t);
  return ids;
}

std::vector<int> generate_baseline(const StoryLm<float>& model, const std::vector<std::vector<int>>& story,
                                   const DecodeConfig& config, Rng& rng) {
  return generate_completion(model, story, {}, config, rng);
}

}  // namespace vpcsv::lm
