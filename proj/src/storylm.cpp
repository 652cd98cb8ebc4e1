#include "vpcsv/storylm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "vpcsv/checkpoint.hpp"

namespace vpcsv::lm {

using json = nlohmann::json;

// ---------------------------------------------------------------- layout

std::vector<int> Layout::story_tokens(const std::vector<std::vector<int>>& story) const {
  if (static_cast<int>(story.size()) != frames)
    throw std::invalid_argument("story has " + std::to_string(story.size()) + " paragraphs, layout expects " +
                                std::to_string(frames));
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(story_length()));
  for (int f = 0; f < frames; ++f) {
    const auto& para = story[static_cast<std::size_t>(f)];
    if (static_cast<int>(para.size()) > paragraph_length)
      throw std::invalid_argument("paragraph " + std::to_string(f) + " longer than " +
                                  std::to_string(paragraph_length) + " tokens");
    for (int id : para) {
      if (!is_text(id)) throw std::invalid_argument("story token " + std::to_string(id) + " is not a text id");
      out.push_back(id);
    }
    for (int i = static_cast<int>(para.size()); i < paragraph_length; ++i) out.push_back(text_pad);
    if (f + 1 < frames) out.push_back(sep());
  }
  return out;
}

namespace {

void append_plan(const Layout& layout, const std::vector<int>& plan, std::vector<int>& out) {
  if (static_cast<int>(plan.size()) != layout.visual_length())
    throw std::invalid_argument("plan has " + std::to_string(plan.size()) + " cells, expected " +
                                std::to_string(layout.visual_length()));
  for (int v : plan) {
    if (v == kPlanMask) {
      out.push_back(layout.mask());
    } else if (v >= 0 && v < layout.codebook_size) {
      out.push_back(layout.visual(v));
    } else {
      throw std::invalid_argument("plan symbol " + std::to_string(v) + " outside codebook");
    }
  }
}

void append_codes(const Layout& layout, const std::vector<int>& z, std::vector<int>& out) {
  if (static_cast<int>(z.size()) != layout.visual_length())
    throw std::invalid_argument("visual sequence has " + std::to_string(z.size()) + " tokens, expected " +
                                std::to_string(layout.visual_length()));
  for (int v : z) {
    if (v < 0 || v >= layout.codebook_size) throw std::invalid_argument("visual token " + std::to_string(v) + " outside codebook");
    out.push_back(layout.visual(v));
  }
}

}  // namespace

Sequence plan_sequence(const Layout& layout, const std::vector<std::vector<int>>& story, const std::vector<int>& plan) {
  Sequence s;
  s.tokens.push_back(layout.bos());
  const auto st = layout.story_tokens(story);
  s.tokens.insert(s.tokens.end(), st.begin(), st.end());
  s.tokens.push_back(layout.plan());
  s.target_begin = static_cast<int>(s.tokens.size());
  append_plan(layout, plan, s.tokens);
  s.target_count = layout.visual_length();
  s.tokens.push_back(layout.eos());
  return s;
}

Sequence completion_sequence(const Layout& layout, const std::vector<std::vector<int>>& story,
                             const std::vector<int>& plan, const std::vector<int>& z) {
  Sequence s;
  s.tokens.push_back(layout.bos());
  const auto st = layout.story_tokens(story);
  s.tokens.insert(s.tokens.end(), st.begin(), st.end());
  s.tokens.push_back(layout.plan());
  if (!plan.empty()) append_plan(layout, plan, s.tokens);
  s.tokens.push_back(layout.gen());
  s.target_begin = static_cast<int>(s.tokens.size());
  append_codes(layout, z, s.tokens);
  s.target_count = layout.visual_length();
  s.tokens.push_back(layout.eos());
  return s;
}

Segments parse_sequence(const Layout& layout, const std::vector<int>& tokens) {
  auto fail = [](const std::string& why) -> Segments { throw std::invalid_argument("parse_sequence: " + why); };
  Segments seg;
  const std::size_t story_end = 1 + static_cast<std::size_t>(layout.story_length());
  if (tokens.size() < story_end + 2 || tokens[0] != layout.bos()) return fail("missing BOS or story");
  std::vector<int> para;
  for (std::size_t i = 1; i < story_end; ++i) {
    const int t = tokens[i];
    if (t == layout.sep()) {
      seg.story.push_back(para);
      para.clear();
    } else if (layout.is_text(t)) {
      if (t != layout.text_pad) para.push_back(t);
    } else {
      return fail("non-text id inside the story segment");
    }
  }
  seg.story.push_back(para);
  if (static_cast<int>(seg.story.size()) != layout.frames) return fail("wrong paragraph count");
  std::size_t i = story_end;
  if (tokens[i++] != layout.plan()) return fail("missing PLAN");
  while (i < tokens.size() && (tokens[i] == layout.mask() || layout.is_visual(tokens[i]))) {
    seg.plan.push_back(tokens[i] == layout.mask() ? kPlanMask : layout.code_of(tokens[i]));
    ++i;
  }
  seg.has_plan = !seg.plan.empty();
  if (seg.has_plan && static_cast<int>(seg.plan.size()) != layout.visual_length()) return fail("truncated plan");
  if (i < tokens.size() && tokens[i] == layout.gen()) {
    ++i;
    while (i < tokens.size() && layout.is_visual(tokens[i])) seg.z.push_back(layout.code_of(tokens[i++]));
    if (static_cast<int>(seg.z.size()) != layout.visual_length()) return fail("truncated completion");
    seg.has_completion = true;
  }
  if (i + 1 != tokens.size() || tokens[i] != layout.eos()) return fail("missing EOS");
  return seg;
}

// ---------------------------------------------------------------- model

template <typename Scalar>
StoryLm<Scalar>::StoryLm(const Layout& layout, const StoryLmConfig& config, std::uint64_t seed)
    : layout_(layout), config_(config) {
  if (config.dim % config.heads != 0) throw std::invalid_argument("storylm: dim must be divisible by heads");
  if (config.layers < 1) throw std::invalid_argument("storylm: need at least one layer");
  Rng rng(Rng::derive(seed, "storylm-init"));
  const Index d = config.dim, V = layout.vocab_size(), F = config.ff;
  params_.add("tok_emb", uniform_init<Scalar>({V, d}, 0.02, rng));
  params_.add("pos_emb", uniform_init<Scalar>({layout.max_length(), d}, 0.02, rng));
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    params_.add(p + "ln1.g", Tensor<Scalar>::full({d}, Scalar(1)));
    params_.add(p + "ln1.b", Tensor<Scalar>::zeros({d}));
    for (const char* w : {"q", "k", "v", "o"}) {
      params_.add(p + w + ".w", glorot_uniform<Scalar>({d, d}, d, d, rng));
      params_.add(p + w + ".b", Tensor<Scalar>::zeros({d}));
    }
    params_.add(p + "ln2.g", Tensor<Scalar>::full({d}, Scalar(1)));
    params_.add(p + "ln2.b", Tensor<Scalar>::zeros({d}));
    params_.add(p + "ff1.w", glorot_uniform<Scalar>({d, F}, d, F, rng));
    params_.add(p + "ff1.b", Tensor<Scalar>::zeros({F}));
    params_.add(p + "ff2.w", glorot_uniform<Scalar>({F, d}, F, d, rng));
    params_.add(p + "ff2.b", Tensor<Scalar>::zeros({d}));
  }
  params_.add("ln_f.g", Tensor<Scalar>::full({d}, Scalar(1)));
  params_.add("ln_f.b", Tensor<Scalar>::zeros({d}));
  params_.add("head.w", glorot_uniform<Scalar>({d, V}, d, V, rng));
  params_.add("head.b", Tensor<Scalar>::zeros({V}));
}

template <typename Scalar>
Tensor<Scalar> StoryLm<Scalar>::hidden(const std::vector<int>& tokens, Index batch, bool training, Rng* rng) const {
  if (batch < 1 || tokens.size() % static_cast<std::size_t>(batch) != 0)
    throw std::invalid_argument("storylm: token count not divisible by batch");
  const Index L = static_cast<Index>(tokens.size()) / batch;
  if (L > max_length())
    throw std::invalid_argument("storylm: sequence length " + std::to_string(L) + " exceeds maximum " +
                                std::to_string(max_length()));
  for (int t : tokens)
    if (t < 0 || t >= layout_.vocab_size()) throw std::invalid_argument("storylm: token id " + std::to_string(t));
  if (training && config_.dropout > 0 && rng == nullptr) throw std::invalid_argument("storylm: dropout needs an rng");
  const auto& P = params_;
  const Index d = config_.dim, H = config_.heads, dh = d / H;
  const double p = config_.dropout;
  Rng dummy(0);
  Rng& r = rng ? *rng : dummy;

  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(static_cast<Index>(i) % L);
  auto x = add(embedding(P.at("tok_emb"), std::span<const int>(tokens)),
               embedding(P.at("pos_emb"), std::span<const int>(positions)));
  x = dropout(x, p, r, training);

  const std::array<int, 4> swap12 = {0, 2, 1, 3};
  auto heads_of = [&](const Tensor<Scalar>& t) {
    return reshape(permute(reshape(t, {batch, L, H, dh}), std::span<const int>(swap12)), {batch * H, L, dh});
  };
  const Scalar scale_factor = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int l = 0; l < config_.layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    const auto h = layer_norm(x, P.at(pre + "ln1.g"), P.at(pre + "ln1.b"));
    const auto q = heads_of(linear(h, P.at(pre + "q.w"), P.at(pre + "q.b")));
    const auto k = heads_of(linear(h, P.at(pre + "k.w"), P.at(pre + "k.b")));
    const auto v = heads_of(linear(h, P.at(pre + "v.w"), P.at(pre + "v.b")));
    auto ctx = reshape(permute(reshape(causal_attention(q, k, v, scale_factor), {batch, H, L, dh}),
                               std::span<const int>(swap12)),
                       {batch * L, d});
    x = add(x, dropout(linear(ctx, P.at(pre + "o.w"), P.at(pre + "o.b")), p, r, training));
    const auto h2 = layer_norm(x, P.at(pre + "ln2.g"), P.at(pre + "ln2.b"));
    const auto ff = linear(relu(linear(h2, P.at(pre + "ff1.w"), P.at(pre + "ff1.b"))), P.at(pre + "ff2.w"),
                           P.at(pre + "ff2.b"));
    x = add(x, dropout(ff, p, r, training));
  }
  return layer_norm(x, P.at("ln_f.g"), P.at("ln_f.b"));
}

template <typename Scalar>
Tensor<Scalar> StoryLm<Scalar>::head(const Tensor<Scalar>& states) const {
  return linear(states, params_.at("head.w"), params_.at("head.b"));
}

template <typename Scalar>
Tensor<Scalar> StoryLm<Scalar>::logits(const std::vector<int>& tokens, Index batch, bool training, Rng* rng) const {
  return head(hidden(tokens, batch, training, rng));
}

// ---------------------------------------------------------------- losses

template <typename Scalar>
std::pair<Tensor<Scalar>, std::vector<int>> target_logits(const StoryLm<Scalar>& model,
                                                          const std::vector<Sequence>& batch, bool training, Rng* rng) {
  if (batch.empty()) throw std::invalid_argument("target_logits: empty batch");
  const std::size_t L = batch.front().tokens.size();
  std::vector<int> tokens;
  std::vector<Index> rows;
  std::vector<int> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    if (s.tokens.size() != L || s.target_count != batch.front().target_count)
      throw std::invalid_argument("target_logits: sequences in a batch must share one layout");
    tokens.insert(tokens.end(), s.tokens.begin(), s.tokens.end());
    for (int j = s.target_begin; j < s.target_begin + s.target_count; ++j) {
      // the state at j - 1 predicts token j
      rows.push_back(static_cast<Index>(b * L) + j - 1);
      targets.push_back(s.tokens[static_cast<std::size_t>(j)]);
    }
  }
  const auto h = model.hidden(tokens, static_cast<Index>(batch.size()), training, rng);
  return {model.head(gather_rows(h, std::span<const Index>(rows))), std::move(targets)};
}

template <typename Scalar>
Tensor<Scalar> sequence_loss(const StoryLm<Scalar>& model, const std::vector<Sequence>& batch, bool training,
                             Rng* rng) {
  const auto [logits, targets] = target_logits(model, batch, training, rng);
  return cross_entropy(logits, std::span<const int>(targets));
}

template <typename Scalar>
Tensor<Scalar> alignment_loss(const Tensor<Scalar>& logits, const std::vector<int>& targets,
                              const std::vector<std::set<int>>& constraint, int positions_per_sequence) {
  if (static_cast<std::size_t>(logits.dim(0)) != targets.size() ||
      targets.size() != constraint.size() * static_cast<std::size_t>(positions_per_sequence))
    throw std::invalid_argument("alignment_loss: logits, targets and constraint sets disagree");
  std::vector<Index> p_rows, n_rows;
  std::vector<int> p_ids, n_ids;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto& T = constraint[r / static_cast<std::size_t>(positions_per_sequence)];
    if (T.empty()) continue;
    if (T.count(targets[r])) {
      p_rows.push_back(static_cast<Index>(r));
      p_ids.push_back(targets[r]);
    } else {
      n_rows.push_back(static_cast<Index>(r));
      n_ids.push_back(targets[r]);
    }
  }
  std::vector<Tensor<Scalar>> parts;
  if (!p_rows.empty())
    parts.push_back(sum(pick_log_softmax(gather_rows(logits, std::span<const Index>(p_rows)), std::span<const int>(p_ids))));
  if (!n_rows.empty())
    parts.push_back(
        sum(pick_log1m_softmax(gather_rows(logits, std::span<const Index>(n_rows)), std::span<const int>(n_ids))));
  if (parts.empty()) return Tensor<Scalar>::scalar(Scalar(0));
  auto total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  return scale(total, Scalar(-1));
}

double alignment_loss_value(const std::vector<double>& target_probs, const std::vector<int>& targets,
                            const std::set<int>& constraint) {
  if (target_probs.size() != targets.size()) throw std::invalid_argument("alignment_loss_value: size mismatch");
  if (constraint.empty()) return 0.0;
  double loss = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j)
    loss -= constraint.count(targets[j]) ? std::log(target_probs[j]) : std::log1p(-target_probs[j]);
  return loss;
}

template <typename Scalar>
CompletionObjective<Scalar> completion_objective(const StoryLm<Scalar>& model, const std::vector<Sequence>& batch,
                                                 const std::vector<std::set<int>>& constraint, double lambda,
                                                 bool training, Rng* rng) {
  const auto [logits, targets] = target_logits(model, batch, training, rng);
  CompletionObjective<Scalar> out;
  out.completion = cross_entropy(logits, std::span<const int>(targets));
  if (lambda == 0.0) {
    out.total = out.completion;
    NoGradGuard guard;
    out.alignment = constraint.empty() ? Tensor<Scalar>::scalar(Scalar(0))
                                       : alignment_loss(logits.detach(), targets, constraint, batch.front().target_count);
    return out;
  }
  out.alignment = alignment_loss(logits, targets, constraint, batch.front().target_count);
  const double weight = lambda / static_cast<double>(targets.size());
  out.total = add(out.completion, scale(out.alignment, static_cast<Scalar>(weight)));
  return out;
}

// ---------------------------------------------------------------- token statistics

std::set<int> CharTokenStats::constraint_codes(const std::vector<std::vector<bool>>& mentions) const {
  std::set<int> out;
  for (std::size_t c = 0; c < ranked.size(); ++c) {
    bool mentioned = false;
    for (const auto& frame : mentions) mentioned = mentioned || (c < frame.size() && frame[c]);
    if (!mentioned) continue;
    const auto& list = ranked[c];
    for (std::size_t i = 0; i < list.size() && i < static_cast<std::size_t>(k); ++i) out.insert(list[i].first);
  }
  return out;
}

std::string CharTokenStats::to_json() const {
  json j = json::object();
  for (std::size_t c = 0; c < ranked.size(); ++c) {
    json list = json::array();
    for (const auto& [code, count] : ranked[c]) list.push_back({code, count});
    j[std::to_string(c)] = list;
  }
  return j.dump(1);
}

CharTokenStats CharTokenStats::from_json(const std::string& text, int k) {
  const auto j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("token stats: expected a JSON object");
  CharTokenStats s;
  s.k = k;
  for (const auto& [key, list] : j.items()) {
    const auto c = static_cast<std::size_t>(std::stoi(key));
    if (c >= s.ranked.size()) s.ranked.resize(c + 1);
    for (const auto& pair : list) s.ranked[c].emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
  }
  return s;
}

std::vector<int> CharTokenStats::empty_characters() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < ranked.size(); ++c)
    if (ranked[c].empty()) out.push_back(static_cast<int>(c));
  return out;
}

CharTokenStats character_token_stats(const std::vector<StoryExample>& examples, int num_characters, int k) {
  std::vector<std::map<int, int>> counts(static_cast<std::size_t>(num_characters));
  for (const auto& ex : examples) {
    const std::size_t frames = ex.mentions.size();
    const std::size_t cells = frames == 0 ? 0 : ex.plan.size() / frames;
    for (std::size_t f = 0; f < frames; ++f) {
      for (int c = 0; c < num_characters; ++c) {
        if (!ex.mentions[f][static_cast<std::size_t>(c)]) continue;
        for (std::size_t i = f * cells; i < (f + 1) * cells; ++i)
          if (ex.plan[i] != kPlanMask) ++counts[static_cast<std::size_t>(c)][ex.plan[i]];
      }
    }
  }
  CharTokenStats stats;
  stats.k = k;
  for (const auto& m : counts) {
    std::vector<std::pair<int, int>> list(m.begin(), m.end());
    // descending count; ties by smaller code
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (list.size() > static_cast<std::size_t>(k)) list.resize(static_cast<std::size_t>(k));
    stats.ranked.push_back(std::move(list));
  }
  return stats;
}

std::set<int> constraint_ids(const Layout& layout, const CharTokenStats& stats,
                             const std::vector<std::vector<bool>>& mentions) {
  std::set<int> out;
  for (int code : stats.constraint_codes(mentions)) out.insert(layout.visual(code));
  return out;
}

Variant parse_variant(const std::string& name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "vp") return Variant::vp;
  if (name == "ta") return Variant::ta;
  if (name == "vp-csv") return Variant::vp_csv;
  throw std::invalid_argument("unknown variant '" + name + "' (expected baseline, vp, ta or vp-csv)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::vp: return "vp";
    case Variant::ta: return "ta";
    case Variant::vp_csv: return "vp-csv";
  }
  return "?";
}

// ---------------------------------------------------------------- training

namespace {

void put_model(Checkpoint& ck, const StoryLm<float>& model) {
  const auto& l = model.layout();
  const auto& c = model.config();
  ck.put_scalar("layout/text_vocab", l.text_vocab);
  ck.put_scalar("layout/codebook_size", l.codebook_size);
  ck.put_scalar("layout/frames", l.frames);
  ck.put_scalar("layout/paragraph_length", l.paragraph_length);
  ck.put_scalar("layout/cells", l.cells);
  ck.put_scalar("layout/text_pad", l.text_pad);
  ck.put_scalar("config/layers", c.layers);
  ck.put_scalar("config/dim", c.dim);
  ck.put_scalar("config/heads", c.heads);
  ck.put_scalar("config/ff", c.ff);
  ck.put_scalar("config/dropout", c.dropout);
  ck.put_parameters(model.parameters());
}

template <typename Step>
double run_step(ParameterSet<float>& params, AdamState<float>& adam, double clip, const char* what, int epoch,
                Step&& loss_fn) {
  params.zero_grad();
  const Tensor<float> loss = loss_fn();
  const double value = loss.item();
  if (!std::isfinite(value))
    throw NonFiniteError(std::string("storylm: non-finite ") + what + " loss at epoch " + std::to_string(epoch), what);
  backward(loss);
  if (clip > 0) clip_grad_norm(params, clip);
  adam_step(params, adam);
  return value;
}

}  // namespace

std::vector<LmEpochLog> train_storylm(StoryLm<float>& model, const std::vector<StoryExample>& examples,
                                      const CharTokenStats& stats, const LmTrainConfig& config,
                                      const std::filesystem::path& checkpoint_path,
                                      const std::function<bool(const LmEpochLog&)>& on_epoch) {
  if (examples.empty()) throw std::invalid_argument("train_storylm: no training stories");
  if (config.batch_size < 1) throw std::invalid_argument("train_storylm: batch_size must be >= 1");
  const auto& layout = model.layout();
  auto& params = model.parameters();
  AdamState<float> adam;
  adam.config.lr = config.lr;
  std::vector<LmEpochLog> log;
  int start_epoch = 0;
  std::int64_t steps = 0;
  if (!checkpoint_path.empty() && std::filesystem::exists(checkpoint_path)) {
    const auto ck = Checkpoint::load(checkpoint_path);
    ck.load_parameters(params);
    ck.load_adam(adam, params);
    adam.config.lr = config.lr;
    start_epoch = static_cast<int>(ck.get_scalar("train/epochs_done"));
    steps = static_cast<std::int64_t>(ck.get_scalar("train/steps"));
    for (int e = 0; e < start_epoch; ++e) {
      const auto& row = ck.get("train/log/" + std::to_string(e)).values;
      log.push_back({e, row[0], row[1], row[2], static_cast<std::int64_t>(row[3])});
    }
  }
  const bool staged = two_stage(config.variant);
  const double lambda = aligned(config.variant) ? config.lambda : 0.0;
  const std::size_t n = examples.size();

  std::vector<std::set<int>> constraints;
  for (const auto& ex : examples) constraints.push_back(constraint_ids(layout, stats, ex.mentions));

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    if (config.max_steps > 0 && steps >= config.max_steps) break;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(Rng::derive(config.seed, "storylm-shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double plan_sum = 0, comp_sum = 0, align_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      if (config.max_steps > 0 && steps >= config.max_steps) break;
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      std::vector<Sequence> stage1, stage2;
      std::vector<std::set<int>> batch_constraints;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = examples[order[i]];
        if (staged) stage1.push_back(plan_sequence(layout, ex.story, ex.plan));
        stage2.push_back(completion_sequence(layout, ex.story, staged ? ex.plan : std::vector<int>{}, ex.z));
        batch_constraints.push_back(constraints[order[i]]);
      }
      if (staged) {
        Rng rng(Rng::derive(config.seed, "storylm-dropout", static_cast<std::uint64_t>(steps)));
        plan_sum += run_step(params, adam, config.clip, "plan", epoch,
                             [&] { return sequence_loss(model, stage1, true, &rng); });
        ++steps;
      }
      Rng rng(Rng::derive(config.seed, "storylm-dropout", static_cast<std::uint64_t>(steps)));
      double align_value = 0;
      comp_sum += run_step(params, adam, config.clip, "completion", epoch, [&] {
        auto obj = completion_objective(model, stage2, batch_constraints, lambda, true, &rng);
        align_value = obj.alignment.item() / static_cast<double>(stage2.size() * stage2.front().target_count);
        return obj.total;
      });
      align_sum += align_value;
      ++steps;
      ++batches;
    }
    // total includes the alignment term when it is on; report plain cross-entropy
    LmEpochLog entry{epoch, staged ? plan_sum / static_cast<double>(batches) : 0.0,
                     comp_sum / static_cast<double>(batches) - lambda * align_sum / static_cast<double>(batches),
                     align_sum / static_cast<double>(batches), steps};
    log.push_back(entry);
    const bool keep_going = on_epoch ? on_epoch(entry) : true;
    if (!checkpoint_path.empty()) {
      Checkpoint ck;
      put_model(ck, model);
      ck.put_adam(adam, params);
      ck.put_scalar("train/epochs_done", epoch + 1);
      ck.put_scalar("train/steps", static_cast<double>(steps));
      for (const auto& row : log) {
        Eigen::VectorXf v(4);
        v << static_cast<float>(row.plan_loss), static_cast<float>(row.completion_loss),
            static_cast<float>(row.alignment_loss), static_cast<float>(row.steps);
        ck.put("train/log/" + std::to_string(row.epoch), {4}, v);
      }
      ck.save(checkpoint_path);
    }
    if (!keep_going) break;
  }
  return log;
}

void save_storylm(const StoryLm<float>& model, const std::filesystem::path& path) {
  Checkpoint ck;
  put_model(ck, model);
  ck.save(path);
}

StoryLm<float> load_storylm(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path);
  Layout l;
  l.text_vocab = static_cast<int>(ck.get_scalar("layout/text_vocab"));
  l.codebook_size = static_cast<int>(ck.get_scalar("layout/codebook_size"));
  l.frames = static_cast<int>(ck.get_scalar("layout/frames"));
  l.paragraph_length = static_cast<int>(ck.get_scalar("layout/paragraph_length"));
  l.cells = static_cast<int>(ck.get_scalar("layout/cells"));
  l.text_pad = static_cast<int>(ck.get_scalar("layout/text_pad"));
  StoryLmConfig c;
  c.layers = static_cast<int>(ck.get_scalar("config/layers"));
  c.dim = static_cast<int>(ck.get_scalar("config/dim"));
  c.heads = static_cast<int>(ck.get_scalar("config/heads"));
  c.ff = static_cast<int>(ck.get_scalar("config/ff"));
  c.dropout = ck.get_scalar("config/dropout");
  StoryLm<float> model(l, c, 0);
  ck.load_parameters(model.parameters());
  return model;
}

#define VPCSV_INSTANTIATE_LM(S)                                                                                    \
  template class StoryLm<S>;                                                                                       \
  template std::pair<Tensor<S>, std::vector<int>> target_logits(const StoryLm<S>&, const std::vector<Sequence>&, \
                                                                bool, Rng*);                                       \
  template Tensor<S> sequence_loss(const StoryLm<S>&, const std::vector<Sequence>&, bool, Rng*);                  \
  template Tensor<S> alignment_loss(const Tensor<S>&, const std::vector<int>&, const std::vector<std::set<int>>&,  \
                                    int);                                                                          \
  template CompletionObjective<S> completion_objective(const StoryLm<S>&, const std::vector<Sequence>&,           \
                                                       const std::vector<std::set<int>>&, double, bool, Rng*);

VPCSV_INSTANTIATE_LM(float)
VPCSV_INSTANTIATE_LM(double)

}  // namespace vpcsv::lm
