#pragma once

// Independent checks for the story LM: a direct evaluation of the alignment
// formula, a brute-force token count, finite-difference checks and the
// single-story overfit loop. Shared by unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "gradcheck.hpp"
#include "vpcsv/storylm.hpp"

namespace vpcsv::testing {

inline lm::Layout tiny_layout() {
  lm::Layout l;
  l.text_vocab = 6;
  l.codebook_size = 5;
  l.frames = 2;
  l.paragraph_length = 3;
  l.cells = 4;
  return l;
}

inline lm::StoryLmConfig tiny_lm_config(double dropout = 0.0) {
  lm::StoryLmConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.ff = 12;
  c.dropout = dropout;
  return c;
}

inline lm::StoryExample random_example(const lm::Layout& layout, int num_characters, Rng& rng, double mask_rate = 0.6) {
  lm::StoryExample ex;
  ex.id = "s" + std::to_string(rng.below(100000));
  for (int f = 0; f < layout.frames; ++f) {
    std::vector<int> para;
    const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(layout.paragraph_length)));
    for (int i = 0; i < len; ++i) para.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(layout.text_vocab - 1))));
    ex.story.push_back(para);
    std::vector<bool> m(static_cast<std::size_t>(num_characters));
    for (auto&& b : m) b = rng.uniform() < 0.4;
    ex.mentions.push_back(m);
  }
  const auto K = static_cast<std::uint64_t>(layout.codebook_size);
  for (int i = 0; i < layout.visual_length(); ++i) {
    const int code = static_cast<int>(rng.below(K));
    ex.z.push_back(code);
    ex.plan.push_back(rng.uniform() < mask_rate ? lm::kPlanMask : code);
  }
  return ex;
}

/// -[sum_T log p + sum_notT log(1 - p)] with p from a long-double softmax.
inline long double direct_alignment(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets,
                                    const std::set<int>& T) {
  if (T.empty()) return 0.0L;
  long double loss = 0.0L;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    long double z = 0.0L;
    for (double v : logits[j]) z += std::exp(static_cast<long double>(v));
    const long double p = std::exp(static_cast<long double>(logits[j][static_cast<std::size_t>(targets[j])])) / z;
    loss -= T.count(targets[j]) ? std::log(p) : std::log1p(-p);
  }
  return loss;
}

struct AlignmentOracleResult {
  int instances = 0;
  double max_abs_error = 0.0;  // tensor implementation vs direct evaluation
  double max_value_error = 0.0;  // plain-probability helper vs direct evaluation
  int negative = 0;
};

/// Random instances: a few sequences of random length over a small vocabulary
/// with random constraint sets (sometimes empty).
inline AlignmentOracleResult alignment_oracle(int instances, std::uint64_t seed) {
  Rng rng(seed);
  AlignmentOracleResult r;
  for (int n = 0; n < instances; ++n) {
    const int V = 2 + static_cast<int>(rng.below(9));
    const int seqs = 1 + static_cast<int>(rng.below(3));
    const int per = 1 + static_cast<int>(rng.below(6));
    std::vector<std::set<int>> constraint(static_cast<std::size_t>(seqs));
    for (auto& T : constraint)
      for (int v = 0; v < V; ++v)
        if (rng.uniform() < 0.3) T.insert(v);
    std::vector<std::vector<double>> rows;
    std::vector<int> targets;
    VectorX<double> flat(seqs * per * V);
    for (int i = 0; i < seqs * per; ++i) {
      std::vector<double> row(static_cast<std::size_t>(V));
      for (int v = 0; v < V; ++v) flat[i * V + v] = row[static_cast<std::size_t>(v)] = rng.uniform(-4.0, 4.0);
      rows.push_back(row);
      targets.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(V))));
    }
    const auto logits = Tensor<double>::from_data({seqs * per, V}, flat);
    const double got = lm::alignment_loss(logits, targets, constraint, per).item();
    long double want = 0.0L;
    double helper = 0.0;
    for (int s = 0; s < seqs; ++s) {
      const auto b = static_cast<std::size_t>(s * per), e = b + static_cast<std::size_t>(per);
      const std::vector<std::vector<double>> rs(rows.begin() + static_cast<std::ptrdiff_t>(b),
                                                rows.begin() + static_cast<std::ptrdiff_t>(e));
      const std::vector<int> ts(targets.begin() + static_cast<std::ptrdiff_t>(b),
                                targets.begin() + static_cast<std::ptrdiff_t>(e));
      const long double part = direct_alignment(rs, ts, constraint[static_cast<std::size_t>(s)]);
      want += part;
      std::vector<double> probs;
      for (std::size_t j = 0; j < ts.size(); ++j) {
        long double z = 0.0L;
        for (double v : rs[j]) z += std::exp(static_cast<long double>(v));
        probs.push_back(static_cast<double>(std::exp(static_cast<long double>(rs[j][static_cast<std::size_t>(ts[j])])) / z));
      }
      helper += lm::alignment_loss_value(probs, ts, constraint[static_cast<std::size_t>(s)]);
    }
    r.max_abs_error = std::max(r.max_abs_error, static_cast<double>(std::fabs(static_cast<long double>(got) - want)));
    r.max_value_error = std::max(r.max_value_error, static_cast<double>(std::fabs(static_cast<long double>(helper) - want)));
    if (got < 0.0) ++r.negative;
    ++r.instances;
  }
  return r;
}

/// Exhaustive count, then sort by (count desc, code asc) and keep k.
inline std::vector<std::vector<std::pair<int, int>>> brute_force_token_stats(const std::vector<lm::StoryExample>& examples,
                                                                           int num_characters, int k) {
  std::vector<std::vector<std::pair<int, int>>> out;
  for (int c = 0; c < num_characters; ++c) {
    std::map<int, int> counts;
    for (const auto& ex : examples) {
      const std::size_t cells = ex.plan.size() / ex.mentions.size();
      for (std::size_t i = 0; i < ex.plan.size(); ++i)
        if (ex.mentions[i / cells][static_cast<std::size_t>(c)] && ex.plan[i] != lm::kPlanMask) ++counts[ex.plan[i]];
    }
    std::vector<std::pair<int, int>> list(counts.begin(), counts.end());
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (list.size() > static_cast<std::size_t>(k)) list.resize(static_cast<std::size_t>(k));
    out.push_back(list);
  }
  return out;
}

struct LmGradChecks {
  GradCheckResult cross_entropy;
  GradCheckResult alignment_logits;
  GradCheckResult objective;  // completion + lambda * alignment through the model
};

/// Finite-difference checks on a tiny double-precision model without dropout.
inline LmGradChecks lm_gradchecks(std::uint64_t seed) {
  const auto layout = tiny_layout();
  lm::StoryLm<double> model(layout, tiny_lm_config(), seed);
  // At the default embedding scale a dim-8 first layer norm sees rows with
  // near-zero variance, where central differences are meaningless.
  model.parameters().at("tok_emb").data() *= 50.0;
  model.parameters().at("pos_emb").data() *= 50.0;
  Rng rng(seed + 1);
  std::vector<lm::Sequence> plans, comps;
  std::vector<std::set<int>> constraint;
  for (int b = 0; b < 2; ++b) {
    const auto ex = random_example(layout, 3, rng);
    plans.push_back(lm::plan_sequence(layout, ex.story, ex.plan));
    comps.push_back(lm::completion_sequence(layout, ex.story, ex.plan, ex.z));
    constraint.push_back({layout.visual(0), layout.visual(2), layout.visual(3)});
  }
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);

  LmGradChecks out;
  out.cross_entropy = gradcheck([&] { return lm::sequence_loss(model, plans); }, params, 1e-5, 1e-4, 60);

  const int V = layout.vocab_size(), per = layout.visual_length();
  auto logits = random_tensor({2 * per, V}, rng, -3.0, 3.0);
  std::vector<int> targets;
  for (int i = 0; i < 2 * per; ++i) targets.push_back(layout.visual(static_cast<int>(rng.below(5))));
  out.alignment_logits = gradcheck([&] { return lm::alignment_loss(logits, targets, constraint, per); }, {logits});

  out.objective = gradcheck([&] { return lm::completion_objective(model, comps, constraint, 0.5).total; }, params,
                            1e-5, 1e-4, 60);
  return out;
}

struct OverfitResult {
  bool reproduced = false;
  std::int64_t steps = 0;
};

/// Trains on one story until greedy decoding returns its gold targets (plan
/// and completion for two-stage variants) or `max_steps` is reached.
inline OverfitResult overfit_single_story(lm::Variant variant, const lm::StoryExample& ex, const lm::Layout& layout,
                                          const lm::StoryLmConfig& config, std::int64_t max_steps, int check_every,
                                          std::uint64_t seed) {
  lm::StoryLm<float> model(layout, config, seed);
  lm::LmTrainConfig tc;
  tc.variant = variant;
  tc.epochs = 1 << 30;
  tc.batch_size = 1;
  tc.max_steps = max_steps;
  tc.seed = seed;
  const lm::CharTokenStats stats;
  OverfitResult r;
  lm::DecodeConfig greedy;
  lm::train_storylm(model, {ex}, stats, tc, {}, [&](const lm::LmEpochLog& log) {
    r.steps = log.steps;
    if ((log.epoch + 1) % check_every != 0 && log.steps < max_steps) return true;
    Rng rng(0);
    if (lm::two_stage(variant)) {
      const auto plan = lm::generate_plan(model, ex.story, greedy, rng);
      r.reproduced = plan == ex.plan && lm::generate_completion(model, ex.story, plan, greedy, rng) == ex.z;
    } else {
      r.reproduced = lm::generate_baseline(model, ex.story, greedy, rng) == ex.z;
    }
    return !r.reproduced;
  });
  return r;
}

}  // namespace vpcsv::testing
