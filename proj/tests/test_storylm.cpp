#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "lm_oracles.hpp"
#include "vpcsv/storylm.hpp"

using namespace vpcsv;
using namespace vpcsv::lm;
using namespace vpcsv::testing;

namespace {

Layout default_layout() {
  Layout l;
  l.text_vocab = 37;
  return l;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

template <typename S>
void set_tensor(StoryLm<S>& m, const std::string& name, S value) {
  m.parameters().at(name).data().setConstant(value);
}

}  // namespace

TEST_CASE("id ranges are disjoint and sequences parse back") {
  const auto l = default_layout();
  CHECK(l.vocab_size() == 37 + 64 + 6);
  CHECK(l.max_length() == 708);
  std::set<int> specials{l.mask(), l.bos(), l.sep(), l.plan(), l.gen(), l.eos()};
  CHECK(specials.size() == 6);
  for (int id = 0; id < l.vocab_size(); ++id) {
    const int classes = int(l.is_text(id)) + int(l.is_visual(id)) + int(specials.count(id));
    CHECK(classes == 1);
  }

  Rng rng(3);
  for (int n = 0; n < 20; ++n) {
    const auto ex = random_example(l, 8, rng);
    const auto p = plan_sequence(l, ex.story, ex.plan);
    const auto c = completion_sequence(l, ex.story, ex.plan, ex.z);
    const auto b = completion_sequence(l, ex.story, {}, ex.z);
    CHECK(p.tokens.size() == 387);
    CHECK(c.tokens.size() == 708);
    CHECK(b.tokens.size() == 388);
    CHECK(p.target_count == 320);
    CHECK(c.tokens[static_cast<std::size_t>(c.target_begin - 1)] == l.gen());

    const auto sp = parse_sequence(l, p.tokens);
    CHECK(sp.story == ex.story);
    CHECK(sp.plan == ex.plan);
    CHECK_FALSE(sp.has_completion);
    const auto sc = parse_sequence(l, c.tokens);
    CHECK(sc.story == ex.story);
    CHECK(sc.plan == ex.plan);
    CHECK(sc.z == ex.z);
    const auto sb = parse_sequence(l, b.tokens);
    CHECK_FALSE(sb.has_plan);
    CHECK(sb.z == ex.z);
  }

  auto ex = random_example(l, 8, rng);
  auto bad = completion_sequence(l, ex.story, ex.plan, ex.z).tokens;
  bad.pop_back();
  CHECK_THROWS_AS(parse_sequence(l, bad), std::invalid_argument);
  ex.story[0] = std::vector<int>(13, 1);
  CHECK_THROWS_AS(l.story_tokens(ex.story), std::invalid_argument);
  ex.story[0] = {l.visual(0)};
  CHECK_THROWS_AS(l.story_tokens(ex.story), std::invalid_argument);
}

TEST_CASE("sequences longer than the model maximum are rejected") {
  const auto l = tiny_layout();
  StoryLm<float> m(l, tiny_lm_config(), 1);
  std::vector<int> tokens(static_cast<std::size_t>(l.max_length() + 1), 1);
  CHECK_THROWS_AS(m.logits(tokens, 1), std::invalid_argument);
  tokens.pop_back();
  CHECK(m.logits(tokens, 1).dim(0) == l.max_length());
}

TEST_CASE("plan and completion loss: uniform and peaked logits") {
  const auto l = default_layout();
  StoryLmConfig cfg = tiny_lm_config();
  StoryLm<double> m(l, cfg, 2);
  Rng rng(4);
  auto ex = random_example(l, 8, rng);

  set_tensor(m, "head.w", 0.0);
  set_tensor(m, "head.b", 0.0);
  const double logV = std::log(static_cast<double>(l.vocab_size()));
  CHECK(sequence_loss(m, {plan_sequence(l, ex.story, ex.plan)}).item() == doctest::Approx(logV).epsilon(1e-12));
  CHECK(sequence_loss(m, {completion_sequence(l, ex.story, ex.plan, ex.z)}).item() ==
        doctest::Approx(logV).epsilon(1e-12));

  // every target the same symbol, +20 on it
  std::fill(ex.plan.begin(), ex.plan.end(), kPlanMask);
  std::fill(ex.z.begin(), ex.z.end(), 5);
  m.parameters().at("head.b").data()[l.mask()] = 20.0;
  CHECK(sequence_loss(m, {plan_sequence(l, ex.story, ex.plan)}).item() < 1e-6);
  set_tensor(m, "head.b", 0.0);
  m.parameters().at("head.b").data()[l.visual(5)] = 20.0;
  CHECK(sequence_loss(m, {completion_sequence(l, ex.story, ex.plan, ex.z)}).item() < 1e-6);
}

TEST_CASE("three-position losses equal a hand evaluation of the full logits") {
  Layout l;
  l.text_vocab = 4;
  l.codebook_size = 3;
  l.frames = 1;
  l.paragraph_length = 2;
  l.cells = 3;
  StoryLm<double> m(l, tiny_lm_config(), 9);
  // widen the logits so the check is not dominated by near-uniform rows
  m.parameters().at("head.w").data() *= 40.0;
  const std::vector<std::vector<int>> story{{2, 3}};
  for (const auto& seq : {plan_sequence(l, story, {1, kPlanMask, 2}), completion_sequence(l, story, {0, 1, kPlanMask}, {2, 0, 1})}) {
    REQUIRE(seq.target_count == 3);
    const auto all = m.logits(seq.tokens, 1);
    const Index V = l.vocab_size();
    double hand = 0.0;
    for (int j = seq.target_begin; j < seq.target_begin + 3; ++j) {
      const double* row = all.data().data() + static_cast<Index>(j - 1) * V;
      double mx = row[0];
      for (Index v = 1; v < V; ++v) mx = std::max(mx, row[v]);
      double z = 0.0;
      for (Index v = 0; v < V; ++v) z += std::exp(row[v] - mx);
      hand += mx + std::log(z) - row[seq.tokens[static_cast<std::size_t>(j)]];
    }
    hand /= 3.0;
    CHECK(sequence_loss(m, {seq}).item() == doctest::Approx(hand).epsilon(1e-12));
  }
}

TEST_CASE("with lambda zero the objective is bitwise the completion loss") {
  const auto l = tiny_layout();
  StoryLm<float> m(l, tiny_lm_config(0.1), 5);
  Rng rng(6);
  std::vector<Sequence> batch;
  std::vector<std::set<int>> constraint;
  for (int b = 0; b < 3; ++b) {
    const auto ex = random_example(l, 3, rng);
    batch.push_back(completion_sequence(l, ex.story, {}, ex.z));
    constraint.push_back({l.visual(1), l.visual(4)});
  }
  const auto obj = completion_objective(m, batch, constraint, 0.0);
  CHECK(same_bits(obj.total.item(), sequence_loss(m, batch).item()));
  CHECK(obj.alignment.item() > 0.0);

  // with dropout: same rng stream gives the same bits
  Rng r1(7), r2(7);
  const auto trained = completion_objective(m, batch, constraint, 0.0, true, &r1);
  CHECK(same_bits(trained.total.item(), sequence_loss(m, batch, true, &r2).item()));

  const auto weighted = completion_objective(m, batch, constraint, 0.1);
  const double m_pos = static_cast<double>(batch.size() * static_cast<std::size_t>(l.visual_length()));
  CHECK(weighted.total.item() ==
        doctest::Approx(weighted.completion.item() + 0.1 * weighted.alignment.item() / m_pos).epsilon(1e-6));
}

TEST_CASE("alignment loss: minimizer, uniform case and empty constraint") {
  const std::vector<int> targets{0, 1, 1, 0, 1, 0, 0};
  const std::set<int> T{0};
  std::vector<double> probs;
  for (int t : targets) probs.push_back(T.count(t) ? 1.0 : 0.0);
  CHECK(alignment_loss_value(probs, targets, T) == 0.0);
  const std::vector<double> half(targets.size(), 0.5);
  CHECK(alignment_loss_value(half, targets, T) == doctest::Approx(7.0 * std::log(2.0)).epsilon(1e-14));
  CHECK(alignment_loss_value(half, targets, {}) == 0.0);

  // the same through logits over a two-symbol vocabulary
  const Index m = static_cast<Index>(targets.size());
  const auto flat = Tensor<double>::zeros({m, 2});
  CHECK(alignment_loss(flat, targets, {T}, static_cast<int>(m)).item() ==
        doctest::Approx(7.0 * std::log(2.0)).epsilon(1e-14));
  VectorX<double> peaked(2 * m);
  for (Index j = 0; j < m; ++j) {
    // T positions: all mass on the target; others: none on it
    const int t = targets[static_cast<std::size_t>(j)];
    const int favoured = T.count(t) ? t : 1 - t;
    peaked[2 * j + favoured] = 60.0;
    peaked[2 * j + 1 - favoured] = -60.0;
  }
  CHECK(alignment_loss(Tensor<double>::from_data({m, 2}, peaked), targets, {T}, static_cast<int>(m)).item() < 1e-40);
  CHECK(alignment_loss(flat, targets, {std::set<int>{}}, static_cast<int>(m)).item() == 0.0);
}

TEST_CASE("alignment loss matches direct evaluation on random instances") {
  const auto r = alignment_oracle(1000, 11);
  CHECK(r.instances == 1000);
  CHECK(r.max_abs_error < 1e-6);
  CHECK(r.max_value_error < 1e-6);
  CHECK(r.negative == 0);

  // strictly positive away from the minimizer
  Rng rng(12);
  for (int n = 0; n < 200; ++n) {
    std::vector<int> targets;
    std::vector<double> probs;
    for (int j = 0; j < 5; ++j) {
      targets.push_back(static_cast<int>(rng.below(4)));
      probs.push_back(rng.uniform(0.01, 0.99));
    }
    CHECK(alignment_loss_value(probs, targets, {0, 2}) > 0.0);
  }
}

TEST_CASE("LM cross-entropy and alignment gradients match finite differences") {
  const auto g = lm_gradchecks(21);
  CHECK(g.cross_entropy.max_rel_error < 1e-3);
  CHECK(g.alignment_logits.max_rel_error < 1e-3);
  CHECK(g.objective.max_rel_error < 1e-3);
  CHECK(g.cross_entropy.checked > 100);
}

TEST_CASE("logits at position j ignore later tokens") {
  const auto l = tiny_layout();
  StoryLm<double> m(l, tiny_lm_config(), 13);
  Rng rng(14);
  const auto ex = random_example(l, 3, rng);
  const auto base = completion_sequence(l, ex.story, ex.plan, ex.z).tokens;
  const auto ref = m.logits(base, 1);
  const Index V = l.vocab_size(), L = static_cast<Index>(base.size());
  for (Index j : {Index{0}, Index{5}, Index{12}, L - 2}) {
    auto changed = base;
    for (Index i = j + 1; i < L; ++i) changed[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(V)));
    const auto out = m.logits(changed, 1);
    double diff = 0.0;
    for (Index i = 0; i <= j * V + V - 1; ++i) diff = std::max(diff, std::abs(out.data()[i] - ref.data()[i]));
    CHECK(diff < 1e-12);
    // and the next row does move
    double next = 0.0;
    for (Index i = (j + 1) * V; i < (j + 2) * V; ++i) next = std::max(next, std::abs(out.data()[i] - ref.data()[i]));
    CHECK(next > 0.0);
  }
}

TEST_CASE("the cached decoder reproduces full forward logits") {
  const auto l = default_layout();
  StoryLm<float> m(l, StoryLmConfig{}, 15);
  Rng rng(16);
  const auto ex = random_example(l, 8, rng);
  const auto tokens = completion_sequence(l, ex.story, ex.plan, ex.z).tokens;
  const auto full = m.logits(tokens, 1);
  KvDecoder dec(m);
  const Index V = l.vocab_size();
  float worst = 0.0f;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& row = dec.feed(tokens[i]);
    for (Index v = 0; v < V; ++v) worst = std::max(worst, std::abs(row[v] - full.data()[static_cast<Index>(i) * V + v]));
  }
  CHECK(worst < 1e-4f);
  CHECK(dec.position() == 708);
  CHECK_THROWS_AS(dec.feed(l.eos()), std::out_of_range);
  dec.reset();
  CHECK(dec.position() == 0);
}

TEST_CASE("choose_token: greedy ties, top-1 and unknown strategies") {
  Eigen::VectorXf logits(6);
  logits << 1.0f, 3.0f, 3.0f, -1.0f, 3.0f, 0.0f;
  std::vector<bool> all(6, true), odd{false, true, false, true, false, true};
  Rng rng(1);
  DecodeConfig greedy;
  CHECK(choose_token(logits, all, greedy, rng) == 1);
  std::vector<bool> no1 = all;
  no1[1] = false;
  CHECK(choose_token(logits, no1, greedy, rng) == 2);
  DecodeConfig top1{"topk", 1.0, 1, 0};
  for (int i = 0; i < 50; ++i) CHECK(choose_token(logits, all, top1, rng) == 1);
  DecodeConfig cold{"temperature", 0.0, 10, 0};
  CHECK(choose_token(logits, odd, cold, rng) == 1);
  DecodeConfig bad{"beam", 1.0, 3, 0};
  CHECK_THROWS_AS(choose_token(logits, all, bad, rng), std::invalid_argument);
  CHECK_THROWS_AS(choose_token(logits, std::vector<bool>(6, false), greedy, rng), std::invalid_argument);
}

TEST_CASE("decoding masks are airtight") {
  const auto l = default_layout();
  const auto plan_ok = plan_alphabet(l);
  const auto vis_ok = visual_alphabet(l);
  CHECK(std::count(plan_ok.begin(), plan_ok.end(), true) == 65);
  CHECK(std::count(vis_ok.begin(), vis_ok.end(), true) == 64);
  Rng rng(17);
  int outside = 0, samples = 0;
  for (const char* strategy : {"temperature", "topk"}) {
    DecodeConfig dc{strategy, 2.0, 20, 0};
    for (int n = 0; n < 5000; ++n) {
      Eigen::VectorXf logits(l.vocab_size());
      for (Index v = 0; v < logits.size(); ++v) logits[v] = static_cast<float>(rng.uniform(-5.0, 5.0));
      // push the mass outside the alphabet
      for (int v = 0; v < l.text_vocab; ++v) logits[v] += 30.0f;
      const auto& alphabet = n % 2 ? plan_ok : vis_ok;
      const int t = choose_token(logits, alphabet, dc, rng);
      outside += alphabet[static_cast<std::size_t>(t)] ? 0 : 1;
      ++samples;
    }
  }
  CHECK(samples == 10000);
  CHECK(outside == 0);

  StoryLm<float> m(l, tiny_lm_config(), 18);
  const auto ex = random_example(l, 8, rng);
  DecodeConfig hot{"temperature", 1.5, 10, 0};
  const auto plan = generate_plan(m, ex.story, hot, rng);
  REQUIRE(plan.size() == 320);
  for (int s : plan) CHECK((s == kPlanMask || (s >= 0 && s < 64)));
  for (const auto& z : {generate_completion(m, ex.story, plan, hot, rng), generate_baseline(m, ex.story, hot, rng)}) {
    REQUIRE(z.size() == 320);
    for (int s : z) CHECK((s >= 0 && s < 64));
  }
}

TEST_CASE("greedy generation is deterministic") {
  const auto l = default_layout();
  StoryLm<float> m(l, tiny_lm_config(), 19);
  Rng rng(20);
  const auto ex = random_example(l, 8, rng);
  DecodeConfig greedy;
  Rng a(1), b(2);
  const auto p1 = generate_plan(m, ex.story, greedy, a);
  CHECK(p1 == generate_plan(m, ex.story, greedy, b));
  CHECK(generate_completion(m, ex.story, p1, greedy, a) == generate_completion(m, ex.story, p1, greedy, b));
  CHECK(generate_baseline(m, ex.story, greedy, a) == generate_baseline(m, ex.story, greedy, b));
}

TEST_CASE("character token statistics match an exhaustive count") {
  const auto l = tiny_layout();
  Rng rng(22);
  std::vector<StoryExample> corpus;
  for (int i = 0; i < 40; ++i) corpus.push_back(random_example(l, 4, rng, 0.3));
  // character 3 is never mentioned
  for (auto& ex : corpus)
    for (auto& m : ex.mentions) m[3] = false;
  for (int k : {1, 3, 10}) {
    const auto stats = character_token_stats(corpus, 4, k);
    CHECK(stats.ranked == brute_force_token_stats(corpus, 4, k));
  }
  const auto stats = character_token_stats(corpus, 4, 3);
  CHECK(stats.empty_characters() == std::vector<int>{3});
  for (const auto& list : stats.ranked)
    for (std::size_t i = 1; i < list.size(); ++i) CHECK(list[i - 1].second >= list[i].second);

  const auto back = CharTokenStats::from_json(stats.to_json(), 3);
  CHECK(back.ranked == stats.ranked);
  CHECK(back.k == 3);

  // mentions of character 0 only: constraint is its top-k, shifted into the visual range
  std::vector<std::vector<bool>> mentions(2, std::vector<bool>(4, false));
  mentions[1][0] = true;
  std::set<int> want;
  for (const auto& [code, count] : stats.ranked[0]) want.insert(l.visual(code));
  CHECK(constraint_ids(l, stats, mentions) == want);
  mentions[1][0] = false;
  CHECK(constraint_ids(l, stats, mentions).empty());
}

TEST_CASE("a character whose region cells are all one token ranks it first") {
  StoryExample ex;
  ex.story = {{1}, {2}};
  ex.mentions = {{true, false}, {false, false}};
  ex.plan = {7 % 5, 7 % 5, kPlanMask, 7 % 5, kPlanMask, kPlanMask, kPlanMask, kPlanMask};
  ex.z = std::vector<int>(8, 2);
  const auto stats = character_token_stats({ex}, 2, 10);
  REQUIRE(stats.ranked[0].size() == 1);
  CHECK(stats.ranked[0][0] == std::pair<int, int>{2, 3});
  CHECK(stats.ranked[1].empty());
}

TEST_CASE("variant names round-trip") {
  for (auto v : {Variant::baseline, Variant::vp, Variant::ta, Variant::vp_csv}) CHECK(parse_variant(variant_name(v)) == v);
  CHECK(variant_name(Variant::vp_csv) == "vp-csv");
  CHECK_THROWS_AS(parse_variant("vpcsv"), std::invalid_argument);
  CHECK(two_stage(Variant::vp));
  CHECK_FALSE(two_stage(Variant::ta));
  CHECK(aligned(Variant::ta));
  CHECK_FALSE(aligned(Variant::vp));
}

TEST_CASE("training is deterministic, resumable and checkpointed") {
  const auto l = tiny_layout();
  Rng rng(23);
  std::vector<StoryExample> corpus;
  for (int i = 0; i < 6; ++i) corpus.push_back(random_example(l, 3, rng));
  const auto stats = character_token_stats(corpus, 3, 2);
  LmTrainConfig tc;
  tc.variant = Variant::vp_csv;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 5;

  StoryLm<float> a(l, tiny_lm_config(0.1), 1), b(l, tiny_lm_config(0.1), 1);
  const auto la = train_storylm(a, corpus, stats, tc);
  const auto lb = train_storylm(b, corpus, stats, tc);
  REQUIRE(la.size() == 3);
  CHECK(la.back().steps == 3 * 2 * 2);
  for (std::size_t e = 0; e < la.size(); ++e) {
    CHECK(same_bits(la[e].plan_loss, lb[e].plan_loss));
    CHECK(same_bits(la[e].completion_loss, lb[e].completion_loss));
  }
  CHECK(la.back().alignment_loss > 0.0);
  for (const auto& [name, t] : a.parameters()) CHECK(t.data() == b.parameters().at(name).data());

  const auto dir = std::filesystem::temp_directory_path() / "vpcsv_lm_resume";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto ck = dir / "lm.ckpt";
  StoryLm<float> c(l, tiny_lm_config(0.1), 1);
  auto first = tc;
  first.epochs = 2;
  train_storylm(c, corpus, stats, first, ck);
  StoryLm<float> d(l, tiny_lm_config(0.1), 99);  // weights come from the checkpoint
  const auto ld = train_storylm(d, corpus, stats, tc, ck);
  REQUIRE(ld.size() == 3);
  CHECK(same_bits(ld.back().completion_loss, la.back().completion_loss));
  for (const auto& [name, t] : a.parameters()) CHECK(t.data() == d.parameters().at(name).data());

  save_storylm(a, dir / "final.ckpt");
  const auto loaded = load_storylm(dir / "final.ckpt");
  CHECK(loaded.layout().cells == l.cells);
  CHECK(loaded.config().dim == 8);
  const auto seq = completion_sequence(l, corpus[0].story, corpus[0].plan, corpus[0].z).tokens;
  CHECK(loaded.logits(seq, 1).data() == a.logits(seq, 1).data());
  std::filesystem::remove_all(dir);
}

TEST_CASE("one-stage variants skip the plan loss") {
  const auto l = tiny_layout();
  Rng rng(24);
  std::vector<StoryExample> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back(random_example(l, 3, rng));
  LmTrainConfig tc;
  tc.variant = Variant::baseline;
  tc.epochs = 2;
  tc.batch_size = 2;
  StoryLm<float> m(l, tiny_lm_config(), 1);
  const auto log = train_storylm(m, corpus, character_token_stats(corpus, 3), tc);
  CHECK(log.back().steps == 4);
  CHECK(log.back().plan_loss == 0.0);
  CHECK(log.back().completion_loss > 0.0);
}

TEST_CASE("baseline and two-stage models overfit a single story") {
  const auto l = tiny_layout();
  Rng rng(25);
  const auto ex = random_example(l, 3, rng);
  auto cfg = tiny_lm_config();
  cfg.dim = 16;
  cfg.ff = 32;
  for (auto v : {Variant::baseline, Variant::vp}) {
    const auto r = overfit_single_story(v, ex, l, cfg, 2000, 10, 3);
    INFO(variant_name(v) << " steps " << r.steps);
    CHECK(r.reproduced);
    CHECK(r.steps <= 2000);
  }
}
