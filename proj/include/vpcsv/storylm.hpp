#pragma once

// Decoder-only transformer over one unified vocabulary (text ids, visual token
// ids, specials). The same parameters serve plan generation (story -> plan)
// and completion (story + plan -> full visual tokens).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "vpcsv/ops.hpp"
#include "vpcsv/optim.hpp"

namespace vpcsv::lm {

/// Plan cells outside character regions, as stored in plan files.
inline constexpr int kPlanMask = -1;

/// Id ranges: text [0, Vt), visual [Vt, Vt + K), then MASK BOS SEP PLAN GEN EOS.
struct Layout {
  int text_vocab = 0;
  int codebook_size = 64;
  int frames = 5;
  int paragraph_length = 12;
  int cells = 64;  // p * p
  int text_pad = 0;

  int visual(int code) const { return text_vocab + code; }
  int code_of(int id) const { return id - text_vocab; }
  int mask() const { return text_vocab + codebook_size; }
  int bos() const { return mask() + 1; }
  int sep() const { return mask() + 2; }
  int plan() const { return mask() + 3; }
  int gen() const { return mask() + 4; }
  int eos() const { return mask() + 5; }
  int vocab_size() const { return mask() + 6; }

  bool is_text(int id) const { return id >= 0 && id < text_vocab; }
  bool is_visual(int id) const { return id >= text_vocab && id < text_vocab + codebook_size; }

  /// n paragraphs, each padded to paragraph_length, separated by SEP.
  int story_length() const { return frames * paragraph_length + frames - 1; }
  int visual_length() const { return frames * cells; }
  /// Longest sequence: the two-stage completion layout.
  int max_length() const { return 1 + story_length() + 1 + visual_length() + 1 + visual_length() + 1; }

  std::vector<int> story_tokens(const std::vector<std::vector<int>>& story) const;
};

/// A serialized sequence plus the span whose tokens are scored.
struct Sequence {
  std::vector<int> tokens;
  int target_begin = 0;
  int target_count = 0;
};

/// [BOS] story [PLAN] r [EOS]; the plan (kPlanMask for MASK) is scored.
Sequence plan_sequence(const Layout& layout, const std::vector<std::vector<int>>& story, const std::vector<int>& plan);
/// [BOS] story [PLAN] r [GEN] z [EOS]; z is scored. An empty plan gives the
/// one-stage layout [BOS] story [PLAN] [GEN] z [EOS].
Sequence completion_sequence(const Layout& layout, const std::vector<std::vector<int>>& story,
                             const std::vector<int>& plan, const std::vector<int>& z);

struct Segments {
  std::vector<std::vector<int>> story;  // unpadded paragraphs
  std::vector<int> plan;                // codebook indices / kPlanMask
  std::vector<int> z;                   // codebook indices
  bool has_plan = false;
  bool has_completion = false;
};
/// Inverse of the sequence builders; throws on malformed input.
Segments parse_sequence(const Layout& layout, const std::vector<int>& tokens);

struct StoryLmConfig {
  int layers = 2;
  int dim = 128;
  int heads = 4;
  int ff = 512;
  double dropout = 0.1;
};

template <typename Scalar>
class StoryLm {
 public:
  StoryLm(const Layout& layout, const StoryLmConfig& config, std::uint64_t seed);

  const Layout& layout() const { return layout_; }
  const StoryLmConfig& config() const { return config_; }
  int max_length() const { return layout_.max_length(); }

  /// tokens holds `batch` sequences of equal length back to back. Returns the
  /// final-layer-normed states [batch * L, dim]. `rng` drives dropout and
  /// may be null when not training.
  Tensor<Scalar> hidden(const std::vector<int>& tokens, Index batch, bool training, Rng* rng) const;
  /// Output projection of selected rows of `hidden`.
  Tensor<Scalar> head(const Tensor<Scalar>& states) const;
  /// Logits for every position, [batch * L, V].
  Tensor<Scalar> logits(const std::vector<int>& tokens, Index batch, bool training = false, Rng* rng = nullptr) const;

  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

 private:
  Layout layout_;
  StoryLmConfig config_;
  ParameterSet<Scalar> params_;
};

/// Logits that predict each scored token, in order, for a batch of sequences of
/// equal length; plus the unified-vocabulary target ids.
template <typename Scalar>
std::pair<Tensor<Scalar>, std::vector<int>> target_logits(const StoryLm<Scalar>& model,
                                                          const std::vector<Sequence>& batch, bool training, Rng* rng);

/// Mean teacher-forced cross-entropy over the scored span.
template <typename Scalar>
Tensor<Scalar> sequence_loss(const StoryLm<Scalar>& model, const std::vector<Sequence>& batch, bool training = false,
                             Rng* rng = nullptr);

/// Sum form over scored positions: -[sum_P log p_j + sum_N log(1 - p_j)], with
/// P the positions whose target lies in `constraint` (unified ids). Empty
/// constraint gives 0.
template <typename Scalar>
Tensor<Scalar> alignment_loss(const Tensor<Scalar>& logits, const std::vector<int>& targets,
                              const std::vector<std::set<int>>& constraint, int positions_per_sequence);
/// Same formula on plain probabilities, for reporting and cross-checks.
double alignment_loss_value(const std::vector<double>& target_probs, const std::vector<int>& targets,
                            const std::set<int>& constraint);

template <typename Scalar>
struct CompletionObjective {
  Tensor<Scalar> completion;  // mean cross-entropy
  Tensor<Scalar> alignment;   // sum-form alignment loss over the batch
  Tensor<Scalar> total;
};

/// completion + lambda * alignment / scored positions. With lambda == 0 the
/// total is the completion loss itself.
template <typename Scalar>
CompletionObjective<Scalar> completion_objective(const StoryLm<Scalar>& model, const std::vector<Sequence>& batch,
                                                 const std::vector<std::set<int>>& constraint, double lambda,
                                                 bool training = false, Rng* rng = nullptr);

/// Ranked (code, count) pairs per character over non-MASK plan cells of the
/// frames that mention it.
struct CharTokenStats {
  std::vector<std::vector<std::pair<int, int>>> ranked;
  int k = 10;

  /// Union of the top-k codes of the characters mentioned anywhere in the story.
  std::set<int> constraint_codes(const std::vector<std::vector<bool>>& mentions) const;
  /// Characters never seen in a mentioned frame (empty lists).
  std::vector<int> empty_characters() const;
  /// {"<character id>": [[code, count], ...], ...}
  std::string to_json() const;
  static CharTokenStats from_json(const std::string& text, int k = 10);
};

/// One training or evaluation story in token form.
struct StoryExample {
  std::string id;
  std::vector<std::vector<int>> story;
  std::vector<std::vector<bool>> mentions;
  std::vector<int> plan;  // frames * cells, codebook index or kPlanMask
  std::vector<int> z;     // frames * cells codebook indices
};

CharTokenStats character_token_stats(const std::vector<StoryExample>& examples, int num_characters, int k = 10);

/// Unified-vocabulary constraint set for one story.
std::set<int> constraint_ids(const Layout& layout, const CharTokenStats& stats,
                             const std::vector<std::vector<bool>>& mentions);

enum class Variant { baseline, vp, ta, vp_csv };
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
inline bool two_stage(Variant v) { return v == Variant::vp || v == Variant::vp_csv; }
inline bool aligned(Variant v) { return v == Variant::ta || v == Variant::vp_csv; }

struct LmTrainConfig {
  Variant variant = Variant::vp_csv;
  int epochs = 12;
  int batch_size = 8;
  double lr = 1e-3;
  double clip = 1.0;
  double lambda = 0.1;
  std::uint64_t seed = 0;
  /// Stop once this many optimizer steps ran (0 = no limit); for small tests.
  std::int64_t max_steps = 0;
};

struct LmEpochLog {
  int epoch = 0;
  double plan_loss = 0.0;        // stage 1, two-stage variants only
  double completion_loss = 0.0;  // stage 2 (or one-stage) cross-entropy
  double alignment_loss = 0.0;   // per scored position
  std::int64_t steps = 0;
};

/// Two-stage variants alternate one stage-1 and one stage-2 Adam step per
/// batch; stage 2 is always conditioned on gold plans. Checkpointing and
/// resume work as for the tokenizer. Training stops early when `on_epoch`
/// returns false.
std::vector<LmEpochLog> train_storylm(StoryLm<float>& model, const std::vector<StoryExample>& examples,
                                      const CharTokenStats& stats, const LmTrainConfig& config,
                                      const std::filesystem::path& checkpoint_path = {},
                                      const std::function<bool(const LmEpochLog&)>& on_epoch = {});

void save_storylm(const StoryLm<float>& model, const std::filesystem::path& path);
StoryLm<float> load_storylm(const std::filesystem::path& path);

// ------------------------------------------------------------ decoding

struct DecodeConfig {
  std::string strategy = "greedy";  // greedy | topk | temperature
  double temperature = 1.0;
  int k = 10;
  std::uint64_t seed = 0;
};

/// Incremental decoder with per-layer key/value caches; no autograd.
class KvDecoder {
 public:
  explicit KvDecoder(const StoryLm<float>& model);
  ~KvDecoder();
  KvDecoder(const KvDecoder&) = delete;
  KvDecoder& operator=(const KvDecoder&) = delete;

  /// Appends one token and returns the next-token logits.
  const Eigen::VectorXf& feed(int token);
  int position() const;
  void reset();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Chooses a token among ids with allowed[id] true.
int choose_token(const Eigen::VectorXf& logits, const std::vector<bool>& allowed, const DecodeConfig& config,
                 Rng& rng);

std::vector<bool> plan_alphabet(const Layout& layout);
std::vector<bool> visual_alphabet(const Layout& layout);

/// frames * cells symbols, each a codebook index or kPlanMask.
std::vector<int> generate_plan(const StoryLm<float>& model, const std::vector<std::vector<int>>& story,
                               const DecodeConfig& config, Rng& rng);
/// frames * cells codebook indices conditioned on a plan.
std::vector<int> generate_completion(const StoryLm<float>& model, const std::vector<std::vector<int>>& story,
                                     const std::vector<int>& plan, const DecodeConfig& config, Rng& rng);
/// One-stage decode of frames * cells codebook indices.
std::vector<int> generate_baseline(const StoryLm<float>& model, const std::vector<std::vector<int>>& story,
                                   const DecodeConfig& config, Rng& rng);

extern template class StoryLm<float>;
extern template class StoryLm<double>;

}  // namespace vpcsv::lm
