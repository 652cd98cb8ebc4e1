#include "vpcsv/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "vpcsv/charmap.hpp"
#include "vpcsv/dataset.hpp"
#include "vpcsv/hashing.hpp"
#include "vpcsv/rng.hpp"
#include "vpcsv/vqvae.hpp"

namespace vpcsv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void Logger::log(const std::string& event, json fields) const {
  if (out_ == nullptr) return;
  fields["event"] = event;
  *out_ << fields.dump() << '\n' << std::flush;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError(tmp, "cannot open for writing");
    out << text;
    if (!out) throw IoError(tmp, "write failed");
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

void require(const fs::path& path) {
  if (!fs::exists(path)) throw MissingPrerequisite(path);
}

json read_json(const fs::path& path) {
  require(path);
  std::ifstream in(path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw IoError(path, "malformed JSON");
  return j;
}

fs::path meta_path(const fs::path& artifact) { return artifact.string() + ".meta.json"; }

json stamp(const RunConfig& config, const std::string& stage) {
  return {{"config_hash", config.hash()}, {"stage", stage}, {"stage_hash", stage_hash(config, stage)}};
}

/// True when `artifact` exists and its sidecar says it was completed for the
/// current stage settings.
bool up_to_date(const fs::path& artifact, const RunConfig& config, const std::string& stage) {
  if (!fs::exists(artifact) || !fs::exists(meta_path(artifact))) return false;
  const json meta = read_json(meta_path(artifact));
  return meta.value("stage_hash", "") == stage_hash(config, stage) && meta.value("complete", false);
}

/// Removes a stale artifact so training restarts instead of resuming from
/// state produced under other settings. An artifact whose sidecar matches is
/// kept for resume even when incomplete.
void discard_if_stale(const fs::path& artifact, const RunConfig& config, const std::string& stage) {
  if (!fs::exists(artifact)) return;
  bool matches = false;
  if (fs::exists(meta_path(artifact))) matches = read_json(meta_path(artifact)).value("stage_hash", "") == stage_hash(config, stage);
  if (!matches) fs::remove(artifact);
}

/// Training time already spent on a resumable artifact.
double prior_seconds(const fs::path& artifact) {
  if (!fs::exists(artifact) || !fs::exists(meta_path(artifact))) return 0.0;
  return read_json(meta_path(artifact)).value("seconds", 0.0);
}

data::DatasetManifest manifest_of(const RunConfig& config) {
  require(config.manifest_path());
  return data::load_manifest(config.manifest_path());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

lm::Layout layout_of(const RunConfig& config, const data::DatasetManifest& manifest) {
  lm::Layout l;
  l.text_vocab = static_cast<int>(manifest.vocabulary.size());
  l.codebook_size = config.vqvae.codebook_size;
  l.frames = manifest.config.frames_per_story;
  l.paragraph_length = data::kMaxParagraphTokens;
  const int p = config.dataset.height / 4;
  l.cells = p * p;
  return l;
}

std::vector<int> flat_tokens(const std::vector<vq::TokenGrid>& grids) {
  std::vector<int> out;
  for (const auto& g : grids) out.insert(out.end(), g.indices.begin(), g.indices.end());
  return out;
}

std::vector<vq::TokenGrid> split_grids(const std::vector<int>& z, int frames, int p) {
  std::vector<vq::TokenGrid> grids;
  const auto cells = static_cast<std::ptrdiff_t>(p * p);
  for (int f = 0; f < frames; ++f) {
    grids.emplace_back(p, std::vector<int>(z.begin() + f * cells, z.begin() + (f + 1) * cells));
  }
  return grids;
}

/// Joins a split's samples with its extracted plans.
std::vector<lm::StoryExample> load_examples(const RunConfig& config, const data::DatasetManifest& manifest,
                                            const std::string& split) {
  const json plans = read_json(plans_path(config, split));
  if (plans.at("dataset_hash") != manifest.dataset_hash) {
    throw std::runtime_error(plans_path(config, split).string() + " was extracted from another dataset; rerun extract-plans");
  }
  std::map<std::string, const json*> by_id;
  for (const auto& s : plans.at("stories")) by_id[s.at("id").get<std::string>()] = &s;
  std::vector<lm::StoryExample> out;
  for (auto& sample : data::load_split(manifest, split)) {
    const auto it = by_id.find(sample.id);
    if (it == by_id.end()) throw std::runtime_error("no plan for story " + sample.id + "; rerun extract-plans");
    lm::StoryExample ex;
    ex.id = sample.id;
    ex.story = std::move(sample.story);
    ex.mentions = std::move(sample.mentions);
    ex.plan = it->second->at("plan").get<std::vector<int>>();
    ex.z = it->second->at("z").get<std::vector<int>>();
    out.push_back(std::move(ex));
  }
  return out;
}

lm::CharTokenStats load_stats(const RunConfig& config) {
  require(token_stats_path(config));
  std::ifstream in(token_stats_path(config));
  std::stringstream ss;
  ss << in.rdbuf();
  return lm::CharTokenStats::from_json(ss.str(), config.top_k_tokens);
}

std::string frame_name(int f) { return "frame_" + std::to_string(f) + ".png"; }

}  // namespace

std::string stage_hash(const RunConfig& config, const std::string& stage) {
  static const std::map<std::string, std::vector<std::string>> sections = {
      {"data", {"seed", "dataset"}},
      {"vqvae", {"seed", "dataset", "vqvae"}},
      {"charmap", {"seed", "dataset", "charmap"}},
      {"plans", {"seed", "dataset", "vqvae", "charmap"}},
      {"lm", {"seed", "dataset", "vqvae", "charmap", "storylm"}},
      {"generate", {"seed", "dataset", "vqvae", "charmap", "storylm"}},
      {"eval", {"seed", "runs", "dataset", "vqvae", "charmap", "storylm", "eval"}},
  };
  const auto it = sections.find(stage);
  if (it == sections.end()) throw std::invalid_argument("stage_hash: unknown stage " + stage);
  const json full = config.to_json();
  json subset = json::object();
  for (const auto& s : it->second) subset[s] = full.at(s);
  // Decoding only matters from generation on.
  if (stage == "lm") subset["storylm"].erase("decode");
  return sha256_hex(stage + subset.dump());
}

fs::path vqvae_path(const RunConfig& config) { return config.checkpoint_dir() / "vqvae.ckpt"; }
fs::path classifier_path(const RunConfig& config) { return config.checkpoint_dir() / "charmap.ckpt"; }
fs::path plans_path(const RunConfig& config, const std::string& split) {
  return config.workdir / "plans" / (split + ".json");
}
fs::path token_stats_path(const RunConfig& config) { return config.workdir / "plans" / "token_stats.json"; }
fs::path variant_dir(const RunConfig& config, lm::Variant variant) {
  return config.workdir / lm::variant_name(variant);
}
fs::path run_dir(const RunConfig& config, lm::Variant variant, int run) {
  return variant_dir(config, variant) / ("run_" + std::to_string(run));
}
fs::path outputs_dir(const RunConfig& config, lm::Variant variant, int run, const std::string& split) {
  return run_dir(config, variant, run) / split;
}
fs::path report_dir(const RunConfig& config) { return config.workdir / "report"; }

const std::vector<lm::Variant>& all_variants() {
  static const std::vector<lm::Variant> v = {lm::Variant::baseline, lm::Variant::vp, lm::Variant::ta,
                                             lm::Variant::vp_csv};
  return v;
}

void datagen(const RunConfig& config, const Logger& log) {
  const auto t0 = std::chrono::steady_clock::now();
  if (up_to_date(config.manifest_path(), config, "data")) {
    log.log("datagen", {{"skipped", true}, {"manifest", config.manifest_path().string()}});
    return;
  }
  const fs::path root = config.manifest_path().parent_path();
  const auto manifest = data::generate_dataset(config.dataset, config.seed, root);
  if (fs::absolute(manifest.root / "manifest.json") != fs::absolute(config.manifest_path())) {
    fs::rename(manifest.root / "manifest.json", config.manifest_path());
  }
  json meta = stamp(config, "data");
  meta["dataset_hash"] = manifest.dataset_hash;
  meta["seconds"] = seconds_since(t0);
  meta["complete"] = true;
  write_json(meta_path(config.manifest_path()), meta);
  log.log("datagen", {{"manifest", config.manifest_path().string()},
                      {"dataset_hash", manifest.dataset_hash},
                      {"stories", manifest.split("train").size() + manifest.split("val").size() + manifest.split("test").size()},
                      {"seconds", seconds_since(t0)}});
}

void train_vqvae(const RunConfig& config, const Logger& log) {
  const auto manifest = manifest_of(config);
  const fs::path ckpt = vqvae_path(config);
  if (up_to_date(ckpt, config, "vqvae")) {
    log.log("train-vqvae", {{"skipped", true}, {"checkpoint", ckpt.string()}});
    return;
  }
  discard_if_stale(ckpt, config, "vqvae");
  const double before = prior_seconds(ckpt);
  json meta = stamp(config, "vqvae");
  meta["dataset_hash"] = manifest.dataset_hash;
  meta["complete"] = false;
  write_json(meta_path(ckpt), meta);

  std::vector<Image8> frames;
  for (auto& s : data::load_split(manifest, "train"))
    for (auto& f : s.frames) frames.push_back(std::move(f));
  vq::VqVae<float> model(config.vqvae, Rng::derive(config.seed, "vqvae-init"));
  vq::VqTrainConfig tc = config.vqvae_train;
  tc.seed = Rng::derive(config.seed, "vqvae-train");
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = vq::train_vqvae(model, frames, tc, ckpt, [&](const vq::VqEpochLog& e) {
    log.log("vqvae-epoch", {{"epoch", e.epoch},
                            {"recon", e.recon},
                            {"codebook", e.codebook},
                            {"commit", e.commit},
                            {"usage", e.usage},
                            {"seconds", seconds_since(t0)}});
  });
  if (!result.log.empty()) meta["final_epoch"] = {{"recon", result.log.back().recon}, {"usage", result.log.back().usage}};
  meta["seconds"] = before + seconds_since(t0);
  meta["complete"] = true;
  write_json(meta_path(ckpt), meta);
  log.log("train-vqvae", {{"checkpoint", ckpt.string()}, {"seconds", seconds_since(t0)}});
}

void train_charmap(const RunConfig& config, const Logger& log) {
  const auto manifest = manifest_of(config);
  const fs::path ckpt = classifier_path(config);
  if (up_to_date(ckpt, config, "charmap")) {
    log.log("train-charmap", {{"skipped", true}, {"checkpoint", ckpt.string()}});
    return;
  }
  std::vector<Image8> frames, val_frames;
  std::vector<std::vector<bool>> labels, val_labels;
  for (auto& s : data::load_split(manifest, "train")) {
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
      frames.push_back(std::move(s.frames[f]));
      labels.push_back(s.mentions[f]);
    }
  }
  for (auto& s : data::load_split(manifest, "val")) {
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
      val_frames.push_back(std::move(s.frames[f]));
      val_labels.push_back(s.mentions[f]);
    }
  }
  cm::ClassifierConfig cc;
  cc.num_classes = config.dataset.num_characters;
  cc.height = config.dataset.height;
  cc.width = config.dataset.width;
  cm::Classifier<float> model(cc, Rng::derive(config.seed, "charmap-init"));
  cm::ClassifierTrainConfig tc = config.charmap_train;
  tc.seed = Rng::derive(config.seed, "charmap-train");
  const auto t0 = std::chrono::steady_clock::now();
  const auto history = cm::train_classifier(model, frames, labels, val_frames, val_labels, tc,
                                            [&](const cm::ClassifierEpochLog& e) {
                                              log.log("charmap-epoch", {{"epoch", e.epoch},
                                                                        {"loss", e.loss},
                                                                        {"val_subset_accuracy", e.val_subset_accuracy},
                                                                        {"seconds", seconds_since(t0)}});
                                            });
  fs::create_directories(ckpt.parent_path());
  cm::save_classifier(model, ckpt);
  json meta = stamp(config, "charmap");
  meta["dataset_hash"] = manifest.dataset_hash;
  meta["val_subset_accuracy"] = history.empty() ? 0.0 : history.back().val_subset_accuracy;
  meta["seconds"] = seconds_since(t0);
  meta["complete"] = true;
  write_json(meta_path(ckpt), meta);
  log.log("train-charmap", {{"checkpoint", ckpt.string()}, {"seconds", seconds_since(t0)}});
}

void extract_plans(const RunConfig& config, const Logger& log) {
  const auto manifest = manifest_of(config);
  require(vqvae_path(config));
  require(classifier_path(config));
  const auto vqm = vq::load_vqvae(vqvae_path(config));
  const auto classifier = cm::load_classifier(classifier_path(config));
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<lm::StoryExample> train_examples;
  for (const std::string split : {"train", "val", "test"}) {
    json stories = json::array();
    double mask_cells = 0.0, cells = 0.0;
    for (const auto& s : data::load_split(manifest, split)) {
      const auto grids = vq::tokenize(vqm, s.frames);
      std::vector<int> plan;
      for (std::size_t f = 0; f < s.frames.size(); ++f) {
        const auto p = cm::frame_plan(classifier, s.frames[f], s.mentions[f], grids[f], config.gamma);
        plan.insert(plan.end(), p.tokens.begin(), p.tokens.end());
        mask_cells += p.mask_count();
        cells += static_cast<double>(p.tokens.size());
      }
      const auto z = flat_tokens(grids);
      stories.push_back({{"id", s.id}, {"plan", plan}, {"z", z}});
      if (split == "train") {
        lm::StoryExample ex;
        ex.id = s.id;
        ex.mentions = s.mentions;
        ex.plan = plan;
        ex.z = z;
        train_examples.push_back(std::move(ex));
      }
    }
    json out = stamp(config, "plans");
    out["dataset_hash"] = manifest.dataset_hash;
    out["split"] = split;
    out["gamma"] = config.gamma;
    out["stories"] = std::move(stories);
    write_json(plans_path(config, split), out);
    log.log("extract-plans", {{"split", split}, {"mask_fraction", cells > 0 ? mask_cells / cells : 0.0}});
  }
  const auto stats = lm::character_token_stats(train_examples, config.dataset.num_characters, config.top_k_tokens);
  write_text(token_stats_path(config), stats.to_json() + "\n");
  json meta = stamp(config, "plans");
  meta["dataset_hash"] = manifest.dataset_hash;
  meta["seconds"] = seconds_since(t0);
  meta["complete"] = true;
  write_json(meta_path(token_stats_path(config)), meta);
  for (int c : stats.empty_characters()) {
    log.log("warning", {{"message", "character never mentioned in a training frame"}, {"character", c}});
  }
  log.log("token-stats", {{"path", token_stats_path(config).string()}, {"seconds", seconds_since(t0)}});
}

void train_lm(const RunConfig& config, lm::Variant variant, int run, const Logger& log) {
  if (run < 0) {
    for (int k = 0; k < config.runs; ++k) train_lm(config, variant, k, log);
    return;
  }
  const auto manifest = manifest_of(config);
  const auto examples = load_examples(config, manifest, "train");
  const auto stats = load_stats(config);
  const fs::path dir = run_dir(config, variant, run);
  const fs::path ckpt = dir / "lm.ckpt";
  const std::string name = lm::variant_name(variant);
  if (up_to_date(ckpt, config, "lm")) {
    log.log("train-lm", {{"variant", name}, {"run", run}, {"skipped", true}});
    return;
  }
  discard_if_stale(ckpt, config, "lm");
  const bool resuming = fs::exists(ckpt);
  const double before = prior_seconds(ckpt);
  json meta = stamp(config, "lm");
  meta["dataset_hash"] = manifest.dataset_hash;
  meta["variant"] = name;
  meta["run"] = run;
  meta["seed"] = config.run_seed(run);
  meta["complete"] = false;
  write_json(meta_path(ckpt), meta);

  lm::StoryLm<float> model(layout_of(config, manifest), config.storylm, Rng::derive(config.run_seed(run), "lm-init"));
  lm::LmTrainConfig tc = config.lm_train;
  tc.variant = variant;
  tc.seed = config.run_seed(run);
  std::ofstream train_log(dir / "train_log.jsonl", resuming ? std::ios::app : std::ios::trunc);
  const auto t0 = std::chrono::steady_clock::now();
  lm::train_storylm(model, examples, stats, tc, ckpt, [&](const lm::LmEpochLog& e) {
    json row = {{"config_hash", config.hash()},
                {"epoch", e.epoch},
                {"plan_loss", e.plan_loss},
                {"completion_loss", e.completion_loss},
                {"alignment_loss", e.alignment_loss},
                {"steps", e.steps}};
    train_log << row.dump() << '\n' << std::flush;
    row["variant"] = name;
    row["run"] = run;
    row["seconds"] = seconds_since(t0);
    log.log("lm-epoch", row);
    return true;
  });
  meta["seconds"] = before + seconds_since(t0);
  meta["complete"] = true;
  write_json(meta_path(ckpt), meta);
  log.log("train-lm", {{"variant", name}, {"run", run}, {"checkpoint", ckpt.string()}, {"seconds", seconds_since(t0)}});
}

void generate(const RunConfig& config, lm::Variant variant, const std::string& split, int run, const Logger& log) {
  if (run < 0) {
    for (int k = 0; k < config.runs; ++k) generate(config, variant, split, k, log);
    return;
  }
  const auto manifest = manifest_of(config);
  const fs::path ckpt = run_dir(config, variant, run) / "lm.ckpt";
  require(ckpt);
  require(vqvae_path(config));
  const auto model = lm::load_storylm(ckpt);
  const auto vqm = vq::load_vqvae(vqvae_path(config));
  const fs::path out_dir = outputs_dir(config, variant, run, split);
  if (fs::exists(out_dir / "index.json") && up_to_date(ckpt, config, "lm") &&
      read_json(out_dir / "index.json").value("stage_hash", "") == stage_hash(config, "generate")) {
    log.log("generate", {{"variant", lm::variant_name(variant)}, {"run", run}, {"split", split}, {"skipped", true}});
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int p = vqm.grid_size();
  json index = stamp(config, "generate");
  index["dataset_hash"] = manifest.dataset_hash;
  index["variant"] = lm::variant_name(variant);
  index["run"] = run;
  index["decode"] = config.to_json()["storylm"]["decode"];
  index["stories"] = json::array();
  const std::uint64_t decode_seed = Rng::derive(config.decode.seed, "decode", config.run_seed(run));
  for (const auto& s : data::load_split(manifest, split)) {
    Rng rng(Rng::derive(decode_seed, s.id));
    json tokens = {{"config_hash", config.hash()}, {"id", s.id}};
    std::vector<int> z;
    if (lm::two_stage(variant)) {
      const auto plan = lm::generate_plan(model, s.story, config.decode, rng);
      z = lm::generate_completion(model, s.story, plan, config.decode, rng);
      tokens["plan"] = plan;
    } else {
      z = lm::generate_baseline(model, s.story, config.decode, rng);
    }
    tokens["z"] = z;
    const auto frames = vq::detokenize(vqm, split_grids(z, static_cast<int>(s.frames.size()), p));
    const fs::path story_dir = out_dir / s.id;
    for (std::size_t f = 0; f < frames.size(); ++f) write_png(story_dir / frame_name(static_cast<int>(f)), frames[f]);
    write_png(story_dir / "story.png", hconcat(frames, 1));
    tokens["frames"] = static_cast<int>(frames.size());
    write_json(story_dir / "tokens.json", tokens);
    index["stories"].push_back(s.id);
  }
  index["seconds"] = seconds_since(t0);
  write_json(out_dir / "index.json", index);
  log.log("generate", {{"variant", lm::variant_name(variant)},
                       {"run", run},
                       {"split", split},
                       {"outputs", out_dir.string()},
                       {"seconds", seconds_since(t0)}});
}

eval::EvalReport evaluate(const RunConfig& config, lm::Variant variant, const Logger& log) {
  const auto manifest = manifest_of(config);
  require(classifier_path(config));
  for (int k = 0; k < config.runs; ++k) require(outputs_dir(config, variant, k, "test"));
  const auto classifier = cm::load_classifier(classifier_path(config));
  const auto stats = load_stats(config);

  std::vector<eval::GoldStory> gold;
  for (auto& s : data::load_split(manifest, "test")) {
    eval::GoldStory g;
    g.id = s.id;
    g.constraint_codes = stats.constraint_codes(s.mentions);
    g.frames = std::move(s.frames);
    g.mentions = std::move(s.mentions);
    gold.push_back(std::move(g));
  }
  eval::EvalOptions options;
  options.averaging = config.averaging;
  options.threshold = config.threshold;
  options.fid_eps = config.fid_eps;

  const std::string name = lm::variant_name(variant);
  std::vector<eval::EvalReport> runs;
  for (int k = 0; k < config.runs; ++k) {
    const fs::path dir = outputs_dir(config, variant, k, "test");
    std::vector<eval::SystemStory> outputs;
    for (const auto& g : gold) {
      const fs::path story_dir = dir / g.id;
      if (!fs::exists(story_dir / "tokens.json")) continue;  // reported together below
      eval::SystemStory out;
      out.id = g.id;
      out.z = read_json(story_dir / "tokens.json").at("z").get<std::vector<int>>();
      for (std::size_t f = 0; f < g.frames.size(); ++f) {
        out.frames.push_back(read_png(story_dir / frame_name(static_cast<int>(f)), 3));
      }
      outputs.push_back(std::move(out));
    }
    auto report = eval::evaluate(classifier, gold, outputs, options);
    report.system = name;
    report.config = stamp(config, "eval");
    report.config["seed"] = config.run_seed(k);
    report.config["run"] = k;
    report.config["dataset_hash"] = manifest.dataset_hash;
    report.config["gamma"] = config.gamma;
    report.config["lambda"] = lm::aligned(variant) ? config.lm_train.lambda : 0.0;
    report.config["checkpoints"] = {{"vqvae", vqvae_path(config).string()},
                                    {"charmap", classifier_path(config).string()},
                                    {"charmap_sha256", sha256_file(classifier_path(config))},
                                    {"lm", (run_dir(config, variant, k) / "lm.ckpt").string()}};
    report.config["decode"] = config.to_json()["storylm"]["decode"];
    write_json(run_dir(config, variant, k) / "report.json", report.to_json());
    log.log("evaluate-run", {{"variant", name},
                             {"run", k},
                             {"character_f1", report.character_f1},
                             {"frame_accuracy", report.frame_accuracy},
                             {"fid", report.fid},
                             {"coverage_ratio", report.coverage_ratio}});
    runs.push_back(std::move(report));
  }
  auto mean = eval::mean_report(runs);
  mean.config.erase("run");
  mean.config["checkpoints"].erase("lm");
  write_json(variant_dir(config, variant) / "report.json", mean.to_json());
  write_text(variant_dir(config, variant) / "report.csv", eval::EvalReport::csv_header() + "\n" + mean.csv_row() + "\n");
  log.log("evaluate", {{"variant", name},
                       {"runs", config.runs},
                       {"character_f1", mean.character_f1},
                       {"frame_accuracy", mean.frame_accuracy},
                       {"story_accuracy", mean.story_accuracy},
                       {"fid", mean.fid},
                       {"coverage_ratio", mean.coverage_ratio}});
  return mean;
}

json report(const RunConfig& config, const Logger& log) {
  const auto manifest = manifest_of(config);
  std::vector<eval::EvalReport> rows;
  for (auto v : all_variants()) {
    rows.push_back(eval::EvalReport::from_json(read_json(variant_dir(config, v) / "report.json")));
  }
  std::string dataset_hash;
  for (const auto& r : rows) {
    const std::string h = r.config.value("dataset_hash", "");
    if (dataset_hash.empty()) dataset_hash = h;
    if (h != dataset_hash) {
      throw std::runtime_error("report: " + r.system + " was evaluated on dataset " + h + ", others on " + dataset_hash);
    }
  }
  if (dataset_hash != manifest.dataset_hash) {
    throw std::runtime_error("report: reports were computed on dataset " + dataset_hash + " but the manifest is " +
                             manifest.dataset_hash);
  }

  const fs::path dir = report_dir(config);
  json table = stamp(config, "eval");
  table["dataset_hash"] = dataset_hash;
  table["exact_match"] = config.story_level_accuracy ? "story" : "frame";
  table["systems"] = json::array();
  std::string csv = "system,character_f1,exact_match,frame_accuracy,story_accuracy,fid,coverage_ratio,runs\n";
  for (const auto& r : rows) {
    const double exact = config.story_level_accuracy ? r.story_accuracy : r.frame_accuracy;
    table["systems"].push_back({{"system", r.system},
                                {"character_f1", r.character_f1},
                                {"exact_match", exact},
                                {"frame_accuracy", r.frame_accuracy},
                                {"story_accuracy", r.story_accuracy},
                                {"fid", r.fid},
                                {"coverage_ratio", r.coverage_ratio},
                                {"runs", r.runs}});
    std::ostringstream line;
    line.precision(10);
    line << r.system << ',' << r.character_f1 << ',' << exact << ',' << r.frame_accuracy << ',' << r.story_accuracy
         << ',' << r.fid << ',' << r.coverage_ratio << ',' << r.runs << '\n';
    csv += line.str();
  }
  write_json(dir / "table.json", table);
  write_text(dir / "table.csv", csv);

  // One panel per sampled test story: rows gold, baseline, vp, ta, vp-csv
  // (run 0), each row the story's frames left to right.
  const auto test = data::load_split(manifest, "test");
  const auto n = std::min<std::size_t>(test.size(), static_cast<std::size_t>(config.panel_stories));
  json panels = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = test[i];
    std::vector<Image8> panel_rows = {hconcat(s.frames, 1)};
    for (auto v : all_variants()) {
      const fs::path png = outputs_dir(config, v, 0, "test") / s.id / "story.png";
      require(png);
      panel_rows.push_back(read_png(png, 3));
    }
    const fs::path out = dir / "panels" / (s.id + ".png");
    write_png(out, vconcat(panel_rows, 2));
    panels.push_back(out.string());
  }
  json meta = stamp(config, "eval");
  meta["dataset_hash"] = dataset_hash;
  meta["panels"] = panels;
  meta["rows"] = {"gold", "baseline", "vp", "ta", "vp-csv"};
  write_json(dir / "panels.json", meta);
  log.log("report", {{"table", (dir / "table.csv").string()}, {"panels", panels.size()}});
  return table;
}

json run_all(const RunConfig& config, const Logger& log) {
  datagen(config, log);
  train_vqvae(config, log);
  train_charmap(config, log);
  extract_plans(config, log);
  for (auto v : all_variants()) {
    train_lm(config, v, -1, log);
    generate(config, v, "test", -1, log);
    evaluate(config, v, log);
  }
  return report(config, log);
}

}  // namespace vpcsv::cli
