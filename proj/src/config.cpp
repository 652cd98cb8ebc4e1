#include "vpcsv/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vpcsv/hashing.hpp"

namespace vpcsv::cli {

using nlohmann::json;

namespace {

std::string join_key(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Overlays `user` onto `base`, which holds every legal key.
void merge_checked(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string full = join_key(prefix, key);
    if (!base.contains(key)) throw ConfigError(full, "unknown key");
    if (base[key].is_object()) {
      merge_checked(base[key], value, full);
    } else {
      base[key] = value;
    }
  }
}

class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  const json& at(const std::string& dotted) const {
    const json* node = &root_;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) node = &node->at(part);
    return *node;
  }

  template <typename T>
  T number(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number()) throw ConfigError(key, "expected a number");
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          throw ConfigError(key, "must be non-negative");
      }
    }
    return v.get<T>();
  }

  int positive(const std::string& key) const {
    const int v = number<int>(key);
    if (v <= 0) throw ConfigError(key, "must be positive");
    return v;
  }

  double in_range(const std::string& key, double lo, double hi) const {
    const double v = number<double>(key);
    if (!(v >= lo && v <= hi)) {
      throw ConfigError(key, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return v;
  }

  std::string string(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_string()) throw ConfigError(key, "expected a string");
    return v.get<std::string>();
  }

  bool boolean(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
    return v.get<bool>();
  }

 private:
  const json& root_;
};

}  // namespace

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["runs"] = runs;
  j["dataset"] = {{"characters", dataset.num_characters}, {"frames", dataset.frames_per_story},
                  {"height", dataset.height},             {"width", dataset.width},
                  {"train", dataset.train},               {"val", dataset.val},
                  {"test", dataset.test},                 {"sprite_size", dataset.sprite_size}};
  j["vqvae"] = {{"K", vqvae.codebook_size},      {"D", vqvae.code_dim},
                {"hidden", vqvae.hidden},        {"beta", vqvae.beta},
                {"epochs", vqvae_train.epochs},  {"batch_size", vqvae_train.batch_size},
                {"lr", vqvae_train.lr}};
  j["charmap"] = {{"epochs", charmap_train.epochs},
                  {"batch_size", charmap_train.batch_size},
                  {"lr", charmap_train.lr},
                  {"gamma", gamma},
                  {"threshold", threshold}};
  j["storylm"] = {{"layers", storylm.layers},
                  {"dim", storylm.dim},
                  {"heads", storylm.heads},
                  {"ff", storylm.ff},
                  {"dropout", storylm.dropout},
                  {"lambda", lm_train.lambda},
                  {"schedule", schedule},
                  {"epochs", lm_train.epochs},
                  {"batch_size", lm_train.batch_size},
                  {"lr", lm_train.lr},
                  {"clip", lm_train.clip},
                  {"top_k_tokens", top_k_tokens},
                  {"decode",
                   {{"strategy", decode.strategy},
                    {"temperature", decode.temperature},
                    {"k", decode.k},
                    {"seed", decode.seed}}}};
  j["eval"] = {{"averaging", averaging == eval::Averaging::micro ? "micro" : "macro"},
               {"story_level_accuracy", story_level_accuracy},
               {"fid_eps", fid_eps},
               {"panel_stories", panel_stories}};
  j["paths"] = {{"workdir", workdir.string()}, {"manifest", manifest.string()}, {"checkpoints", checkpoints.string()}};
  return j;
}

RunConfig RunConfig::from_json(const json& user) {
  json merged = RunConfig{}.to_json();
  merge_checked(merged, user, "");
  const Reader r(merged);

  RunConfig c;
  c.seed = r.number<std::uint64_t>("seed");
  c.runs = r.positive("runs");

  c.dataset.num_characters = r.positive("dataset.characters");
  if (c.dataset.num_characters > data::kMaxCharacters) {
    throw ConfigError("dataset.characters", "at most " + std::to_string(data::kMaxCharacters));
  }
  c.dataset.frames_per_story = r.positive("dataset.frames");
  c.dataset.height = r.positive("dataset.height");
  c.dataset.width = r.positive("dataset.width");
  if (c.dataset.height % 4 != 0 || c.dataset.width != c.dataset.height) {
    throw ConfigError("dataset.height", "frames must be square with a side divisible by 4");
  }
  c.dataset.train = r.positive("dataset.train");
  c.dataset.val = r.positive("dataset.val");
  c.dataset.test = r.positive("dataset.test");
  c.dataset.sprite_size = r.positive("dataset.sprite_size");

  c.vqvae.codebook_size = r.positive("vqvae.K");
  c.vqvae.code_dim = r.positive("vqvae.D");
  c.vqvae.hidden = r.positive("vqvae.hidden");
  c.vqvae.beta = r.in_range("vqvae.beta", 0.0, 1e9);
  c.vqvae.height = c.dataset.height;
  c.vqvae.width = c.dataset.width;
  c.vqvae_train.epochs = r.positive("vqvae.epochs");
  c.vqvae_train.batch_size = r.positive("vqvae.batch_size");
  c.vqvae_train.lr = r.in_range("vqvae.lr", 1e-12, 10.0);

  c.charmap_train.epochs = r.positive("charmap.epochs");
  c.charmap_train.batch_size = r.positive("charmap.batch_size");
  c.charmap_train.lr = r.in_range("charmap.lr", 1e-12, 10.0);
  c.gamma = r.in_range("charmap.gamma", 0.0, 1.0);
  c.threshold = r.in_range("charmap.threshold", 0.0, 1.0);

  c.storylm.layers = r.positive("storylm.layers");
  c.storylm.dim = r.positive("storylm.dim");
  c.storylm.heads = r.positive("storylm.heads");
  if (c.storylm.dim % c.storylm.heads != 0) throw ConfigError("storylm.heads", "must divide storylm.dim");
  c.storylm.ff = r.positive("storylm.ff");
  c.storylm.dropout = r.in_range("storylm.dropout", 0.0, 0.99);
  c.lm_train.lambda = r.in_range("storylm.lambda", 0.0, 1e9);
  c.schedule = r.string("storylm.schedule");
  if (c.schedule != "alternate") throw ConfigError("storylm.schedule", "only \"alternate\" is supported");
  c.lm_train.epochs = r.positive("storylm.epochs");
  c.lm_train.batch_size = r.positive("storylm.batch_size");
  c.lm_train.lr = r.in_range("storylm.lr", 1e-12, 10.0);
  c.lm_train.clip = r.in_range("storylm.clip", 0.0, 1e9);
  c.top_k_tokens = r.positive("storylm.top_k_tokens");
  c.decode.strategy = r.string("storylm.decode.strategy");
  if (c.decode.strategy != "greedy" && c.decode.strategy != "topk" && c.decode.strategy != "temperature") {
    throw ConfigError("storylm.decode.strategy", "expected greedy, topk or temperature");
  }
  c.decode.temperature = r.in_range("storylm.decode.temperature", 1e-6, 1e6);
  c.decode.k = r.positive("storylm.decode.k");
  c.decode.seed = r.number<std::uint64_t>("storylm.decode.seed");

  const std::string avg = r.string("eval.averaging");
  if (avg == "micro") {
    c.averaging = eval::Averaging::micro;
  } else if (avg == "macro") {
    c.averaging = eval::Averaging::macro;
  } else {
    throw ConfigError("eval.averaging", "expected micro or macro");
  }
  c.story_level_accuracy = r.boolean("eval.story_level_accuracy");
  c.fid_eps = r.in_range("eval.fid_eps", 0.0, 1.0);
  c.panel_stories = r.number<int>("eval.panel_stories");
  if (c.panel_stories < 0) throw ConfigError("eval.panel_stories", "must be non-negative");

  c.workdir = r.string("paths.workdir");
  if (c.workdir.empty()) throw ConfigError("paths.workdir", "must not be empty");
  c.manifest = r.string("paths.manifest");
  c.checkpoints = r.string("paths.checkpoints");
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  // Walk the defaults so the unknown-key error names the full dotted key.
  const json defaults = RunConfig{}.to_json();
  const json* legal = &defaults;
  json* node = &config;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!legal->is_object() || !legal->contains(parts[i])) throw ConfigError(key, "unknown key");
    legal = &(*legal)[parts[i]];
    if (i + 1 == parts.size()) {
      if (legal->is_object()) throw ConfigError(key, "cannot replace a whole section");
      (*node)[parts[i]] = value;
    } else {
      if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
      node = &(*node)[parts[i]];
    }
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config", "cannot read " + path.string());
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("--config", "malformed JSON in " + path.string());
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = from_json(j);
  if (const char* env = std::getenv("VPCSV_WORKDIR"); env != nullptr && *env != '\0') c.workdir = env;
  return c;
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("paths");
  return sha256_hex(j.dump());
}

std::filesystem::path RunConfig::manifest_path() const {
  return manifest.empty() ? workdir / "data" / "manifest.json" : manifest;
}

std::filesystem::path RunConfig::checkpoint_dir() const {
  return checkpoints.empty() ? workdir / "checkpoints" : checkpoints;
}

}  // namespace vpcsv::cli
