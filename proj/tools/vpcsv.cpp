// vpcsv <command> --config <path> [--set key=value]...
//
// Exit status: 0 success, 1 invalid config or arguments, 2 missing
// prerequisite, 3 any other failure. Progress goes to stdout as JSON lines,
// the failure line to stderr.

#include <iostream>

#include <CLI11.hpp>

#include "vpcsv/pipeline.hpp"

namespace {

using namespace vpcsv;
using nlohmann::json;

int fail(int code, const std::string& kind, json fields) {
  fields["event"] = "error";
  fields["kind"] = kind;
  std::cerr << fields.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Story visualization experiments: data, tokenizer, character plans, story LM, metrics"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string variant_name;
  std::string split = "test";
  int run = -1;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration (defaults when omitted)");
    cmd->add_option("--set", overrides, "Override one key, e.g. --set storylm.epochs=8")->take_all();
  };
  auto with_variant = [&](CLI::App* cmd) {
    cmd->add_option("--variant", variant_name, "baseline | vp | ta | vp-csv")->required();
  };

  auto* datagen = app.add_subcommand("datagen", "Render the synthetic story corpus and its manifest");
  auto* train_vqvae = app.add_subcommand("train-vqvae", "Train the visual tokenizer");
  auto* train_charmap = app.add_subcommand("train-charmap", "Train the character classifier");
  auto* extract_plans = app.add_subcommand("extract-plans", "Tokenize frames, build plans and token statistics");
  auto* train_lm = app.add_subcommand("train-lm", "Train the story LM for one variant");
  auto* generate = app.add_subcommand("generate", "Decode token sequences and frames for one variant");
  auto* evaluate = app.add_subcommand("evaluate", "Score a variant's test outputs");
  auto* report = app.add_subcommand("report", "Combined table and comparison panels");
  auto* all = app.add_subcommand("all", "Every stage for every variant, then the report");
  for (auto* cmd : {datagen, train_vqvae, train_charmap, extract_plans, train_lm, generate, evaluate, report, all})
    common(cmd);
  for (auto* cmd : {train_lm, generate, evaluate}) with_variant(cmd);
  train_lm->add_option("--run", run, "Single run index (default: all runs)");
  generate->add_option("--run", run, "Single run index (default: all runs)");
  generate->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

  CLI11_PARSE(app, argc, argv);

  const cli::Logger log(&std::cout);
  try {
    const auto config = cli::RunConfig::load(config_path, overrides);
    if (run >= config.runs) throw cli::ConfigError("--run", "must be below runs=" + std::to_string(config.runs));
    lm::Variant variant = lm::Variant::vp_csv;
    if (!variant_name.empty()) {
      try {
        variant = lm::parse_variant(variant_name);
      } catch (const std::invalid_argument& e) {
        throw cli::ConfigError("--variant", e.what());
      }
    }
    if (*datagen) cli::datagen(config, log);
    if (*train_vqvae) cli::train_vqvae(config, log);
    if (*train_charmap) cli::train_charmap(config, log);
    if (*extract_plans) cli::extract_plans(config, log);
    if (*train_lm) cli::train_lm(config, variant, run, log);
    if (*generate) cli::generate(config, variant, split, run, log);
    if (*evaluate) cli::evaluate(config, variant, log);
    if (*report) cli::report(config, log);
    if (*all) cli::run_all(config, log);
  } catch (const cli::ConfigError& e) {
    return fail(1, "config", {{"key", e.key()}, {"message", e.what()}});
  } catch (const cli::MissingPrerequisite& e) {
    return fail(2, "missing_prerequisite", {{"path", e.path().string()}, {"message", e.what()}});
  } catch (const eval::MissingOutputsError& e) {
    return fail(2, "missing_outputs", {{"ids", e.ids()}, {"message", e.what()}});
  } catch (const std::exception& e) {
    return fail(3, "failure", {{"message", e.what()}});
  }
  return 0;
}
