#include "vpcsv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "vpcsv/vqvae.hpp"

namespace vpcsv::eval {

using json = nlohmann::json;

namespace {

void require_same_length(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold, const char* what) {
  if (pred.size() != gold.size())
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(pred.size()) + " predicted frames vs " +
                                std::to_string(gold.size()) + " gold frames");
}

SetCounts frame_counts(const CharSet& pred, const CharSet& gold) {
  SetCounts c;
  for (int x : pred) (gold.count(x) ? c.tp : c.fp)++;
  for (int x : gold)
    if (!pred.count(x)) ++c.fn;
  return c;
}

CharSet to_set(const std::vector<bool>& mentions) {
  CharSet s;
  for (std::size_t c = 0; c < mentions.size(); ++c)
    if (mentions[c]) s.insert(static_cast<int>(c));
  return s;
}

}  // namespace

SetCounts count_sets(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold) {
  require_same_length(pred, gold, "count_sets");
  SetCounts total;
  for (std::size_t i = 0; i < pred.size(); ++i) total += frame_counts(pred[i], gold[i]);
  return total;
}

double f1_from_counts(const SetCounts& c) {
  const long denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double character_f1(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold, Averaging averaging) {
  require_same_length(pred, gold, "character_f1");
  if (averaging == Averaging::micro) return f1_from_counts(count_sets(pred, gold));
  std::map<int, SetCounts> per_class;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int x : pred[i]) (gold[i].count(x) ? per_class[x].tp : per_class[x].fp)++;
    for (int x : gold[i])
      if (!pred[i].count(x)) ++per_class[x].fn;
  }
  if (per_class.empty()) return 1.0;
  double sum = 0.0;
  for (const auto& [c, counts] : per_class) sum += f1_from_counts(counts);
  return sum / static_cast<double>(per_class.size());
}

double frame_accuracy(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold) {
  require_same_length(pred, gold, "frame_accuracy");
  if (pred.empty()) throw std::invalid_argument("frame_accuracy: no frames");
  std::size_t exact = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) exact += pred[i] == gold[i] ? 1 : 0;
  return static_cast<double>(exact) / static_cast<double>(pred.size());
}

double story_accuracy(const std::vector<CharSet>& pred, const std::vector<CharSet>& gold, int frames_per_story) {
  require_same_length(pred, gold, "story_accuracy");
  const auto n = static_cast<std::size_t>(frames_per_story);
  if (n == 0 || pred.empty() || pred.size() % n != 0)
    throw std::invalid_argument("story_accuracy: frame count is not a multiple of the story length");
  std::size_t good = 0;
  for (std::size_t s = 0; s < pred.size(); s += n)
    good += std::equal(pred.begin() + static_cast<std::ptrdiff_t>(s), pred.begin() + static_cast<std::ptrdiff_t>(s + n),
                       gold.begin() + static_cast<std::ptrdiff_t>(s))
                ? 1
                : 0;
  return static_cast<double>(good) / static_cast<double>(pred.size() / n);
}

Gaussian fit_gaussian(const Eigen::MatrixXd& features) {
  if (features.rows() <= features.cols())
    throw std::invalid_argument("fit_gaussian: need more samples (" + std::to_string(features.rows()) +
                                ") than feature dimensions (" + std::to_string(features.cols()) + ")");
  Gaussian g;
  g.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  return g;
}

namespace {

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw std::runtime_error("frechet_distance: eigendecomposition did not converge");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Gaussian& a, const Gaussian& b, double eps) {
  if (a.mean.size() != b.mean.size()) throw std::invalid_argument("frechet_distance: feature dimensions differ");
  const Index d = a.mean.size();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd s1 = a.cov + eps * I, s2 = b.cov + eps * I;
  const Eigen::MatrixXd r1 = sqrt_psd(s1);
  const Eigen::MatrixXd inner = r1 * s2 * r1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw std::runtime_error("frechet_distance: eigendecomposition did not converge");
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

double frechet_distance(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b, double eps) {
  return frechet_distance(fit_gaussian(features_a), fit_gaussian(features_b), eps);
}

double story_coverage(const std::vector<int>& z, const std::set<int>& T) {
  if (T.empty()) throw std::invalid_argument("story_coverage: empty token set");
  const std::set<int> present(z.begin(), z.end());
  std::size_t hit = 0;
  for (int t : T) hit += present.count(t);
  return static_cast<double>(hit) / static_cast<double>(T.size());
}

double coverage_ratio(const std::vector<std::vector<int>>& generated_z, const std::vector<std::set<int>>& T_per_story) {
  if (generated_z.size() != T_per_story.size()) throw std::invalid_argument("coverage_ratio: story counts differ");
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < generated_z.size(); ++i) {
    if (T_per_story[i].empty()) continue;
    sum += story_coverage(generated_z[i], T_per_story[i]);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("coverage_ratio: every story has an empty token set");
  return sum / static_cast<double>(used);
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size() && i < 20; ++i) out += (i ? ", " : "") + ids[i];
  if (ids.size() > 20) out += ", ... (" + std::to_string(ids.size()) + " total)";
  return out;
}

}  // namespace

MissingOutputsError::MissingOutputsError(std::vector<std::string> ids)
    : std::runtime_error("missing outputs for stories: " + join_ids(ids)), ids_(std::move(ids)) {}

json EvalReport::to_json() const {
  json rows = json::array();
  for (const auto& r : stories)
    rows.push_back({{"id", r.id},
                    {"tp", r.counts.tp},
                    {"fp", r.counts.fp},
                    {"fn", r.counts.fn},
                    {"f1", r.f1()},
                    {"frames", r.frames},
                    {"exact_frames", r.exact_frames},
                    {"coverage", r.coverage >= 0.0 ? json(r.coverage) : json(nullptr)}});
  return {{"system", system},
          {"character_f1", character_f1},
          {"micro_f1", micro_f1},
          {"macro_f1", macro_f1},
          {"f1_averaging", averaging},
          {"frame_accuracy", frame_accuracy},
          {"story_accuracy", story_accuracy},
          {"fid", fid},
          {"coverage_ratio", coverage_ratio},
          {"runs", runs},
          {"config", config},
          {"stories", rows}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.system = j.at("system").get<std::string>();
  r.character_f1 = j.at("character_f1").get<double>();
  r.micro_f1 = j.at("micro_f1").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.averaging = j.at("f1_averaging").get<std::string>();
  r.frame_accuracy = j.at("frame_accuracy").get<double>();
  r.story_accuracy = j.at("story_accuracy").get<double>();
  r.fid = j.at("fid").get<double>();
  r.coverage_ratio = j.at("coverage_ratio").get<double>();
  r.runs = j.at("runs").get<int>();
  r.config = j.at("config");
  for (const auto& row : j.at("stories")) {
    StoryRow s;
    s.id = row.at("id").get<std::string>();
    s.counts = {row.at("tp").get<long>(), row.at("fp").get<long>(), row.at("fn").get<long>()};
    s.frames = row.at("frames").get<int>();
    s.exact_frames = row.at("exact_frames").get<int>();
    s.coverage = row.at("coverage").is_null() ? -1.0 : row.at("coverage").get<double>();
    r.stories.push_back(s);
  }
  return r;
}

std::string EvalReport::csv_header() {
  return "system,runs,character_f1,micro_f1,macro_f1,frame_accuracy,story_accuracy,fid,coverage_ratio";
}

std::string EvalReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(17) << system << ',' << runs << ',' << character_f1 << ',' << micro_f1 << ',' << macro_f1
     << ',' << frame_accuracy << ',' << story_accuracy << ',' << fid << ',' << coverage_ratio;
  return os.str();
}

double EvalReport::breakdown_mismatch() const {
  if (stories.empty()) return 0.0;
  SetCounts pooled;
  long frames = 0, exact = 0, whole = 0, covered = 0;
  double coverage_sum = 0.0;
  for (const auto& r : stories) {
    pooled += r.counts;
    frames += r.frames;
    exact += r.exact_frames;
    whole += r.exact_frames == r.frames ? 1 : 0;
    if (r.coverage >= 0.0) {
      coverage_sum += r.coverage;
      ++covered;
    }
  }
  double worst = std::abs(f1_from_counts(pooled) - micro_f1);
  worst = std::max(worst, std::abs(static_cast<double>(exact) / static_cast<double>(frames) - frame_accuracy));
  worst = std::max(worst, std::abs(static_cast<double>(whole) / static_cast<double>(stories.size()) - story_accuracy));
  if (covered > 0) worst = std::max(worst, std::abs(coverage_sum / static_cast<double>(covered) - coverage_ratio));
  return worst;
}

Eigen::MatrixXd classifier_features(const cm::Classifier<float>& classifier, const std::vector<Image8>& frames) {
  NoGradGuard guard;
  const Index ch = classifier.config().channels3;
  Eigen::MatrixXd out(static_cast<Index>(frames.size()), ch);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < frames.size(); start += kChunk) {
    const std::size_t end = std::min(frames.size(), start + kChunk);
    const std::vector<Image8> chunk(frames.begin() + static_cast<std::ptrdiff_t>(start),
                                    frames.begin() + static_cast<std::ptrdiff_t>(end));
    const auto f = classifier.features(vq::frames_to_tensor(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i)
      for (Index c = 0; c < ch; ++c)
        out(static_cast<Index>(start + i), c) = static_cast<double>(f.data()[static_cast<Index>(i) * ch + c]);
  }
  return out;
}

EvalReport evaluate(const cm::Classifier<float>& classifier, const std::vector<GoldStory>& gold,
                    const std::vector<SystemStory>& outputs, const EvalOptions& options) {
  if (gold.empty()) throw std::invalid_argument("evaluate: no gold stories");
  std::map<std::string, const SystemStory*> by_id;
  for (const auto& o : outputs) by_id[o.id] = &o;
  std::vector<std::string> missing;
  for (const auto& g : gold)
    if (!by_id.count(g.id)) missing.push_back(g.id);
  if (!missing.empty()) throw MissingOutputsError(missing);

  std::vector<CharSet> pred, truth;
  std::vector<Image8> real_frames, gen_frames;
  std::vector<std::vector<int>> zs;
  std::vector<std::set<int>> Ts;
  EvalReport report;
  int frames_per_story = -1;
  for (const auto& g : gold) {
    const auto& out = *by_id.at(g.id);
    if (out.frames.size() != g.frames.size())
      throw std::invalid_argument("evaluate: story " + g.id + " has " + std::to_string(out.frames.size()) +
                                  " generated frames, expected " + std::to_string(g.frames.size()));
    if (frames_per_story < 0) frames_per_story = static_cast<int>(g.frames.size());
    if (static_cast<int>(g.frames.size()) != frames_per_story)
      throw std::invalid_argument("evaluate: stories differ in length");
    const auto predicted = cm::predict_characters(classifier, out.frames, options.threshold);
    StoryRow row;
    row.id = g.id;
    row.frames = static_cast<int>(g.frames.size());
    for (std::size_t f = 0; f < g.frames.size(); ++f) {
      const CharSet want = to_set(g.mentions[f]);
      row.counts += frame_counts(predicted[f], want);
      row.exact_frames += predicted[f] == want ? 1 : 0;
      pred.push_back(predicted[f]);
      truth.push_back(want);
    }
    if (!g.constraint_codes.empty()) row.coverage = story_coverage(out.z, g.constraint_codes);
    report.stories.push_back(row);
    real_frames.insert(real_frames.end(), g.frames.begin(), g.frames.end());
    gen_frames.insert(gen_frames.end(), out.frames.begin(), out.frames.end());
    zs.push_back(out.z);
    Ts.push_back(g.constraint_codes);
  }
  report.micro_f1 = character_f1(pred, truth, Averaging::micro);
  report.macro_f1 = character_f1(pred, truth, Averaging::macro);
  report.averaging = options.averaging == Averaging::micro ? "micro" : "macro";
  report.character_f1 = options.averaging == Averaging::micro ? report.micro_f1 : report.macro_f1;
  report.frame_accuracy = frame_accuracy(pred, truth);
  report.story_accuracy = story_accuracy(pred, truth, frames_per_story);
  report.fid = frechet_distance(classifier_features(classifier, real_frames), classifier_features(classifier, gen_frames),
                                options.fid_eps);
  const bool any_T = std::any_of(Ts.begin(), Ts.end(), [](const auto& T) { return !T.empty(); });
  report.coverage_ratio = any_T ? coverage_ratio(zs, Ts) : 0.0;
  report.config["fid_eps"] = options.fid_eps;
  report.config["threshold"] = options.threshold;
  return report;
}

EvalReport mean_report(const std::vector<EvalReport>& runs) {
  if (runs.empty()) throw std::invalid_argument("mean_report: no runs");
  EvalReport m;
  m.system = runs.front().system;
  m.averaging = runs.front().averaging;
  m.runs = 0;
  m.config = runs.front().config;
  json seeds = json::array();
  for (const auto& r : runs) {
    if (r.system != m.system) throw std::invalid_argument("mean_report: mixing systems " + m.system + " and " + r.system);
    m.character_f1 += r.character_f1;
    m.micro_f1 += r.micro_f1;
    m.macro_f1 += r.macro_f1;
    m.frame_accuracy += r.frame_accuracy;
    m.story_accuracy += r.story_accuracy;
    m.fid += r.fid;
    m.coverage_ratio += r.coverage_ratio;
    m.runs += r.runs;
    if (r.config.contains("seed")) seeds.push_back(r.config["seed"]);
  }
  const double n = static_cast<double>(runs.size());
  for (double* v : {&m.character_f1, &m.micro_f1, &m.macro_f1, &m.frame_accuracy, &m.story_accuracy, &m.fid,
                    &m.coverage_ratio})
    *v /= n;
  m.config["seeds"] = seeds;
  m.config.erase("seed");
  return m;
}

}  // namespace vpcsv::eval
