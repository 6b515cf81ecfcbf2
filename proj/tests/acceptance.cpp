// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero if any
// criterion fails. The training criteria (6-9) dominate the runtime; everything else takes seconds.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "gradcheck.hpp"
#include "metric_oracles.hpp"
#include "mdg/checkpoint.hpp"
#include "mdg/cli.hpp"
#include "support.hpp"

using namespace mdg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Desk-scale training recipe shared by criteria 6, 8 and 9.
constexpr int kTrainSamples = 20000;
constexpr int kEvalSamples = 500;
constexpr int kEpochs = 4;
constexpr int kBatchSize = 4;
constexpr double kLearningRate = 1e-3;
constexpr std::uint64_t kSeed = 1;
constexpr double kCpuBudgetSeconds = 30 * 60;

struct Result {
  bool pass = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

fs::path work_dir() {
  static const fs::path dir = fs::absolute("acceptance-work");
  return dir;
}

// ---------------------------------------------------------------------------

Result grammar_round_trip() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  int bad_text = 0, bad_tokens = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto a = testing::random_action(rng);
    if (parse_action(serialize_action(a)) != a) ++bad_text;
    const auto decoded = decode_response(encode_response(a, tmpl, vocab), tmpl, vocab);
    const auto* back = std::get_if<ActionString>(&decoded);
    if (!back || *back != a) ++bad_tokens;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {bad_text == 0 && bad_tokens == 0 && secs < 5.0,
          "text mismatches " + std::to_string(bad_text) + ", token mismatches " + std::to_string(bad_tokens) + ", " +
              fmt(secs, 3) + " s (limit 5 s)"};
}

Result masking_statistics() {
  constexpr int kPositions = 100000;
  constexpr double kEps = 1e-3;
  const std::vector<TokenId> r0(kPositions, 7);
  std::mt19937_64 rng(3);
  double worst_sigma = 0;
  bool ok = true;
  for (int k = 1; k <= 9; ++k) {
    const double t = k / 10.0;
    const auto cs = corrupt_linear(r0, t, kEps, rng);
    const double p = (1 - kEps) * t + kEps;
    const double sigma = std::sqrt(p * (1 - p) / kPositions);
    const double z = std::abs(static_cast<double>(cs.masked_count()) / kPositions - p) / sigma;
    worst_sigma = std::max(worst_sigma, z);
    ok = ok && z <= 3.0 && cs.weight == 1.0 / t;
  }

  const ResponseTemplate tmpl;
  const Vocabulary vocab;
  std::vector<int> extent = tmpl.extent_slots();
  std::sort(extent.begin(), extent.end());
  bool exact = extent.size() == 8;
  for (int i = 0; i < 200; ++i) {
    const auto r = encode_response(testing::random_action(rng), tmpl, vocab);
    const auto cs = corrupt_deterministic(r, tmpl.extent_slots());
    std::vector<int> masked;
    for (int s = 0; s < tmpl.length(); ++s)
      if (cs.mask[s]) masked.push_back(s);
    exact = exact && masked == extent && cs.weight == 1.0;
  }
  return {ok && exact, "worst deviation " + fmt(worst_sigma, 2) + " sigma (limit 3); deterministic phase masks " +
                           (exact ? "exactly the 8 extent slots" : "the wrong slots")};
}

Result gradient_exactness() {
  constexpr int kVocab = 40;
  Denoiser<double> model(testing::gradcheck_config(kVocab));
  testing::jitter(model.params(), 0.3, 77);
  std::mt19937_64 rng(8);
  const auto s1 = testing::random_encoded_sample(rng, kVocab);
  const auto s2 = testing::random_encoded_sample(rng, kVocab);
  const ResponseTemplate tmpl;

  const std::vector<TrainingExample> linear{{&s1, corrupt_linear(s1.response, 0.4, 1e-3, rng)},
                                            {&s2, corrupt_linear(s2.response, 0.7, 1e-3, rng)}};
  const std::vector<TrainingExample> det{{&s1, corrupt_deterministic(s1.response, tmpl.extent_slots())},
                                         {&s2, corrupt_deterministic(s2.response, tmpl.extent_slots())}};
  const auto a = testing::gradient_check(model, linear, 60, 1);
  const auto b = testing::gradient_check(model, det, 60, 2);
  const bool ok = a.checked >= 50 && b.checked >= 50 && a.max_rel_error <= 1e-3 && b.max_rel_error <= 1e-3;
  std::ostringstream d;
  d << std::scientific << std::setprecision(2) << "linear phase " << a.checked << " params, max rel " << a.max_rel_error
    << "; deterministic phase " << b.checked << " params, max rel " << b.max_rel_error << " (limit 1e-3)";
  return {ok, d.str()};
}

Result sampler_oracle() {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  DatasetConfig dc;
  dc.num_samples = 1000;
  dc.base_seed = 404;
  const auto samples = encode_samples(generate_dataset(dc), vocab, tmpl);
  const OraclePredictor oracle(samples, static_cast<int>(vocab.size()));
  std::ostringstream d;
  bool ok = true;
  for (const InferenceConfig cfg : {InferenceConfig{8, 64, 32, 0.95}, InferenceConfig{64, 64, 64, 0.95},
                                    InferenceConfig{128, 128, 128, 0.95}}) {
    int exact = 0, over_budget = 0, with_mask = 0;
    for (const auto& s : samples) {
      const auto out = reverse_decode(oracle, s.cond, cfg);
      auto gold = s.response;
      gold.resize(static_cast<std::size_t>(cfg.gen_length), Vocabulary::kPad);
      exact += out.tokens == gold;
      over_budget += out.trace.converged_steps > cfg.diffusion_steps;
      with_mask += std::count(out.tokens.begin(), out.tokens.end(), Vocabulary::kMask) > 0;
    }
    ok = ok && exact == 1000 && over_budget == 0 && with_mask == 0;
    d << "(" << cfg.diffusion_steps << "," << cfg.gen_length << "," << cfg.block_length << ") " << exact
      << "/1000 exact; ";
  }
  d << "converged_steps within budget and MASK-free: " << (ok ? "yes" : "no");
  return {ok, d.str()};
}

Result metric_oracles() {
  std::mt19937_64 rng(77);
  auto records = testing::random_records(rng, 994);
  // Hand-placed boundary cases: predicted centers on gold edges and corners, and one just outside.
  const ActionString gold{ActionType::lclick, {100, 200, 300, 400}, std::nullopt};
  for (const BoundingBox b : {BoundingBox{90, 290, 110, 310}, BoundingBox{290, 290, 310, 310},
                              BoundingBox{190, 190, 210, 210}, BoundingBox{190, 390, 210, 410},
                              BoundingBox{300, 400, 300, 400}, BoundingBox{301, 400, 301, 400}})
    records.push_back({ActionString{ActionType::lclick, b, std::nullopt}, gold, 0, 1});
  int failures = 0, boundary = 0;
  for (const auto& r : records) {
    if (!r.pred) {
      ++failures;
      continue;
    }
    const int tx = r.pred->box.x1 + r.pred->box.x2, ty = r.pred->box.y1 + r.pred->box.y2;
    boundary += tx == 2 * r.gold.box.x1 || tx == 2 * r.gold.box.x2 || ty == 2 * r.gold.box.y1 || ty == 2 * r.gold.box.y2;
  }
  const double ssr = compute_ssr(records), ssr_ref = testing::brute_ssr(records);
  const double f1 = compute_macro_f1(records).macro_f1, f1_ref = testing::brute_macro_f1(records);
  const bool ok = ssr == ssr_ref && std::abs(f1 - f1_ref) <= 1e-12 && failures > 0 && boundary > 0;
  return {ok, "SSR " + fmt(ssr, 6) + " vs " + fmt(ssr_ref, 6) + ", macro F1 diff " + fmt(std::abs(f1 - f1_ref), 15) +
                  " over 1000 records (" + std::to_string(failures) + " failures, " + std::to_string(boundary) +
                  " boundary centers)"};
}

// ---------------------------------------------------------------------------
// Desk-scale training

struct Corpus {
  std::vector<EncodedSample> train, eval;
};

Corpus make_corpus(const RunConfig& rc) {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  return {encode_samples(generate_dataset(rc.split_config(false)), vocab, tmpl),
          encode_samples(generate_dataset(rc.split_config(true)), vocab, tmpl)};
}

RunConfig base_config() {
  RunConfig rc;
  rc.seed = kSeed;
  rc.dataset.num_samples = kTrainSamples;
  rc.eval_samples = kEvalSamples;
  rc.schedule = MaskSchedule::linear();
  rc.training.epochs = kEpochs;
  rc.training.batch_size = kBatchSize;
  rc.training.adam.learning_rate = kLearningRate;
  return rc;
}

struct Trained {
  std::unique_ptr<Denoiser<float>> model;
  double cpu_seconds = 0;
  std::vector<EpochLog> log;
};

Trained train_model(const RunConfig& rc, const std::vector<EncodedSample>& train_set, const std::string& label) {
  const Vocabulary vocab;
  ModelConfig mc = rc.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.init_seed = rc.init_seed();
  Trained t;
  t.model = std::make_unique<Denoiser<float>>(mc);
  auto opt = OptimizerState<float>::fresh(mc, rc.training.adam);
  std::mt19937_64 rng(rc.train_seed());
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    std::cout << "  [" << label << "] epoch " << e.epoch << " loss " << fmt(e.mean_loss) << " ("
              << fmt(e.wall_seconds, 1) << " s)" << std::endl;
  };
  const double start = cpu_seconds();
  t.log = train(*t.model, opt, train_set, rc.schedule, rc.training, rng, hooks);
  t.cpu_seconds = cpu_seconds() - start;
  save_checkpoint({mc, t.model->params(), opt, {{"schedule", to_string(rc.schedule.kind)}, {"label", label}}},
                  work_dir() / (label + ".ckpt"));
  return t;
}

struct Shared {
  Corpus corpus;
  std::optional<Trained> linear;
  std::optional<MetricsReport> linear_metrics;
};

Result desk_scale_learning(Shared& sh) {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  const auto rc = base_config();
  sh.linear = train_model(rc, sh.corpus.train, "linear");
  DenoiserPredictor pred(*sh.linear->model);
  const auto m = summarize(run_linear(pred, sh.corpus.eval, InferenceConfig{64, 64, 64, 0.95}, tmpl, vocab));
  sh.linear_metrics = m;
  const bool ok = sh.linear->cpu_seconds <= kCpuBudgetSeconds && m.ssr >= 0.85 && m.f1.macro_f1 >= 0.99;
  return {ok, "SSR " + fmt(m.ssr) + " (floor 0.85), macro F1 " + fmt(m.f1.macro_f1) + " (floor 0.99), training " +
                  fmt(sh.linear->cpu_seconds / 60, 1) + " CPU-min (limit 30), anchor_hit " + fmt(m.hits.anchor_hit) +
                  ", extent_hit " + fmt(m.hits.extent_hit) + ", conv steps " + fmt(m.conv_steps_mean, 2)};
}

std::vector<std::string> csv_header(const std::string& csv) {
  std::vector<std::string> cols;
  std::stringstream line(csv.substr(0, csv.find('\n')));
  std::string c;
  while (std::getline(line, c, ',')) cols.push_back(c);
  return cols;
}

Result ablation_trend(Shared& sh) {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  DenoiserPredictor pred(*sh.linear->model);
  std::vector<InferenceConfig> grid;
  for (int steps : {8, 16, 32, 64}) grid.push_back({steps, 64, 64, 0.95});
  const auto rows = sweep(pred, sh.corpus.eval, grid, tmpl, vocab);
  bool increasing = true;
  std::ostringstream d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) increasing = increasing && rows[i].metrics.latency_mean_s > rows[i - 1].metrics.latency_mean_s;
    d << rows[i].config.diffusion_steps << " steps: SSR " << fmt(rows[i].metrics.ssr, 3) << ", conv "
      << fmt(rows[i].metrics.conv_steps_mean, 2) << ", latency " << fmt(rows[i].metrics.latency_mean_s * 1e3, 2)
      << " ms; ";
  }
  const std::vector<std::string> expected(kSweepColumns.begin(), kSweepColumns.end());
  const bool schema = csv_header(sweep_csv(rows)) == expected;
  const bool accuracy = rows.back().metrics.ssr >= rows.front().metrics.ssr;
  d << "SSR@64 >= SSR@8: " << (accuracy ? "yes" : "no") << ", latency strictly increasing: "
    << (increasing ? "yes" : "no") << ", column schema: " << (schema ? "exact" : "mismatch");
  std::ofstream(work_dir() / "sweep.csv") << sweep_csv(rows);
  return {accuracy && increasing && schema, d.str()};
}

Result hybrid_comparison(Shared& sh) {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  auto rc = base_config();
  rc.schedule = MaskSchedule::hybrid(tmpl.extent_slots(), 0.5);
  const auto hybrid = train_model(rc, sh.corpus.train, "hybrid");

  DenoiserPredictor lin(*sh.linear->model), hyb(*hybrid.model);
  const std::vector<EvalSplit> splits{{"synthgui-heldout", sh.corpus.eval}};
  const InferenceConfig single{64, 64, 64, 0.95};
  const auto rows =
      compare_pipelines(lin, hyb, splits, single, HybridInferenceConfig::matching(single), tmpl, vocab);
  const auto csv = comparison_csv(rows);
  std::ofstream(work_dir() / "compare.csv") << csv;
  const auto& l = rows[0].metrics;
  const auto& h = rows[1].metrics;
  const bool footer = csv.find("+1.6") != std::string::npos && csv.find("+5.3") != std::string::npos &&
                      csv.find("+1.3") != std::string::npos && csv.find("+6.1") != std::string::npos;
  const bool ok = h.ssr >= l.ssr - 0.02 && h.hits.extent_hit >= l.hits.extent_hit - 0.02 &&
                  h.latency_mean_s > l.latency_mean_s && footer;
  return {ok, "SSR hybrid " + fmt(h.ssr) + " vs linear " + fmt(l.ssr) + " (gate -0.02), extent_hit " +
                  fmt(h.hits.extent_hit) + " vs " + fmt(l.hits.extent_hit) + ", latency " +
                  fmt(h.latency_mean_s * 1e3, 2) + " ms vs " + fmt(l.latency_mean_s * 1e3, 2) +
                  " ms at 48+16 vs 64 steps, reference footer " + (footer ? "present" : "missing") +
                  ", hybrid training " + fmt(hybrid.cpu_seconds / 60, 1) + " CPU-min"};
}

Result annotation_cropping() {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  std::map<std::string, double> ssr;
  for (const bool refined : {true, false}) {
    auto rc = base_config();
    rc.dataset.annotation_mode = refined ? AnnotationMode::ocr_extended : AnnotationMode::icon_tight;
    rc.dataset.crop_mode = refined ? CropMode::random_target_preserving : CropMode::none;
    const std::string label = refined ? "ocr-cropped" : "icon-uncropped";
    // Held-out split drawn from the same generator settings as the training split.
    const auto corpus = make_corpus(rc);
    const auto t = train_model(rc, corpus.train, label);
    DenoiserPredictor pred(*t.model);
    ssr[label] = summarize(run_linear(pred, corpus.eval, InferenceConfig{64, 64, 64, 0.95}, tmpl, vocab)).ssr;
  }
  return {ssr["ocr-cropped"] >= ssr["icon-uncropped"],
          "SSR ocr_extended+cropped " + fmt(ssr["ocr-cropped"]) + " vs icon_tight+uncropped " +
              fmt(ssr["icon-uncropped"])};
}

// ---------------------------------------------------------------------------
// Reproducibility through the command-line front end

int cli(std::vector<std::string> args, std::string* err_out = nullptr) {
  args.insert(args.begin(), "mdg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_out) *err_out = err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json strip_latency(json j) {
  if (j.is_object()) {
    json out = json::object();
    for (auto& [k, v] : j.items())
      if (k.find("latency") == std::string::npos) out[k] = strip_latency(v);
    return out;
  }
  if (j.is_array()) {
    for (auto& v : j) v = strip_latency(v);
  }
  return j;
}

std::string strip_latency_columns(const std::string& csv) {
  std::stringstream in(csv);
  std::string line, out;
  std::vector<bool> keep;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') {
      out += line + "\n";
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    if (keep.empty())
      for (const auto& h : cells) keep.push_back(h.find("latency") == std::string::npos);
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (i < keep.size() && keep[i]) out += cells[i] + ",";
    out += "\n";
  }
  return out;
}

Result reproducibility() {
  const auto a = work_dir() / "repro-a", b = work_dir() / "repro-b";
  fs::remove_all(a);
  fs::remove_all(b);
  struct Command {
    std::string log_name;
    std::vector<std::string> args;
  };
  const std::vector<Command> commands = {
      {"gen-data", {"gen-data", "--samples", "300", "--eval-samples", "40"}},
      {"train-linear", {"train", "--schedule", "linear", "--epochs", "1", "--batch-size", "8", "--d-model", "32",
                        "--layers", "1"}},
      {"eval", {"eval", "--pipeline", "linear"}},
      {"sweep", {"sweep", "--grid", "steps=4,8;gen=64;block=64,32"}},
  };
  std::string err;
  for (const auto& c : commands) {
    auto args = std::vector<std::string>{"--out", a.string(), "--seed", "314"};
    args.insert(args.end(), c.args.begin(), c.args.end());
    if (cli(args, &err) != kExitOk) return {false, "first run of " + c.log_name + " failed: " + err};
  }
  // Second run: every command replayed from the config recorded for it, with no other overrides.
  for (const auto& c : commands) {
    const auto recorded = a / "logs" / (c.log_name + ".json");
    const auto cfg_path = work_dir() / ("replay-" + c.log_name + ".json");
    std::ifstream is(recorded);
    std::ofstream(cfg_path) << json::parse(is)["config"].dump(2);
    auto args = std::vector<std::string>{"--config", cfg_path.string(), "--out", b.string(), c.args[0]};
    if (c.args[0] == "eval") args.insert(args.end(), {"--pipeline", "linear"});
    if (cli(args, &err) != kExitOk) return {false, "replay of " + c.log_name + " failed: " + err};
  }

  std::vector<std::string> differing;
  for (const char* f : {"data/train.synthgui", "data/eval.synthgui", "dataset-manifest.json", "vocab.txt",
                        "checkpoints/linear.ckpt"})
    if (slurp(a / f) != slurp(b / f)) differing.push_back(f);
  for (const char* f : {"reports/eval-linear.json", "reports/sweep.json"}) {
    if (strip_latency(json::parse(slurp(a / f))) != strip_latency(json::parse(slurp(b / f)))) differing.push_back(f);
  }
  for (const char* f : {"reports/eval-linear.csv", "reports/sweep.csv"})
    if (strip_latency_columns(slurp(a / f)) != strip_latency_columns(slurp(b / f))) differing.push_back(f);
  std::string detail = "9 artifacts compared after gen-data, train, eval and sweep replays";
  for (const auto& f : differing) detail += "; differs: " + f;
  return {differing.empty(), detail};
}

}  // namespace

int main() {
  fs::create_directories(work_dir());
  std::vector<std::pair<int, Result>> results;
  auto run = [&](int id, const std::string& name, const std::function<Result()>& fn) {
    Result r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << std::setw(2) << id << " " << (r.pass ? "PASS" : "FAIL") << "  " << name << ": "
              << r.detail << std::endl;
    results.emplace_back(id, r);
  };

  run(1, "grammar round trip", grammar_round_trip);
  run(2, "masking statistics", masking_statistics);
  run(3, "gradient exactness", gradient_exactness);
  run(4, "sampler oracle", sampler_oracle);
  run(5, "metric oracle equivalence", metric_oracles);

  Shared sh;
  sh.corpus = make_corpus(base_config());
  run(6, "desk-scale learning", [&] { return desk_scale_learning(sh); });
  run(7, "ablation trend", [&] {
    if (!sh.linear) return Result{false, "no trained model"};
    return ablation_trend(sh);
  });
  run(8, "hybrid comparison", [&] {
    if (!sh.linear) return Result{false, "no trained model"};
    return hybrid_comparison(sh);
  });
  run(9, "annotation and cropping", annotation_cropping);
  run(10, "reproducibility", reproducibility);

  const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == static_cast<long>(results.size()) ? 0 : 1;
}
