#include "mdg/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mdg/checkpoint.hpp"

namespace mdg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Missing input file or inconsistent run directory contents (exit code 3).
class InputError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// --- JSON helpers ----------------------------------------------------------

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* known) { return k == known; }))
      throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json inference_json(const InferenceConfig& c) {
  return {{"diffusion_steps", c.diffusion_steps},
          {"gen_length", c.gen_length},
          {"block_length", c.block_length},
          {"threshold", c.threshold}};
}

InferenceConfig inference_from_json(const json& j, InferenceConfig c, const std::string& where) {
  reject_unknown(j, {"diffusion_steps", "gen_length", "block_length", "threshold"}, where);
  read(j, "diffusion_steps", c.diffusion_steps, where);
  read(j, "gen_length", c.gen_length, where);
  read(j, "block_length", c.block_length, where);
  read(j, "threshold", c.threshold, where);
  return c;
}

json dataset_json(const DatasetConfig& d) {
  return {{"num_samples", d.num_samples},
          {"screen_width", d.screen_width},
          {"screen_height", d.screen_height},
          {"grid_cols", d.grid_cols},
          {"grid_rows", d.grid_rows},
          {"min_widgets", d.min_widgets},
          {"max_widgets", d.max_widgets},
          {"lexicon_size", d.lexicon_size},
          {"action_mix", d.action_mix},
          {"unlabeled_icon_prob", d.unlabeled_icon_prob},
          {"max_text_words", d.max_text_words},
          {"annotation_mode", to_string(d.annotation_mode)},
          {"crop_mode", to_string(d.crop_mode)}};
}

template <typename Fn>
auto convert(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

// --- run directory -----------------------------------------------------------

/// Advisory lock: one command per run directory at a time.
class RunLock {
 public:
  RunLock(const fs::path& dir, bool force) : path_(dir / ".lock") {
    if (force) fs::remove(path_);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw ConfigError("run directory is in use (lock file " + path_.string() +
                        "); remove it if no other command is running");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

struct Context {
  RunConfig cfg;
  fs::path run_dir;
  bool force = false;
  Vocabulary vocab;
  ResponseTemplate tmpl;
  std::ostream* out = nullptr;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : run_dir / path;
  }
  fs::path checkpoint_path() const {
    return resolve(cfg.paths.checkpoint.empty() ? "checkpoints/" + std::string(to_string(cfg.schedule.kind)) + ".ckpt"
                                                : cfg.paths.checkpoint);
  }
  std::string hash() const { return config_hash(to_json(cfg)); }
};

std::vector<GroundingSample> load_split(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("dataset not found: " + path.string() + " (run gen-data first)");
  return read_dataset(path);
}

/// The training split must come from the dataset section of the current config.
void check_manifest(const Context& ctx) {
  const auto manifest_path = ctx.run_dir / "dataset-manifest.json";
  if (!fs::exists(manifest_path)) throw InputError("no dataset manifest in " + ctx.run_dir.string());
  const auto manifest = read_json_file(manifest_path);
  const auto expected = config_hash(dataset_json(ctx.cfg.dataset));
  if (manifest.value("dataset_config_hash", "") != expected)
    throw ConfigError("dataset section differs from the one recorded in dataset-manifest.json; rerun gen-data");
  const auto train = ctx.resolve(ctx.cfg.paths.train_data);
  if (fs::exists(train) && manifest.at("files").contains("train") &&
      manifest["files"]["train"].value("digest", "") != file_digest(train))
    throw InputError("dataset file changed since generation: " + train.string());
}

Checkpoint load_model(const Context& ctx, const fs::path& path) {
  if (!fs::exists(path)) throw InputError("checkpoint not found: " + path.string());
  return load_checkpoint(path, static_cast<int>(ctx.vocab.size()));
}

json provenance(const Context& ctx, const std::string& command) {
  return {{"command", command}, {"config_hash", ctx.hash()}, {"run", ctx.cfg.name}};
}

void log_command(const Context& ctx, const std::string& command, const json& extra = json::object()) {
  json j = provenance(ctx, command);
  j["config"] = to_json(ctx.cfg);
  j.update(extra);
  write_text(ctx.run_dir / "logs" / (command + ".json"), j.dump(2) + "\n");
}

// --- commands ---------------------------------------------------------------

void cmd_gen_data(Context& ctx) {
  const auto train_path = ctx.resolve(ctx.cfg.paths.train_data);
  const auto eval_path = ctx.resolve(ctx.cfg.paths.eval_data);
  for (const auto& p : {train_path, eval_path})
    if (fs::exists(p) && !ctx.force) throw ConfigError(p.string() + " exists; pass --force to overwrite");

  const auto train_cfg = ctx.cfg.split_config(false);
  const auto eval_cfg = ctx.cfg.split_config(true);
  const auto train = generate_dataset(train_cfg);
  const auto eval = generate_dataset(eval_cfg);
  fs::create_directories(train_path.parent_path());
  fs::create_directories(eval_path.parent_path());
  write_dataset(train, train_path);
  write_dataset(eval, eval_path);
  {
    std::ostringstream vs;
    ctx.vocab.write(vs);
    write_text(ctx.run_dir / "vocab.txt", vs.str());
  }

  const json manifest = {
      {"format", "synthgui-v1"},
      {"config_hash", ctx.hash()},
      {"dataset_config_hash", config_hash(dataset_json(ctx.cfg.dataset))},
      {"dataset", dataset_json(ctx.cfg.dataset)},
      {"files",
       {{"train", {{"path", ctx.cfg.paths.train_data}, {"samples", train.size()}, {"base_seed", train_cfg.base_seed},
                   {"digest", file_digest(train_path)}}},
        {"eval", {{"path", ctx.cfg.paths.eval_data}, {"samples", eval.size()}, {"base_seed", eval_cfg.base_seed},
                  {"digest", file_digest(eval_path)}}}}},
      {"vocab_size", ctx.vocab.size()}};
  write_text(ctx.run_dir / "dataset-manifest.json", manifest.dump(2) + "\n");
  log_command(ctx, "gen-data");
  *ctx.out << "wrote " << train.size() << " train and " << eval.size() << " eval samples to " << ctx.run_dir.string()
           << "\n";
}

void cmd_train(Context& ctx, bool resume) {
  check_manifest(ctx);
  const auto ckpt_path = ctx.checkpoint_path();
  if (!resume && fs::exists(ckpt_path) && !ctx.force)
    throw ConfigError(ckpt_path.string() + " exists; pass --resume to continue it or --force to retrain");

  const auto data = encode_samples(load_split(ctx.resolve(ctx.cfg.paths.train_data)), ctx.vocab, ctx.tmpl);
  std::vector<EncodedSample> heldout;
  if (ctx.cfg.heldout_samples > 0) {
    auto all = load_split(ctx.resolve(ctx.cfg.paths.eval_data));
    all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(ctx.cfg.heldout_samples)));
    heldout = encode_samples(all, ctx.vocab, ctx.tmpl);
  }

  ModelConfig mc = ctx.cfg.model;
  mc.vocab_size = static_cast<int>(ctx.vocab.size());
  mc.init_seed = ctx.cfg.init_seed();
  Checkpoint ck{mc, {}, {}, json::object()};
  if (resume) {
    ck = load_model(ctx, ckpt_path);
    if (ck.config != mc) throw ConfigError("model section differs from the checkpoint being resumed");
    if (ck.metadata.value("schedule", "") != to_string(ctx.cfg.schedule.kind))
      throw ConfigError("checkpoint was trained under schedule '" + ck.metadata.value("schedule", "") + "'");
    ck.optimizer.hp = ctx.cfg.training.adam;
  } else {
    ck.params = Parameters<float>::initialized(mc);
    ck.optimizer = OptimizerState<float>::fresh(mc, ctx.cfg.training.adam);
  }

  Denoiser<float> model(mc, std::move(ck.params));
  // Resumed runs draw a fresh shuffle stream keyed by the step they start from.
  std::mt19937_64 rng(sample_seed(ctx.cfg.train_seed(), static_cast<std::uint64_t>(ck.optimizer.step)));
  const int epochs_before = ck.metadata.value("epochs_completed", 0);

  auto metadata = [&](int epochs_done) {
    return json{{"schedule", to_string(ctx.cfg.schedule.kind)},
                {"phase_mix", ctx.cfg.schedule.phase_mix},
                {"epsilon", ctx.cfg.schedule.epsilon},
                {"target_slots", ctx.cfg.schedule.target_slots},
                {"config_hash", ctx.hash()},
                {"train_digest", file_digest(ctx.resolve(ctx.cfg.paths.train_data))},
                {"epochs_completed", epochs_before + epochs_done}};
  };

  const auto log_path = ctx.run_dir / "logs" / ("train-" + std::string(to_string(ctx.cfg.schedule.kind)) + ".jsonl");
  fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);

  auto& opt = ck.optimizer;
  TrainHooks hooks;
  if (!heldout.empty()) {
    hooks.heldout_ssr = [&](const Denoiser<float>& m) {
      DenoiserPredictor pred(m);
      return compute_ssr(run_linear(pred, heldout, ctx.cfg.inference, ctx.tmpl, ctx.vocab));
    };
  }
  hooks.on_epoch = [&](const EpochLog& e) {
    json j = e.to_json();
    j["epoch"] = epochs_before + e.epoch;
    j["step"] = opt.step;
    log << j.dump() << "\n" << std::flush;
    *ctx.out << j.dump() << "\n" << std::flush;
    save_checkpoint({mc, model.params(), opt, metadata(e.epoch)}, ckpt_path);
  };
  fs::create_directories(ckpt_path.parent_path());
  train(model, opt, data, ctx.cfg.schedule, ctx.cfg.training, rng, hooks);
  log_command(ctx, "train-" + std::string(to_string(ctx.cfg.schedule.kind)),
              {{"checkpoint", ckpt_path.string()}, {"step", opt.step}});
}

struct Predictors {
  std::optional<Checkpoint> ck;
  std::optional<Denoiser<float>> model;
  std::optional<DenoiserPredictor> denoiser;
  std::optional<OraclePredictor> oracle;

  const MaskPredictor& get() const {
    if (oracle) return *oracle;
    return *denoiser;
  }
};

void make_predictor(const Context& ctx, Predictors& p, bool oracle, const std::vector<EncodedSample>& samples,
                    const fs::path& ckpt) {
  if (oracle) {
    p.oracle.emplace(samples, static_cast<int>(ctx.vocab.size()));
    return;
  }
  p.ck = load_model(ctx, ckpt);
  p.model.emplace(p.ck->config, std::move(p.ck->params));
  p.denoiser.emplace(*p.model);
}

std::string source_label(bool oracle, const fs::path& ckpt) { return oracle ? "oracle" : ckpt.string(); }

void cmd_infer(Context& ctx, const std::string& pipeline, bool oracle, int limit) {
  auto raw = load_split(ctx.resolve(ctx.cfg.paths.eval_data));
  if (limit > 0 && static_cast<std::size_t>(limit) < raw.size()) raw.resize(static_cast<std::size_t>(limit));
  const auto samples = encode_samples(raw, ctx.vocab, ctx.tmpl);
  Predictors p;
  const auto ckpt = ctx.checkpoint_path();
  make_predictor(ctx, p, oracle, samples, ckpt);

  std::ostringstream lines;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto pred = pipeline == "hybrid" ? infer_hybrid(p.get(), samples[i], ctx.cfg.hybrid, ctx.tmpl, ctx.vocab)
                                           : infer_linear(p.get(), samples[i], ctx.cfg.inference, ctx.tmpl, ctx.vocab);
    json j = {{"index", i}, {"gold", serialize_action(samples[i].gold)}, {"converged_steps", pred.trace.converged_steps},
              {"latency_s", pred.trace.latency_s}};
    if (const auto a = pred.action()) {
      j["prediction"] = serialize_action(*a);
      j["success"] = step_success(a, samples[i].gold);
    } else {
      const auto f = std::get<DecodeFailure>(pred.result);
      j["prediction"] = nullptr;
      j["failure"] = {{"kind", to_string(f.kind)}, {"slot", f.slot}};
      j["success"] = false;
    }
    lines << j.dump() << "\n";
  }
  write_text(ctx.run_dir / "reports" / ("predictions-" + pipeline + ".jsonl"), lines.str());
  log_command(ctx, "infer", {{"pipeline", pipeline}, {"source", source_label(oracle, ckpt)}});
  *ctx.out << "wrote " << samples.size() << " predictions\n";
}

void cmd_eval(Context& ctx, const std::string& pipeline, bool oracle) {
  const auto samples = encode_samples(load_split(ctx.resolve(ctx.cfg.paths.eval_data)), ctx.vocab, ctx.tmpl);
  Predictors p;
  const auto ckpt = ctx.checkpoint_path();
  make_predictor(ctx, p, oracle, samples, ckpt);
  const auto records = pipeline == "hybrid" ? run_hybrid(p.get(), samples, ctx.cfg.hybrid, ctx.tmpl, ctx.vocab)
                                            : run_linear(p.get(), samples, ctx.cfg.inference, ctx.tmpl, ctx.vocab);
  const auto m = summarize(records);

  json report = provenance(ctx, "eval");
  report["pipeline"] = pipeline;
  report["source"] = oracle ? "oracle" : "checkpoint";
  report["inference"] = pipeline == "hybrid" ? json{{"stage1", inference_json(ctx.cfg.hybrid.stage1)},
                                                    {"stage2", inference_json(ctx.cfg.hybrid.stage2)}}
                                             : inference_json(ctx.cfg.inference);
  report["metrics"] = m.to_json();
  write_text(ctx.run_dir / "reports" / ("eval-" + pipeline + ".json"), report.dump(2) + "\n");

  std::ostringstream csv;
  csv << "pipeline,n,ssr,macro_f1,conv_steps_mean,decode_failures,anchor_hit,extent_hit,latency_mean_s\n";
  char row[256];
  std::snprintf(row, sizeof row, "%s,%zu,%.6f,%.6f,%.4f,%ld,%.6f,%.6f,%.6f\n", pipeline.c_str(), m.n, m.ssr,
                m.f1.macro_f1, m.conv_steps_mean, m.decode_failures, m.hits.anchor_hit, m.hits.extent_hit,
                m.latency_mean_s);
  csv << row;
  write_text(ctx.run_dir / "reports" / ("eval-" + pipeline + ".csv"), csv.str());
  log_command(ctx, "eval", {{"pipeline", pipeline}, {"source", source_label(oracle, ckpt)}});
  *ctx.out << csv.str();
}

void cmd_sweep(Context& ctx, bool oracle) {
  const auto samples = encode_samples(load_split(ctx.resolve(ctx.cfg.paths.eval_data)), ctx.vocab, ctx.tmpl);
  Predictors p;
  const auto ckpt = ctx.checkpoint_path();
  make_predictor(ctx, p, oracle, samples, ckpt);
  const auto rows = sweep(p.get(), samples, ctx.cfg.sweep_grid, ctx.tmpl, ctx.vocab);
  const auto csv = sweep_csv(rows);
  write_text(ctx.run_dir / "reports" / "sweep.csv", csv);
  json report = provenance(ctx, "sweep");
  report["source"] = oracle ? "oracle" : "checkpoint";
  report["rows"] = sweep_json(rows);
  write_text(ctx.run_dir / "reports" / "sweep.json", report.dump(2) + "\n");
  log_command(ctx, "sweep", {{"source", source_label(oracle, ckpt)}});
  *ctx.out << csv;
}

void cmd_compare(Context& ctx) {
  std::vector<std::pair<std::string, std::vector<EncodedSample>>> split_data;
  split_data.emplace_back("eval",
                          encode_samples(load_split(ctx.resolve(ctx.cfg.paths.eval_data)), ctx.vocab, ctx.tmpl));
  for (const auto& [name, path] : ctx.cfg.paths.extra_splits)
    split_data.emplace_back(name, encode_samples(load_split(ctx.resolve(path)), ctx.vocab, ctx.tmpl));
  std::vector<EvalSplit> splits;
  for (const auto& [name, data] : split_data) splits.push_back({name, data});

  Predictors lin, hyb;
  make_predictor(ctx, lin, false, {}, ctx.resolve(ctx.cfg.paths.linear_checkpoint));
  make_predictor(ctx, hyb, false, {}, ctx.resolve(ctx.cfg.paths.hybrid_checkpoint));
  if (lin.ck->metadata.value("schedule", "") != "linear")
    throw ConfigError("linear checkpoint was trained under schedule '" + lin.ck->metadata.value("schedule", "") + "'");
  if (hyb.ck->metadata.value("schedule", "") != "hybrid")
    throw ConfigError("hybrid checkpoint was trained under schedule '" + hyb.ck->metadata.value("schedule", "") + "'");

  const auto rows = compare_pipelines(lin.get(), hyb.get(), splits, ctx.cfg.inference, ctx.cfg.hybrid, ctx.tmpl, ctx.vocab);
  const auto csv = comparison_csv(rows);
  write_text(ctx.run_dir / "reports" / "compare.csv", csv);
  json report = provenance(ctx, "compare");
  report.update(comparison_json(rows));
  write_text(ctx.run_dir / "reports" / "compare.json", report.dump(2) + "\n");
  log_command(ctx, "compare");
  *ctx.out << csv;
}

}  // namespace

// --- RunConfig -------------------------------------------------------------------

std::uint64_t RunConfig::dataset_seed() const { return seed; }
std::uint64_t RunConfig::eval_seed() const { return sample_seed(seed, 0xe7a1); }
std::uint64_t RunConfig::init_seed() const { return sample_seed(seed, 0x1417); }
std::uint64_t RunConfig::train_seed() const { return sample_seed(seed, 0x7a15); }

DatasetConfig RunConfig::split_config(bool eval) const {
  DatasetConfig d = dataset;
  d.base_seed = eval ? eval_seed() : dataset_seed();
  if (eval) d.num_samples = eval_samples;
  return d;
}

void RunConfig::validate(const ResponseTemplate& tmpl) const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(section) + ": " + e.what());
    }
  };
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("name must be a plain directory name");
  wrap("dataset", [&] { dataset.validate(); });
  if (eval_samples < 1) throw ConfigError("eval_samples must be positive");
  wrap("model", [&] {
    ModelConfig m = model;
    m.vocab_size = 2;
    m.validate();
  });
  wrap("schedule", [&] { schedule.validate(tmpl.length()); });
  if (training.epochs < 1 || training.batch_size < 1) throw ConfigError("training: epochs and batch_size must be positive");
  if (!(training.adam.learning_rate > 0)) throw ConfigError("training: learning_rate must be positive");
  if (heldout_samples < 0) throw ConfigError("heldout_samples must be non-negative");
  wrap("inference", [&] { inference.validate(); });
  wrap("hybrid", [&] { hybrid.validate(tmpl); });
  if (sweep_grid.empty()) throw ConfigError("sweep_grid must not be empty");
  for (const auto& g : sweep_grid) wrap("sweep_grid", [&] { g.validate(); });
}

json to_json(const RunConfig& c) {
  json splits = json::array();
  for (const auto& [name, path] : c.paths.extra_splits) splits.push_back({{"name", name}, {"path", path}});
  json grid = json::array();
  for (const auto& g : c.sweep_grid) grid.push_back(inference_json(g));
  const auto& a = c.training.adam;
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"dataset", dataset_json(c.dataset)},
      {"eval_samples", c.eval_samples},
      {"model",
       {{"d_model", c.model.d_model},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"d_ff", c.model.d_ff},
        {"max_seq_len", c.model.max_seq_len}}},
      {"schedule",
       {{"kind", to_string(c.schedule.kind)},
        {"epsilon", c.schedule.epsilon},
        {"phase_mix", c.schedule.phase_mix},
        {"target_slots", c.schedule.target_slots}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"learning_rate", a.learning_rate},
        {"beta1", a.beta1},
        {"beta2", a.beta2},
        {"adam_epsilon", a.epsilon},
        {"clip_norm", a.clip_norm},
        {"weight_decay", a.weight_decay},
        {"warmup_steps", c.training.warmup_steps},
        {"cosine_decay", c.training.cosine_decay},
        {"min_lr_fraction", c.training.min_lr_fraction}}},
      {"heldout_samples", c.heldout_samples},
      {"inference", inference_json(c.inference)},
      {"hybrid", {{"stage1", inference_json(c.hybrid.stage1)}, {"stage2", inference_json(c.hybrid.stage2)}}},
      {"sweep_grid", grid},
      {"paths",
       {{"train_data", c.paths.train_data},
        {"eval_data", c.paths.eval_data},
        {"checkpoint", c.paths.checkpoint},
        {"linear_checkpoint", c.paths.linear_checkpoint},
        {"hybrid_checkpoint", c.paths.hybrid_checkpoint},
        {"extra_splits", splits}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  const ResponseTemplate tmpl;
  c.schedule.target_slots = tmpl.extent_slots();
  reject_unknown(j,
                 {"name", "seed", "dataset", "eval_samples", "model", "schedule", "training", "heldout_samples",
                  "inference", "hybrid", "sweep_grid", "paths"},
                 "config");
  read(j, "name", c.name, "config");
  read(j, "seed", c.seed, "config");
  read(j, "eval_samples", c.eval_samples, "config");
  read(j, "heldout_samples", c.heldout_samples, "config");

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    const std::string w = "dataset";
    reject_unknown(d,
                   {"num_samples", "screen_width", "screen_height", "grid_cols", "grid_rows", "min_widgets",
                    "max_widgets", "lexicon_size", "action_mix", "unlabeled_icon_prob", "max_text_words",
                    "annotation_mode", "crop_mode"},
                   w);
    auto& ds = c.dataset;
    read(d, "num_samples", ds.num_samples, w);
    read(d, "screen_width", ds.screen_width, w);
    read(d, "screen_height", ds.screen_height, w);
    read(d, "grid_cols", ds.grid_cols, w);
    read(d, "grid_rows", ds.grid_rows, w);
    read(d, "min_widgets", ds.min_widgets, w);
    read(d, "max_widgets", ds.max_widgets, w);
    read(d, "lexicon_size", ds.lexicon_size, w);
    read(d, "action_mix", ds.action_mix, w);
    read(d, "unlabeled_icon_prob", ds.unlabeled_icon_prob, w);
    read(d, "max_text_words", ds.max_text_words, w);
    std::string mode;
    if (d.contains("annotation_mode")) {
      read(d, "annotation_mode", mode, w);
      ds.annotation_mode = convert(w, [&] { return annotation_mode_from_string(mode); });
    }
    if (d.contains("crop_mode")) {
      read(d, "crop_mode", mode, w);
      ds.crop_mode = convert(w, [&] { return crop_mode_from_string(mode); });
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, {"d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"}, "model");
    read(m, "d_model", c.model.d_model, "model");
    read(m, "n_layers", c.model.n_layers, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "d_ff", c.model.d_ff, "model");
    read(m, "max_seq_len", c.model.max_seq_len, "model");
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    reject_unknown(s, {"kind", "epsilon", "phase_mix", "target_slots"}, "schedule");
    std::string kind;
    if (s.contains("kind")) {
      read(s, "kind", kind, "schedule");
      c.schedule.kind = convert("schedule", [&] { return schedule_kind_from_string(kind); });
    }
    read(s, "epsilon", c.schedule.epsilon, "schedule");
    read(s, "phase_mix", c.schedule.phase_mix, "schedule");
    read(s, "target_slots", c.schedule.target_slots, "schedule");
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    const std::string w = "training";
    reject_unknown(t,
                   {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "adam_epsilon", "clip_norm",
                    "weight_decay", "warmup_steps", "cosine_decay", "min_lr_fraction"},
                   w);
    read(t, "epochs", c.training.epochs, w);
    read(t, "batch_size", c.training.batch_size, w);
    read(t, "learning_rate", c.training.adam.learning_rate, w);
    read(t, "beta1", c.training.adam.beta1, w);
    read(t, "beta2", c.training.adam.beta2, w);
    read(t, "adam_epsilon", c.training.adam.epsilon, w);
    read(t, "clip_norm", c.training.adam.clip_norm, w);
    read(t, "weight_decay", c.training.adam.weight_decay, w);
    read(t, "warmup_steps", c.training.warmup_steps, w);
    read(t, "cosine_decay", c.training.cosine_decay, w);
    read(t, "min_lr_fraction", c.training.min_lr_fraction, w);
  }
  if (j.contains("inference")) c.inference = inference_from_json(j["inference"], c.inference, "inference");
  if (j.contains("hybrid")) {
    const auto& h = j["hybrid"];
    reject_unknown(h, {"stage1", "stage2"}, "hybrid");
    if (h.contains("stage1")) c.hybrid.stage1 = inference_from_json(h["stage1"], c.hybrid.stage1, "hybrid.stage1");
    if (h.contains("stage2")) c.hybrid.stage2 = inference_from_json(h["stage2"], c.hybrid.stage2, "hybrid.stage2");
  }
  if (j.contains("sweep_grid")) {
    if (!j["sweep_grid"].is_array()) throw ConfigError("sweep_grid: expected an array");
    c.sweep_grid.clear();
    for (const auto& g : j["sweep_grid"]) c.sweep_grid.push_back(inference_from_json(g, InferenceConfig{}, "sweep_grid"));
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    const std::string w = "paths";
    reject_unknown(p, {"train_data", "eval_data", "checkpoint", "linear_checkpoint", "hybrid_checkpoint", "extra_splits"},
                   w);
    read(p, "train_data", c.paths.train_data, w);
    read(p, "eval_data", c.paths.eval_data, w);
    read(p, "checkpoint", c.paths.checkpoint, w);
    read(p, "linear_checkpoint", c.paths.linear_checkpoint, w);
    read(p, "hybrid_checkpoint", c.paths.hybrid_checkpoint, w);
    if (p.contains("extra_splits")) {
      for (const auto& s : p["extra_splits"]) {
        reject_unknown(s, {"name", "path"}, "paths.extra_splits");
        std::string name, path;
        read(s, "name", name, w);
        read(s, "path", path, w);
        c.paths.extra_splits.emplace_back(name, path);
      }
    }
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return run_config_from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_hash(const json& j) { return hex16(fnv1a(j.dump())); }

std::string file_digest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return hex16(fnv1a(ss.str()));
}

std::vector<InferenceConfig> parse_grid(const std::string& spec, double threshold) {
  std::vector<int> steps{64}, gens{64}, blocks;
  std::stringstream parts(spec);
  std::string part;
  while (std::getline(parts, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("grid: expected key=values in '" + part + "'");
    const auto key = part.substr(0, eq);
    std::vector<int> values;
    std::stringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stoi(v, &used));
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw ConfigError("grid: '" + v + "' is not an integer");
      }
    }
    if (values.empty()) throw ConfigError("grid: no values for " + key);
    if (key == "steps") steps = values;
    else if (key == "gen") gens = values;
    else if (key == "block") blocks = values;
    else throw ConfigError("grid: unknown key '" + key + "' (steps, gen, block)");
  }
  std::vector<InferenceConfig> grid;
  for (int s : steps)
    for (int g : gens)
      for (int b : blocks.empty() ? std::vector<int>{g} : blocks) {
        InferenceConfig c{s, g, b, threshold};
        try {
          c.validate();
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("grid: ") + e.what());
        }
        grid.push_back(c);
      }
  return grid;
}

// --- entry point --------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-diffusion GUI grounding on synthetic screens"};
  app.require_subcommand(1);

  std::string config_path, out_dir, name;
  std::optional<std::uint64_t> seed;
  bool force = false;
  app.add_option("--config", config_path, "Run config (JSON)");
  app.add_option("--seed", seed, "Master seed");
  app.add_option("--out", out_dir, "Run directory (default runs/<name>)");
  app.add_option("--name", name, "Run name");
  app.add_flag("--force", force, "Overwrite existing outputs");

  std::optional<int> samples, eval_samples;
  std::string annotation, crop;
  auto* gen = app.add_subcommand("gen-data", "Generate train and held-out datasets");
  gen->add_option("--samples", samples, "Training samples");
  gen->add_option("--eval-samples", eval_samples, "Held-out samples");
  gen->add_option("--annotation", annotation, "icon_tight | ocr_extended");
  gen->add_option("--crop", crop, "none | random_target_preserving");

  std::string schedule, pipeline = "linear", checkpoint;
  std::optional<double> phase_mix, lr;
  std::optional<int> epochs, batch, d_model, layers, heldout;
  bool resume = false;
  auto* tr = app.add_subcommand("train", "Train the denoiser");
  tr->add_option("--schedule", schedule, "linear | deterministic | hybrid");
  tr->add_option("--phase-mix", phase_mix, "Hybrid: probability of the deterministic phase");
  tr->add_option("--epochs", epochs, "Passes over the training split");
  tr->add_option("--batch-size", batch, "Samples per optimizer step");
  tr->add_option("--lr", lr, "Peak Adam learning rate");
  tr->add_option("--d-model", d_model, "Model width (d_ff follows as 4x)");
  tr->add_option("--layers", layers, "Transformer layers");
  tr->add_option("--heldout", heldout, "Held-out samples scored per epoch");
  tr->add_flag("--resume", resume, "Continue from the existing checkpoint");
  tr->add_option("--checkpoint", checkpoint, "Checkpoint path (default checkpoints/<schedule>.ckpt)");

  std::optional<int> steps, gen_len, block_len;
  bool oracle = false;
  int limit = 0;
  auto add_decode_opts = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", checkpoint, "Checkpoint path");
    sub->add_option("--steps", steps, "Diffusion steps");
    sub->add_option("--gen", gen_len, "Generation length");
    sub->add_option("--block", block_len, "Block length");
    sub->add_option("--schedule", schedule, "Selects checkpoints/<schedule>.ckpt");
    sub->add_flag("--oracle", oracle, "Score a gold pass-through predictor instead of a checkpoint");
  };
  auto* inf = app.add_subcommand("infer", "Decode the held-out split");
  add_decode_opts(inf);
  inf->add_option("--pipeline", pipeline, "linear | hybrid")->check(CLI::IsMember({"linear", "hybrid"}));
  inf->add_option("--limit", limit, "Decode only the first N samples");
  auto* ev = app.add_subcommand("eval", "Score the held-out split");
  add_decode_opts(ev);
  ev->add_option("--pipeline", pipeline, "linear | hybrid")->check(CLI::IsMember({"linear", "hybrid"}));

  std::string grid;
  auto* sw = app.add_subcommand("sweep", "Inference-parameter sweep");
  sw->add_option("--checkpoint", checkpoint, "Checkpoint path");
  sw->add_option("--schedule", schedule, "Selects checkpoints/<schedule>.ckpt");
  sw->add_option("--grid", grid, "e.g. steps=8,16,32,64;gen=64;block=64");
  sw->add_flag("--oracle", oracle, "Score a gold pass-through predictor");

  std::vector<std::string> split_args;
  std::string linear_ckpt, hybrid_ckpt;
  auto* cmp = app.add_subcommand("compare", "Linear vs hybrid pipelines");
  cmp->add_option("--linear-checkpoint", linear_ckpt, "Default checkpoints/linear.ckpt");
  cmp->add_option("--hybrid-checkpoint", hybrid_ckpt, "Default checkpoints/hybrid.ckpt");
  cmp->add_option("--split", split_args, "Extra eval split as name=path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    cfg.schedule.target_slots = ResponseTemplate{}.extent_slots();
    fs::path run_dir;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (!name.empty()) cfg.name = name;
    run_dir = out_dir.empty() ? fs::path("runs") / cfg.name : fs::path(out_dir);
    // Commands inside an existing run pick up its recorded config unless one is given.
    if (config_path.empty() && fs::exists(run_dir / "config.json")) {
      cfg = load_run_config(run_dir / "config.json");
      if (!name.empty()) cfg.name = name;
    }

    if (seed) cfg.seed = *seed;
    if (samples) cfg.dataset.num_samples = *samples;
    if (eval_samples) cfg.eval_samples = *eval_samples;
    if (!annotation.empty()) cfg.dataset.annotation_mode = convert("--annotation", [&] { return annotation_mode_from_string(annotation); });
    if (!crop.empty()) cfg.dataset.crop_mode = convert("--crop", [&] { return crop_mode_from_string(crop); });
    if (!schedule.empty()) cfg.schedule.kind = convert("--schedule", [&] { return schedule_kind_from_string(schedule); });
    if (phase_mix) cfg.schedule.phase_mix = *phase_mix;
    if (epochs) cfg.training.epochs = *epochs;
    if (batch) cfg.training.batch_size = *batch;
    if (lr) cfg.training.adam.learning_rate = *lr;
    if (d_model) cfg.model.d_model = *d_model, cfg.model.d_ff = 4 * *d_model;
    if (layers) cfg.model.n_layers = *layers;
    if (heldout) cfg.heldout_samples = *heldout;
    if (!checkpoint.empty()) cfg.paths.checkpoint = fs::absolute(checkpoint).string();
    if (steps) cfg.inference.diffusion_steps = *steps;
    if (gen_len) cfg.inference.gen_length = *gen_len, cfg.inference.block_length = *gen_len;
    if (block_len) cfg.inference.block_length = *block_len;
    if (!grid.empty()) cfg.sweep_grid = parse_grid(grid, cfg.inference.threshold);
    if (!linear_ckpt.empty()) cfg.paths.linear_checkpoint = fs::absolute(linear_ckpt).string();
    if (!hybrid_ckpt.empty()) cfg.paths.hybrid_checkpoint = fs::absolute(hybrid_ckpt).string();
    for (const auto& s : split_args) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--split expects name=path, got '" + s + "'");
      cfg.paths.extra_splits.emplace_back(s.substr(0, eq), fs::absolute(s.substr(eq + 1)).string());
    }

    Context ctx;
    ctx.cfg = cfg;
    ctx.run_dir = run_dir;
    ctx.force = force;
    ctx.out = &out;
    cfg.validate(ctx.tmpl);

    fs::create_directories(run_dir);
    RunLock lock(run_dir, force);
    write_text(run_dir / "config.json", to_json(cfg).dump(2) + "\n");

    if (gen->parsed()) cmd_gen_data(ctx);
    else if (tr->parsed()) cmd_train(ctx, resume);
    else if (inf->parsed()) cmd_infer(ctx, pipeline, oracle, limit);
    else if (ev->parsed()) cmd_eval(ctx, pipeline, oracle);
    else if (sw->parsed()) cmd_sweep(ctx, oracle);
    else if (cmp->parsed()) cmd_compare(ctx);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitData;
  } catch (const EncodeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const GenerationError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mdg
