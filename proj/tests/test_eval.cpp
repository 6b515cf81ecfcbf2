#include <doctest.h>

#include <random>

#include "mdg/eval.hpp"
#include "mdg/pipeline.hpp"
#include "mdg/synthgui.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace mdg;
using mdg::testing::brute_macro_f1;
using mdg::testing::brute_ssr;
using mdg::testing::random_records;

namespace {

ActionString act(ActionType t, BoundingBox b) {
  ActionString a{t, b, std::nullopt};
  if (t == ActionType::type_in) a.text = std::vector<std::string>{"hello"};
  return a;
}

}  // namespace

TEST_CASE("box centers") {
  CHECK(box_center({40, 40, 60, 60}) == Center{100, 100});
  CHECK(box_center({10, 20, 10, 20}).x() == 10.0);
  CHECK(box_center({10, 20, 10, 20}).y() == 20.0);
  CHECK(box_center({0, 0, 1000, 1000}).x() == 500.0);
  CHECK(box_center({0, 0, 3, 3}).x() == 1.5);
}

TEST_CASE("step success") {
  CHECK(step_success(act(ActionType::lclick, {40, 40, 60, 60}), act(ActionType::lclick, {30, 30, 70, 70})));
  CHECK_FALSE(step_success(act(ActionType::hover, {40, 40, 60, 60}), act(ActionType::lclick, {40, 40, 60, 60})));
  // center x = 30 lies on the gold left edge
  CHECK(step_success(act(ActionType::lclick, {20, 40, 40, 60}), act(ActionType::lclick, {30, 30, 70, 70})));
  // center x = 29.5 falls just outside
  CHECK_FALSE(step_success(act(ActionType::lclick, {20, 40, 39, 60}), act(ActionType::lclick, {30, 30, 70, 70})));
  CHECK_FALSE(step_success(std::nullopt, act(ActionType::lclick, {30, 30, 70, 70})));
}

TEST_CASE("SSR") {
  std::vector<EvalRecord> all_right, all_failed;
  for (int i = 0; i < 5; ++i) {
    const auto g = act(kActionTypes[i % 3], {i, i, 10 + i, 10 + i});
    all_right.push_back({g, g, 0, 1});
    all_failed.push_back({std::nullopt, g, 0, 1});
  }
  CHECK(compute_ssr(all_right) == 1.0);
  CHECK(compute_ssr(all_failed) == 0.0);
  CHECK_THROWS_AS(compute_ssr({}), std::invalid_argument);

  std::mt19937_64 rng(1);
  const auto recs = random_records(rng, 1000);
  CHECK(compute_ssr(recs) == brute_ssr(recs));
}

TEST_CASE("macro F1") {
  std::vector<EvalRecord> perfect;
  for (int i = 0; i < 6; ++i) {
    const auto g = act(kActionTypes[i % 3], {0, 0, 5, 5});
    perfect.push_back({g, g, 0, 1});
  }
  CHECK(compute_macro_f1(perfect).macro_f1 == 1.0);

  std::mt19937_64 rng(2);
  const auto recs = random_records(rng, 300);
  CHECK(std::abs(compute_macro_f1(recs).macro_f1 - brute_macro_f1(recs)) <= 1e-12);

  std::vector<EvalRecord> no_hover;
  const auto g = act(ActionType::lclick, {0, 0, 5, 5});
  no_hover.push_back({g, g, 0, 1});
  no_hover.push_back({act(ActionType::type_in, {0, 0, 5, 5}), act(ActionType::type_in, {0, 0, 5, 5}), 0, 1});
  const auto rep = compute_macro_f1(no_hover);
  CHECK(rep.per_class[static_cast<int>(ActionType::hover)].absent);
  CHECK(rep.per_class[static_cast<int>(ActionType::hover)].f1 == 0.0);
  CHECK(rep.macro_f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("anchor and extent hit rates") {
  const auto g = act(ActionType::lclick, {100, 100, 300, 300});
  std::vector<EvalRecord> exact{{g, g, 0, 1}};
  CHECK(hit_rates(exact).anchor_hit == 1.0);
  CHECK(hit_rates(exact).extent_hit == 1.0);

  std::vector<EvalRecord> wide{{act(ActionType::lclick, {150, 150, 450, 350}), g, 0, 1}};
  CHECK(hit_rates(wide).anchor_hit == 1.0);
  CHECK(hit_rates(wide).extent_hit == 0.0);

  std::mt19937_64 rng(3);
  const auto recs = random_records(rng, 500);
  int anchor = 0, extent = 0;
  for (const auto& r : recs) {
    if (!r.pred) continue;
    const auto& p = r.pred->box;
    const auto& b = r.gold.box;
    anchor += (p.x1 >= b.x1 && p.x1 <= b.x2 && p.y1 >= b.y1 && p.y1 <= b.y2) ? 1 : 0;
    extent += (std::abs((p.x2 - p.x1) - (b.x2 - b.x1)) <= 50 && std::abs((p.y2 - p.y1) - (b.y2 - b.y1)) <= 50) ? 1 : 0;
  }
  const auto h = hit_rates(recs);
  CHECK(h.anchor_hit == anchor / 500.0);
  CHECK(h.extent_hit == extent / 500.0);
}

TEST_CASE("summary") {
  std::mt19937_64 rng(4);
  const auto recs = random_records(rng, 50);
  const auto m = summarize(recs);
  CHECK(m.n == 50);
  CHECK(m.latency_min_s == 0.0);
  CHECK(m.latency_max_s == doctest::Approx(0.006));
  long fails = 0;
  for (const auto& r : recs) fails += r.pred ? 0 : 1;
  CHECK(m.decode_failures == fails);
  int total = 0;
  for (int c : m.conv_steps_histogram) total += c;
  CHECK(total == 50);
  const auto j = m.to_json(false);
  CHECK_FALSE(j.contains("latency"));
  CHECK(m.to_json().contains("latency"));
}

// ---------------------------------------------------------------------------

namespace {

struct Fixture {
  Vocabulary vocab;
  ResponseTemplate tmpl;
  std::vector<EncodedSample> data;

  explicit Fixture(int n) {
    DatasetConfig cfg;
    cfg.num_samples = n;
    cfg.base_seed = 21;
    data = encode_samples(generate_dataset(cfg), vocab, tmpl);
  }
};

}  // namespace

TEST_CASE("linear inference with the oracle") {
  Fixture f(60);
  OraclePredictor oracle(f.data, static_cast<int>(f.vocab.size()));
  const auto recs = run_linear(oracle, f.data, InferenceConfig{}, f.tmpl, f.vocab);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    REQUIRE(recs[i].pred);
    CHECK(*recs[i].pred == f.data[i].gold);
    CHECK(recs[i].converged_steps <= 64);
  }
  CHECK(summarize(recs).ssr == 1.0);
}

TEST_CASE("hybrid inference with the oracle") {
  Fixture f(60);
  OraclePredictor oracle(f.data, static_cast<int>(f.vocab.size()));
  const HybridInferenceConfig cfg;
  for (const auto& s : f.data) {
    const auto p = infer_hybrid(oracle, s, cfg, f.tmpl, f.vocab);
    REQUIRE(p.action());
    CHECK(*p.action() == s.gold);
    CHECK_FALSE(p.stage1_failed);
    // stage two is the last step and commits exactly the extent digits
    CHECK(p.trace.steps.back().committed.size() == 8);
    CHECK(p.trace.converged_steps == 2);
    CHECK(p.trace.steps.size() == 2u);
  }
}

TEST_CASE("hybrid config") {
  const ResponseTemplate tmpl;
  CHECK_NOTHROW(HybridInferenceConfig{}.validate(tmpl));
  HybridInferenceConfig bad;
  bad.stage2.threshold = 0.5;
  CHECK_THROWS_AS(bad.validate(tmpl), std::invalid_argument);
  bad = {};
  bad.stage1.gen_length = bad.stage1.block_length = 128;
  CHECK_THROWS_AS(bad.validate(tmpl), std::invalid_argument);
  const auto m = HybridInferenceConfig::matching({64, 64, 64, 0.95});
  CHECK(m.stage1.diffusion_steps == 48);
  CHECK(m.stage2.diffusion_steps == 16);
}

TEST_CASE("untrained model scores near zero") {
  Fixture f(40);
  ModelConfig mc;
  mc.d_model = 32;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 64;
  mc.vocab_size = static_cast<int>(f.vocab.size());
  mc.max_seq_len = 300;
  Denoiser<float> model(mc);
  DenoiserPredictor pred(model);
  const auto m = summarize(run_linear(pred, f.data, {8, 64, 64, 0.95}, f.tmpl, f.vocab));
  CHECK(m.ssr <= 0.1);
}

TEST_CASE("decode_generated handles other generation lengths") {
  const Vocabulary vocab;
  const ResponseTemplate tmpl;
  const ActionString a{ActionType::hover, {1, 2, 3, 4}, std::nullopt};
  auto r = encode_response(a, tmpl, vocab);
  std::vector<TokenId> shorter(r.begin(), r.begin() + 40);
  CHECK(std::get<ActionString>(decode_generated(shorter, tmpl, vocab)) == a);
  auto longer = r;
  longer.resize(128, Vocabulary::kPad);
  CHECK(std::get<ActionString>(decode_generated(longer, tmpl, vocab)) == a);
  longer[100] = vocab.digit(1);
  CHECK(std::get<DecodeFailure>(decode_generated(longer, tmpl, vocab)).kind == DecodeFailureKind::pad);
  std::vector<TokenId> tiny(r.begin(), r.begin() + 10);
  CHECK(std::holds_alternative<DecodeFailure>(decode_generated(tiny, tmpl, vocab)));
}

TEST_CASE("sweep") {
  Fixture f(20);
  OraclePredictor oracle(f.data, static_cast<int>(f.vocab.size()));
  const std::vector<InferenceConfig> grid{{64, 64, 64, 0.95}, {8, 64, 32, 0.95}, {16, 64, 64, 0.95}, {8, 64, 64, 0.95}};
  const auto rows = sweep(oracle, f.data, grid, f.tmpl, f.vocab);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].config == InferenceConfig{8, 64, 32, 0.95});
  CHECK(rows[1].config == InferenceConfig{8, 64, 64, 0.95});
  CHECK(rows[3].config.diffusion_steps == 64);

  const auto single = sweep(oracle, f.data, {InferenceConfig{}}, f.tmpl, f.vocab);
  const auto direct = summarize(run_linear(oracle, f.data, InferenceConfig{}, f.tmpl, f.vocab));
  CHECK(single.size() == 1);
  CHECK(single[0].metrics.ssr == direct.ssr);
  CHECK(single[0].metrics.f1.macro_f1 == direct.f1.macro_f1);
  CHECK(single[0].metrics.conv_steps_mean == direct.conv_steps_mean);

  const auto csv = sweep_csv(rows);
  CHECK(csv.substr(0, csv.find('\n')) ==
        "diffusion_steps,gen_length,block_length,conv_steps_mean,ssr_pct,f1_pct,latency_lowest_s,latency_highest_s,"
        "latency_mean_s");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(sweep_json(rows).size() == 4);

  CHECK_THROWS_AS(sweep(oracle, f.data, {}, f.tmpl, f.vocab), std::invalid_argument);
  CHECK_THROWS_AS(sweep(oracle, f.data, {InferenceConfig{}, InferenceConfig{8, 64, 24, 0.95}}, f.tmpl, f.vocab),
                  std::invalid_argument);
}

TEST_CASE("pipeline comparison") {
  Fixture f(30);
  OraclePredictor oracle(f.data, static_cast<int>(f.vocab.size()));
  std::span<const EncodedSample> all(f.data);
  const std::vector<EvalSplit> splits{{"a", all.first(15)}, {"b", all.subspan(15)}};
  const auto rows = compare_pipelines(oracle, oracle, splits, InferenceConfig{}, HybridInferenceConfig{}, f.tmpl, f.vocab);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].pipeline == "linear");
  CHECK(rows[1].pipeline == "hybrid");
  CHECK(rows[2].split == "b");
  for (const auto& r : rows) CHECK(r.metrics.ssr == 1.0);

  const auto csv = comparison_csv(rows);
  CHECK(csv.find("pipeline,split,ssr,macro_f1,conv_steps_mean,latency_mean_s,anchor_hit,extent_hit\n") == 0);
  CHECK(csv.find("M2W +1.6 SWI +5.3 SWT +1.3 VWA +6.1") != std::string::npos);
  CHECK(comparison_json(rows)["reference_ssr_deltas"]["VWA"] == 6.1);

  const auto again = compare_pipelines(oracle, oracle, splits, InferenceConfig{}, HybridInferenceConfig{}, f.tmpl, f.vocab);
  CHECK(comparison_json(again, false) == comparison_json(rows, false));

  const std::vector<EvalSplit> dup{{"a", all.first(5)}, {"a", all.first(5)}};
  CHECK_THROWS_AS(compare_pipelines(oracle, oracle, dup, {}, {}, f.tmpl, f.vocab), std::invalid_argument);
  CHECK_THROWS_AS(compare_pipelines(oracle, oracle, {}, {}, {}, f.tmpl, f.vocab), std::invalid_argument);
}
