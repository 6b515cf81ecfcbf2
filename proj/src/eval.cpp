#include "mdg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "mdg/pipeline.hpp"

namespace mdg {

using nlohmann::json;

Center box_center(const BoundingBox& b) { return {b.x1 + b.x2, b.y1 + b.y2}; }

bool contains(const BoundingBox& b, const Center& c) {
  return 2 * b.x1 <= c.twice_x && c.twice_x <= 2 * b.x2 && 2 * b.y1 <= c.twice_y && c.twice_y <= 2 * b.y2;
}

bool step_success(const std::optional<ActionString>& pred, const ActionString& gold) {
  return pred && pred->valid() && pred->atype == gold.atype && contains(gold.box, box_center(pred->box));
}

double compute_ssr(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("compute_ssr: no records");
  long hits = 0;
  for (const auto& r : records) hits += step_success(r.pred, r.gold) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

F1Report compute_macro_f1(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("compute_macro_f1: no records");
  F1Report rep;
  for (const auto& r : records) {
    const int g = static_cast<int>(r.gold.atype);
    if (!r.pred) {
      ++rep.per_class[g].fn;
      continue;
    }
    const int p = static_cast<int>(r.pred->atype);
    if (p == g) {
      ++rep.per_class[g].tp;
    } else {
      ++rep.per_class[p].fp;
      ++rep.per_class[g].fn;
    }
  }
  double sum = 0;
  for (auto& c : rep.per_class) {
    c.absent = c.tp + c.fp + c.fn == 0;
    c.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    c.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    c.f1 = c.precision + c.recall > 0 ? 2 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
    sum += c.f1;
  }
  rep.macro_f1 = sum / 3.0;
  return rep;
}

HitRates hit_rates(std::span<const EvalRecord> records, int extent_tolerance) {
  if (records.empty()) throw std::invalid_argument("hit_rates: no records");
  long anchor = 0, extent = 0;
  for (const auto& r : records) {
    if (!r.pred) continue;
    const auto& p = r.pred->box;
    const auto& g = r.gold.box;
    if (g.x1 <= p.x1 && p.x1 <= g.x2 && g.y1 <= p.y1 && p.y1 <= g.y2) ++anchor;
    const int dw = (p.x2 - p.x1) - (g.x2 - g.x1);
    const int dh = (p.y2 - p.y1) - (g.y2 - g.y1);
    if (std::abs(dw) <= extent_tolerance && std::abs(dh) <= extent_tolerance) ++extent;
  }
  const auto n = static_cast<double>(records.size());
  return {static_cast<double>(anchor) / n, static_cast<double>(extent) / n};
}

MetricsReport summarize(std::span<const EvalRecord> records) {
  MetricsReport m;
  m.n = records.size();
  m.ssr = compute_ssr(records);
  m.f1 = compute_macro_f1(records);
  m.hits = hit_rates(records);

  std::vector<double> lat;
  double steps = 0;
  for (const auto& r : records) {
    if (r.latency_s < 0) throw std::invalid_argument("summarize: negative latency");
    lat.push_back(r.latency_s);
    steps += r.converged_steps;
    if (!r.pred) ++m.decode_failures;
    if (r.converged_steps >= static_cast<int>(m.conv_steps_histogram.size()))
      m.conv_steps_histogram.resize(r.converged_steps + 1, 0);
    ++m.conv_steps_histogram[r.converged_steps];
  }
  std::sort(lat.begin(), lat.end());
  double total = 0;
  for (double v : lat) total += v;
  auto pct = [&](double q) { return lat[static_cast<std::size_t>(std::floor(q * static_cast<double>(lat.size() - 1)))]; };
  m.latency_mean_s = total / static_cast<double>(lat.size());
  m.latency_min_s = lat.front();
  m.latency_max_s = lat.back();
  m.latency_p50_s = pct(0.5);
  m.latency_p90_s = pct(0.9);
  m.conv_steps_mean = steps / static_cast<double>(records.size());
  return m;
}

json MetricsReport::to_json(bool include_latency) const {
  json per_class = json::object();
  for (auto t : kActionTypes) {
    const auto& c = f1.per_class[static_cast<int>(t)];
    per_class[std::string(to_string(t))] = {{"tp", c.tp},           {"fp", c.fp},         {"fn", c.fn},
                                            {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                                            {"absent", c.absent}};
  }
  json j = {{"n", n},
            {"ssr", ssr},
            {"macro_f1", f1.macro_f1},
            {"per_class", per_class},
            {"conv_steps_mean", conv_steps_mean},
            {"conv_steps_histogram", conv_steps_histogram},
            {"decode_failures", decode_failures},
            {"anchor_hit", hits.anchor_hit},
            {"extent_hit", hits.extent_hit},
            {"extent_tolerance", kExtentTolerance}};
  if (include_latency) {
    j["latency"] = {{"mean_s", latency_mean_s}, {"min_s", latency_min_s}, {"max_s", latency_max_s},
                    {"p50_s", latency_p50_s},   {"p90_s", latency_p90_s}};
  }
  return j;
}

// ---------------------------------------------------------------------------

std::vector<SweepRow> sweep(const MaskPredictor& model, std::span<const EncodedSample> eval_set,
                            std::vector<InferenceConfig> grid, const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  if (grid.empty()) throw std::invalid_argument("sweep: empty grid");
  if (eval_set.empty()) throw std::invalid_argument("sweep: empty eval set");
  for (const auto& cfg : grid) cfg.validate();
  std::stable_sort(grid.begin(), grid.end(), [](const InferenceConfig& a, const InferenceConfig& b) {
    return std::tie(a.diffusion_steps, a.gen_length, a.block_length) <
           std::tie(b.diffusion_steps, b.gen_length, b.block_length);
  });
  std::vector<SweepRow> rows;
  for (const auto& cfg : grid) {
    const auto records = run_linear(model, eval_set, cfg, tmpl, vocab);
    rows.push_back({cfg, summarize(records)});
  }
  return rows;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string sweep_csv(std::span<const SweepRow> rows, bool include_latency) {
  std::ostringstream os;
  for (std::size_t i = 0; i < kSweepColumns.size(); ++i) os << (i ? "," : "") << kSweepColumns[i];
  os << '\n';
  for (const auto& r : rows) {
    os << r.config.diffusion_steps << ',' << r.config.gen_length << ',' << r.config.block_length << ','
       << fixed(r.metrics.conv_steps_mean, 4) << ',' << fixed(100.0 * r.metrics.ssr, 4) << ','
       << fixed(100.0 * r.metrics.f1.macro_f1, 4) << ',';
    if (include_latency) {
      os << fixed(r.metrics.latency_min_s, 6) << ',' << fixed(r.metrics.latency_max_s, 6) << ','
         << fixed(r.metrics.latency_mean_s, 6);
    } else {
      os << ",,";
    }
    os << '\n';
  }
  return os.str();
}

json sweep_json(std::span<const SweepRow> rows, bool include_latency) {
  json out = json::array();
  for (const auto& r : rows) {
    json j = {{"diffusion_steps", r.config.diffusion_steps},
              {"gen_length", r.config.gen_length},
              {"block_length", r.config.block_length},
              {"threshold", r.config.threshold},
              {"metrics", r.metrics.to_json(include_latency)}};
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace mdg
