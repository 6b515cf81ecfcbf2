#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdg/diffusion.hpp"
#include "mdg/grammar.hpp"

namespace mdg {

struct EvalRecord {
  std::optional<ActionString> pred;  ///< nullopt for a decode failure
  ActionString gold;
  double latency_s = 0;
  int converged_steps = 0;
};

/// Box center kept exact by storing doubled coordinates.
struct Center {
  int twice_x = 0;
  int twice_y = 0;

  double x() const { return twice_x / 2.0; }
  double y() const { return twice_y / 2.0; }
  friend bool operator==(const Center&, const Center&) = default;
};

Center box_center(const BoundingBox& b);

/// Closed-set membership.
bool contains(const BoundingBox& b, const Center& c);

/// Action type matches and the predicted box center lies inside the gold box.
bool step_success(const std::optional<ActionString>& pred, const ActionString& gold);

/// Throws std::invalid_argument on empty input.
double compute_ssr(std::span<const EvalRecord> records);

struct ClassScores {
  long tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0, f1 = 0;
  bool absent = false;  ///< class never occurs in gold or predictions; F1 = 0 by convention
};

struct F1Report {
  std::array<ClassScores, 3> per_class;  ///< indexed by ActionType
  double macro_f1 = 0;
};

/// Decode failures count as a prediction of a null class: FN for the gold class, FP for none.
F1Report compute_macro_f1(std::span<const EvalRecord> records);

struct HitRates {
  double anchor_hit = 0;  ///< (x1, y1) inside the gold box
  double extent_hit = 0;  ///< width and height errors within tolerance
};

inline constexpr int kExtentTolerance = 50;

HitRates hit_rates(std::span<const EvalRecord> records, int extent_tolerance = kExtentTolerance);

struct MetricsReport {
  std::size_t n = 0;
  double ssr = 0;
  F1Report f1;
  double latency_mean_s = 0, latency_min_s = 0, latency_max_s = 0, latency_p50_s = 0, latency_p90_s = 0;
  double conv_steps_mean = 0;
  std::vector<int> conv_steps_histogram;  ///< index = converged steps
  long decode_failures = 0;
  HitRates hits;

  nlohmann::json to_json(bool include_latency = true) const;
};

MetricsReport summarize(std::span<const EvalRecord> records);

// ---------------------------------------------------------------------------
// Inference-parameter sweep

struct SweepRow {
  InferenceConfig config;
  MetricsReport metrics;
};

inline constexpr std::array<std::string_view, 9> kSweepColumns = {
    "diffusion_steps", "gen_length", "block_length", "conv_steps_mean", "ssr_pct",
    "f1_pct", "latency_lowest_s", "latency_highest_s", "latency_mean_s"};

/// One report row per config, sorted by (diffusion_steps, gen_length, block_length). Every
/// config is validated before any decoding starts.
std::vector<SweepRow> sweep(const MaskPredictor& model, std::span<const EncodedSample> eval_set,
                            std::vector<InferenceConfig> grid, const ResponseTemplate& tmpl, const Vocabulary& vocab);

/// Comma-separated table with the column set in kSweepColumns.
std::string sweep_csv(std::span<const SweepRow> rows, bool include_latency = true);
nlohmann::json sweep_json(std::span<const SweepRow> rows, bool include_latency = true);

}  // namespace mdg
