#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "mdg/eval.hpp"
#include "support.hpp"

namespace mdg::testing {

/// Records built to hit boundary centers often: predictions are gold boxes shifted by small
/// offsets, with random type swaps and decode failures.
inline std::vector<EvalRecord> random_records(std::mt19937_64& rng, int n) {
  std::vector<EvalRecord> out;
  std::uniform_int_distribution<int> shift(-30, 30), type(0, 2), coin(0, 9);
  for (int i = 0; i < n; ++i) {
    EvalRecord r;
    r.gold = random_action(rng);
    r.latency_s = 0.001 * (i % 7);
    r.converged_steps = 1 + i % 5;
    if (coin(rng) == 0) {
      out.push_back(r);
      continue;
    }
    auto p = coin(rng) < 3 ? random_action(rng) : r.gold;
    const int dx = shift(rng), dy = shift(rng);
    p.box.x1 = std::clamp(p.box.x1 + dx, 0, 1000);
    p.box.x2 = std::clamp(p.box.x2 + dx, p.box.x1, 1000);
    p.box.y1 = std::clamp(p.box.y1 + dy, 0, 1000);
    p.box.y2 = std::clamp(p.box.y2 + dy, p.box.y1, 1000);
    if (coin(rng) < 2) p.atype = kActionTypes[type(rng)];
    p.text = p.atype == ActionType::type_in ? std::optional(std::vector<std::string>{"x"}) : std::nullopt;
    r.pred = p;
    out.push_back(r);
  }
  return out;
}

inline double brute_ssr(const std::vector<EvalRecord>& recs) {
  int hits = 0;
  for (const auto& r : recs) {
    if (!r.pred || r.pred->atype != r.gold.atype) continue;
    const double cx = (r.pred->box.x1 + r.pred->box.x2) / 2.0;
    const double cy = (r.pred->box.y1 + r.pred->box.y2) / 2.0;
    if (cx >= r.gold.box.x1 && cx <= r.gold.box.x2 && cy >= r.gold.box.y1 && cy <= r.gold.box.y2) ++hits;
  }
  return static_cast<double>(hits) / recs.size();
}

inline double brute_macro_f1(const std::vector<EvalRecord>& recs) {
  // 4x3 confusion matrix: rows = predicted class (3 = failure), cols = gold class.
  long conf[4][3] = {};
  for (const auto& r : recs) conf[r.pred ? static_cast<int>(r.pred->atype) : 3][static_cast<int>(r.gold.atype)]++;
  double sum = 0;
  for (int c = 0; c < 3; ++c) {
    const double tp = conf[c][c];
    double pred_total = 0, gold_total = 0;
    for (int g = 0; g < 3; ++g) pred_total += conf[c][g];
    for (int p = 0; p < 4; ++p) gold_total += conf[p][c];
    const double prec = pred_total > 0 ? tp / pred_total : 0;
    const double rec = gold_total > 0 ? tp / gold_total : 0;
    sum += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0;
  }
  return sum / 3;
}

}  // namespace mdg::testing
