#include "mdg/pipeline.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace mdg {

using nlohmann::json;

DecodeResult decode_generated(std::span<const TokenId> tokens, const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  const auto L = static_cast<std::size_t>(tmpl.length());
  if (tokens.size() == L) return decode_response(tokens, tmpl, vocab);
  if (tokens.size() < L) {
    std::vector<TokenId> padded(tokens.begin(), tokens.end());
    padded.resize(L, Vocabulary::kPad);
    return decode_response(padded, tmpl, vocab);
  }
  for (std::size_t i = L; i < tokens.size(); ++i) {
    if (tokens[i] == Vocabulary::kMask) throw ResidualMaskError("decode_generated: response still contains MASK");
    if (tokens[i] != Vocabulary::kPad) return DecodeFailure{DecodeFailureKind::pad, static_cast<int>(i)};
  }
  return decode_response(tokens.first(L), tmpl, vocab);
}

Prediction infer_linear(const MaskPredictor& model, const EncodedSample& sample, const InferenceConfig& cfg,
                        const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  auto out = reverse_decode(model, sample.cond, cfg);
  Prediction p{decode_generated(out.tokens, tmpl, vocab), std::move(out.trace), std::move(out.tokens)};
  return p;
}

void HybridInferenceConfig::validate(const ResponseTemplate& tmpl) const {
  stage1.validate();
  stage2.validate();
  if (stage1.gen_length != tmpl.length() || stage2.gen_length != tmpl.length())
    throw std::invalid_argument("hybrid inference: both stages must span the response template");
  if (stage1.threshold != stage2.threshold) throw std::invalid_argument("hybrid inference: stages must share the threshold");
}

HybridInferenceConfig HybridInferenceConfig::matching(const InferenceConfig& single) {
  HybridInferenceConfig h;
  h.stage1 = h.stage2 = single;
  h.stage2.diffusion_steps = std::max(h.stage2.num_blocks(), single.diffusion_steps / 4);
  h.stage1.diffusion_steps = std::max(h.stage1.num_blocks(), single.diffusion_steps - h.stage2.diffusion_steps);
  return h;
}

Prediction infer_hybrid(const MaskPredictor& stage1_model, const MaskPredictor& stage2_model, const EncodedSample& sample,
                        const HybridInferenceConfig& cfg, const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  cfg.validate(tmpl);
  const auto stage1_slots = tmpl.non_extent_slots();
  const auto& extent = tmpl.extent_slots();

  auto first = reverse_decode(stage1_model, sample.cond, cfg.stage1, std::span<const int>(stage1_slots),
                              std::vector<TokenId>(tmpl.length(), Vocabulary::kMask));
  Prediction p;
  p.trace = std::move(first.trace);

  // Validate stage one with a placeholder extent of 1000 so only stage-one slots can fail.
  auto probe = first.tokens;
  for (std::size_t i = 0; i < extent.size(); ++i) probe[extent[i]] = vocab.digit(i % 4 == 0 ? 1 : 0);
  if (auto r = decode_response(probe, tmpl, vocab); std::holds_alternative<DecodeFailure>(r)) {
    p.result = std::get<DecodeFailure>(r);
    p.stage1_failed = true;
    for (int s : extent) first.tokens[s] = Vocabulary::kPad;
    p.tokens = std::move(first.tokens);
    return p;
  }

  auto second = reverse_decode(stage2_model, sample.cond, cfg.stage2, std::span<const int>(extent), first.tokens);
  const int offset = p.trace.converged_steps;
  for (auto& s : second.trace.steps) {
    s.step += offset;
    p.trace.steps.push_back(std::move(s));
  }
  p.trace.converged_steps += second.trace.converged_steps;
  p.trace.latency_s += second.trace.latency_s;
  p.trace.forced_commit = p.trace.forced_commit || second.trace.forced_commit;
  p.result = decode_response(second.tokens, tmpl, vocab);
  p.tokens = std::move(second.tokens);
  return p;
}

EvalRecord to_record(const Prediction& p, const ActionString& gold) {
  return {p.action(), gold, p.trace.latency_s, p.trace.converged_steps};
}

std::vector<EvalRecord> run_linear(const MaskPredictor& model, std::span<const EncodedSample> samples,
                                   const InferenceConfig& cfg, const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  std::vector<EvalRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(to_record(infer_linear(model, s, cfg, tmpl, vocab), s.gold));
  return out;
}

std::vector<EvalRecord> run_hybrid(const MaskPredictor& model, std::span<const EncodedSample> samples,
                                   const HybridInferenceConfig& cfg, const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  std::vector<EvalRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(to_record(infer_hybrid(model, s, cfg, tmpl, vocab), s.gold));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<TokenId> conditioning_key(const Conditioning& c) {
  std::vector<TokenId> key(c.screen);
  key.push_back(-1);
  key.insert(key.end(), c.prompt.begin(), c.prompt.end());
  return key;
}

}  // namespace

OraclePredictor::OraclePredictor(std::span<const EncodedSample> samples, int vocab_size, float peak)
    : vocab_size_(vocab_size), peak_(peak) {
  for (const auto& s : samples) gold_[conditioning_key(s.cond)] = s.response;
}

Matrix<float> OraclePredictor::response_logits(const Conditioning& cond, std::span<const TokenId> response) const {
  Matrix<float> logits = Matrix<float>::Zero(static_cast<Eigen::Index>(response.size()), vocab_size_);
  const auto it = gold_.find(conditioning_key(cond));
  if (it == gold_.end()) return logits;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const TokenId t = i < it->second.size() ? it->second[i] : Vocabulary::kPad;
    logits(static_cast<Eigen::Index>(i), t) = peak_;
  }
  return logits;
}

std::vector<ComparisonRow> compare_pipelines(const MaskPredictor& model_linear, const MaskPredictor& model_hybrid,
                                             std::span<const EvalSplit> splits, const InferenceConfig& linear_cfg,
                                             const HybridInferenceConfig& hybrid_cfg, const ResponseTemplate& tmpl,
                                             const Vocabulary& vocab) {
  if (splits.empty()) throw std::invalid_argument("compare_pipelines: no eval splits");
  std::set<std::string> names;
  for (const auto& s : splits) {
    if (s.samples.empty()) throw std::invalid_argument("compare_pipelines: split '" + s.name + "' is empty");
    if (!names.insert(s.name).second) throw std::invalid_argument("compare_pipelines: duplicate split '" + s.name + "'");
  }
  linear_cfg.validate();
  hybrid_cfg.validate(tmpl);

  std::vector<ComparisonRow> rows;
  for (const auto& s : splits) {
    rows.push_back({"linear", s.name, summarize(run_linear(model_linear, s.samples, linear_cfg, tmpl, vocab))});
    rows.push_back({"hybrid", s.name, summarize(run_hybrid(model_hybrid, s.samples, hybrid_cfg, tmpl, vocab))});
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

std::string comparison_csv(std::span<const ComparisonRow> rows, bool include_latency) {
  std::ostringstream os;
  for (std::size_t i = 0; i < kComparisonColumns.size(); ++i) os << (i ? "," : "") << kComparisonColumns[i];
  os << '\n';
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    os << r.pipeline << ',' << r.split << ',' << fixed(m.ssr, 6) << ',' << fixed(m.f1.macro_f1, 6) << ','
       << fixed(m.conv_steps_mean, 4) << ',' << (include_latency ? fixed(m.latency_mean_s, 6) : std::string()) << ','
       << fixed(m.hits.anchor_hit, 6) << ',' << fixed(m.hits.extent_hit, 6) << '\n';
  }
  os << "# reference SSR deltas, hybrid minus linear, 8B model on real benchmarks (context only, not asserted):";
  for (const auto& [name, delta] : kReferenceHybridDeltas) os << ' ' << name << " +" << fixed(delta, 1);
  os << '\n';
  return os.str();
}

json comparison_json(std::span<const ComparisonRow> rows, bool include_latency) {
  json out = {{"rows", json::array()}, {"reference_ssr_deltas", json::object()}};
  for (const auto& r : rows)
    out["rows"].push_back({{"pipeline", r.pipeline}, {"split", r.split}, {"metrics", r.metrics.to_json(include_latency)}});
  for (const auto& [name, delta] : kReferenceHybridDeltas) out["reference_ssr_deltas"][std::string(name)] = delta;
  out["reference_note"] = "8B-scale deltas on real benchmarks; context only, not asserted";
  return out;
}

}  // namespace mdg
