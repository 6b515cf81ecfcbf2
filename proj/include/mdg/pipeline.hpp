#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdg/diffusion.hpp"
#include "mdg/eval.hpp"
#include "mdg/grammar.hpp"

namespace mdg {

struct Prediction {
  DecodeResult result;
  DecodeTrace trace;
  std::vector<TokenId> tokens;
  bool stage1_failed = false;

  std::optional<ActionString> action() const {
    if (const auto* a = std::get_if<ActionString>(&result)) return *a;
    return std::nullopt;
  }
};

/// Maps a generated response of any length onto the template: short responses are PAD-extended,
/// long ones must be PAD beyond the template or the result is a pad failure.
DecodeResult decode_generated(std::span<const TokenId> tokens, const ResponseTemplate& tmpl, const Vocabulary& vocab);

/// Single reverse pass over every response slot.
Prediction infer_linear(const MaskPredictor& model, const EncodedSample& sample, const InferenceConfig& cfg,
                        const ResponseTemplate& tmpl, const Vocabulary& vocab);

struct HybridInferenceConfig {
  InferenceConfig stage1{48, ResponseTemplate::kDefaultLength, ResponseTemplate::kDefaultLength, 0.95};
  InferenceConfig stage2{16, ResponseTemplate::kDefaultLength, ResponseTemplate::kDefaultLength, 0.95};

  /// Both stages span the whole template; threshold shared. Throws std::invalid_argument.
  void validate(const ResponseTemplate& tmpl) const;
  /// Same total step budget as `single`, split 3:1 between the stages.
  static HybridInferenceConfig matching(const InferenceConfig& single);
};

/// Two-stage decode: stage one commits every non-extent slot while the extent slots stay masked,
/// stage two commits the extent slots conditioned on the stage-one tokens. A stage-one response
/// that cannot hold a valid action skips stage two and is scored as a miss.
Prediction infer_hybrid(const MaskPredictor& stage1_model, const MaskPredictor& stage2_model, const EncodedSample& sample,
                        const HybridInferenceConfig& cfg, const ResponseTemplate& tmpl, const Vocabulary& vocab);

inline Prediction infer_hybrid(const MaskPredictor& model, const EncodedSample& sample, const HybridInferenceConfig& cfg,
                               const ResponseTemplate& tmpl, const Vocabulary& vocab) {
  return infer_hybrid(model, model, sample, cfg, tmpl, vocab);
}

EvalRecord to_record(const Prediction& p, const ActionString& gold);

std::vector<EvalRecord> run_linear(const MaskPredictor& model, std::span<const EncodedSample> samples,
                                   const InferenceConfig& cfg, const ResponseTemplate& tmpl, const Vocabulary& vocab);
std::vector<EvalRecord> run_hybrid(const MaskPredictor& model, std::span<const EncodedSample> samples,
                                   const HybridInferenceConfig& cfg, const ResponseTemplate& tmpl, const Vocabulary& vocab);

/// Emits one-hot logits for the gold response of any sample it was built from (PAD beyond the
/// gold length) and uniform logits for unknown conditioning.
class OraclePredictor final : public MaskPredictor {
 public:
  OraclePredictor(std::span<const EncodedSample> samples, int vocab_size, float peak = 50.0f);
  Matrix<float> response_logits(const Conditioning& cond, std::span<const TokenId> response) const override;

 private:
  std::map<std::vector<TokenId>, std::vector<TokenId>> gold_;
  int vocab_size_;
  float peak_;
};

struct EvalSplit {
  std::string name;
  std::span<const EncodedSample> samples;
};

struct ComparisonRow {
  std::string pipeline;
  std::string split;
  MetricsReport metrics;
};

inline constexpr std::array<std::string_view, 8> kComparisonColumns = {
    "pipeline", "split", "ssr", "macro_f1", "conv_steps_mean", "latency_mean_s", "anchor_hit", "extent_hit"};

/// Reference SSR deltas (hybrid minus linear, points) reported for an 8B model on real
/// benchmarks. Printed as context, never asserted.
inline constexpr std::array<std::pair<std::string_view, double>, 4> kReferenceHybridDeltas = {
    {{"M2W", 1.6}, {"SWI", 5.3}, {"SWT", 1.3}, {"VWA", 6.1}}};

/// Linear-trained model with single-pass decoding vs hybrid-trained model with two-stage
/// decoding, two rows (linear first) per split. Throws std::invalid_argument on empty or
/// duplicate splits.
std::vector<ComparisonRow> compare_pipelines(const MaskPredictor& model_linear, const MaskPredictor& model_hybrid,
                                             std::span<const EvalSplit> splits, const InferenceConfig& linear_cfg,
                                             const HybridInferenceConfig& hybrid_cfg, const ResponseTemplate& tmpl,
                                             const Vocabulary& vocab);

std::string comparison_csv(std::span<const ComparisonRow> rows, bool include_latency = true);
nlohmann::json comparison_json(std::span<const ComparisonRow> rows, bool include_latency = true);

}  // namespace mdg
