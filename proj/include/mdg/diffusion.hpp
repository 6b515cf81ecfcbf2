#pragma once

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdg/denoiser.hpp"
#include "mdg/optimizer.hpp"
#include "mdg/sample_types.hpp"

namespace mdg {

// ---------------------------------------------------------------------------
// Forward corruption

struct MaskSchedule {
  enum class Kind { linear, deterministic, hybrid };

  Kind kind = Kind::linear;
  double epsilon = 1e-3;          ///< linear phase floor: p_mask = (1 - eps) t + eps
  std::vector<int> target_slots;  ///< deterministic phase slots (extent digits by default)
  double phase_mix = 0.5;         ///< hybrid: probability a sample takes the deterministic phase

  static MaskSchedule linear(double epsilon = 1e-3);
  static MaskSchedule deterministic(std::vector<int> target_slots);
  static MaskSchedule hybrid(std::vector<int> target_slots, double phase_mix = 0.5, double epsilon = 1e-3);

  /// Throws std::invalid_argument.
  void validate(int response_length) const;
};

std::string_view to_string(MaskSchedule::Kind kind);
MaskSchedule::Kind schedule_kind_from_string(std::string_view s);

/// Linear-phase masking probability.
inline double mask_probability(double t, double epsilon) { return (1.0 - epsilon) * t + epsilon; }

/// t ~ Uniform(0, 1], never exactly zero.
double sample_timestep(std::mt19937_64& rng);

CorruptedSample corrupt_linear(std::span<const TokenId> r0, double t, double epsilon, std::mt19937_64& rng);

/// Masks exactly `target_slots`; t = 1, weight = 1.
CorruptedSample corrupt_deterministic(std::span<const TokenId> r0, std::span<const int> target_slots);

/// One corrupted copy per sample. Every sample consumes the same random draws regardless of the
/// schedule kind, so a hybrid schedule with phase_mix = 0 reproduces the linear stream exactly.
std::vector<TrainingExample> make_training_batch(std::span<const EncodedSample* const> samples,
                                                 const MaskSchedule& schedule, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Reverse process

/// Anything that scores response positions: the trained denoiser, or a test oracle.
class MaskPredictor {
 public:
  virtual ~MaskPredictor() = default;
  /// Logits, one row per response position.
  virtual Matrix<float> response_logits(const Conditioning& cond, std::span<const TokenId> response) const = 0;
};

class DenoiserPredictor final : public MaskPredictor {
 public:
  explicit DenoiserPredictor(const Denoiser<float>& model) : model_(model) {}
  Matrix<float> response_logits(const Conditioning& cond, std::span<const TokenId> response) const override {
    return model_.forward(pack_sequence(cond, response));
  }

 private:
  const Denoiser<float>& model_;
};

struct InferenceConfig {
  int diffusion_steps = 64;
  int gen_length = 64;
  int block_length = 64;
  double threshold = 0.95;  ///< confidence at or above which a prediction is committed immediately

  int num_blocks() const { return gen_length / block_length; }
  /// Throws std::invalid_argument.
  void validate() const;
  friend bool operator==(const InferenceConfig&, const InferenceConfig&) = default;
};

struct StepRecord {
  int step = 0;  ///< global step index, 0-based
  int block = 0;
  std::vector<int> committed;
  std::vector<float> confidences;  ///< aligned with `committed`
};

struct DecodeTrace {
  std::vector<StepRecord> steps;
  int converged_steps = 0;
  double latency_s = 0;
  bool forced_commit = false;

  nlohmann::json to_json() const;
};

struct DecodeOutput {
  std::vector<TokenId> tokens;
  DecodeTrace trace;
};

/// Blockwise reverse diffusion with low-confidence re-masking.
///
/// The response (length gen_length) starts from `initial` (or all MASK) with every target slot
/// masked. Blocks are decoded left to right with the step budget split evenly across them. Each
/// step predicts every masked target in the current block and commits the ceil(remaining /
/// steps_left) most confident predictions plus any prediction at or above the threshold; the rest
/// are re-masked. Committed tokens are never revisited. Decoding stops once every target is
/// committed; the output never contains MASK at a target slot.
DecodeOutput reverse_decode(const MaskPredictor& model, const Conditioning& cond, const InferenceConfig& cfg,
                            std::optional<std::span<const int>> slot_subset = std::nullopt,
                            std::span<const TokenId> initial = {});

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 4;
  int batch_size = 4;  // small batches: optimizer steps, not samples, limit learning at this scale
  AdamConfig adam;
  int warmup_steps = 100;
  bool cosine_decay = true;
  double min_lr_fraction = 0.1;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0;
  std::optional<double> heldout_ssr;
  double wall_seconds = 0;
  int skipped_samples = 0;

  nlohmann::json to_json() const;
};

/// Thrown when the loss stops being finite. Parameters hold the last finite state.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(int epoch, std::int64_t step);
  int epoch;
  std::int64_t step;
};

struct TrainHooks {
  /// Held-out SSR evaluated after each epoch when set.
  std::function<double(const Denoiser<float>&)> heldout_ssr;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Minibatch training on the masked-diffusion objective. Deterministic for a fixed rng state.
/// Throws std::invalid_argument on an empty dataset and TrainingDiverged on a non-finite loss.
std::vector<EpochLog> train(Denoiser<float>& model, OptimizerState<float>& opt, std::span<const EncodedSample> data,
                            const MaskSchedule& schedule, const TrainConfig& cfg, std::mt19937_64& rng,
                            const TrainHooks& hooks = {});

double learning_rate_scale(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps);

}  // namespace mdg
