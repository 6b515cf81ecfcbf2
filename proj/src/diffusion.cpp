#include "mdg/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace mdg {

using nlohmann::json;

MaskSchedule MaskSchedule::linear(double epsilon) {
  MaskSchedule s;
  s.kind = Kind::linear;
  s.epsilon = epsilon;
  return s;
}

MaskSchedule MaskSchedule::deterministic(std::vector<int> target_slots) {
  MaskSchedule s;
  s.kind = Kind::deterministic;
  s.target_slots = std::move(target_slots);
  return s;
}

MaskSchedule MaskSchedule::hybrid(std::vector<int> target_slots, double phase_mix, double epsilon) {
  MaskSchedule s;
  s.kind = Kind::hybrid;
  s.target_slots = std::move(target_slots);
  s.phase_mix = phase_mix;
  s.epsilon = epsilon;
  return s;
}

void MaskSchedule::validate(int response_length) const {
  if (kind != Kind::deterministic && !(epsilon > 0 && epsilon < 1))
    throw std::invalid_argument("mask schedule: epsilon must be in (0, 1)");
  if (kind != Kind::linear) {
    if (target_slots.empty()) throw std::invalid_argument("mask schedule: target slots must be non-empty");
    for (int s : target_slots)
      if (s < 0 || s >= response_length) throw std::invalid_argument("mask schedule: target slot outside response");
  }
  if (kind == Kind::hybrid && !(phase_mix >= 0 && phase_mix <= 1))
    throw std::invalid_argument("mask schedule: phase_mix must be in [0, 1]");
}

std::string_view to_string(MaskSchedule::Kind kind) {
  switch (kind) {
    case MaskSchedule::Kind::linear: return "linear";
    case MaskSchedule::Kind::deterministic: return "deterministic";
    case MaskSchedule::Kind::hybrid: return "hybrid";
  }
  return "linear";
}

MaskSchedule::Kind schedule_kind_from_string(std::string_view s) {
  if (s == "linear") return MaskSchedule::Kind::linear;
  if (s == "deterministic") return MaskSchedule::Kind::deterministic;
  if (s == "hybrid") return MaskSchedule::Kind::hybrid;
  throw std::invalid_argument("unknown schedule: " + std::string(s));
}

double sample_timestep(std::mt19937_64& rng) {
  // generate_canonical is in [0, 1); flip to (0, 1].
  return 1.0 - std::generate_canonical<double, 53>(rng);
}

CorruptedSample corrupt_linear(std::span<const TokenId> r0, double t, double epsilon, std::mt19937_64& rng) {
  CorruptedSample cs;
  cs.t = t;
  cs.weight = 1.0 / t;
  cs.phase = MaskPhase::linear;
  cs.tokens.assign(r0.begin(), r0.end());
  cs.mask.assign(r0.size(), 0);
  const double p = mask_probability(t, epsilon);
  for (std::size_t i = 0; i < r0.size(); ++i) {
    if (std::generate_canonical<double, 53>(rng) < p) {
      cs.tokens[i] = Vocabulary::kMask;
      cs.mask[i] = 1;
    }
  }
  return cs;
}

CorruptedSample corrupt_deterministic(std::span<const TokenId> r0, std::span<const int> target_slots) {
  CorruptedSample cs;
  cs.t = 1.0;
  cs.weight = 1.0;
  cs.phase = MaskPhase::deterministic;
  cs.tokens.assign(r0.begin(), r0.end());
  cs.mask.assign(r0.size(), 0);
  for (int s : target_slots) {
    cs.tokens.at(s) = Vocabulary::kMask;
    cs.mask[s] = 1;
  }
  return cs;
}

std::vector<TrainingExample> make_training_batch(std::span<const EncodedSample* const> samples,
                                                 const MaskSchedule& schedule, std::mt19937_64& rng) {
  std::vector<TrainingExample> batch;
  batch.reserve(samples.size());
  for (const EncodedSample* s : samples) {
    const double phase_draw = std::generate_canonical<double, 53>(rng);
    const double t = sample_timestep(rng);
    bool deterministic = schedule.kind == MaskSchedule::Kind::deterministic;
    if (schedule.kind == MaskSchedule::Kind::hybrid) deterministic = phase_draw < schedule.phase_mix;
    if (deterministic) {
      batch.push_back({s, corrupt_deterministic(s->response, schedule.target_slots)});
    } else {
      batch.push_back({s, corrupt_linear(s->response, t, schedule.epsilon, rng)});
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------

void InferenceConfig::validate() const {
  if (diffusion_steps < 1 || gen_length < 1 || block_length < 1)
    throw std::invalid_argument("inference config: steps, gen_length and block_length must be positive");
  if (gen_length % block_length != 0)
    throw std::invalid_argument("inference config: block_length " + std::to_string(block_length) +
                                " does not divide gen_length " + std::to_string(gen_length));
  if (diffusion_steps < num_blocks())
    throw std::invalid_argument("inference config: fewer diffusion steps than blocks");
  if (!(threshold > 0 && threshold <= 1)) throw std::invalid_argument("inference config: threshold must be in (0, 1]");
}

json DecodeTrace::to_json() const {
  json steps_j = json::array();
  for (const auto& s : steps)
    steps_j.push_back({{"step", s.step}, {"block", s.block}, {"committed", s.committed}, {"confidences", s.confidences}});
  return {{"converged_steps", converged_steps},
          {"latency_s", latency_s},
          {"forced_commit", forced_commit},
          {"steps", steps_j}};
}

DecodeOutput reverse_decode(const MaskPredictor& model, const Conditioning& cond, const InferenceConfig& cfg,
                            std::optional<std::span<const int>> slot_subset, std::span<const TokenId> initial) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const int L = cfg.gen_length;

  DecodeOutput out;
  if (initial.empty()) {
    out.tokens.assign(L, Vocabulary::kMask);
  } else {
    if (static_cast<int>(initial.size()) != L)
      throw std::invalid_argument("reverse_decode: initial response length differs from gen_length");
    out.tokens.assign(initial.begin(), initial.end());
  }

  std::vector<std::uint8_t> is_target(L, slot_subset ? 0 : 1);
  if (slot_subset) {
    for (int s : *slot_subset) {
      if (s < 0 || s >= L) throw std::invalid_argument("reverse_decode: slot outside generation length");
      is_target[s] = 1;
    }
  }
  // Non-target slots are context and keep their value, MASK included (hybrid stage one).
  for (int i = 0; i < L; ++i)
    if (is_target[i]) out.tokens[i] = Vocabulary::kMask;

  const int blocks = cfg.num_blocks();
  const int base_steps = cfg.diffusion_steps / blocks;
  const int extra_steps = cfg.diffusion_steps % blocks;
  int global_step = 0;

  for (int b = 0; b < blocks; ++b) {
    const int lo = b * cfg.block_length, hi = lo + cfg.block_length;
    std::vector<int> pending;
    for (int i = lo; i < hi; ++i)
      if (is_target[i]) pending.push_back(i);
    const int budget = base_steps + (b < extra_steps ? 1 : 0);

    for (int s = 0; s < budget && !pending.empty(); ++s) {
      const Matrix<float> logits = model.response_logits(cond, out.tokens);
      if (logits.rows() != L) throw std::logic_error("reverse_decode: predictor returned wrong row count");

      struct Candidate {
        int pos;
        TokenId token;
        float confidence;
      };
      std::vector<Candidate> cands;
      cands.reserve(pending.size());
      for (int pos : pending) {
        auto row = logits.row(pos);
        // MASK is never a valid prediction.
        float best = -std::numeric_limits<float>::infinity();
        TokenId arg = Vocabulary::kPad;
        for (Eigen::Index v = 0; v < row.size(); ++v) {
          if (v == Vocabulary::kMask) continue;
          if (row(v) > best) {
            best = row(v);
            arg = static_cast<TokenId>(v);
          }
        }
        double z = 0;
        for (Eigen::Index v = 0; v < row.size(); ++v)
          if (v != Vocabulary::kMask) z += std::exp(static_cast<double>(row(v) - best));
        cands.push_back({pos, arg, static_cast<float>(1.0 / z)});
      }
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Candidate& a, const Candidate& c) { return a.confidence > c.confidence; });

      const int steps_left = budget - s;
      const int remaining = static_cast<int>(pending.size());
      const int quota = (remaining + steps_left - 1) / steps_left;
      StepRecord rec;
      rec.step = global_step;
      rec.block = b;
      std::vector<std::uint8_t> commit(L, 0);
      for (int k = 0; k < remaining; ++k) {
        if (k < quota || cands[k].confidence >= cfg.threshold) {
          out.tokens[cands[k].pos] = cands[k].token;
          commit[cands[k].pos] = 1;
          rec.committed.push_back(cands[k].pos);
          rec.confidences.push_back(cands[k].confidence);
        }
      }
      std::erase_if(pending, [&](int pos) { return commit[pos] != 0; });
      out.trace.steps.push_back(std::move(rec));
      ++global_step;
    }

    if (!pending.empty()) {
      // Unreachable with the ceil quota; kept so the output contract holds regardless.
      const Matrix<float> logits = model.response_logits(cond, out.tokens);
      for (int pos : pending) {
        Eigen::Index arg = 0;
        auto row = logits.row(pos).eval();
        row(Vocabulary::kMask) = -std::numeric_limits<float>::infinity();
        row.maxCoeff(&arg);
        out.tokens[pos] = static_cast<TokenId>(arg);
      }
      out.trace.forced_commit = true;
    }
  }

  out.trace.converged_steps = global_step;
  out.trace.latency_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

// ---------------------------------------------------------------------------

json EpochLog::to_json() const {
  json j = {{"epoch", epoch}, {"mean_loss", mean_loss}, {"wall_seconds", wall_seconds}, {"skipped_samples", skipped_samples}};
  j["heldout_ssr"] = heldout_ssr ? json(*heldout_ssr) : json(nullptr);
  return j;
}

TrainingDiverged::TrainingDiverged(int epoch_, std::int64_t step_)
    : NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch_) + ", step " +
                   std::to_string(step_)),
      epoch(epoch_),
      step(step_) {}

double learning_rate_scale(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) return static_cast<double>(step + 1) / cfg.warmup_steps;
  if (!cfg.cosine_decay || total_steps <= cfg.warmup_steps) return 1.0;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) /
                                            static_cast<double>(total_steps - cfg.warmup_steps));
  constexpr double kPi = 3.14159265358979323846;
  return cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * 0.5 * (1.0 + std::cos(kPi * progress));
}

std::vector<EpochLog> train(Denoiser<float>& model, OptimizerState<float>& opt, std::span<const EncodedSample> data,
                            const MaskSchedule& schedule, const TrainConfig& cfg, std::mt19937_64& rng,
                            const TrainHooks& hooks) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train: epochs and batch size must be positive");
  schedule.validate(static_cast<int>(data.front().response.size()));

  const auto n = static_cast<std::int64_t>(data.size());
  const std::int64_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = opt.step + batches_per_epoch * cfg.epochs;

  auto grads = Parameters<float>::zeros(model.config());
  std::vector<std::size_t> order(data.size());
  std::vector<EpochLog> logs;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0;
    std::int64_t batches = 0;
    std::vector<const EncodedSample*> members;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      members.clear();
      for (std::int64_t i = start; i < std::min(n, start + cfg.batch_size); ++i) members.push_back(&data[order[i]]);
      const auto batch = make_training_batch(members, schedule, rng);
      const auto stats = loss_and_grad(model, std::span<const TrainingExample>(batch), &grads);
      if (!std::isfinite(stats.loss)) throw TrainingDiverged(epoch, opt.step);
      log.skipped_samples += stats.skipped;
      optimizer_step(model.params(), grads, opt, learning_rate_scale(cfg, opt.step, total_steps));
      loss_sum += stats.loss;
      ++batches;
    }
    log.mean_loss = loss_sum / static_cast<double>(batches);
    if (hooks.heldout_ssr) log.heldout_ssr = hooks.heldout_ssr(model);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (hooks.on_epoch) hooks.on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

}  // namespace mdg
