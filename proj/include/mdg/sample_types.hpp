#pragma once

#include <cstdint>
#include <vector>

#include "mdg/grammar.hpp"

namespace mdg {

/// Screen and instruction tokens the response is generated from; never corrupted.
struct Conditioning {
  std::vector<TokenId> screen;
  std::vector<TokenId> prompt;
};

/// A sample in token form: conditioning, clean response r_0 and the structured gold.
struct EncodedSample {
  Conditioning cond;
  std::vector<TokenId> response;
  ActionString gold;
};

enum class MaskPhase : std::uint8_t { linear, deterministic };

struct CorruptedSample {
  std::vector<TokenId> tokens;     ///< r_t
  std::vector<std::uint8_t> mask;  ///< 1 where tokens[i] == MASK
  double t = 1.0;
  double weight = 1.0;
  MaskPhase phase = MaskPhase::linear;

  int masked_count() const {
    int n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

struct TrainingExample {
  const EncodedSample* sample = nullptr;
  CorruptedSample corrupted;
};

}  // namespace mdg
