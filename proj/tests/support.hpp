#pragma once

#include <random>
#include <string>
#include <vector>

#include "mdg/grammar.hpp"

namespace mdg::testing {

inline ActionString random_action(std::mt19937_64& rng, const Lexicon& lex = Lexicon::standard(), int max_words = 8) {
  std::uniform_int_distribution<int> coord(0, BoundingBox::kMaxCoord);
  std::uniform_int_distribution<int> type(0, 2);
  ActionString a;
  a.atype = kActionTypes[type(rng)];
  int xs[2] = {coord(rng), coord(rng)}, ys[2] = {coord(rng), coord(rng)};
  a.box = {std::min(xs[0], xs[1]), std::min(ys[0], ys[1]), std::max(xs[0], xs[1]), std::max(ys[0], ys[1])};
  if (a.atype == ActionType::type_in) {
    std::uniform_int_distribution<int> n(1, max_words);
    std::uniform_int_distribution<std::size_t> w(0, lex.text_words.size() - 1);
    std::vector<std::string> words(n(rng));
    for (auto& word : words) word = lex.text_words[w(rng)];
    a.text = std::move(words);
  }
  return a;
}

}  // namespace mdg::testing
