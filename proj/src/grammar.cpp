#include "mdg/grammar.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

namespace mdg {

namespace {

constexpr std::array<std::string_view, 3> kActionNames = {"lclick", "hover", "type_in"};
constexpr std::array<std::string_view, 4> kKindNames = {"button", "input", "icon", "link"};

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    const auto start = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
    if (i > start) words.emplace_back(s.substr(start, i - start));
  }
  return words;
}

}  // namespace

std::string_view to_string(ActionType type) { return kActionNames[static_cast<int>(type)]; }

std::optional<ActionType> action_type_from_string(std::string_view word) {
  for (std::size_t i = 0; i < kActionNames.size(); ++i)
    if (kActionNames[i] == word) return static_cast<ActionType>(i);
  return std::nullopt;
}

std::string_view to_string(WidgetKind kind) { return kKindNames[static_cast<int>(kind)]; }

std::optional<WidgetKind> widget_kind_from_string(std::string_view word) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == word) return static_cast<WidgetKind>(i);
  return std::nullopt;
}

PixelBox PixelBox::united(const PixelBox& o) const {
  return {std::min(x1, o.x1), std::min(y1, o.y1), std::max(x2, o.x2), std::max(y2, o.y2)};
}

bool ActionString::valid() const {
  if (!box.valid()) return false;
  if ((atype == ActionType::type_in) != text.has_value()) return false;
  if (text) {
    if (text->empty()) return false;
    for (const auto& w : *text)
      if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) return false;
  }
  return true;
}

std::ostream& operator<<(std::ostream& os, const ActionString& a) { return os << serialize_action(a); }

std::string_view to_string(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::empty_input: return "empty input";
    case ParseErrorKind::unknown_action: return "unknown action";
    case ParseErrorKind::unbalanced_bracket: return "unbalanced bracket";
    case ParseErrorKind::wrong_arity: return "expected four coordinates";
    case ParseErrorKind::non_integer: return "non-integer coordinate";
    case ParseErrorKind::out_of_range: return "coordinate out of range";
    case ParseErrorKind::inverted_box: return "inverted box";
    case ParseErrorKind::unexpected_text: return "text on non-type_in action";
    case ParseErrorKind::missing_text: return "type_in without text";
  }
  return "parse error";
}

ParseError::ParseError(ParseErrorKind kind, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

ActionString parse_action(std::string_view s) {
  const auto input = trim(s);
  if (input.empty()) throw ParseError(ParseErrorKind::empty_input, "");

  const auto open = input.find('[');
  const auto close = input.find(']');
  const auto head = trim(input.substr(0, std::min(open, input.size())));
  const auto head_words = split_words(head);
  if (head_words.size() != 1) throw ParseError(ParseErrorKind::unknown_action, std::string(head));
  const auto atype = action_type_from_string(head_words.front());
  if (!atype) throw ParseError(ParseErrorKind::unknown_action, head_words.front());

  if (open == std::string_view::npos || close == std::string_view::npos || close < open ||
      input.find('[', open + 1) != std::string_view::npos ||
      input.find(']', close + 1) != std::string_view::npos)
    throw ParseError(ParseErrorKind::unbalanced_bracket, std::string(input));

  const auto inner = input.substr(open + 1, close - open - 1);
  std::array<int, 4> coords{};
  std::size_t count = 0;
  std::size_t pos = 0;
  while (true) {
    const auto comma = inner.find(',', pos);
    const auto field = trim(inner.substr(pos, comma == std::string_view::npos ? inner.npos : comma - pos));
    if (count == coords.size()) throw ParseError(ParseErrorKind::wrong_arity, std::string(inner));
    long long value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (field.empty() || ptr != field.data() + field.size()) {
      if (ec == std::errc::result_out_of_range)
        throw ParseError(ParseErrorKind::out_of_range, std::string(field));
      throw ParseError(ParseErrorKind::non_integer, std::string(field));
    }
    if (ec == std::errc::result_out_of_range || value < 0 || value > BoundingBox::kMaxCoord)
      throw ParseError(ParseErrorKind::out_of_range, std::string(field));
    coords[count++] = static_cast<int>(value);
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (count != coords.size()) throw ParseError(ParseErrorKind::wrong_arity, std::string(inner));

  ActionString a;
  a.atype = *atype;
  a.box = {coords[0], coords[1], coords[2], coords[3]};
  if (a.box.x1 > a.box.x2 || a.box.y1 > a.box.y2)
    throw ParseError(ParseErrorKind::inverted_box, std::string(inner));

  auto words = split_words(input.substr(close + 1));
  if (a.atype == ActionType::type_in) {
    if (words.empty()) throw ParseError(ParseErrorKind::missing_text, std::string(input));
    a.text = std::move(words);
  } else if (!words.empty()) {
    throw ParseError(ParseErrorKind::unexpected_text, words.front());
  }
  return a;
}

std::string serialize_action(const ActionString& a) {
  std::string out(to_string(a.atype));
  out += " [" + std::to_string(a.box.x1) + ',' + std::to_string(a.box.y1) + ',' +
         std::to_string(a.box.x2) + ',' + std::to_string(a.box.y2) + ']';
  if (a.text)
    for (const auto& w : *a.text) out += ' ' + w;
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

const Lexicon& Lexicon::standard() {
  static const Lexicon lexicon{
      {"click", "hover", "over", "type", "in", "the", "button", "input", "icon", "link"},
      {"submit", "search", "login",    "logout",   "cancel",  "save",    "delete",   "edit",
       "home",   "profile", "settings", "menu",    "cart",    "checkout", "help",     "next",
       "previous", "close", "open",     "share",   "download", "upload",  "email",    "password",
       "username", "name",  "address",  "city",    "phone",   "comment", "filter",   "sort",
       "refresh", "back",   "forward",  "play",    "pause",   "send",    "reply",    "like",
       "subscribe", "follow", "more",   "info",    "news",    "sports",  "weather",  "music"},
      {"hello", "shoes", "laptop", "paris", "london", "pizza", "coffee", "tickets", "flights",
       "hotel", "books", "camera", "garden", "jacket", "tokyo", "recipes"},
  };
  return lexicon;
}

Vocabulary::Vocabulary(const Lexicon& lexicon) {
  tokens_ = {"[MASK]", "[PAD]", "[", "]", ","};
  for (int d = 0; d < 10; ++d) tokens_.push_back(std::to_string(d));
  for (auto t : kActionTypes) tokens_.emplace_back(to_string(t));
  for (auto k : kWidgetKinds) tokens_.push_back("<" + std::string(to_string(k)) + ">");
  tokens_.insert(tokens_.end(), {"<screen>", "</screen>", "<sep>"});
  auto add_words = [&](const std::vector<std::string>& words) {
    for (const auto& w : words)
      if (std::find(tokens_.begin(), tokens_.end(), w) == tokens_.end()) tokens_.push_back(w);
  };
  add_words(lexicon.instruction_words);
  add_words(lexicon.label_words);
  add_words(lexicon.text_words);
  index();
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.index();
  return v;
}

void Vocabulary::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument("duplicate vocabulary token: " + tokens_[i]);
  }
  if (tokens_.size() < 2 || tokens_[kMask] != "[MASK]" || tokens_[kPad] != "[PAD]")
    throw std::invalid_argument("vocabulary must start with [MASK] and [PAD]");
  auto need = [&](const std::string& t) {
    const auto it = ids_.find(t);
    if (it == ids_.end()) throw std::invalid_argument("vocabulary lacks token: " + t);
    return it->second;
  };
  open_ = need("[");
  close_ = need("]");
  comma_ = need(",");
  digit0_ = need("0");
  for (int d = 1; d < 10; ++d)
    if (need(std::to_string(d)) != digit0_ + d) throw std::invalid_argument("digit ids not contiguous");
  action0_ = need("lclick");
  if (need("hover") != action0_ + 1 || need("type_in") != action0_ + 2)
    throw std::invalid_argument("action ids not contiguous");
  kind0_ = need("<button>");
  for (auto k : kWidgetKinds)
    if (need("<" + std::string(to_string(k)) + ">") != kind0_ + static_cast<int>(k))
      throw std::invalid_argument("widget kind ids not contiguous");
  screen_begin_ = need("<screen>");
  screen_end_ = need("</screen>");
  widget_sep_ = need("<sep>");
  first_word_ = std::max({open_, close_, comma_, digit0_ + 9, action0_ + 2, kind0_ + 3, screen_begin_,
                          screen_end_, widget_sep_}) +
                1;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id out of range: " + std::to_string(id));
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  if (auto id = find(token)) return *id;
  throw std::out_of_range("unknown token: " + std::string(token));
}

std::optional<int> Vocabulary::digit_value(TokenId id) const {
  if (id >= digit0_ && id < digit0_ + 10) return id - digit0_;
  return std::nullopt;
}

std::optional<ActionType> Vocabulary::action_value(TokenId id) const {
  if (id >= action0_ && id < action0_ + 3) return static_cast<ActionType>(id - action0_);
  return std::nullopt;
}

void Vocabulary::write(std::ostream& os) const {
  os << "vocab-v1\n";
  for (std::size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::read(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "vocab-v1")
    throw std::runtime_error("vocabulary: missing vocab-v1 header");
  std::vector<std::string> tokens;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("vocabulary: malformed line " + std::to_string(lineno));
    const auto id = std::stoll(line.substr(tab + 1));
    if (id != static_cast<long long>(tokens.size()))
      throw std::runtime_error("vocabulary: ids not dense at line " + std::to_string(lineno));
    tokens.push_back(line.substr(0, tab));
  }
  return from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Response template

namespace {
constexpr int kCoordStart[4] = {2, 7, 12, 17};
constexpr int kStructural[5] = {1, 6, 11, 16, 21};
constexpr int kFixedSlots = 22;
}  // namespace

ResponseTemplate::ResponseTemplate(int length, int text_capacity) : length_(length) {
  if (text_capacity < 1 || length < kFixedSlots + text_capacity)
    throw std::invalid_argument("response template too short");
  for (int c = 0; c < 2; ++c)
    for (int d = 0; d < 4; ++d) anchor_.push_back(kCoordStart[c] + d);
  for (int c = 2; c < 4; ++c)
    for (int d = 0; d < 4; ++d) extent_.push_back(kCoordStart[c] + d);
  structural_.assign(std::begin(kStructural), std::end(kStructural));
  for (int i = 0; i < text_capacity; ++i) text_.push_back(kFixedSlots + i);
  for (int i = kFixedSlots + text_capacity; i < length; ++i) pad_.push_back(i);
}

int ResponseTemplate::coord_slot(int coord, int digit) const { return kCoordStart[coord] + digit; }

std::vector<int> ResponseTemplate::non_extent_slots() const {
  std::vector<int> out;
  for (int i = 0; i < length_; ++i)
    if (std::find(extent_.begin(), extent_.end(), i) == extent_.end()) out.push_back(i);
  return out;
}

std::vector<int> ResponseTemplate::all_slots() const {
  std::vector<int> out(length_);
  for (int i = 0; i < length_; ++i) out[i] = i;
  return out;
}

std::vector<TokenId> encode_response(const ActionString& a, const ResponseTemplate& tmpl,
                                     const Vocabulary& vocab) {
  if (!a.valid()) throw EncodeError("invalid action: " + serialize_action(a));
  std::vector<TokenId> out(tmpl.length(), Vocabulary::kPad);
  out[tmpl.action_slot()] = vocab.action(a.atype);
  out[1] = vocab.open_bracket();
  out[6] = out[11] = out[16] = vocab.comma();
  out[21] = vocab.close_bracket();
  const int coords[4] = {a.box.x1, a.box.y1, a.box.x2, a.box.y2};
  for (int c = 0; c < 4; ++c) {
    int v = coords[c];
    for (int d = 3; d >= 0; --d) {
      out[tmpl.coord_slot(c, d)] = vocab.digit(v % 10);
      v /= 10;
    }
  }
  if (a.text) {
    const auto& slots = tmpl.text_slots();
    if (a.text->size() > slots.size())
      throw EncodeError("text overflow: " + std::to_string(a.text->size()) + " words, capacity " +
                        std::to_string(slots.size()));
    for (std::size_t i = 0; i < a.text->size(); ++i) {
      const auto id = vocab.find((*a.text)[i]);
      if (!id || !vocab.is_word(*id)) throw EncodeError("word not in vocabulary: " + (*a.text)[i]);
      out[slots[i]] = *id;
    }
  }
  return out;
}

std::string_view to_string(DecodeFailureKind kind) {
  switch (kind) {
    case DecodeFailureKind::length: return "length";
    case DecodeFailureKind::action_slot: return "action-slot";
    case DecodeFailureKind::structure: return "structure";
    case DecodeFailureKind::digit: return "digit";
    case DecodeFailureKind::range: return "range";
    case DecodeFailureKind::order: return "order";
    case DecodeFailureKind::text: return "text";
    case DecodeFailureKind::pad: return "pad";
  }
  return "unknown";
}

DecodeResult decode_response(std::span<const TokenId> tokens, const ResponseTemplate& tmpl,
                             const Vocabulary& vocab) {
  if (std::find(tokens.begin(), tokens.end(), Vocabulary::kMask) != tokens.end())
    throw ResidualMaskError("decode_response: response still contains MASK");
  if (static_cast<int>(tokens.size()) != tmpl.length()) return DecodeFailure{DecodeFailureKind::length, -1};

  ActionString a;
  const auto atype = vocab.action_value(tokens[tmpl.action_slot()]);
  if (!atype) return DecodeFailure{DecodeFailureKind::action_slot, tmpl.action_slot()};
  a.atype = *atype;

  const TokenId expected[5] = {vocab.open_bracket(), vocab.comma(), vocab.comma(), vocab.comma(),
                               vocab.close_bracket()};
  for (int i = 0; i < 5; ++i) {
    const int slot = tmpl.structural_slots()[i];
    if (tokens[slot] != expected[i]) return DecodeFailure{DecodeFailureKind::structure, slot};
  }

  int coords[4];
  for (int c = 0; c < 4; ++c) {
    int v = 0;
    for (int d = 0; d < 4; ++d) {
      const int slot = tmpl.coord_slot(c, d);
      const auto digit = vocab.digit_value(tokens[slot]);
      if (!digit) return DecodeFailure{DecodeFailureKind::digit, slot};
      v = v * 10 + *digit;
    }
    if (v > BoundingBox::kMaxCoord) return DecodeFailure{DecodeFailureKind::range, tmpl.coord_slot(c, 0)};
    coords[c] = v;
  }
  a.box = {coords[0], coords[1], coords[2], coords[3]};
  if (a.box.x1 > a.box.x2) return DecodeFailure{DecodeFailureKind::order, tmpl.coord_slot(2, 0)};
  if (a.box.y1 > a.box.y2) return DecodeFailure{DecodeFailureKind::order, tmpl.coord_slot(3, 0)};

  std::vector<std::string> words;
  bool ended = false;
  for (int slot : tmpl.text_slots()) {
    const auto t = tokens[slot];
    if (t == Vocabulary::kPad) {
      ended = true;
    } else if (ended || !vocab.is_word(t)) {
      return DecodeFailure{DecodeFailureKind::text, slot};
    } else {
      words.push_back(vocab.token(t));
    }
  }
  if (a.atype == ActionType::type_in) {
    if (words.empty()) return DecodeFailure{DecodeFailureKind::text, tmpl.text_slots().front()};
    a.text = std::move(words);
  } else if (!words.empty()) {
    return DecodeFailure{DecodeFailureKind::text, tmpl.text_slots().front()};
  }
  for (int slot : tmpl.pad_slots())
    if (tokens[slot] != Vocabulary::kPad) return DecodeFailure{DecodeFailureKind::pad, slot};
  return a;
}

BoundingBox normalize_coords(const PixelBox& box_px, int screen_w, int screen_h) {
  if (screen_w <= 0 || screen_h <= 0)
    throw std::invalid_argument("normalize_coords: screen dimensions must be positive");
  auto scale = [](int v, int extent) {
    // round-half-up of 1000 * v / extent in integer arithmetic
    const long long num = 2LL * BoundingBox::kMaxCoord * v + extent;
    long long r = num >= 0 ? num / (2LL * extent) : -((-num + 2LL * extent - 1) / (2LL * extent));
    return static_cast<int>(std::clamp<long long>(r, 0, BoundingBox::kMaxCoord));
  };
  return {scale(box_px.x1, screen_w), scale(box_px.y1, screen_h), scale(box_px.x2, screen_w),
          scale(box_px.y2, screen_h)};
}

}  // namespace mdg
