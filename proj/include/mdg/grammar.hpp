#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace mdg {

using TokenId = std::int32_t;

enum class ActionType : std::uint8_t { lclick, hover, type_in };

inline constexpr std::array<ActionType, 3> kActionTypes = {ActionType::lclick, ActionType::hover,
                                                           ActionType::type_in};

std::string_view to_string(ActionType type);
std::optional<ActionType> action_type_from_string(std::string_view word);

/// Box in normalized screen units, inclusive on all edges.
struct BoundingBox {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;

  static constexpr int kMaxCoord = 1000;

  bool valid() const {
    return 0 <= x1 && x1 <= x2 && x2 <= kMaxCoord && 0 <= y1 && y1 <= y2 && y2 <= kMaxCoord;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Pixel-space box; edges are inclusive-exclusive agnostic, only ordering matters.
struct PixelBox {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;

  int width() const { return x2 - x1; }
  int height() const { return y2 - y1; }
  bool contains(const PixelBox& o) const {
    return x1 <= o.x1 && y1 <= o.y1 && o.x2 <= x2 && o.y2 <= y2;
  }
  bool intersects(const PixelBox& o) const {
    return x1 < o.x2 && o.x1 < x2 && y1 < o.y2 && o.y1 < y2;
  }
  PixelBox united(const PixelBox& o) const;
  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

struct ActionString {
  ActionType atype = ActionType::lclick;
  BoundingBox box;
  /// Present iff atype == type_in; never empty when present.
  std::optional<std::vector<std::string>> text;

  bool valid() const;
  friend bool operator==(const ActionString&, const ActionString&) = default;
};

std::ostream& operator<<(std::ostream& os, const ActionString& a);

enum class ParseErrorKind {
  empty_input,
  unknown_action,
  unbalanced_bracket,
  wrong_arity,
  non_integer,
  out_of_range,
  inverted_box,
  unexpected_text,
  missing_text,
};

std::string_view to_string(ParseErrorKind kind);

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrorKind kind, const std::string& detail);
  ParseErrorKind kind() const { return kind_; }

 private:
  ParseErrorKind kind_;
};

/// Parses `<type> [x1,y1,x2,y2]` with trailing words for type_in. Throws ParseError.
ActionString parse_action(std::string_view s);

/// Canonical text: no spaces inside the bracket list, single spaces between fields.
std::string serialize_action(const ActionString& a);

/// Fixed word lists the vocabulary is built from.
struct Lexicon {
  std::vector<std::string> instruction_words;
  std::vector<std::string> label_words;
  std::vector<std::string> text_words;

  static const Lexicon& standard();
};

enum class WidgetKind : std::uint8_t { button, input, icon, link };

inline constexpr std::array<WidgetKind, 4> kWidgetKinds = {WidgetKind::button, WidgetKind::input,
                                                           WidgetKind::icon, WidgetKind::link};

std::string_view to_string(WidgetKind kind);
std::optional<WidgetKind> widget_kind_from_string(std::string_view word);

class Vocabulary {
 public:
  static constexpr TokenId kMask = 0;
  static constexpr TokenId kPad = 1;

  explicit Vocabulary(const Lexicon& lexicon = Lexicon::standard());

  /// Builds from an explicit id-ordered token list; the first two must be MASK and PAD.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  /// Throws std::out_of_range for unknown tokens.
  TokenId id(std::string_view token) const;

  TokenId open_bracket() const { return open_; }
  TokenId close_bracket() const { return close_; }
  TokenId comma() const { return comma_; }
  TokenId digit(int d) const { return digit0_ + d; }
  std::optional<int> digit_value(TokenId id) const;
  TokenId action(ActionType t) const { return action0_ + static_cast<int>(t); }
  std::optional<ActionType> action_value(TokenId id) const;
  TokenId widget_kind(WidgetKind k) const { return kind0_ + static_cast<int>(k); }
  TokenId screen_begin() const { return screen_begin_; }
  TokenId screen_end() const { return screen_end_; }
  TokenId widget_sep() const { return widget_sep_; }
  /// True for lexicon words (not special, structural, digit, action, kind or delimiter tokens).
  bool is_word(TokenId id) const { return id >= first_word_ && id < static_cast<TokenId>(size()); }

  /// Text format: header `vocab-v1`, then `token<TAB>id` lines sorted by id.
  void write(std::ostream& os) const;
  static Vocabulary read(std::istream& is);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  struct Raw {};
  explicit Vocabulary(Raw) {}
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  TokenId open_ = -1, close_ = -1, comma_ = -1, digit0_ = -1, action0_ = -1, kind0_ = -1;
  TokenId screen_begin_ = -1, screen_end_ = -1, widget_sep_ = -1, first_word_ = -1;
};

/// Fixed slot layout of a serialized action inside the response.
///
///   0        action token
///   1        '['
///   2..5     x1 digits     \ anchor
///   6        ','            |
///   7..10    y1 digits     /
///   11       ','
///   12..15   x2 digits     \ extent
///   16       ','            |
///   17..20   y2 digits     /
///   21       ']'
///   22..     text words (PAD-filled), then pad slots
struct ResponseTemplate {
  static constexpr int kDefaultLength = 64;
  static constexpr int kDefaultTextCapacity = 8;

  explicit ResponseTemplate(int length = kDefaultLength, int text_capacity = kDefaultTextCapacity);

  int length() const { return length_; }
  int action_slot() const { return 0; }
  /// Slot of digit `digit` (0..3, most significant first) of coordinate `coord` (0=x1..3=y2).
  int coord_slot(int coord, int digit) const;

  const std::vector<int>& anchor_slots() const { return anchor_; }
  const std::vector<int>& extent_slots() const { return extent_; }
  const std::vector<int>& structural_slots() const { return structural_; }
  const std::vector<int>& text_slots() const { return text_; }
  const std::vector<int>& pad_slots() const { return pad_; }
  /// Every slot except the extent digits.
  std::vector<int> non_extent_slots() const;
  std::vector<int> all_slots() const;

 private:
  int length_;
  std::vector<int> anchor_, extent_, structural_, text_, pad_;
};

class EncodeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Token form of an action; coordinates as zero-padded 4-digit strings. Throws EncodeError
/// on text overflow or words missing from the vocabulary.
std::vector<TokenId> encode_response(const ActionString& a, const ResponseTemplate& tmpl,
                                     const Vocabulary& vocab);

enum class DecodeFailureKind { length, action_slot, structure, digit, range, order, text, pad };

std::string_view to_string(DecodeFailureKind kind);

struct DecodeFailure {
  DecodeFailureKind kind;
  int slot;  ///< first violated slot, -1 when not slot specific
};

using DecodeResult = std::variant<ActionString, DecodeFailure>;

/// Thrown when a response still contains MASK; samplers must never return one.
class ResidualMaskError : public std::logic_error {
  using std::logic_error::logic_error;
};

DecodeResult decode_response(std::span<const TokenId> tokens, const ResponseTemplate& tmpl,
                             const Vocabulary& vocab);

/// Maps a pixel box to [0,1000] via round(1000 * v / extent), clamped. Throws
/// std::invalid_argument on non-positive screen dimensions.
BoundingBox normalize_coords(const PixelBox& box_px, int screen_w, int screen_h);

}  // namespace mdg
