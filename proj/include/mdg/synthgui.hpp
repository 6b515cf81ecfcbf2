#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdg/grammar.hpp"
#include "mdg/sample_types.hpp"

namespace mdg {

struct Widget {
  WidgetKind kind = WidgetKind::button;
  std::vector<std::string> label;  ///< empty for icon-only widgets
  PixelBox icon_box;               ///< the interactive element proper
  PixelBox ocr_box;                ///< icon_box united with the adjacent label text region

  friend bool operator==(const Widget&, const Widget&) = default;
};

struct SyntheticScreen {
  int width_px = 1000;
  int height_px = 1000;
  std::vector<Widget> widgets;
  std::uint64_t seed = 0;

  /// Empty string when all screen invariants hold, otherwise the first violation.
  std::string validate() const;
  friend bool operator==(const SyntheticScreen&, const SyntheticScreen&) = default;
};

enum class AnnotationMode : std::uint8_t { icon_tight, ocr_extended };
enum class CropMode : std::uint8_t { none, random_target_preserving };

std::string_view to_string(AnnotationMode mode);
AnnotationMode annotation_mode_from_string(std::string_view s);
std::string_view to_string(CropMode mode);
CropMode crop_mode_from_string(std::string_view s);

struct GroundingSample {
  SyntheticScreen screen;
  std::vector<std::string> instruction;
  ActionString gold;
  AnnotationMode annotation_mode = AnnotationMode::ocr_extended;
  bool crop_applied = false;

  friend bool operator==(const GroundingSample&, const GroundingSample&) = default;
};

struct DatasetConfig {
  int num_samples = 1000;
  int screen_width = 1000;
  int screen_height = 1000;
  int grid_cols = 4;
  int grid_rows = 6;
  int min_widgets = 3;
  int max_widgets = 6;
  /// Number of label words drawn from the standard lexicon.
  int lexicon_size = 48;
  /// Probabilities for lclick, hover, type_in.
  std::array<double, 3> action_mix = {0.70, 0.15, 0.15};
  double unlabeled_icon_prob = 0.1;
  int max_text_words = 2;
  AnnotationMode annotation_mode = AnnotationMode::ocr_extended;
  CropMode crop_mode = CropMode::none;
  std::uint64_t base_seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

class GenerationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Order-independent per-sample seed.
std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t index);

/// Deterministic in (base_seed, index). Throws GenerationError when the grid cannot hold the
/// requested widgets.
SyntheticScreen generate_screen(const DatasetConfig& cfg, std::uint64_t index);

/// Instruction words for acting on widget `target`. Throws GenerationError on an ambiguous or
/// incompatible referent.
std::vector<std::string> make_instruction(const SyntheticScreen& screen, std::size_t target, ActionType atype,
                                          const std::vector<std::string>& typed_text = {});

/// Index of the unique widget the instruction refers to, by brute-force scan; nullopt when
/// zero or several widgets match.
std::optional<std::size_t> find_referent(const SyntheticScreen& screen, const std::vector<std::string>& instruction);

PixelBox annotate_target(const Widget& widget, AnnotationMode mode);

struct CroppedScreen {
  SyntheticScreen screen;
  std::size_t target = 0;  ///< index of the target inside the cropped screen
};

/// Random sub-screen whose bounds contain the target's ocr_box. Crop extent per axis is uniform
/// between the target extent and the full screen. Widgets not fully inside the crop are dropped.
CroppedScreen crop_screen(const SyntheticScreen& screen, std::size_t target, std::mt19937_64& rng);

/// Crop with explicit bounds; returns nullopt if the bounds do not contain the target.
std::optional<CroppedScreen> crop_to(const SyntheticScreen& screen, std::size_t target, const PixelBox& bounds);

GroundingSample generate_sample(const DatasetConfig& cfg, std::uint64_t index);
std::vector<GroundingSample> generate_dataset(const DatasetConfig& cfg);

/// Widgets in row-major order of their ocr_box origin.
std::vector<const Widget*> canonical_order(const SyntheticScreen& screen);

/// `<screen>` then per widget: kind token, label words, 16 digits of the normalized ocr_box,
/// `<sep>`; closed by `</screen>`. Throws EncodeError for words outside the vocabulary.
std::vector<TokenId> encode_screen(const SyntheticScreen& screen, const Vocabulary& vocab);
std::vector<TokenId> encode_instruction(const std::vector<std::string>& words, const Vocabulary& vocab);

/// Screen, instruction and gold response in token form.
EncodedSample encode_sample(const GroundingSample& s, const Vocabulary& vocab, const ResponseTemplate& tmpl);
std::vector<EncodedSample> encode_samples(const std::vector<GroundingSample>& samples, const Vocabulary& vocab,
                                          const ResponseTemplate& tmpl);

class DataError : public std::runtime_error {
 public:
  DataError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

std::string sample_to_line(const GroundingSample& s);
/// Parses and validates one record; throws DataError tagged with `line`.
GroundingSample sample_from_line(const std::string& text, std::size_t line);

/// Header `synthgui-v1` then one record per line.
void write_dataset(const std::vector<GroundingSample>& samples, std::ostream& os);
void write_dataset(const std::vector<GroundingSample>& samples, const std::filesystem::path& path);
std::vector<GroundingSample> read_dataset(std::istream& is);
std::vector<GroundingSample> read_dataset(const std::filesystem::path& path);

}  // namespace mdg
