#include "mdg/synthgui.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mdg {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, std::max(lo, hi))(rng);
}

std::string kind_word(WidgetKind k) { return std::string(to_string(k)); }

}  // namespace

std::string_view to_string(AnnotationMode mode) {
  return mode == AnnotationMode::icon_tight ? "icon_tight" : "ocr_extended";
}

AnnotationMode annotation_mode_from_string(std::string_view s) {
  if (s == "icon_tight") return AnnotationMode::icon_tight;
  if (s == "ocr_extended") return AnnotationMode::ocr_extended;
  throw std::invalid_argument("unknown annotation mode: " + std::string(s));
}

std::string_view to_string(CropMode mode) {
  return mode == CropMode::none ? "none" : "random_target_preserving";
}

CropMode crop_mode_from_string(std::string_view s) {
  if (s == "none") return CropMode::none;
  if (s == "random_target_preserving") return CropMode::random_target_preserving;
  throw std::invalid_argument("unknown crop mode: " + std::string(s));
}

std::string SyntheticScreen::validate() const {
  if (width_px <= 0 || height_px <= 0) return "non-positive screen dimensions";
  const PixelBox bounds{0, 0, width_px, height_px};
  for (std::size_t i = 0; i < widgets.size(); ++i) {
    const auto& w = widgets[i];
    if (w.icon_box.x1 > w.icon_box.x2 || w.icon_box.y1 > w.icon_box.y2) return "inverted icon_box";
    if (!w.ocr_box.contains(w.icon_box)) return "icon_box not inside ocr_box";
    if (!bounds.contains(w.ocr_box)) return "widget outside screen";
    for (std::size_t j = 0; j < i; ++j) {
      if (widgets[j].ocr_box.intersects(w.ocr_box)) return "overlapping widgets";
      if (widgets[j].kind == w.kind && widgets[j].label == w.label) return "duplicate (kind, label) referent";
    }
  }
  return {};
}

void DatasetConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("dataset config: " + what); };
  if (num_samples < 1) fail("num_samples must be positive");
  if (screen_width < 1 || screen_height < 1) fail("screen dimensions must be positive");
  if (grid_cols < 1 || grid_rows < 1) fail("grid dimensions must be positive");
  if (min_widgets < 1 || max_widgets < min_widgets) fail("widgets per screen range is empty");
  const int lexicon_max = static_cast<int>(Lexicon::standard().label_words.size());
  if (lexicon_size < 1 || lexicon_size > lexicon_max)
    fail("lexicon_size must be in [1, " + std::to_string(lexicon_max) + "]");
  double sum = 0;
  for (double p : action_mix) {
    if (p < 0) fail("action mix probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail("action mix must sum to 1");
  if (unlabeled_icon_prob < 0 || unlabeled_icon_prob > 1) fail("unlabeled_icon_prob outside [0,1]");
  if (max_text_words < 1) fail("max_text_words must be positive");
}

std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t index) {
  return splitmix64(base_seed ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

SyntheticScreen generate_screen(const DatasetConfig& cfg, std::uint64_t index) {
  cfg.validate();
  SyntheticScreen screen;
  screen.width_px = cfg.screen_width;
  screen.height_px = cfg.screen_height;
  screen.seed = sample_seed(cfg.base_seed, index);
  std::mt19937_64 rng(screen.seed);

  const int cells = cfg.grid_cols * cfg.grid_rows;
  const int n = uniform_int(rng, cfg.min_widgets, cfg.max_widgets);
  if (n > cells)
    throw GenerationError("cannot place " + std::to_string(n) + " widgets on a " + std::to_string(cfg.grid_cols) +
                          "x" + std::to_string(cfg.grid_rows) + " grid");

  const int cell_w = cfg.screen_width / cfg.grid_cols;
  const int cell_h = cfg.screen_height / cfg.grid_rows;
  const int margin = std::max(1, std::min(cell_w, cell_h) / 40);
  const int aw = cell_w - 2 * margin;
  const int ah = cell_h - 2 * margin;
  if (aw < 8 || ah < 4) throw GenerationError("grid cells too small for widgets");

  std::vector<int> order(cells);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const auto& labels = Lexicon::standard().label_words;
  bool have_unlabeled = false;
  for (int i = 0; i < n; ++i) {
    Widget w;
    w.kind = i == 0 ? WidgetKind::input : kWidgetKinds[uniform_int(rng, 0, 3)];
    const bool unlabeled = w.kind == WidgetKind::icon && !have_unlabeled &&
                           std::bernoulli_distribution(cfg.unlabeled_icon_prob)(rng);
    if (unlabeled) {
      have_unlabeled = true;
    } else {
      while (true) {
        std::vector<std::string> label{labels[uniform_int(rng, 0, cfg.lexicon_size - 1)]};
        const bool taken = std::any_of(screen.widgets.begin(), screen.widgets.end(), [&](const Widget& o) {
          return o.kind == w.kind && o.label == label;
        });
        if (!taken) {
          w.label = std::move(label);
          break;
        }
      }
    }

    const bool wide = w.kind == WidgetKind::input;
    const int icon_w = uniform_int(rng, std::max(2, aw * (wide ? 30 : 12) / 100), std::max(2, aw * (wide ? 55 : 30) / 100));
    const int icon_h = uniform_int(rng, std::max(2, ah * 30 / 100), std::max(2, ah * 80 / 100));
    int total_w = icon_w;
    int gap = 0, label_w = 0, label_h = 0;
    if (!w.label.empty()) {
      gap = uniform_int(rng, 2, 8);
      const int room = aw - icon_w - gap;
      label_w = std::min(room, uniform_int(rng, std::max(2, aw * 15 / 100), std::max(2, aw * 40 / 100)));
      label_w = std::max(1, label_w);
      label_h = uniform_int(rng, std::max(1, icon_h / 2), icon_h);
      total_w = icon_w + gap + label_w;
    }
    const int cell = order[i];
    const int cx = (cell % cfg.grid_cols) * cell_w + margin;
    const int cy = (cell / cfg.grid_cols) * cell_h + margin;
    const int x0 = cx + uniform_int(rng, 0, aw - total_w);
    const int y0 = cy + uniform_int(rng, 0, ah - icon_h);
    w.icon_box = {x0, y0, x0 + icon_w, y0 + icon_h};
    w.ocr_box = w.icon_box;
    if (!w.label.empty()) {
      const int ly = y0 + (icon_h - label_h) / 2;
      const PixelBox text_region{x0 + icon_w + gap, ly, x0 + total_w, ly + label_h};
      w.ocr_box = w.icon_box.united(text_region);
    }
    screen.widgets.push_back(std::move(w));
  }
  return screen;
}

std::vector<std::string> make_instruction(const SyntheticScreen& screen, std::size_t target, ActionType atype,
                                          const std::vector<std::string>& typed_text) {
  if (target >= screen.widgets.size()) throw GenerationError("target widget not on screen");
  const auto& w = screen.widgets[target];
  for (std::size_t i = 0; i < screen.widgets.size(); ++i)
    if (i != target && screen.widgets[i].kind == w.kind && screen.widgets[i].label == w.label)
      throw GenerationError("ambiguous referent: two widgets share kind and label");
  if (atype == ActionType::type_in && w.kind != WidgetKind::input)
    throw GenerationError("type_in requires an input widget");
  if ((atype == ActionType::type_in) == typed_text.empty())
    throw GenerationError("typed text must be given exactly for type_in");

  std::vector<std::string> out;
  switch (atype) {
    case ActionType::lclick: out = {"click", "the"}; break;
    case ActionType::hover: out = {"hover", "over", "the"}; break;
    case ActionType::type_in:
      out = {"type"};
      out.insert(out.end(), typed_text.begin(), typed_text.end());
      out.insert(out.end(), {"in", "the"});
      break;
  }
  out.insert(out.end(), w.label.begin(), w.label.end());
  out.push_back(kind_word(w.kind));
  return out;
}

std::optional<std::size_t> find_referent(const SyntheticScreen& screen, const std::vector<std::string>& instruction) {
  // Referent is the trailing "<label words...> <kind>" after the last "the".
  const auto the = std::find(instruction.rbegin(), instruction.rend(), "the");
  if (the == instruction.rend() || instruction.empty()) return std::nullopt;
  const auto kind = widget_kind_from_string(instruction.back());
  if (!kind) return std::nullopt;
  const std::vector<std::string> label(the.base(), instruction.end() - 1);
  std::optional<std::size_t> found;
  for (std::size_t i = 0; i < screen.widgets.size(); ++i) {
    if (screen.widgets[i].kind == *kind && screen.widgets[i].label == label) {
      if (found) return std::nullopt;
      found = i;
    }
  }
  return found;
}

PixelBox annotate_target(const Widget& widget, AnnotationMode mode) {
  return mode == AnnotationMode::icon_tight ? widget.icon_box : widget.ocr_box;
}

std::optional<CroppedScreen> crop_to(const SyntheticScreen& screen, std::size_t target, const PixelBox& bounds) {
  if (target >= screen.widgets.size() || !bounds.contains(screen.widgets[target].ocr_box)) return std::nullopt;
  CroppedScreen out;
  out.screen.width_px = bounds.width();
  out.screen.height_px = bounds.height();
  out.screen.seed = screen.seed;
  auto shift = [&](PixelBox b) {
    return PixelBox{b.x1 - bounds.x1, b.y1 - bounds.y1, b.x2 - bounds.x1, b.y2 - bounds.y1};
  };
  for (std::size_t i = 0; i < screen.widgets.size(); ++i) {
    const auto& w = screen.widgets[i];
    if (!bounds.contains(w.ocr_box)) continue;
    if (i == target) out.target = out.screen.widgets.size();
    out.screen.widgets.push_back({w.kind, w.label, shift(w.icon_box), shift(w.ocr_box)});
  }
  return out;
}

CroppedScreen crop_screen(const SyntheticScreen& screen, std::size_t target, std::mt19937_64& rng) {
  const auto& t = screen.widgets.at(target).ocr_box;
  auto axis = [&](int lo, int hi, int extent) {
    const int size = uniform_int(rng, std::max(1, hi - lo), extent);
    const int start = uniform_int(rng, std::max(0, hi - size), std::min(lo, extent - size));
    return std::pair{start, start + size};
  };
  const auto [x1, x2] = axis(t.x1, t.x2, screen.width_px);
  const auto [y1, y2] = axis(t.y1, t.y2, screen.height_px);
  return *crop_to(screen, target, {x1, y1, x2, y2});
}

GroundingSample generate_sample(const DatasetConfig& cfg, std::uint64_t index) {
  auto screen = generate_screen(cfg, index);
  std::mt19937_64 rng(splitmix64(screen.seed ^ 0xa0761d6478bd642fULL));

  std::discrete_distribution<int> mix(cfg.action_mix.begin(), cfg.action_mix.end());
  const auto atype = static_cast<ActionType>(mix(rng));

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < screen.widgets.size(); ++i)
    if (atype != ActionType::type_in || screen.widgets[i].kind == WidgetKind::input) candidates.push_back(i);
  std::size_t target = candidates[uniform_int(rng, 0, static_cast<int>(candidates.size()) - 1)];

  std::vector<std::string> typed;
  if (atype == ActionType::type_in) {
    const auto& words = Lexicon::standard().text_words;
    const int n = uniform_int(rng, 1, cfg.max_text_words);
    for (int i = 0; i < n; ++i) typed.push_back(words[uniform_int(rng, 0, static_cast<int>(words.size()) - 1)]);
  }

  GroundingSample s;
  s.annotation_mode = cfg.annotation_mode;
  if (cfg.crop_mode == CropMode::random_target_preserving) {
    auto cropped = crop_screen(screen, target, rng);
    screen = std::move(cropped.screen);
    target = cropped.target;
    s.crop_applied = true;
  }
  s.instruction = make_instruction(screen, target, atype, typed);
  s.gold.atype = atype;
  s.gold.box = normalize_coords(annotate_target(screen.widgets[target], cfg.annotation_mode), screen.width_px,
                                screen.height_px);
  if (atype == ActionType::type_in) s.gold.text = typed;
  s.screen = std::move(screen);
  return s;
}

std::vector<GroundingSample> generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<GroundingSample> out;
  out.reserve(cfg.num_samples);
  for (int i = 0; i < cfg.num_samples; ++i) out.push_back(generate_sample(cfg, static_cast<std::uint64_t>(i)));
  return out;
}

std::vector<const Widget*> canonical_order(const SyntheticScreen& screen) {
  std::vector<const Widget*> out;
  for (const auto& w : screen.widgets) out.push_back(&w);
  std::stable_sort(out.begin(), out.end(), [](const Widget* a, const Widget* b) {
    return std::tie(a->ocr_box.y1, a->ocr_box.x1, a->kind, a->label) <
           std::tie(b->ocr_box.y1, b->ocr_box.x1, b->kind, b->label);
  });
  return out;
}

std::vector<TokenId> encode_screen(const SyntheticScreen& screen, const Vocabulary& vocab) {
  std::vector<TokenId> out{vocab.screen_begin()};
  for (const Widget* w : canonical_order(screen)) {
    out.push_back(vocab.widget_kind(w->kind));
    for (const auto& word : w->label) {
      const auto id = vocab.find(word);
      if (!id || !vocab.is_word(*id)) throw EncodeError("label word not in vocabulary: " + word);
      out.push_back(*id);
    }
    const auto b = normalize_coords(w->ocr_box, screen.width_px, screen.height_px);
    for (int v : {b.x1, b.y1, b.x2, b.y2}) {
      for (int div = 1000; div >= 1; div /= 10) out.push_back(vocab.digit((v / div) % 10));
    }
    out.push_back(vocab.widget_sep());
  }
  out.push_back(vocab.screen_end());
  return out;
}

std::vector<TokenId> encode_instruction(const std::vector<std::string>& words, const Vocabulary& vocab) {
  std::vector<TokenId> out;
  out.reserve(words.size());
  for (const auto& word : words) {
    const auto id = vocab.find(word);
    // "hover" is both an instruction word and an action token; the instruction reuses the latter.
    if (!id || (!vocab.is_word(*id) && !vocab.action_value(*id)))
      throw EncodeError("instruction word not in vocabulary: " + word);
    out.push_back(*id);
  }
  return out;
}

EncodedSample encode_sample(const GroundingSample& s, const Vocabulary& vocab, const ResponseTemplate& tmpl) {
  return {{encode_screen(s.screen, vocab), encode_instruction(s.instruction, vocab)},
          encode_response(s.gold, tmpl, vocab),
          s.gold};
}

std::vector<EncodedSample> encode_samples(const std::vector<GroundingSample>& samples, const Vocabulary& vocab,
                                          const ResponseTemplate& tmpl) {
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(encode_sample(s, vocab, tmpl));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file

DataError::DataError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

namespace {

json box_json(const PixelBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

PixelBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be a 4-element array");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace

std::string sample_to_line(const GroundingSample& s) {
  json widgets = json::array();
  for (const auto& w : s.screen.widgets)
    widgets.push_back({{"kind", kind_word(w.kind)},
                       {"label", w.label},
                       {"icon_box", box_json(w.icon_box)},
                       {"ocr_box", box_json(w.ocr_box)}});
  const json j = {
      {"screen", {{"w", s.screen.width_px}, {"h", s.screen.height_px}, {"seed", s.screen.seed}, {"widgets", widgets}}},
      {"instruction", s.instruction},
      {"gold", serialize_action(s.gold)},
      {"annotation_mode", to_string(s.annotation_mode)},
      {"crop_applied", s.crop_applied},
  };
  return j.dump();
}

GroundingSample sample_from_line(const std::string& text, std::size_t line) {
  GroundingSample s;
  try {
    const auto j = json::parse(text);
    const auto& sj = j.at("screen");
    s.screen.width_px = sj.at("w").get<int>();
    s.screen.height_px = sj.at("h").get<int>();
    s.screen.seed = sj.value("seed", std::uint64_t{0});
    for (const auto& wj : sj.at("widgets")) {
      Widget w;
      const auto kind = widget_kind_from_string(wj.at("kind").get<std::string>());
      if (!kind) throw std::invalid_argument("unknown widget kind");
      w.kind = *kind;
      w.label = wj.at("label").get<std::vector<std::string>>();
      w.icon_box = box_from_json(wj.at("icon_box"));
      w.ocr_box = box_from_json(wj.at("ocr_box"));
      s.screen.widgets.push_back(std::move(w));
    }
    s.instruction = j.at("instruction").get<std::vector<std::string>>();
    s.gold = parse_action(j.at("gold").get<std::string>());
    s.annotation_mode = annotation_mode_from_string(j.at("annotation_mode").get<std::string>());
    s.crop_applied = j.at("crop_applied").get<bool>();
  } catch (const std::exception& e) {
    throw DataError(line, e.what());
  }
  if (auto err = s.screen.validate(); !err.empty()) throw DataError(line, "invalid screen: " + err);
  return s;
}

void write_dataset(const std::vector<GroundingSample>& samples, std::ostream& os) {
  os << "synthgui-v1\n";
  for (const auto& s : samples) os << sample_to_line(s) << '\n';
}

void write_dataset(const std::vector<GroundingSample>& samples, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_dataset(samples, os);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<GroundingSample> read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "synthgui-v1") throw DataError(1, "missing synthgui-v1 header");
  std::vector<GroundingSample> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(sample_from_line(line, lineno));
  }
  return out;
}

std::vector<GroundingSample> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset: " + path.string());
  return read_dataset(is);
}

}  // namespace mdg
