#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/rng.hpp"

namespace owclip {

constexpr std::size_t kDefaultPhraseCount = 10;
constexpr std::size_t kMaxLabelLength = 64;
constexpr std::size_t kMaxPhraseCount = 50;
constexpr int kMaxReprompts = 2;

struct PhrasePrompt {
  std::string template_id;
  std::string class_label;
  std::size_t n_phrases = kDefaultPhraseCount;
  std::string rendered;
};

struct PhraseList {
  std::string class_label;
  std::vector<std::string> phrases;
  std::vector<bool> selected;

  std::vector<std::string> selected_phrases() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < phrases.size(); ++i) {
      if (selected[i]) out.push_back(phrases[i]);
    }
    return out;
  }
};

inline void to_json(nlohmann::json& j, const PhraseList& p) {
  j = {{"class_label", p.class_label}, {"phrases", p.phrases}, {"selected", p.selected}};
}

inline void from_json(const nlohmann::json& j, PhraseList& p) {
  p.class_label = j.at("class_label").get<std::string>();
  p.phrases = j.at("phrases").get<std::vector<std::string>>();
  p.selected = j.at("selected").get<std::vector<bool>>();
  if (p.selected.size() != p.phrases.size()) throw FormatError("phrase selection length mismatch");
}

inline std::string trim(std::string_view s) {
  const auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && ws(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && ws(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Class labels are trimmed, non-empty, at most 64 bytes and free of control
// characters.
inline std::string validate_label(std::string_view raw) {
  std::string label = trim(raw);
  if (label.empty()) throw InputError("class label is empty");
  if (label.size() > kMaxLabelLength) throw InputError("class label exceeds 64 characters");
  for (unsigned char c : label) {
    if (c < 0x20 || c == 0x7f) throw InputError("class label contains control characters");
  }
  return label;
}

// The label sits between "<<" and ">>" in the template, so '\', '<' and '>'
// inside it are backslash-escaped.
inline std::string escape_label(std::string_view label) {
  std::string out;
  for (char c : label) {
    if (c == '\\' || c == '<' || c == '>') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

inline std::string unescape_label(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) ++i;
    out.push_back(s[i]);
  }
  return out;
}

inline constexpr std::string_view kTemplateId = "visual-attributes-v1";

inline PhrasePrompt render_prompt(std::string_view raw_label, std::size_t n_phrases = kDefaultPhraseCount,
                                  int attempt = 0) {
  const std::string label = validate_label(raw_label);
  if (n_phrases == 0 || n_phrases > kMaxPhraseCount) throw InputError("n_phrases must be in [1, 50]");
  const std::string n = std::to_string(n_phrases);
  std::string text;
  text += "You describe how object categories look in photographs.\n";
  text += "Category: <<" + escape_label(label) + ">>\n";
  text += "Write exactly " + n + " short visual-attribute phrases for this category.\n";
  text += "Each phrase names something visible: shape, color, texture, parts or typical surroundings.\n";
  text += "Format: a numbered list, one phrase per line, \"1. <phrase>\" through \"" + n + ". <phrase>\".\n";
  text += "Output only the list. No introduction, no explanations, no blank lines.\n";
  if (attempt > 0) text += "Your previous reply could not be read. Reply with the numbered list only.\n";
  return {std::string(kTemplateId), label, n_phrases, text};
}

// Recovers the label and phrase count from a rendered prompt.
inline std::pair<std::string, std::size_t> prompt_fields(std::string_view rendered) {
  const auto open = rendered.find("<<");
  if (open == std::string_view::npos) throw InputError("prompt has no label field");
  std::size_t i = open + 2;
  std::string escaped;
  for (; i < rendered.size(); ++i) {
    if (rendered[i] == '\\' && i + 1 < rendered.size()) {
      escaped.push_back(rendered[i]);
      escaped.push_back(rendered[++i]);
    } else if (rendered.compare(i, 2, ">>") == 0) {
      break;
    } else {
      escaped.push_back(rendered[i]);
    }
  }
  if (i >= rendered.size()) throw InputError("prompt label field is not closed");
  std::size_t n = kDefaultPhraseCount;
  const auto ex = rendered.find("exactly ", i);
  if (ex != std::string_view::npos) n = std::stoul(std::string(rendered.substr(ex + 8, 4)));
  return {unescape_label(escaped), n};
}

// Lines of the form `^\s*\d+[.)]\s+(.+)$`; captures are trimmed, empty ones
// dropped, duplicates (ASCII case-insensitive) dropped after the first.
inline PhraseList parse_phrases(std::string_view raw, std::string class_label = {}) {
  PhraseList out;
  out.class_label = std::move(class_label);
  std::unordered_set<std::string> seen;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    auto nl = raw.find('\n', pos);
    if (nl == std::string_view::npos) nl = raw.size();
    std::string_view line = raw.substr(pos, nl - pos);
    pos = nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    std::size_t i = 0;
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t digits = i;
    while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
    if (i == digits || i >= line.size() || (line[i] != '.' && line[i] != ')')) continue;
    ++i;
    const std::size_t gap = i;
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i == gap) continue;
    // `\s+(.+)` lets a trailing run of spaces be the capture; trimming makes it empty.
    std::string phrase = trim(line.substr(i));
    if (phrase.empty()) continue;
    if (seen.insert(ascii_lower(phrase)).second) out.phrases.push_back(std::move(phrase));
  }
  if (out.phrases.empty()) throw ParseError("no numbered phrases found in the reply");
  out.selected.assign(out.phrases.size(), false);
  return out;
}

inline std::string serialize_phrases(const PhraseList& list) {
  std::string out;
  for (std::size_t i = 0; i < list.phrases.size(); ++i) {
    out += std::to_string(i + 1) + ". " + list.phrases[i] + "\n";
  }
  return out;
}

// Sets the selection to exactly `indices`.
inline PhraseList select_phrases(PhraseList list, const std::vector<std::size_t>& indices) {
  for (auto i : indices) {
    if (i >= list.phrases.size()) throw InputError("phrase index " + std::to_string(i) + " out of range");
  }
  list.selected.assign(list.phrases.size(), false);
  for (auto i : indices) list.selected[i] = true;
  return list;
}

inline PhraseList select_all(PhraseList list) {
  list.selected.assign(list.phrases.size(), true);
  return list;
}

class LLMProvider {
 public:
  virtual ~LLMProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string generate(const std::string& prompt) = 0;
};

// Deterministic offline provider. Labels with a fixture bank get that bank
// (truncated to the requested count); other labels get attribute phrases
// picked by a hash of (template, label).
class MockProvider final : public LLMProvider {
 public:
  MockProvider() : banks_(default_banks()) {}
  explicit MockProvider(std::map<std::string, std::vector<std::string>> banks) : banks_(std::move(banks)) {}

  std::string name() const override { return "mock"; }

  std::string generate(const std::string& prompt) override {
    const auto [label, n] = prompt_fields(prompt);
    std::vector<std::string> phrases;
    if (auto it = banks_.find(ascii_lower(label)); it != banks_.end()) {
      phrases = it->second;
    } else {
      phrases = attribute_vocabulary();
      Rng rng(fnv1a64(std::string(kTemplateId) + "\n" + label));
      rng.shuffle(phrases.begin(), phrases.end());
      for (auto& p : phrases) p = label + " " + p;
    }
    if (phrases.size() > n) phrases.resize(n);
    std::string out;
    for (std::size_t i = 0; i < phrases.size(); ++i) out += std::to_string(i + 1) + ". " + phrases[i] + "\n";
    return out;
  }

  static std::map<std::string, std::vector<std::string>> default_banks() {
    return {
        {"zebra",
         {"black and white striped coat", "short erect mane", "horse-like body", "tufted tail tip", "rounded upright ears",
          "dark muzzle", "striped legs down to the hooves", "standing in savanna grass", "grazing herd", "white belly"}},
        {"giraffe",
         {"very long neck", "patchy brown coat", "ossicones on the head", "long thin legs", "tall silhouette above trees",
          "dark tongue", "sloping back", "tufted tail", "browsing acacia leaves", "large dark eyes"}},
        {"traffic light",
         {"red amber and green lamps", "vertical rectangular housing", "mounted on a pole", "glowing circular light",
          "black or yellow casing", "above a road intersection", "visor hoods over lamps", "pedestrian signal box",
          "hanging from a wire", "metal mounting bracket"}},
    };
  }

  static std::vector<std::string> attribute_vocabulary() {
    return {"silhouette",        "outline",          "surface texture",  "dominant color",  "edge pattern",
            "shadow shape",      "typical pose",     "visible parts",    "proportions",     "close-up detail",
            "side view",         "front view",       "background scene", "material sheen",  "contour",
            "symmetry",          "size relative to surroundings", "cluster of parts", "color contrast", "markings",
            "top view",          "partial view",     "shape of the base", "distinctive feature"};
  }

 private:
  std::map<std::string, std::vector<std::string>> banks_;
};

// Replies with the prompt's own label as a one-item list; exercises escaping.
class EchoProvider final : public LLMProvider {
 public:
  std::string name() const override { return "echo"; }
  std::string generate(const std::string& prompt) override { return "1. " + prompt_fields(prompt).first + "\n"; }
};

// Renders, calls the provider and parses; a ParseError triggers up to two
// re-prompts before it is surfaced.
inline PhraseList generate_phrases(LLMProvider& provider, std::string_view label,
                                   std::size_t n_phrases = kDefaultPhraseCount, int* attempts_used = nullptr) {
  for (int attempt = 0;; ++attempt) {
    const PhrasePrompt prompt = render_prompt(label, n_phrases, attempt);
    try {
      PhraseList list = parse_phrases(provider.generate(prompt.rendered), prompt.class_label);
      if (attempts_used) *attempts_used = attempt + 1;
      return list;
    } catch (const ParseError&) {
      if (attempt >= kMaxReprompts) {
        if (attempts_used) *attempts_used = attempt + 1;
        throw;
      }
    }
  }
}

}  // namespace owclip
