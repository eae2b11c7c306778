#include "avit/grammar.hpp"

#include "avit/errors.hpp"
#include "avit/face_model.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

namespace avit::grammar {

namespace {

using Synonyms = std::array<std::string_view, 3>;

constexpr std::array<std::string_view, kNumEmotions> kEmotionNames = {
    "neutral", "calm", "happy", "sad", "angry", "fearful", "surprised", "disgusted"};

constexpr std::array<Synonyms, kNumEmotions> kEmotionWords = {{
    {"neutral", "impassive", "unemotional"},
    {"calm", "peaceful", "serene"},
    {"happy", "joyful", "cheerful"},
    {"sad", "sorrowful", "unhappy"},
    {"angry", "furious", "irritated"},
    {"fearful", "scared", "afraid"},
    {"surprised", "astonished", "amazed"},
    {"disgusted", "repulsed", "revolted"},
}};

constexpr Synonyms kSubjects = {"the speaker", "the person", "the talker"};
constexpr Synonyms kVerbs = {"sounds", "seems", "appears"};
constexpr std::array<Synonyms, 3> kAdverbs = {{
    {"slightly", "mildly", "faintly"},
    {"moderately", "noticeably", "fairly"},
    {"strongly", "intensely", "markedly"},
}};
constexpr Synonyms kNeutralPhrases = {"the face remains relaxed", "the expression stays relaxed",
                                      "the features are at rest"};

struct ActionPhrase {
  Action action;
  std::string_view label;
  Synonyms region;
  Synonyms movement;
};

const std::vector<ActionPhrase>& action_phrases() {
  using face::kBrowFurrow, face::kBrowRaise, face::kCheekRaise, face::kEyeWiden, face::kLipCornerRaise;
  static const std::vector<ActionPhrase> phrases = {
      {{kLipCornerRaise, 1}, "lip corners raised",
       {"lip corners", "mouth corners", "the corners of the mouth"}, {"are raised", "are lifted", "turn up"}},
      {{kLipCornerRaise, -1}, "lip corners lowered",
       {"lip corners", "mouth corners", "the corners of the mouth"}, {"are lowered", "are pulled down", "turn down"}},
      {{kBrowRaise, 1}, "brows raised", {"brows", "eyebrows", "the brows"}, {"are raised", "are lifted", "arch up"}},
      {{kBrowFurrow, 1}, "brows furrowed",
       {"brows", "eyebrows", "the brows"}, {"are furrowed", "are knitted", "draw together"}},
      {{kEyeWiden, 1}, "eyes widened", {"eyes", "the eyes", "eyelids"}, {"are widened", "open wide", "are opened wide"}},
      {{kEyeWiden, -1}, "eyes narrowed",
       {"eyes", "the eyes", "eyelids"}, {"are narrowed", "are squinted", "are half closed"}},
      {{kCheekRaise, 1}, "cheeks lifted", {"cheeks", "the cheeks", "cheekbones"}, {"are lifted", "are raised", "push up"}},
  };
  return phrases;
}

const ActionPhrase& phrase_for(const Action& a) {
  for (const auto& p : action_phrases()) {
    if (p.action == a) return p;
  }
  throw ParameterError("no phrase for action");
}

// Channels 1..5: lip_corner_raise, brow_raise, brow_furrow, eye_widen, cheek_raise.
constexpr std::array<std::array<double, 5>, kNumEmotions> kOffsets = {{
    {0.0, 0.0, 0.0, 0.0, 0.0},
    {0.3, 0.0, 0.0, -0.6, 0.0},
    {1.0, 0.2, 0.0, 0.0, 0.7},
    {-0.8, 0.6, 0.0, -0.2, 0.0},
    {-0.6, 0.0, 1.0, 0.2, 0.0},
    {-0.2, 0.6, 0.4, 0.9, 0.0},
    {0.1, 1.0, 0.0, 0.7, 0.0},
    {-0.4, 0.0, 0.6, -0.3, 0.7},
}};
constexpr double kActiveThreshold = 0.5;

std::string pick(const Synonyms& s, Rng* rng) {
  if (!rng) return std::string(s[0]);
  return std::string(s[static_cast<std::size_t>(uniform_int(*rng, 0, 2))]);
}

std::string realize(Emotion e, int intensity, Rng* rng) {
  if (intensity < 1 || intensity > 3) throw ParameterError("intensity must be 1, 2 or 3");
  const auto& adverbs = kAdverbs[static_cast<std::size_t>(intensity - 1)];
  std::string s = pick(kSubjects, rng) + " " + pick(kVerbs, rng) + " " +
                  pick(kEmotionWords[static_cast<std::size_t>(e)], rng);
  const auto actions = action_set(e);
  if (actions.empty()) {
    s += "; " + pick(kNeutralPhrases, rng) + " " + pick(adverbs, rng);
  }
  for (const auto& a : actions) {
    const auto& p = phrase_for(a);
    s += "; " + pick(p.region, rng) + " " + pick(p.movement, rng) + " " + pick(adverbs, rng);
  }
  s += ".";
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

bool has(const std::vector<std::string>& toks, std::initializer_list<std::string_view> words) {
  for (const auto& t : toks) {
    for (auto w : words) {
      if (t == w) return true;
    }
  }
  return false;
}

std::optional<int> adverb_intensity(const std::string& tok) {
  for (std::size_t i = 0; i < kAdverbs.size(); ++i) {
    for (auto w : kAdverbs[i]) {
      if (tok == w) return static_cast<int>(i) + 1;
    }
  }
  return std::nullopt;
}

// Returns the action named by a clause (without its adverb), or nullopt.
// A clause naming the neutral phrase yields Action{-1, 0}.
std::optional<Action> clause_action(const std::vector<std::string>& w) {
  using face::kBrowFurrow, face::kBrowRaise, face::kCheekRaise, face::kEyeWiden, face::kLipCornerRaise;
  if (has(w, {"face", "expression", "features"}) && has(w, {"relaxed", "rest"})) return Action{-1, 0};
  if (has(w, {"lip", "mouth"})) {
    if (has(w, {"raised", "lifted", "up"})) return Action{kLipCornerRaise, 1};
    if (has(w, {"lowered", "down"})) return Action{kLipCornerRaise, -1};
    return std::nullopt;
  }
  if (has(w, {"brows", "eyebrows"})) {
    if (has(w, {"furrowed", "knitted", "together"})) return Action{kBrowFurrow, 1};
    if (has(w, {"raised", "lifted", "arch"})) return Action{kBrowRaise, 1};
    return std::nullopt;
  }
  if (has(w, {"eyes", "eyelids"})) {
    if (has(w, {"widened", "wide"})) return Action{kEyeWiden, 1};
    if (has(w, {"narrowed", "squinted", "closed"})) return Action{kEyeWiden, -1};
    return std::nullopt;
  }
  if (has(w, {"cheeks", "cheekbones"})) {
    if (has(w, {"lifted", "raised", "up"})) return Action{kCheekRaise, 1};
    return std::nullopt;
  }
  return std::nullopt;
}

}  // namespace

std::string_view emotion_name(Emotion e) { return kEmotionNames[static_cast<std::size_t>(e)]; }

std::optional<Emotion> emotion_from_name(std::string_view name) {
  for (int i = 0; i < kNumEmotions; ++i) {
    if (kEmotionNames[static_cast<std::size_t>(i)] == name) return static_cast<Emotion>(i);
  }
  return std::nullopt;
}

const std::array<double, 5>& emotion_offsets(Emotion e) { return kOffsets[static_cast<std::size_t>(e)]; }

std::vector<Action> action_set(Emotion e) {
  const auto& off = emotion_offsets(e);
  std::vector<std::pair<double, Action>> active;
  for (int i = 0; i < 5; ++i) {
    if (std::abs(off[static_cast<std::size_t>(i)]) >= kActiveThreshold) {
      active.push_back({std::abs(off[static_cast<std::size_t>(i)]), Action{i + 1, off[static_cast<std::size_t>(i)] > 0 ? 1 : -1}});
    }
  }
  std::stable_sort(active.begin(), active.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Action> out;
  for (const auto& [_, a] : active) out.push_back(a);
  return out;
}

std::vector<Action> all_actions() {
  std::vector<Action> out;
  for (const auto& p : action_phrases()) out.push_back(p.action);
  return out;
}

std::string_view action_label(const Action& a) { return phrase_for(a).label; }

std::string generate_text(Emotion e, int intensity, Rng& rng) { return realize(e, intensity, &rng); }

std::string canonical_text(Emotion e, int intensity) { return realize(e, intensity, nullptr); }

std::string action_clause(const Action& a, int intensity) {
  if (intensity < 1 || intensity > 3) throw ParameterError("intensity must be 1, 2 or 3");
  const auto& p = phrase_for(a);
  return std::string(p.region[0]) + " " + std::string(p.movement[0]) + " " +
         std::string(kAdverbs[static_cast<std::size_t>(intensity - 1)][0]);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == ';' || ch == '.' || ch == ',') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    const bool punct = t == ";" || t == "." || t == ",";
    if (!s.empty() && !punct) s += ' ';
    s += t;
  }
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::optional<ParsedInstruction> parse_tokens(const std::vector<std::string>& tokens) {
  std::vector<std::vector<std::string>> clauses(1);
  for (const auto& t : tokens) {
    if (t == ";") {
      clauses.emplace_back();
    } else if (t != "." && t != ",") {
      clauses.back().push_back(t);
    }
  }
  if (clauses.size() < 2 || clauses.size() > 3) return std::nullopt;

  ParsedInstruction out;
  const auto& head = clauses[0];
  if (head.empty()) return std::nullopt;
  bool found = false;
  for (int e = 0; e < kNumEmotions && !found; ++e) {
    for (auto w : kEmotionWords[static_cast<std::size_t>(e)]) {
      if (head.back() == w) {
        out.emotion = static_cast<Emotion>(e);
        found = true;
        break;
      }
    }
  }
  if (!found) return std::nullopt;

  std::optional<int> intensity;
  bool neutral_phrase = false;
  for (std::size_t c = 1; c < clauses.size(); ++c) {
    auto words = clauses[c];
    if (words.size() < 2) return std::nullopt;
    const auto level = adverb_intensity(words.back());
    if (!level || (intensity && *intensity != *level)) return std::nullopt;
    intensity = level;
    words.pop_back();
    const auto act = clause_action(words);
    if (!act) return std::nullopt;
    if (act->channel < 0) {
      neutral_phrase = true;
    } else {
      out.actions.push_back(*act);
    }
  }
  if (neutral_phrase && (!out.actions.empty() || clauses.size() != 2)) return std::nullopt;
  std::sort(out.actions.begin(), out.actions.end());
  if (std::adjacent_find(out.actions.begin(), out.actions.end()) != out.actions.end()) return std::nullopt;
  out.intensity = *intensity;
  return out;
}

std::optional<ParsedInstruction> parse(std::string_view text) { return parse_tokens(tokenize(text)); }

std::vector<std::string> grammar_tokens() {
  std::set<std::string> words;
  auto add_all = [&](std::string_view phrase) {
    for (auto& t : tokenize(phrase)) words.insert(t);
  };
  for (const auto& syn : kEmotionWords) {
    for (auto w : syn) add_all(w);
  }
  for (auto w : kSubjects) add_all(w);
  for (auto w : kVerbs) add_all(w);
  for (const auto& syn : kAdverbs) {
    for (auto w : syn) add_all(w);
  }
  for (auto w : kNeutralPhrases) add_all(w);
  for (const auto& p : action_phrases()) {
    for (auto w : p.region) add_all(w);
    for (auto w : p.movement) add_all(w);
  }
  words.insert(";");
  words.insert(".");
  return {words.begin(), words.end()};
}

const std::vector<std::string>& prompt_templates() {
  static const std::vector<std::string> templates = {
      "Analyze conveyed emotion in an audio snippet, elaborating on facial expressions",
      "Describe the emotion carried by this audio clip and the facial movements it implies",
      "Listen to the speech and explain the feelings of the speaker through facial expressions",
      "Infer the emotional state in the audio and detail the resulting facial expressions",
      "Interpret the mood of this voice recording, describing how the face would move",
      "Identify the emotion expressed in the audio and elaborate on the facial actions",
      "From this speech snippet, characterize the emotion and the accompanying facial details",
      "Explain what emotion the audio conveys and how the facial expressions reflect it",
      "Analyze the speaking state in this audio, elaborating on the movements of the face",
      "Determine the emotion of the speaker from the audio and describe the facial expressions",
  };
  return templates;
}

}  // namespace avit::grammar
