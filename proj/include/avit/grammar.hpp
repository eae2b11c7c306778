#pragma once

// Invertible instruction grammar. Sentences take the form
//   "<subject> <verb> <emotion>; <action clause>[; <action clause>]."
// where each action clause names a semantic blendshape movement followed by
// an intensity adverb. Every surface slot has three synonyms.

#include "avit/rng.hpp"

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace avit::grammar {

enum class Emotion : int { neutral = 0, calm, happy, sad, angry, fearful, surprised, disgusted };
inline constexpr int kNumEmotions = 8;
inline constexpr int kNumIntensities = 3;

std::string_view emotion_name(Emotion e);
std::optional<Emotion> emotion_from_name(std::string_view name);

/// A signed movement of one labeled expression channel.
struct Action {
  int channel = 0;
  int sign = 1;
  auto operator<=>(const Action&) const = default;
};

/// Offsets of labeled channels 1..5 at full intensity (3).
const std::array<double, 5>& emotion_offsets(Emotion e);

/// Actions described for an emotion, ordered by decreasing magnitude. Empty for neutral.
std::vector<Action> action_set(Emotion e);

/// Every labeled action phrase the grammar can produce.
std::vector<Action> all_actions();

std::string_view action_label(const Action& a);

struct ParsedInstruction {
  Emotion emotion = Emotion::neutral;
  int intensity = 1;
  std::vector<Action> actions;  // sorted
  bool operator==(const ParsedInstruction&) const = default;
};

/// Random surface realization of (emotion, intensity).
std::string generate_text(Emotion e, int intensity, Rng& rng);

/// Canonical realization (first synonym in every slot).
std::string canonical_text(Emotion e, int intensity);

/// A single action clause, canonical wording, e.g. "brows are furrowed strongly".
std::string action_clause(const Action& a, int intensity);

/// Inverts generate_text; nullopt when the sentence is not in the grammar.
std::optional<ParsedInstruction> parse(std::string_view text);
std::optional<ParsedInstruction> parse_tokens(const std::vector<std::string>& tokens);

/// Lowercased words; ';', '.' and ',' become standalone tokens.
std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(const std::vector<std::string>& tokens);

/// All word tokens the grammar can emit.
std::vector<std::string> grammar_tokens();

/// Fixed set of 10 prompt templates; entry 0 is the reference example.
const std::vector<std::string>& prompt_templates();

}  // namespace avit::grammar
