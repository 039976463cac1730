#pragma once

// Agreement oracle for generated sentences: grammatical number read off the
// surface words with word lists typed out independently of the library.

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "compostruct/language.hpp"

namespace compostruct::testing {

inline const std::set<std::string> kOracleSingularNouns{"farmer",  "surgeon", "consultant", "manager",
                                                        "pilot",   "officer", "senator",    "teacher",
                                                        "author",  "customer", "dancer",    "taxi driver"};
inline const std::set<std::string> kOraclePluralNouns{"farmers",  "surgeons", "consultants", "managers",
                                                      "pilots",   "officers", "senators",    "teachers",
                                                      "authors",  "customers", "dancers",    "taxi drivers"};
inline const std::set<std::string> kOracleSingularVerbs{"is", "laughs", "smiles", "swims"};
inline const std::set<std::string> kOraclePluralVerbs{"are", "laugh", "smile", "swim"};
inline const std::set<std::string> kOracleAdjectives{"old", "young", "tall", "short"};

/// (subject or antecedent plural, verb or pronoun plural); nullopt if the words
/// do not parse.
inline std::optional<std::array<bool, 2>> oracle_plurality(bool anaphora, const std::vector<std::string>& w) {
  if (w.size() < 4 || w[0] != "the") return std::nullopt;
  const bool sing = kOracleSingularNouns.count(w[1]) == 1, plur = kOraclePluralNouns.count(w[1]) == 1;
  if (sing == plur) return std::nullopt;
  if (anaphora) {
    const std::string& p = w.back();
    if (p != "himself" && p != "herself" && p != "themselves") return std::nullopt;
    return std::array<bool, 2>{plur, p == "themselves"};
  }
  const std::string& verb = kOracleAdjectives.count(w.back()) ? w[w.size() - 2] : w.back();
  const bool vs = kOracleSingularVerbs.count(verb) == 1, vp = kOraclePluralVerbs.count(verb) == 1;
  if (vs == vp) return std::nullopt;
  return std::array<bool, 2>{plur, vp};
}

/// Slot of the single violator by the oracle, or nullopt.
inline std::optional<std::size_t> oracle_odd(const language::LanguageExample& ex, const TaskSpec& t) {
  const bool anaphora = t.rule == Rule::AnaphoraSingular || t.rule == Rule::AnaphoraPlural;
  const bool want_plural = t.rule == Rule::SvPlural || t.rule == Rule::AnaphoraPlural;
  std::optional<std::size_t> odd;
  int violators = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const auto f = oracle_plurality(anaphora, ex.stimuli[k].surface);
    if (!f) return std::nullopt;
    const std::array<bool, 2> cell{(*f)[0] == want_plural, (*f)[1] == want_plural};
    const bool follows = t.role == Role::MaskTrain
                             ? cell[*t.subroutine == Factor::Subject || *t.subroutine == Factor::Antecedent ? 0 : 1]
                             : cell[0] && cell[1];
    if (!follows) {
      ++violators;
      odd = k;
    }
  }
  if (violators != 1) return std::nullopt;
  return odd;
}

}  // namespace compostruct::testing
