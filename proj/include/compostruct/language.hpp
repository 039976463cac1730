#pragma once

// Templated agreement sentences for the subject-verb and reflexive-anaphora
// tasks. The noun of interest is always the second word, so every template
// starts "the <noun> ...".
//
// Subject-verb templates (verb number is the main verb's):
//   the N1 <prep> the N2 <main>
//   the N1 that the N2 <emb:N2> <main>
//   the N1 the N2 <emb:N2> <main>
//   the N1 that <emb:N1> the N2 <main>
// Anaphora template:
//   the N1 that the N2 <emb:N2> <reflexive verb> <pronoun>
//
// Multiword items ("taxi driver", "in front of") are single tokens.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "compostruct/rng.hpp"
#include "compostruct/task.hpp"

namespace compostruct::language {

inline constexpr std::size_t kMaxLength = 12;
inline constexpr std::size_t kPadId = 0;
inline constexpr const char* kPadToken = "<pad>";

enum class TaskFamily { SubjectVerb, Anaphora };

TaskFamily family_of(Rule r);

struct WordPair {
  std::string singular;
  std::string plural;
};

class Vocabulary {
 public:
  /// The built-in vocabulary.
  static const Vocabulary& builtin();

  std::vector<WordPair> nouns;
  std::vector<WordPair> main_verbs;      // intransitive, or "is"/"are" followed by an adjective
  std::vector<std::string> adjectives;
  std::vector<WordPair> embedded_verbs;  // transitive verbs inside relative clauses
  std::vector<std::string> reflexive_verbs;
  std::vector<std::string> prepositions;
  std::string singular_pronoun_male = "himself";
  std::string singular_pronoun_female = "herself";
  std::string plural_pronoun = "themselves";

  /// Token list; id = position, id 0 is the pad token.
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<std::size_t> id_of(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }

  /// Rebuilds the token table from the word lists; throws ConfigError on an empty slot.
  void finalize();

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t, std::less<>> ids_;
};

enum class GrammaticalNumber { Singular, Plural };

std::string to_string(GrammaticalNumber n);
GrammaticalNumber parse_number(std::string_view s);

struct SentenceStimulus {
  /// Left-padded ids, length kMaxLength.
  std::vector<std::size_t> tokens;
  /// One entry per token (multiword tokens keep their space).
  std::vector<std::string> surface;
  /// Subject (or antecedent) number, then verb (or pronoun) number.
  std::array<GrammaticalNumber, 2> features{};

  std::string text() const;
};

/// Every sentence of the family, grouped by feature cell relative to the
/// partition's number: pool[cell] with cell = {first matches, second matches}.
struct SentencePool {
  TaskFamily family;
  GrammaticalNumber partition;
  std::map<std::array<bool, 2>, std::vector<SentenceStimulus>> cells;

  std::size_t total() const;
};

SentencePool expand_templates(TaskFamily family, GrammaticalNumber partition,
                              const Vocabulary& vocab = Vocabulary::builtin());

/// Which data partition a sentence belongs to. Hash-based and seed-free, so
/// train/val/test sentence sets are disjoint for every role and seed.
Partition sentence_partition(const SentenceStimulus& s);

/// Greedy longest-match tokenization, left-padded to kMaxLength.
/// Throws ConfigError naming the first out-of-vocabulary word.
std::vector<std::size_t> tokenize(std::string_view sentence, const Vocabulary& vocab = Vocabulary::builtin());
std::string detokenize(const std::vector<std::size_t>& ids, const Vocabulary& vocab = Vocabulary::builtin());

/// Recomputes the two agreement features from the surface words.
std::array<GrammaticalNumber, 2> recompute_features(TaskFamily family, const std::vector<std::string>& surface,
                                                    const Vocabulary& vocab = Vocabulary::builtin());

struct LanguageExample {
  std::array<SentenceStimulus, 4> stimuli;
  std::size_t odd_index = 0;
};

/// Sentence pools split by partition, built once per (family, number).
class LanguageGenerator {
 public:
  explicit LanguageGenerator(Rule rule, const Vocabulary& vocab = Vocabulary::builtin());

  Rule rule() const { return rule_; }
  /// Sentences of `cell` available in `partition`.
  const std::vector<SentenceStimulus>& pool(Partition partition, const std::array<bool, 2>& cell) const;

  /// Throws GeneratorError if the cell pool cannot supply 4 distinct sentences.
  LanguageExample generate_example(const TaskSpec& task, Rng& rng) const;

 private:
  Rule rule_;
  std::map<std::pair<Partition, std::array<bool, 2>>, std::vector<SentenceStimulus>> pools_;
};

/// Recomputes features from surface forms and returns the single violator's slot.
std::optional<std::size_t> recompute_odd_index(const LanguageExample& ex, const TaskSpec& task,
                                               const Vocabulary& vocab = Vocabulary::builtin());

}  // namespace compostruct::language
