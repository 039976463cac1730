#include "compostruct/language.hpp"

#include <algorithm>
#include <set>

namespace compostruct::language {

TaskFamily family_of(Rule r) {
  switch (r) {
    case Rule::SvSingular:
    case Rule::SvPlural:
      return TaskFamily::SubjectVerb;
    case Rule::AnaphoraSingular:
    case Rule::AnaphoraPlural:
      return TaskFamily::Anaphora;
    default:
      throw ConfigError("rule " + to_string(r) + " is not a language rule");
  }
}

std::string to_string(GrammaticalNumber n) { return n == GrammaticalNumber::Singular ? "singular" : "plural"; }

GrammaticalNumber parse_number(std::string_view s) {
  if (s == "singular") return GrammaticalNumber::Singular;
  if (s == "plural") return GrammaticalNumber::Plural;
  throw ConfigError("unknown grammatical number '" + std::string(s) + "'");
}

const Vocabulary& Vocabulary::builtin() {
  static const Vocabulary v = [] {
    Vocabulary b;
    b.nouns = {{"farmer", "farmers"},   {"surgeon", "surgeons"},   {"consultant", "consultants"},
               {"manager", "managers"}, {"pilot", "pilots"},       {"officer", "officers"},
               {"senator", "senators"}, {"teacher", "teachers"},   {"author", "authors"},
               {"customer", "customers"}, {"dancer", "dancers"}, {"taxi driver", "taxi drivers"}};
    b.main_verbs = {{"is", "are"}, {"laughs", "laugh"}, {"smiles", "smile"}, {"swims", "swim"}};
    b.adjectives = {"old", "young", "tall", "short"};
    b.embedded_verbs = {{"likes", "like"}, {"hates", "hate"}, {"admires", "admire"}, {"loves", "love"}};
    b.reflexive_verbs = {"hurt", "doubted", "injured", "embarrassed"};
    b.prepositions = {"near", "behind", "in front of", "across from", "to the side of"};
    b.finalize();
    return b;
  }();
  return v;
}

void Vocabulary::finalize() {
  auto need = [](bool ok, const char* slot) {
    if (!ok) throw ConfigError(std::string("vocabulary slot '") + slot + "' needs at least 2 fillers");
  };
  need(nouns.size() >= 2, "nouns");
  need(main_verbs.size() >= 2, "main_verbs");
  need(embedded_verbs.size() >= 2, "embedded_verbs");
  need(reflexive_verbs.size() >= 2, "reflexive_verbs");
  need(prepositions.size() >= 2, "prepositions");
  const bool has_copula = std::any_of(main_verbs.begin(), main_verbs.end(), [](const WordPair& p) { return p.singular == "is"; });
  need(!has_copula || adjectives.size() >= 2, "adjectives");

  std::vector<std::string> words{"the", "that", singular_pronoun_male, singular_pronoun_female, plural_pronoun};
  auto add_pairs = [&](const std::vector<WordPair>& ps) {
    for (const auto& p : ps) {
      words.push_back(p.singular);
      words.push_back(p.plural);
    }
  };
  add_pairs(nouns);
  add_pairs(main_verbs);
  add_pairs(embedded_verbs);
  words.insert(words.end(), adjectives.begin(), adjectives.end());
  words.insert(words.end(), reflexive_verbs.begin(), reflexive_verbs.end());
  words.insert(words.end(), prepositions.begin(), prepositions.end());

  tokens_ = {kPadToken};
  ids_.clear();
  ids_.emplace(kPadToken, kPadId);
  for (const auto& w : words) {
    if (w.empty()) throw ConfigError("vocabulary contains an empty word");
    if (ids_.count(w)) continue;
    ids_.emplace(w, tokens_.size());
    tokens_.push_back(w);
  }
}

std::optional<std::size_t> Vocabulary::id_of(std::string_view token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::string SentenceStimulus::text() const {
  std::string out;
  for (const auto& w : surface) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::size_t SentencePool::total() const {
  std::size_t n = 0;
  for (const auto& [cell, v] : cells) n += v.size();
  return n;
}

namespace {

const std::string& form(const WordPair& p, GrammaticalNumber n) {
  return n == GrammaticalNumber::Singular ? p.singular : p.plural;
}

constexpr std::array<GrammaticalNumber, 2> kNumbers{GrammaticalNumber::Singular, GrammaticalNumber::Plural};

std::vector<std::size_t> ids_for(const std::vector<std::string>& surface, const Vocabulary& vocab) {
  if (surface.size() > kMaxLength)
    throw ConfigError("sentence of " + std::to_string(surface.size()) + " tokens exceeds max length " +
                      std::to_string(kMaxLength));
  std::vector<std::size_t> ids(kMaxLength - surface.size(), kPadId);
  for (const auto& w : surface) {
    auto id = vocab.id_of(w);
    if (!id) throw ConfigError("out-of-vocabulary word '" + w + "'");
    ids.push_back(*id);
  }
  return ids;
}

// Main predicates for one verb number: "is old", "laughs", ...
std::vector<std::vector<std::string>> predicates(const Vocabulary& vocab, GrammaticalNumber n) {
  std::vector<std::vector<std::string>> out;
  for (const auto& v : vocab.main_verbs) {
    if (v.singular == "is") {
      for (const auto& a : vocab.adjectives) out.push_back({form(v, n), a});
    } else {
      out.push_back({form(v, n)});
    }
  }
  return out;
}

std::vector<std::string> join(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Subject/antecedent noun phrase plus the material between it and the agreeing
// word, enumerated for a given first-noun number.
std::vector<std::vector<std::string>> sv_prefixes(const Vocabulary& vocab, GrammaticalNumber n1) {
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < vocab.nouns.size(); ++i) {
    const std::string& subj = form(vocab.nouns[i], n1);
    for (std::size_t j = 0; j < vocab.nouns.size(); ++j) {
      if (i == j) continue;
      for (GrammaticalNumber n2 : kNumbers) {
        const std::string& attr = form(vocab.nouns[j], n2);
        for (const auto& p : vocab.prepositions) out.push_back({"the", subj, p, "the", attr});
        for (const auto& e : vocab.embedded_verbs) {
          out.push_back({"the", subj, "that", "the", attr, form(e, n2)});
          out.push_back({"the", subj, "the", attr, form(e, n2)});
          out.push_back({"the", subj, "that", form(e, n1), "the", attr});
        }
      }
    }
  }
  return out;
}

std::vector<std::vector<std::string>> anaphora_prefixes(const Vocabulary& vocab, GrammaticalNumber n1) {
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < vocab.nouns.size(); ++i) {
    const std::string& ante = form(vocab.nouns[i], n1);
    for (std::size_t j = 0; j < vocab.nouns.size(); ++j) {
      if (i == j) continue;
      for (GrammaticalNumber n2 : kNumbers)
        for (const auto& e : vocab.embedded_verbs)
          for (const auto& r : vocab.reflexive_verbs)
            out.push_back({"the", ante, "that", "the", form(vocab.nouns[j], n2), form(e, n2), r});
    }
  }
  return out;
}

std::vector<std::string> pronouns(const Vocabulary& vocab, GrammaticalNumber n) {
  if (n == GrammaticalNumber::Singular) return {vocab.singular_pronoun_male, vocab.singular_pronoun_female};
  return {vocab.plural_pronoun};
}

}  // namespace

SentencePool expand_templates(TaskFamily family, GrammaticalNumber partition, const Vocabulary& vocab) {
  SentencePool pool{family, partition, {}};
  for (GrammaticalNumber first : kNumbers) {
    const auto prefixes = family == TaskFamily::SubjectVerb ? sv_prefixes(vocab, first) : anaphora_prefixes(vocab, first);
    for (GrammaticalNumber second : kNumbers) {
      const Cell cell{first == partition, second == partition};
      auto& bucket = pool.cells[cell];
      std::set<std::vector<std::string>> seen;
      std::vector<std::vector<std::string>> tails;
      if (family == TaskFamily::SubjectVerb) {
        tails = predicates(vocab, second);
      } else {
        for (const auto& p : pronouns(vocab, second)) tails.push_back({p});
      }
      for (const auto& pre : prefixes) {
        for (const auto& tail : tails) {
          auto words = join({pre, tail});
          if (!seen.insert(words).second) continue;
          SentenceStimulus s;
          s.tokens = ids_for(words, vocab);
          s.surface = std::move(words);
          s.features = {first, second};
          bucket.push_back(std::move(s));
        }
      }
      if (bucket.empty()) throw ConfigError("expand_templates: empty cell");
    }
  }
  return pool;
}

Partition sentence_partition(const SentenceStimulus& s) {
  const std::uint64_t h = fnv1a64(s.text()) % 10;
  if (h < 8) return Partition::Train;
  return h == 8 ? Partition::Val : Partition::Test;
}

std::vector<std::size_t> tokenize(std::string_view sentence, const Vocabulary& vocab) {
  std::vector<std::string> words;
  std::size_t pos = 0;
  while (pos < sentence.size()) {
    if (sentence[pos] == ' ') {
      ++pos;
      continue;
    }
    // Longest vocabulary entry starting here that ends on a word boundary.
    std::size_t best = 0;
    for (const auto& tok : vocab.tokens()) {
      const std::size_t len = tok.size();
      if (len <= best || sentence.compare(pos, len, tok) != 0) continue;
      if (pos + len < sentence.size() && sentence[pos + len] != ' ') continue;
      best = len;
    }
    if (best == 0) {
      std::size_t end = sentence.find(' ', pos);
      if (end == std::string_view::npos) end = sentence.size();
      throw ConfigError("out-of-vocabulary word '" + std::string(sentence.substr(pos, end - pos)) + "'");
    }
    words.emplace_back(sentence.substr(pos, best));
    pos += best;
  }
  return ids_for(words, vocab);
}

std::string detokenize(const std::vector<std::size_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t id : ids) {
    if (id == kPadId) continue;
    if (id >= vocab.size()) throw ConfigError("token id " + std::to_string(id) + " out of range");
    if (!out.empty()) out += ' ';
    out += vocab.tokens()[id];
  }
  return out;
}

std::array<GrammaticalNumber, 2> recompute_features(TaskFamily family, const std::vector<std::string>& surface,
                                                    const Vocabulary& vocab) {
  if (surface.size() < 3) throw ConfigError("sentence too short to carry agreement features");
  auto noun_number = [&](const std::string& w) {
    for (const auto& p : vocab.nouns) {
      if (w == p.singular) return GrammaticalNumber::Singular;
      if (w == p.plural) return GrammaticalNumber::Plural;
    }
    throw ConfigError("second word '" + w + "' is not a noun");
  };
  std::array<GrammaticalNumber, 2> f{noun_number(surface[1]), GrammaticalNumber::Singular};
  if (family == TaskFamily::Anaphora) {
    const std::string& pron = surface.back();
    if (pron == vocab.plural_pronoun) {
      f[1] = GrammaticalNumber::Plural;
    } else if (pron != vocab.singular_pronoun_male && pron != vocab.singular_pronoun_female) {
      throw ConfigError("last word '" + pron + "' is not a reflexive pronoun");
    }
    return f;
  }
  const bool adj = std::find(vocab.adjectives.begin(), vocab.adjectives.end(), surface.back()) != vocab.adjectives.end();
  const std::string& verb = surface[surface.size() - (adj ? 2 : 1)];
  for (const auto& p : vocab.main_verbs) {
    if (verb == p.singular) return f;
    if (verb == p.plural) {
      f[1] = GrammaticalNumber::Plural;
      return f;
    }
  }
  throw ConfigError("could not find the main verb in '" + verb + "'");
}

LanguageGenerator::LanguageGenerator(Rule rule, const Vocabulary& vocab) : rule_(rule) {
  const GrammaticalNumber number = rule_is_plural(rule) ? GrammaticalNumber::Plural : GrammaticalNumber::Singular;
  SentencePool pool = expand_templates(family_of(rule), number, vocab);
  for (auto& [cell, sentences] : pool.cells) {
    for (Partition p : kAllPartitions) pools_[{p, cell}];
    for (auto& s : sentences) pools_[{sentence_partition(s), cell}].push_back(std::move(s));
  }
}

const std::vector<SentenceStimulus>& LanguageGenerator::pool(Partition partition, const Cell& cell) const {
  return pools_.at({partition, cell});
}

LanguageExample LanguageGenerator::generate_example(const TaskSpec& task, Rng& rng) const {
  if (task.rule != rule_) throw ConfigError("generator for " + to_string(rule_) + " got task " + task.name());
  const CellPlan plan = plan_cells(task, rng, false);
  LanguageExample ex;
  ex.odd_index = plan.odd_index;
  std::set<const SentenceStimulus*> used;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& candidates = pool(task.partition, plan.cells[i]);
    const auto same_cell = static_cast<std::size_t>(std::count(plan.cells.begin(), plan.cells.end(), plan.cells[i]));
    if (candidates.size() < same_cell)
      throw GeneratorError("sentence pool for " + task.name() + " has " + std::to_string(candidates.size()) +
                           " sentences, need " + std::to_string(same_cell) + " distinct");
    const SentenceStimulus* pick = nullptr;
    do {
      pick = &candidates[rng.below(candidates.size())];
    } while (used.count(pick));
    used.insert(pick);
    ex.stimuli[i] = *pick;
  }
  return ex;
}

std::optional<std::size_t> recompute_odd_index(const LanguageExample& ex, const TaskSpec& task, const Vocabulary& vocab) {
  const TaskFamily family = family_of(task.rule);
  const GrammaticalNumber number = rule_is_plural(task.rule) ? GrammaticalNumber::Plural : GrammaticalNumber::Singular;
  std::optional<std::size_t> odd;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto f = recompute_features(family, ex.stimuli[i].surface, vocab);
    if (!follows_rule(task, Cell{f[0] == number, f[1] == number})) {
      if (odd) return std::nullopt;
      odd = i;
    }
  }
  return odd;
}

}  // namespace compostruct::language
