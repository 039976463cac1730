#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "compostruct/language.hpp"
#include "doctest.h"

using namespace compostruct;
using namespace compostruct::language;

namespace {

using GN = GrammaticalNumber;

// Word lists typed out independently of the library vocabulary.
const std::set<std::string> kSingularNouns{"farmer", "surgeon", "consultant", "manager", "pilot",    "officer",
                                           "senator", "teacher", "author",    "customer", "dancer", "taxi driver"};
const std::set<std::string> kPluralNouns{"farmers",  "surgeons", "consultants", "managers",  "pilots",  "officers",
                                         "senators", "teachers", "authors",     "customers", "dancers", "taxi drivers"};
const std::set<std::string> kSingularVerbs{"is", "laughs", "smiles", "swims"};
const std::set<std::string> kPluralVerbs{"are", "laugh", "smile", "swim"};
const std::set<std::string> kAdjectives{"old", "young", "tall", "short"};

// Subject/antecedent number and verb/pronoun number read off the words.
std::array<GN, 2> oracle_features(TaskFamily fam, const std::vector<std::string>& w) {
  REQUIRE(w.size() >= 4);
  CHECK(w[0] == "the");
  const bool subj_sing = kSingularNouns.count(w[1]) == 1;
  CHECK((subj_sing || kPluralNouns.count(w[1]) == 1));
  const GN first = subj_sing ? GN::Singular : GN::Plural;
  if (fam == TaskFamily::Anaphora) {
    const std::string& pron = w.back();
    CHECK((pron == "himself" || pron == "herself" || pron == "themselves"));
    return {first, pron == "themselves" ? GN::Plural : GN::Singular};
  }
  const std::string& verb = kAdjectives.count(w.back()) ? w[w.size() - 2] : w.back();
  CHECK((kSingularVerbs.count(verb) + kPluralVerbs.count(verb)) == 1);
  return {first, kSingularVerbs.count(verb) ? GN::Singular : GN::Plural};
}

Cell oracle_cell(Rule rule, const SentenceStimulus& s) {
  const GN want = rule_is_plural(rule) ? GN::Plural : GN::Singular;
  const auto f = oracle_features(family_of(rule), s.surface);
  return {f[0] == want, f[1] == want};
}

bool has_shape(const std::vector<SentenceStimulus>& pool, const std::vector<std::string>& head,
               const std::vector<std::string>& tail, std::size_t length) {
  return std::any_of(pool.begin(), pool.end(), [&](const SentenceStimulus& s) {
    const auto& w = s.surface;
    return w.size() == length && std::equal(head.begin(), head.end(), w.begin()) &&
           std::equal(tail.rbegin(), tail.rend(), w.rbegin());
  });
}

constexpr std::array<Rule, 4> kLanguageRules{Rule::SvSingular, Rule::SvPlural, Rule::AnaphoraSingular,
                                             Rule::AnaphoraPlural};

}  // namespace

TEST_CASE("vocabulary ids are a bijection") {
  const auto& v = Vocabulary::builtin();
  CHECK(v.tokens()[kPadId] == kPadToken);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(seen.insert(v.tokens()[i]).second);
    CHECK(v.id_of(v.tokens()[i]) == i);
  }
  CHECK_FALSE(v.id_of("giraffe").has_value());
  CHECK(v.id_of("taxi driver").has_value());

  Vocabulary bad = v;
  bad.reflexive_verbs = {"hurt"};
  CHECK_THROWS_AS(bad.finalize(), ConfigError);
  bad = v;
  bad.nouns.clear();
  CHECK_THROWS_AS(bad.finalize(), ConfigError);
}

TEST_CASE("tokenize examples") {
  const auto ids = tokenize("the taxi driver in front of the pilots is old");
  CHECK(ids.size() == kMaxLength);
  const auto& v = Vocabulary::builtin();
  // 7 tokens: the | taxi driver | in front of | the | pilots | is | old
  std::size_t pads = 0;
  for (auto id : ids) pads += id == kPadId ? 1 : 0;
  CHECK(pads == kMaxLength - 7);
  CHECK(ids[kMaxLength - 6] == *v.id_of("taxi driver"));
  CHECK(ids[kMaxLength - 5] == *v.id_of("in front of"));
  CHECK(detokenize(ids) == "the taxi driver in front of the pilots is old");

  try {
    tokenize("the farmer near the giraffe is old");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("giraffe") != std::string::npos);
  }
}

TEST_CASE("pools: shapes, features, round trips") {
  for (TaskFamily fam : {TaskFamily::SubjectVerb, TaskFamily::Anaphora})
    for (GN part : {GN::Singular, GN::Plural}) {
      const auto pool = expand_templates(fam, part);
      CAPTURE(static_cast<int>(fam));
      CAPTURE(to_string(part));
      CHECK(pool.cells.size() == 4);
      std::set<std::vector<std::size_t>> ids;
      std::size_t n = 0;
      for (const auto& [cell, sentences] : pool.cells) {
        CHECK(sentences.size() >= 100);
        for (const auto& s : sentences) {
          const auto f = oracle_features(fam, s.surface);
          CHECK(f == s.features);
          CHECK(recompute_features(fam, s.surface) == f);
          CHECK(Cell{f[0] == part, f[1] == part} == cell);
          CHECK(s.tokens.size() == kMaxLength);
          CHECK(tokenize(s.text()) == s.tokens);
          CHECK(detokenize(s.tokens) == s.text());
          ids.insert(s.tokens);
          ++n;
        }
      }
      CHECK(ids.size() == n);
      CHECK(pool.total() == n);
    }
}

TEST_CASE("template shapes") {
  const auto sv_sing = expand_templates(TaskFamily::SubjectVerb, GN::Singular);
  // "the farmer near the <noun> is old"
  CHECK(has_shape(sv_sing.cells.at({true, true}), {"the", "farmer", "near", "the"}, {"is", "old"}, 7));
  // Singular subject with a plural verb after a plural attractor.
  CHECK(has_shape(sv_sing.cells.at({true, false}), {"the", "farmer", "near", "the", "pilots"}, {"laugh"}, 6));
  const auto ana_plur = expand_templates(TaskFamily::Anaphora, GN::Plural);
  // "the consultants that the <nouns> love injured themselves"
  CHECK(has_shape(ana_plur.cells.at({true, true}), {"the", "consultants", "that", "the"},
                  {"love", "injured", "themselves"}, 8));
  const auto ana_sing = expand_templates(TaskFamily::Anaphora, GN::Singular);
  CHECK(has_shape(ana_sing.cells.at({true, false}), {"the", "farmer", "that", "the"}, {"doubted", "themselves"}, 8));
}

TEST_CASE("partitions are disjoint at the sentence level") {
  for (Rule rule : kLanguageRules) {
    const LanguageGenerator gen(rule);
    std::set<std::string> seen[3];
    for (std::size_t p = 0; p < 3; ++p)
      for (bool a : {true, false})
        for (bool b : {true, false})
          for (const auto& s : gen.pool(kAllPartitions[p], {a, b})) {
            CHECK(sentence_partition(s) == kAllPartitions[p]);
            seen[p].insert(s.text());
          }
    for (std::size_t p = 0; p < 3; ++p) {
      CHECK(!seen[p].empty());
      for (std::size_t q = p + 1; q < 3; ++q)
        for (const auto& t : seen[p]) CHECK(seen[q].count(t) == 0);
    }
  }
}

TEST_CASE("role semantics per rule") {
  for (Rule rule : kLanguageRules) {
    CAPTURE(to_string(rule));
    const LanguageGenerator gen(rule);
    const auto factors = rule_factors(rule);
    auto check_distinct = [](const LanguageExample& ex) {
      std::set<std::string> texts;
      for (const auto& s : ex.stimuli) texts.insert(s.text());
      CHECK(texts.size() == 4);
    };
    SUBCASE("base") {
      TaskSpec t{rule, Role::Base, std::nullopt, Partition::Train, 1};
      Rng rng(1, "lang-test");
      std::set<std::pair<bool, bool>> odd_cells;
      for (int i = 0; i < 300; ++i) {
        const auto ex = gen.generate_example(t, rng);
        check_distinct(ex);
        for (std::size_t k = 0; k < 4; ++k) {
          const Cell c = oracle_cell(rule, ex.stimuli[k]);
          if (k == ex.odd_index)
            odd_cells.insert({c[0], c[1]});
          else
            CHECK((c[0] && c[1]));
        }
        CHECK(recompute_odd_index(ex, t) == ex.odd_index);
      }
      CHECK(odd_cells == std::set<std::pair<bool, bool>>{{false, true}, {true, false}});
    }
    SUBCASE("mask_train") {
      for (std::size_t slot = 0; slot < 2; ++slot) {
        TaskSpec t{rule, Role::MaskTrain, factors[slot], Partition::Train, 1};
        Rng rng(2, "lang-test", {slot});
        for (int i = 0; i < 200; ++i) {
          const auto ex = gen.generate_example(t, rng);
          check_distinct(ex);
          for (std::size_t k = 0; k < 4; ++k) {
            const Cell c = oracle_cell(rule, ex.stimuli[k]);
            CHECK(c[slot] == (k != ex.odd_index));
            CHECK((c[0] || c[1]));
          }
          CHECK(recompute_odd_index(ex, t) == ex.odd_index);
        }
      }
    }
    SUBCASE("test roles") {
      for (Role role : {Role::TestTarget, Role::TestOther})
        for (std::size_t slot = 0; slot < 2; ++slot) {
          TaskSpec t{rule, role, factors[slot], Partition::Test, 1};
          Rng rng(3, "lang-test", {slot});
          const std::size_t flipped = role == Role::TestTarget ? slot : 1 - slot;
          for (int i = 0; i < 100; ++i) {
            const auto ex = gen.generate_example(t, rng);
            check_distinct(ex);
            for (std::size_t k = 0; k < 4; ++k) {
              const Cell c = oracle_cell(rule, ex.stimuli[k]);
              if (k == ex.odd_index) {
                CHECK_FALSE(c[flipped]);
                CHECK(c[1 - flipped]);
              } else {
                CHECK((c[0] && c[1]));
              }
            }
          }
        }
    }
  }
}

TEST_CASE("paper examples for test roles") {
  SUBCASE("subject, singular") {
    const LanguageGenerator gen(Rule::SvSingular);
    TaskSpec t{Rule::SvSingular, Role::TestTarget, Factor::Subject, Partition::Test, 1};
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
      const auto ex = gen.generate_example(t, rng);
      const auto f = oracle_features(TaskFamily::SubjectVerb, ex.stimuli[ex.odd_index].surface);
      CHECK(f[0] == GN::Plural);
      CHECK(f[1] == GN::Singular);
    }
  }
  SUBCASE("pronoun, singular") {
    const LanguageGenerator gen(Rule::AnaphoraSingular);
    TaskSpec t{Rule::AnaphoraSingular, Role::TestTarget, Factor::Pronoun, Partition::Test, 1};
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
      const auto ex = gen.generate_example(t, rng);
      const auto& w = ex.stimuli[ex.odd_index].surface;
      CHECK(w.back() == "themselves");
      CHECK(kSingularNouns.count(w[1]) == 1);
    }
  }
}

TEST_CASE("odd slot is uniform over 4000 examples") {
  const LanguageGenerator gen(Rule::AnaphoraPlural);
  TaskSpec t{Rule::AnaphoraPlural, Role::Base, std::nullopt, Partition::Train, 1};
  Rng rng(4, "lang-uniform");
  constexpr int kN = 4000;
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < kN; ++i) {
    const auto ex = gen.generate_example(t, rng);
    ++counts[ex.odd_index];
  }
  const double se = std::sqrt(0.25 * 0.75 / kN);
  for (int c : counts) CHECK(std::abs(c / static_cast<double>(kN) - 0.25) <= 3 * se);
}
