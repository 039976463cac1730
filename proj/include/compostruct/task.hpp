#pragma once

// Task vocabulary shared by the vision and language generators: which
// compositional rule, which subroutine, which dataset role, which partition.

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "compostruct/rng.hpp"

namespace compostruct {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A sampler could not realize a requested cell.
class GeneratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Domain { Vision, Language };

enum class Rule {
  InsideContact,
  NumberContact,
  InsideNumber,
  SvSingular,
  SvPlural,
  AnaphoraSingular,
  AnaphoraPlural,
};

/// A subroutine: one binary factor of a compositional rule.
enum class Factor { Inside, Contact, Number, Subject, Verb, Antecedent, Pronoun };

enum class Role { Base, MaskTrain, TestTarget, TestOther };

enum class Partition { Train, Val, Test };

inline constexpr std::array<Rule, 7> kAllRules{Rule::InsideContact,  Rule::NumberContact, Rule::InsideNumber,
                                               Rule::SvSingular,     Rule::SvPlural,      Rule::AnaphoraSingular,
                                               Rule::AnaphoraPlural};
inline constexpr std::array<Partition, 3> kAllPartitions{Partition::Train, Partition::Val, Partition::Test};

std::string to_string(Rule r);
std::string to_string(Factor f);
std::string to_string(Role r);
std::string to_string(Partition p);
Rule parse_rule(std::string_view s);
Factor parse_factor(std::string_view s);
Role parse_role(std::string_view s);
Partition parse_partition(std::string_view s);

Domain rule_domain(Rule r);
/// The two subroutines composed by a rule, in canonical order.
std::array<Factor, 2> rule_factors(Rule r);
/// Index (0 or 1) of `f` within rule_factors(r); throws ConfigError if absent.
std::size_t factor_slot(Rule r, Factor f);
/// For language rules: true for the plural partition.
bool rule_is_plural(Rule r);

struct TaskSpec {
  Rule rule = Rule::InsideContact;
  Role role = Role::Base;
  std::optional<Factor> subroutine;
  Partition partition = Partition::Train;
  std::size_t size = 0;

  /// Throws ConfigError unless role/subroutine/size are consistent.
  void validate() const;
  /// Stable identifier such as "InsideContact.test_target.Inside.val".
  std::string name() const;
};

/// Truth values of the rule's two factors for one stimulus; true = "+".
using Cell = std::array<bool, 2>;

/// Whether a stimulus in `cell` follows the rule that governs `task`.
bool follows_rule(const TaskSpec& task, const Cell& cell);

/// Cells for the four stimuli of one example plus the violator's slot.
struct CellPlan {
  std::array<Cell, 4> cells{};
  std::size_t odd_index = 0;
};

/// Draws the factor cells for one example of `task`.
///   base: three (+,+), odd uniform over the other admissible cells.
///   mask_train(SR): followers +SR with the other factor free, odd -SR.
///   test_target(SR): three (+,+), odd differs only in SR.
///   test_other(SR): three (+,+), odd differs only in the other factor.
/// With `allow_double_violation` false the (-,-) cell is never drawn: the
/// language tasks exclude it because it is grammatical in the opposite
/// number partition.
CellPlan plan_cells(const TaskSpec& task, Rng& rng, bool allow_double_violation);

}  // namespace compostruct
