#include "compostruct/task.hpp"

namespace compostruct {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<E, const char*>, N>& table, const char* what) {
  for (const auto& [e, name] : table)
    if (s == name) return e;
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string name_of(E e, const std::array<std::pair<E, const char*>, N>& table) {
  for (const auto& [v, name] : table)
    if (v == e) return name;
  return "?";
}

constexpr std::array<std::pair<Rule, const char*>, 7> kRuleNames{{
    {Rule::InsideContact, "InsideContact"},
    {Rule::NumberContact, "NumberContact"},
    {Rule::InsideNumber, "InsideNumber"},
    {Rule::SvSingular, "SvSingular"},
    {Rule::SvPlural, "SvPlural"},
    {Rule::AnaphoraSingular, "AnaphoraSingular"},
    {Rule::AnaphoraPlural, "AnaphoraPlural"},
}};

constexpr std::array<std::pair<Factor, const char*>, 7> kFactorNames{{
    {Factor::Inside, "Inside"},
    {Factor::Contact, "Contact"},
    {Factor::Number, "Number"},
    {Factor::Subject, "Subject"},
    {Factor::Verb, "Verb"},
    {Factor::Antecedent, "Antecedent"},
    {Factor::Pronoun, "Pronoun"},
}};

constexpr std::array<std::pair<Role, const char*>, 4> kRoleNames{{
    {Role::Base, "base"},
    {Role::MaskTrain, "mask_train"},
    {Role::TestTarget, "test_target"},
    {Role::TestOther, "test_other"},
}};

constexpr std::array<std::pair<Partition, const char*>, 3> kPartitionNames{{
    {Partition::Train, "train"},
    {Partition::Val, "val"},
    {Partition::Test, "test"},
}};

}  // namespace

std::string to_string(Rule r) { return name_of(r, kRuleNames); }
std::string to_string(Factor f) { return name_of(f, kFactorNames); }
std::string to_string(Role r) { return name_of(r, kRoleNames); }
std::string to_string(Partition p) { return name_of(p, kPartitionNames); }
Rule parse_rule(std::string_view s) { return parse_enum(s, kRuleNames, "rule"); }
Factor parse_factor(std::string_view s) { return parse_enum(s, kFactorNames, "subroutine"); }
Role parse_role(std::string_view s) { return parse_enum(s, kRoleNames, "role"); }
Partition parse_partition(std::string_view s) { return parse_enum(s, kPartitionNames, "partition"); }

Domain rule_domain(Rule r) {
  switch (r) {
    case Rule::InsideContact:
    case Rule::NumberContact:
    case Rule::InsideNumber:
      return Domain::Vision;
    default:
      return Domain::Language;
  }
}

std::array<Factor, 2> rule_factors(Rule r) {
  switch (r) {
    case Rule::InsideContact:
      return {Factor::Inside, Factor::Contact};
    case Rule::NumberContact:
      return {Factor::Number, Factor::Contact};
    case Rule::InsideNumber:
      return {Factor::Inside, Factor::Number};
    case Rule::SvSingular:
    case Rule::SvPlural:
      return {Factor::Subject, Factor::Verb};
    case Rule::AnaphoraSingular:
    case Rule::AnaphoraPlural:
      return {Factor::Antecedent, Factor::Pronoun};
  }
  throw ConfigError("rule_factors: bad rule");
}

std::size_t factor_slot(Rule r, Factor f) {
  const auto fs = rule_factors(r);
  if (fs[0] == f) return 0;
  if (fs[1] == f) return 1;
  throw ConfigError("subroutine " + to_string(f) + " is not part of rule " + to_string(r));
}

bool rule_is_plural(Rule r) { return r == Rule::SvPlural || r == Rule::AnaphoraPlural; }

void TaskSpec::validate() const {
  if (size == 0) throw ConfigError("task " + name() + ": size must be positive");
  if (role == Role::Base) {
    if (subroutine) throw ConfigError("task " + name() + ": base role takes no subroutine");
  } else {
    if (!subroutine) throw ConfigError("task " + name() + ": role " + to_string(role) + " needs a subroutine");
    factor_slot(rule, *subroutine);
  }
}

std::string TaskSpec::name() const {
  std::string n = to_string(rule) + "." + to_string(role);
  if (subroutine) n += "." + to_string(*subroutine);
  return n + "." + to_string(partition);
}

bool follows_rule(const TaskSpec& task, const Cell& cell) {
  if (task.role == Role::MaskTrain) return cell[factor_slot(task.rule, *task.subroutine)];
  return cell[0] && cell[1];
}

CellPlan plan_cells(const TaskSpec& task, Rng& rng, bool allow_double_violation) {
  task.validate();
  CellPlan plan;
  plan.odd_index = static_cast<std::size_t>(rng.below(4));
  Cell follower{true, true};
  Cell odd{};
  switch (task.role) {
    case Role::Base: {
      static constexpr std::array<Cell, 3> kViolators{Cell{false, true}, Cell{true, false}, Cell{false, false}};
      odd = kViolators[rng.below(allow_double_violation ? 3 : 2)];
      break;
    }
    case Role::TestTarget:
    case Role::TestOther: {
      const std::size_t target = factor_slot(task.rule, *task.subroutine);
      const std::size_t flipped = task.role == Role::TestTarget ? target : 1 - target;
      odd = {true, true};
      odd[flipped] = false;
      break;
    }
    case Role::MaskTrain: {
      const std::size_t sr = factor_slot(task.rule, *task.subroutine);
      for (std::size_t i = 0; i < 4; ++i) {
        Cell c{};
        c[sr] = i != plan.odd_index;
        c[1 - sr] = (i == plan.odd_index && !allow_double_violation) ? true : rng.coin();
        plan.cells[i] = c;
      }
      return plan;
    }
  }
  for (std::size_t i = 0; i < 4; ++i) plan.cells[i] = i == plan.odd_index ? odd : follower;
  return plan;
}

}  // namespace compostruct
