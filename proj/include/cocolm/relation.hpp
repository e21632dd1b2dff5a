#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "cocolm/error.hpp"

namespace cocolm {

// Discourse relations first, in a fixed order that doubles as the label index
// of the relation head. CoOccurrence is last and is not a discourse label.
enum class RelationType : std::uint8_t {
  Precedence,
  Succession,
  Synchronous,
  Reason,
  Result,
  Condition,
  Contrast,
  Concession,
  Conjunction,
  Instantiation,
  Restatement,
  Alternative,
  ChosenAlternative,
  Exception,
  CoOccurrence,
};

inline constexpr int kNumRelationTypes = 15;
inline constexpr int kNumDiscourseRelations = 14;

inline constexpr std::array<std::string_view, kNumRelationTypes> kRelationNames = {
    "Precedence",  "Succession",    "Synchronous", "Reason",      "Result",
    "Condition",   "Contrast",      "Concession",  "Conjunction", "Instantiation",
    "Restatement", "Alternative",   "ChosenAlternative", "Exception", "CoOccurrence",
};

constexpr bool is_discourse(RelationType r) { return r != RelationType::CoOccurrence; }

constexpr int relation_index(RelationType r) { return static_cast<int>(r); }

constexpr RelationType relation_from_index(int i) { return static_cast<RelationType>(i); }

inline std::string_view relation_name(RelationType r) { return kRelationNames[relation_index(r)]; }

inline std::optional<RelationType> try_parse_relation(std::string_view text) {
  for (int i = 0; i < kNumRelationTypes; ++i) {
    const auto name = kRelationNames[i];
    if (name.size() != text.size()) continue;
    const bool same = std::equal(name.begin(), name.end(), text.begin(), [](char a, char b) {
      return std::tolower(static_cast<unsigned char>(a)) ==
             std::tolower(static_cast<unsigned char>(b));
    });
    if (same) return relation_from_index(i);
  }
  return std::nullopt;
}

inline RelationType parse_relation(std::string_view text) {
  if (auto r = try_parse_relation(text)) return *r;
  throw Error(ErrorCode::UnknownRelationLabel, "unknown relation '" + std::string(text) + "'");
}

// Small fixed-size set keyed by relation index.
class RelationSet {
 public:
  RelationSet() = default;
  RelationSet(std::initializer_list<RelationType> items) {
    for (auto r : items) insert(r);
  }

  void insert(RelationType r) { bits_ |= (1u << relation_index(r)); }
  bool contains(RelationType r) const { return (bits_ >> relation_index(r)) & 1u; }
  bool operator==(const RelationSet&) const = default;

 private:
  std::uint32_t bits_ = 0;
};

}  // namespace cocolm
