#pragma once

#include <algorithm>
#include <array>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cocolm/kg_store.hpp"
#include "cocolm/walk_sampler.hpp"

namespace cocolm {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr TokenId kNumReserved = 5;
inline constexpr std::array<const char*, kNumReserved> kReservedTokens = {"[PAD]", "[UNK]", "[CLS]",
                                                                          "[SEP]", "[MASK]"};

// Relation -> connective words, discourse relations only.
class ConnectiveLexicon {
 public:
  ConnectiveLexicon() {
    static const std::array<const char*, kNumDiscourseRelations> defaults = {
        "then",        "after",           "meanwhile", "because", "so",
        "if",          "but",             "although",  "and",     "for example",
        "in other words", "or",           "instead",   "except",
    };
    for (int i = 0; i < kNumDiscourseRelations; ++i) entries_[i] = detail::words(defaults[i]);
  }

  // Applies a JSON object of relation name -> connective string on top of the defaults.
  static ConnectiveLexicon from_json(const nlohmann::json& overrides) {
    ConnectiveLexicon lex;
    if (!overrides.is_object()) throw Error(ErrorCode::ConfigParse, "lexicon must be a JSON object");
    for (const auto& [key, value] : overrides.items()) {
      const auto rel = parse_relation(key);
      if (!is_discourse(rel)) {
        throw Error(ErrorCode::InvalidConfig, "CoOccurrence cannot have a connective");
      }
      auto w = detail::words(value.get<std::string>());
      if (w.empty()) throw Error(ErrorCode::InvalidConfig, "empty connective for " + key);
      lex.entries_[relation_index(rel)] = std::move(w);
    }
    lex.validate();
    return lex;
  }

  const std::vector<std::string>& connective(RelationType r) const {
    if (!is_discourse(r)) throw Error(ErrorCode::InvalidConfig, "CoOccurrence has no connective");
    return entries_[relation_index(r)];
  }

  // Relation whose connective starts with `word`, if any. First words are unique.
  std::optional<RelationType> relation_for_first_word(const std::string& word) const {
    for (int i = 0; i < kNumDiscourseRelations; ++i) {
      if (entries_[i].front() == word) return relation_from_index(i);
    }
    return std::nullopt;
  }

  std::set<std::string> all_words() const {
    std::set<std::string> out;
    for (const auto& e : entries_) out.insert(e.begin(), e.end());
    return out;
  }

 private:
  void validate() const {
    std::set<std::string> firsts;
    for (const auto& e : entries_) {
      if (!firsts.insert(e.front()).second) {
        throw Error(ErrorCode::InvalidConfig, "connectives must start with distinct words");
      }
    }
  }

  std::array<std::vector<std::string>, kNumDiscourseRelations> entries_;
};

class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : kReservedTokens) add(t);
  }

  // Builds from explicit tokens, which take ids kNumReserved, kNumReserved+1, ...
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const auto& t : tokens) {
      if (v.index_.count(t)) throw Error(ErrorCode::InvalidConfig, "duplicate vocabulary token " + t);
      v.add(t);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw Error(ErrorCode::IdOutOfRange, "token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<TokenId> encode(std::span<const std::string> words) const {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

  void write(std::ostream& out) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
  }

  static Vocabulary read(std::istream& in) {
    std::vector<std::pair<TokenId, std::string>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      detail::strip_cr(line);
      if (line.empty()) continue;
      const auto fields = detail::split(line, '\t');
      TokenId id = 0;
      if (fields.size() != 2 || fields[0].empty() || !detail::parse_number(fields[1], id)) {
        detail::line_error(ErrorCode::MalformedLine, "vocab", line_no, "expected token<TAB>id");
      }
      rows.emplace_back(id, std::string(fields[0]));
    }
    std::sort(rows.begin(), rows.end());
    Vocabulary v;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].first != static_cast<TokenId>(i)) {
        throw Error(ErrorCode::MalformedLine, "vocab ids are not dense");
      }
      if (i < kNumReserved) {
        if (rows[i].second != kReservedTokens[i]) {
          throw Error(ErrorCode::MalformedLine, "reserved token mismatch at id " + std::to_string(i));
        }
        continue;
      }
      if (v.index_.count(rows[i].second)) throw Error(ErrorCode::MalformedLine, "duplicate token");
      v.add(rows[i].second);
    }
    if (v.size() < kNumReserved) throw Error(ErrorCode::MalformedLine, "vocab lacks reserved tokens");
    return v;
  }

 private:
  void add(const std::string& t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Counts words over the corpus, keeps connective words unconditionally and
// node words at or above min_count. Ids follow descending count, then
// lexicographic order.
inline Vocabulary build_vocab(std::span<const EventualityPath> corpus, const KnowledgeGraph& graph,
                              const ConnectiveLexicon& lexicon, std::size_t min_count = 1) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "cannot build a vocabulary from no paths");
  std::map<std::string, std::size_t> node_counts;
  std::map<std::string, std::size_t> connective_counts;
  for (const auto& w : lexicon.all_words()) connective_counts[w] = 0;
  for (const auto& path : corpus) {
    for (auto id : path.nodes) {
      for (const auto& w : graph.node(id).text) ++node_counts[w];
    }
    for (auto r : path.relations) {
      for (const auto& w : lexicon.connective(r)) ++connective_counts[w];
    }
  }
  std::map<std::string, std::size_t> kept;
  for (const auto& [w, c] : node_counts) {
    if (c >= min_count) kept[w] = c;
  }
  for (const auto& [w, c] : connective_counts) {
    auto it = node_counts.find(w);
    kept[w] = c + (it == node_counts.end() ? 0 : it->second);
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(kept.begin(), kept.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [w, c] : ordered) {
    const bool reserved = std::find_if(kReservedTokens.begin(), kReservedTokens.end(),
                                       [&](const char* r) { return w == r; }) != kReservedTokens.end();
    if (!reserved) tokens.push_back(w);
  }
  return Vocabulary::from_tokens(tokens);
}

struct EventualitySpan {
  int start = 0;
  int end = 0;  // exclusive
  NodeId node = 0;
  int length() const { return end - start; }
  bool operator==(const EventualitySpan&) const = default;
};

struct ConnectiveSpan {
  int start = 0;
  int end = 0;  // exclusive
  RelationType relation = RelationType::Precedence;
  int length() const { return end - start; }
  bool operator==(const ConnectiveSpan&) const = default;
};

struct TokenSequence {
  std::vector<TokenId> token_ids;
  std::vector<EventualitySpan> eventuality_spans;
  std::vector<ConnectiveSpan> connective_spans;

  bool operator==(const TokenSequence&) const = default;
};

inline TokenSequence verbalize(const EventualityPath& path, const KnowledgeGraph& graph,
                               const ConnectiveLexicon& lexicon, const Vocabulary& vocab) {
  TokenSequence seq;
  auto append = [&](std::span<const std::string> words) {
    const auto start = static_cast<int>(seq.token_ids.size());
    for (const auto& w : words) seq.token_ids.push_back(vocab.id(w));
    return std::pair{start, static_cast<int>(seq.token_ids.size())};
  };
  for (std::size_t i = 0; i < path.nodes.size(); ++i) {
    if (path.nodes[i] >= graph.num_nodes()) {
      throw Error(ErrorCode::UnknownNode, "path references node " + std::to_string(path.nodes[i]));
    }
    if (i > 0) {
      const auto rel = path.relations[i - 1];
      auto [s, e] = append(lexicon.connective(rel));
      seq.connective_spans.push_back({s, e, rel});
    }
    auto [s, e] = append(graph.node(path.nodes[i]).text);
    seq.eventuality_spans.push_back({s, e, path.nodes[i]});
  }
  return seq;
}

inline std::vector<std::string> decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (auto id : ids) words.push_back(vocab.token(id));
  return words;
}

}  // namespace cocolm
