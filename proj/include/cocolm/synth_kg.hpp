#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cocolm/kg_store.hpp"
#include "cocolm/probe.hpp"
#include "cocolm/random.hpp"
#include "cocolm/verbalizer.hpp"

namespace cocolm {

// Planted-structure graph used as ground truth:
//  - every node has a verb from one of 14 verb classes; all discourse edges
//    leaving a node carry the relation of its class, so the relation of any
//    (head, tail) pair is a fixed function of the head's text;
//  - every node has a topic noun; nodes sharing a topic form a CoOccurrence
//    clique.
struct SynthSpec {
  std::size_t num_nodes = 100;
  std::uint64_t seed = 0;
  int out_degree = 4;
  int heldout_degree = 1;        // extra per-node edges kept out of the edge file
  std::size_t topic_size = 25;   // nodes per CoOccurrence clique
  int verbs_per_class = 3;
  std::size_t num_choice_tasks = 200;
  std::array<double, kNumDiscourseRelations> proportions{};  // target relation marginals

  SynthSpec() { proportions.fill(1.0 / kNumDiscourseRelations); }

  // "uniform" or "Name=weight,Name=weight,..." (unlisted relations get 0).
  void set_pattern(const std::string& pattern) {
    if (pattern.empty() || pattern == "uniform") {
      proportions.fill(1.0 / kNumDiscourseRelations);
      return;
    }
    proportions.fill(0.0);
    for (auto item : detail::split(pattern, ',')) {
      const auto kv = detail::split(item, '=');
      double w = 0.0;
      if (kv.size() != 2 || !detail::parse_number(kv[1], w) || w < 0.0) {
        throw Error(ErrorCode::InvalidSpec, "bad pattern entry '" + std::string(item) + "'");
      }
      const auto rel = try_parse_relation(kv[0]);
      if (!rel || !is_discourse(*rel)) {
        throw Error(ErrorCode::InvalidSpec, "unknown discourse relation '" + std::string(kv[0]) + "'");
      }
      proportions[static_cast<std::size_t>(relation_index(*rel))] = w;
    }
    const double total = std::accumulate(proportions.begin(), proportions.end(), 0.0);
    if (!(total > 0.0)) throw Error(ErrorCode::InvalidSpec, "pattern has zero total weight");
    for (auto& p : proportions) p /= total;
  }

  void validate() const {
    if (num_nodes < 10) throw Error(ErrorCode::InvalidSpec, "num_nodes must be >= 10");
    if (num_nodes > 40000) throw Error(ErrorCode::InvalidSpec, "num_nodes too large");
    if (out_degree < 1 || heldout_degree < 0 ||
        static_cast<std::size_t>(out_degree + heldout_degree) >= num_nodes) {
      throw Error(ErrorCode::InvalidSpec, "degree does not fit the node count");
    }
    if (topic_size < 2) throw Error(ErrorCode::InvalidSpec, "topic_size must be >= 2");
    if (verbs_per_class < 1) throw Error(ErrorCode::InvalidSpec, "verbs_per_class must be >= 1");
  }
};

struct AnswerKeyEntry {
  Edge edge;
  bool held_out = false;
};

struct SyntheticKG {
  std::vector<Eventuality> nodes;
  std::vector<Edge> edges;  // written to the edge file (discourse + CoOccurrence)
  std::vector<AnswerKeyEntry> answer_key;
  std::vector<ChoiceTask> choices;
  std::vector<int> verb_class;  // per node, equals the relation index of its out-edges
  std::vector<int> topic;       // per node

  KnowledgeGraph graph() const { return KnowledgeGraph::build(nodes, edges); }

  std::vector<Edge> held_out_edges() const {
    std::vector<Edge> out;
    for (const auto& a : answer_key) {
      if (a.held_out) out.push_back(a.edge);
    }
    return out;
  }
};

namespace detail {

// Pronounceable pseudo-words: consonant-vowel syllables enumerated in a fixed
// order, so none of them collides with an English connective.
inline std::string pseudo_word(std::size_t index, int syllables) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  const std::size_t base = consonants.size() * vowels.size();
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    const std::size_t syl = index % base;
    index /= base;
    w += consonants[syl / vowels.size()];
    w += vowels[syl % vowels.size()];
  }
  return w;
}

}  // namespace detail

inline SyntheticKG generate_synthetic_kg(const SynthSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x5eed));
  const std::size_t n = spec.num_nodes;
  SyntheticKG kg;

  // Verb classes by largest remainder so the class sizes follow the proportions.
  std::vector<std::size_t> class_sizes(kNumDiscourseRelations, 0);
  std::vector<std::pair<double, int>> remainders;
  std::size_t assigned = 0;
  for (int r = 0; r < kNumDiscourseRelations; ++r) {
    const double exact = spec.proportions[static_cast<std::size_t>(r)] * static_cast<double>(n);
    class_sizes[static_cast<std::size_t>(r)] = static_cast<std::size_t>(std::floor(exact));
    assigned += class_sizes[static_cast<std::size_t>(r)];
    remainders.emplace_back(exact - std::floor(exact), r);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) {
    ++class_sizes[static_cast<std::size_t>(remainders[i % remainders.size()].second)];
  }
  for (int r = 0; r < kNumDiscourseRelations; ++r) {
    kg.verb_class.insert(kg.verb_class.end(), class_sizes[static_cast<std::size_t>(r)], r);
  }
  rng.shuffle(kg.verb_class);

  const std::size_t num_topics = std::max<std::size_t>(2, (n + spec.topic_size - 1) / spec.topic_size);
  kg.topic.resize(n);
  for (std::size_t i = 0; i < n; ++i) kg.topic[i] = static_cast<int>(i % num_topics);
  rng.shuffle(kg.topic);

  // Word pools.
  static const std::array<const char*, 6> agents = {"i", "you", "he", "she", "they", "we"};
  std::vector<std::string> verbs;
  for (int i = 0; i < kNumDiscourseRelations * spec.verbs_per_class; ++i) {
    verbs.push_back(detail::pseudo_word(static_cast<std::size_t>(i) * 7 + 3, 3));
  }
  rng.shuffle(verbs);  // verb -> class assignment is seeded
  std::vector<std::string> nouns;
  for (std::size_t i = 0; i < num_topics; ++i) nouns.push_back(detail::pseudo_word(i * 3 + 1, 2));

  std::set<std::string> texts;
  for (std::size_t i = 0; i < n; ++i) {
    Eventuality ev;
    ev.id = static_cast<NodeId>(i);
    const double u = 1.0 - rng.uniform();  // (0, 1]
    ev.frequency = static_cast<std::uint64_t>(std::floor(5.0 / u));
    const auto cls = static_cast<std::size_t>(kg.verb_class[i]);
    const auto& noun = nouns[static_cast<std::size_t>(kg.topic[i])];
    std::vector<std::string> text;
    for (int attempt = 0; attempt < 32; ++attempt) {
      const auto verb = verbs[cls * static_cast<std::size_t>(spec.verbs_per_class) +
                              rng.below(static_cast<std::uint64_t>(spec.verbs_per_class))];
      text = {agents[rng.below(agents.size())], verb, noun};
      if (!texts.count(join_words(text))) break;
    }
    for (std::size_t m = 0; texts.count(join_words(text)); ++m) {
      // Disambiguate with a trailing modifier word.
      if (text.size() > 3) text.pop_back();
      text.push_back(detail::pseudo_word(m * 11 + 5, 4));
    }
    texts.insert(join_words(text));
    ev.text = std::move(text);
    kg.nodes.push_back(std::move(ev));
  }

  // Discourse edges, train and held-out, with distinct tails per head.
  for (std::size_t h = 0; h < n; ++h) {
    std::unordered_set<std::size_t> used{h};
    const int total = spec.out_degree + spec.heldout_degree;
    for (int k = 0; k < total; ++k) {
      std::size_t t;
      do {
        t = rng.below(n);
      } while (used.count(t));
      used.insert(t);
      Edge e{static_cast<NodeId>(h), static_cast<NodeId>(t), relation_from_index(kg.verb_class[h]),
             static_cast<double>(1 + rng.below(5))};
      const bool held_out = k >= spec.out_degree;
      kg.answer_key.push_back({e, held_out});
      if (!held_out) kg.edges.push_back(e);
    }
  }

  // CoOccurrence cliques per topic, both directions.
  std::vector<std::vector<NodeId>> members(num_topics);
  for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(kg.topic[i])].push_back(static_cast<NodeId>(i));
  for (const auto& group : members) {
    for (auto a : group) {
      for (auto b : group) {
        if (a != b) kg.edges.push_back({a, b, RelationType::CoOccurrence, 1.0});
      }
    }
  }

  // Binary choice tasks: one-hop training edge as context, a CoOccurrence
  // neighbour of either endpoint against a node unrelated to both.
  const ConnectiveLexicon lexicon;
  std::vector<const AnswerKeyEntry*> train_edges;
  for (const auto& a : kg.answer_key) {
    if (!a.held_out) train_edges.push_back(&a);
  }
  for (std::size_t c = 0; c < spec.num_choice_tasks; ++c) {
    const auto& e = train_edges[rng.below(train_edges.size())]->edge;
    std::set<NodeId> related;
    for (auto end : {e.head, e.tail}) {
      for (auto m : members[static_cast<std::size_t>(kg.topic[end])]) related.insert(m);
    }
    std::vector<NodeId> positives;
    for (auto m : related) {
      if (m != e.head && m != e.tail) positives.push_back(m);
    }
    if (positives.empty() || related.size() >= n) continue;
    const auto pos = positives[rng.below(positives.size())];
    NodeId neg;
    do {
      neg = static_cast<NodeId>(rng.below(n));
    } while (related.count(neg));
    ChoiceTask task;
    task.context = join_words(kg.nodes[e.head].text) + " " + join_words(lexicon.connective(e.relation)) +
                   " " + join_words(kg.nodes[e.tail].text);
    const bool positive_first = rng.bernoulli(0.5);
    task.candidates = {join_words(kg.nodes[positive_first ? pos : neg].text),
                       join_words(kg.nodes[positive_first ? neg : pos].text)};
    task.gold = positive_first ? 0 : 1;
    kg.choices.push_back(std::move(task));
  }
  return kg;
}

inline void write_answer_key(std::ostream& out, const SyntheticKG& kg) {
  for (const auto& a : kg.answer_key) {
    nlohmann::ordered_json j;
    j["head"] = a.edge.head;
    j["tail"] = a.edge.tail;
    j["relation"] = std::string(relation_name(a.edge.relation));
    j["split"] = a.held_out ? "heldout" : "train";
    out << j.dump() << '\n';
  }
}

inline std::vector<AnswerKeyEntry> read_answer_key(std::istream& in) {
  std::vector<AnswerKeyEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    AnswerKeyEntry a;
    a.edge.head = j.at("head").get<NodeId>();
    a.edge.tail = j.at("tail").get<NodeId>();
    a.edge.relation = parse_relation(j.at("relation").get<std::string>());
    a.held_out = j.at("split").get<std::string>() == "heldout";
    out.push_back(a);
  }
  return out;
}

inline nlohmann::ordered_json choice_to_json(const ChoiceTask& t) {
  nlohmann::ordered_json j;
  j["context"] = t.context;
  j["candidates"] = t.candidates;
  if (t.gold) j["gold"] = *t.gold;
  return j;
}

inline ChoiceTask choice_from_json(const nlohmann::json& j) {
  ChoiceTask t;
  t.context = j.at("context").get<std::string>();
  t.candidates = j.at("candidates").get<std::vector<std::string>>();
  if (j.contains("gold") && !j.at("gold").is_null()) t.gold = j.at("gold").get<int>();
  return t;
}

}  // namespace cocolm
