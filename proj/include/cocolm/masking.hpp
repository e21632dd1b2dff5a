#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cocolm/kg_store.hpp"
#include "cocolm/random.hpp"
#include "cocolm/verbalizer.hpp"
#include "cocolm/walk_sampler.hpp"

namespace cocolm {

enum class MaskStrategy { WholeEventuality, Connective };

inline const char* strategy_name(MaskStrategy s) {
  return s == MaskStrategy::WholeEventuality ? "WholeEventuality" : "Connective";
}

inline MaskStrategy parse_strategy(const std::string& s) {
  if (s == "WholeEventuality") return MaskStrategy::WholeEventuality;
  if (s == "Connective") return MaskStrategy::Connective;
  throw Error(ErrorCode::MalformedLine, "unknown masking strategy '" + s + "'");
}

// Candidate eventuality for the co-occurrence task. Serialized after the
// sequence as "[CLS] S [SEP] E_c [SEP]".
struct CoocInstance {
  std::vector<TokenId> sequence;
  std::vector<TokenId> candidate;
  bool positive = false;
  NodeId candidate_node = 0;

  std::vector<TokenId> serialize() const {
    std::vector<TokenId> out{kClsId};
    out.insert(out.end(), sequence.begin(), sequence.end());
    out.push_back(kSepId);
    out.insert(out.end(), candidate.begin(), candidate.end());
    out.push_back(kSepId);
    return out;
  }
};

struct CoocLabel {
  std::vector<TokenId> candidate_ids;
  bool positive = false;
  bool operator==(const CoocLabel&) const = default;
};

struct TrainingInstance {
  std::vector<TokenId> input_ids;            // [CLS] S [SEP], masked
  std::map<int, TokenId> mlm_targets;        // position -> original id
  std::map<int, RelationType> relation_targets;  // first connective token -> label
  std::optional<CoocLabel> cooc;
  MaskStrategy strategy = MaskStrategy::WholeEventuality;
  bool fallback = false;  // masked eventuality exceeded the budget

  // Token stream the encoder consumes: input_ids, then candidate + [SEP] when present.
  std::vector<TokenId> model_input() const {
    std::vector<TokenId> out = input_ids;
    if (cooc) {
      out.insert(out.end(), cooc->candidate_ids.begin(), cooc->candidate_ids.end());
      out.push_back(kSepId);
    }
    return out;
  }

  bool operator==(const TrainingInstance&) const = default;
};

struct MaskConfig {
  double budget_fraction = 0.25;
  double eventuality_probability = 0.5;  // WholeEventuality vs Connective
  double positive_probability = 0.5;     // co-occurrence label balance
  bool attach_cooccurrence = true;
};

inline int masking_budget(int n, double fraction) {
  return static_cast<int>(std::ceil(fraction * n - 1e-9));
}

namespace detail {

inline TrainingInstance wrap(const TokenSequence& seq, MaskStrategy strategy) {
  TrainingInstance inst;
  inst.strategy = strategy;
  inst.input_ids.reserve(seq.token_ids.size() + 2);
  inst.input_ids.push_back(kClsId);
  inst.input_ids.insert(inst.input_ids.end(), seq.token_ids.begin(), seq.token_ids.end());
  inst.input_ids.push_back(kSepId);
  return inst;
}

}  // namespace detail

inline TrainingInstance apply_whole_eventuality_mask(const TokenSequence& seq, Rng& rng,
                                                     std::size_t vocab_size,
                                                     double budget_fraction = 0.25) {
  if (seq.eventuality_spans.empty()) {
    throw Error(ErrorCode::NoEventualitySpans, "sequence has no eventuality spans");
  }
  const int n = static_cast<int>(seq.token_ids.size());
  const int budget = masking_budget(n, budget_fraction);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < seq.eventuality_spans.size(); ++i) {
    if (seq.eventuality_spans[i].length() <= budget) eligible.push_back(i);
  }
  auto inst = detail::wrap(seq, MaskStrategy::WholeEventuality);
  std::size_t chosen;
  if (!eligible.empty()) {
    chosen = eligible[rng.below(eligible.size())];
  } else {
    // Spans are sorted by start, so the first minimum is the lowest start.
    chosen = 0;
    for (std::size_t i = 1; i < seq.eventuality_spans.size(); ++i) {
      if (seq.eventuality_spans[i].length() < seq.eventuality_spans[chosen].length()) chosen = i;
    }
    inst.fallback = true;
  }
  const auto& span = seq.eventuality_spans[chosen];
  for (int p = span.start; p < span.end; ++p) {
    const int pos = p + 1;
    inst.mlm_targets[pos] = inst.input_ids[pos];
    const double u = rng.uniform();
    if (u < 0.8) {
      inst.input_ids[pos] = kMaskId;
    } else if (u < 0.9 && vocab_size > static_cast<std::size_t>(kNumReserved)) {
      inst.input_ids[pos] =
          kNumReserved + static_cast<TokenId>(rng.below(vocab_size - kNumReserved));
    }
  }
  return inst;
}

// Masks every connective token with [MASK] and labels the first token of each
// connective span with its relation.
inline TrainingInstance apply_connective_mask(const TokenSequence& seq) {
  if (seq.connective_spans.empty()) {
    throw Error(ErrorCode::NoConnectiveSpans, "sequence has no connective spans");
  }
  auto inst = detail::wrap(seq, MaskStrategy::Connective);
  for (const auto& span : seq.connective_spans) {
    for (int p = span.start; p < span.end; ++p) {
      inst.mlm_targets[p + 1] = inst.input_ids[p + 1];
      inst.input_ids[p + 1] = kMaskId;
    }
    inst.relation_targets[span.start + 1] = span.relation;
  }
  return inst;
}

// CoOccurrence neighbours of the path's nodes, excluding the path nodes, sorted.
inline std::vector<NodeId> cooccurrence_candidates(const EventualityPath& path,
                                                   const KnowledgeGraph& graph) {
  std::set<NodeId> on_path(path.nodes.begin(), path.nodes.end());
  std::set<NodeId> out;
  for (auto n : path.nodes) {
    for (const auto& e : graph.cooccurrence_out(n)) {
      if (!on_path.count(e.tail)) out.insert(e.tail);
    }
  }
  return {out.begin(), out.end()};
}

inline CoocInstance make_cooccurrence_instance(const EventualityPath& path, const TokenSequence& seq,
                                               const KnowledgeGraph& graph, Rng& rng,
                                               const Vocabulary& vocab,
                                               double positive_probability = 0.5) {
  const auto positives = cooccurrence_candidates(path, graph);
  if (positives.empty()) {
    throw Error(ErrorCode::NoPositiveCandidate, "path nodes have no CoOccurrence neighbours");
  }
  std::set<NodeId> excluded(positives.begin(), positives.end());
  excluded.insert(path.nodes.begin(), path.nodes.end());
  if (excluded.size() >= graph.num_nodes()) {
    throw Error(ErrorCode::NoPositiveCandidate, "no node is available as a negative candidate");
  }

  CoocInstance inst;
  inst.sequence = seq.token_ids;
  inst.positive = rng.bernoulli(positive_probability);
  if (inst.positive) {
    inst.candidate_node = positives[rng.below(positives.size())];
  } else {
    const auto n = graph.num_nodes();
    bool found = false;
    for (int attempt = 0; attempt < 64 && !found; ++attempt) {
      const auto c = static_cast<NodeId>(rng.below(n));
      if (!excluded.count(c)) {
        inst.candidate_node = c;
        found = true;
      }
    }
    if (!found) {
      std::vector<NodeId> pool;
      for (NodeId c = 0; c < n; ++c) {
        if (!excluded.count(c)) pool.push_back(c);
      }
      inst.candidate_node = pool[rng.below(pool.size())];
    }
  }
  inst.candidate = vocab.encode(graph.node(inst.candidate_node).text);
  return inst;
}

inline TrainingInstance build_instance(const TokenSequence& seq, const EventualityPath& path,
                                       const KnowledgeGraph& graph, Rng& rng,
                                       const Vocabulary& vocab, const MaskConfig& config = {}) {
  const bool eventuality = rng.bernoulli(config.eventuality_probability);
  auto inst = eventuality
                  ? apply_whole_eventuality_mask(seq, rng, vocab.size(), config.budget_fraction)
                  : apply_connective_mask(seq);
  if (config.attach_cooccurrence) {
    try {
      auto cooc = make_cooccurrence_instance(path, seq, graph, rng, vocab,
                                             config.positive_probability);
      inst.cooc = CoocLabel{std::move(cooc.candidate), cooc.positive};
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoPositiveCandidate) throw;
    }
  }
  return inst;
}

// Returns an empty string if `inst` is a valid masking of `seq`, else the
// first violated rule.
inline std::string check_instance(const TrainingInstance& inst, const TokenSequence& seq,
                                  double budget_fraction = 0.25) {
  const int n = static_cast<int>(seq.token_ids.size());
  if (static_cast<int>(inst.input_ids.size()) != n + 2) return "length mismatch";
  if (inst.input_ids.front() != kClsId || inst.input_ids.back() != kSepId) return "missing [CLS]/[SEP]";
  for (const auto& [pos, original] : inst.mlm_targets) {
    if (pos < 1 || pos > n) return "mlm target out of bounds";
    if (seq.token_ids[pos - 1] != original) return "mlm target does not hold the original id";
  }
  for (int p = 1; p <= n; ++p) {
    if (!inst.mlm_targets.count(p) && inst.input_ids[p] != seq.token_ids[p - 1]) {
      return "unmasked position changed";
    }
  }
  for (const auto& [pos, rel] : inst.relation_targets) {
    if (!inst.mlm_targets.count(pos)) return "relation target not masked";
  }
  if (inst.mlm_targets.empty()) return "no masked positions";

  if (inst.strategy == MaskStrategy::WholeEventuality) {
    if (!inst.relation_targets.empty()) return "relation targets under eventuality masking";
    const int first = inst.mlm_targets.begin()->first - 1;
    const int last = inst.mlm_targets.rbegin()->first;
    if (last - first != static_cast<int>(inst.mlm_targets.size())) return "masked span not contiguous";
    const auto it = std::find_if(seq.eventuality_spans.begin(), seq.eventuality_spans.end(),
                                 [&](const EventualitySpan& s) { return s.start == first && s.end == last; });
    if (it == seq.eventuality_spans.end()) return "masked span is not an eventuality";
    const int budget = masking_budget(n, budget_fraction);
    if (it->length() > budget) {
      if (!inst.fallback) return "span exceeds budget without fallback flag";
      for (const auto& s : seq.eventuality_spans) {
        if (s.length() <= budget) return "fallback used although a span fits the budget";
      }
    } else if (inst.fallback) {
      return "fallback flag on an in-budget span";
    }
  } else {
    std::size_t connective_tokens = 0;
    for (const auto& s : seq.connective_spans) {
      connective_tokens += static_cast<std::size_t>(s.length());
      for (int p = s.start; p < s.end; ++p) {
        if (!inst.mlm_targets.count(p + 1) || inst.input_ids[p + 1] != kMaskId) {
          return "connective token left unmasked";
        }
      }
      auto rt = inst.relation_targets.find(s.start + 1);
      if (rt == inst.relation_targets.end() || rt->second != s.relation) return "missing relation label";
    }
    if (inst.mlm_targets.size() != connective_tokens) return "non-connective token masked";
    if (inst.relation_targets.size() != seq.connective_spans.size()) return "extra relation labels";
  }
  return {};
}

inline nlohmann::ordered_json instance_to_json(const TrainingInstance& inst) {
  nlohmann::ordered_json j;
  j["input_ids"] = inst.input_ids;
  auto mlm = nlohmann::ordered_json::object();
  for (const auto& [pos, id] : inst.mlm_targets) mlm[std::to_string(pos)] = id;
  j["mlm_targets"] = mlm;
  auto rel = nlohmann::ordered_json::object();
  for (const auto& [pos, r] : inst.relation_targets) rel[std::to_string(pos)] = std::string(relation_name(r));
  j["relation_targets"] = rel;
  if (inst.cooc) {
    nlohmann::ordered_json c;
    c["candidate_ids"] = inst.cooc->candidate_ids;
    c["label"] = inst.cooc->positive ? 1 : 0;
    j["cooc"] = c;
  }
  j["strategy"] = strategy_name(inst.strategy);
  if (inst.fallback) j["fallback"] = true;
  return j;
}

inline TrainingInstance instance_from_json(const nlohmann::json& j) {
  TrainingInstance inst;
  inst.input_ids = j.at("input_ids").get<std::vector<TokenId>>();
  for (const auto& [key, value] : j.at("mlm_targets").items()) {
    inst.mlm_targets[std::stoi(key)] = value.get<TokenId>();
  }
  for (const auto& [key, value] : j.at("relation_targets").items()) {
    inst.relation_targets[std::stoi(key)] = parse_relation(value.get<std::string>());
  }
  if (j.contains("cooc") && !j.at("cooc").is_null()) {
    const auto& c = j.at("cooc");
    inst.cooc = CoocLabel{c.at("candidate_ids").get<std::vector<TokenId>>(), c.at("label").get<int>() == 1};
  }
  inst.strategy = parse_strategy(j.at("strategy").get<std::string>());
  inst.fallback = j.value("fallback", false);
  return inst;
}

inline void write_instances(std::ostream& out, std::span<const TrainingInstance> instances) {
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
}

inline std::vector<TrainingInstance> read_instances(std::istream& in) {
  std::vector<TrainingInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedLine,
                  "instances line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cocolm
