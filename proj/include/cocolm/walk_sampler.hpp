#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cocolm/kg_store.hpp"
#include "cocolm/random.hpp"

namespace cocolm {

struct WalkConfig {
  std::uint64_t min_start_frequency = 5;  // start nodes need frequency strictly above this
  int min_hops = 1;
  int max_hops = 5;
  RelationSet transitive_relations{RelationType::Precedence, RelationType::Succession,
                                   RelationType::Reason, RelationType::Result};
  double pattern_boost = 2.0;
  double downsample_percentile = 0.999;
  double downsample_power = 0.5;
  std::uint64_t seed = 0;
  std::size_t num_sequences = 1000;
  std::size_t retry_budget = 100;
  unsigned workers = 1;

  void validate() const {
    if (min_hops < 1 || min_hops > max_hops) {
      throw Error(ErrorCode::InvalidConfig, "need 1 <= min_hops <= max_hops");
    }
    if (!(pattern_boost >= 1.0)) throw Error(ErrorCode::InvalidConfig, "pattern_boost must be >= 1");
    if (!(downsample_power >= 0.0 && downsample_power <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "downsample_power must be in [0,1]");
    }
    if (!(downsample_percentile > 0.0 && downsample_percentile <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "downsample_percentile must be in (0,1]");
    }
    if (num_sequences < 1) throw Error(ErrorCode::InvalidConfig, "num_sequences must be >= 1");
    if (workers < 1) throw Error(ErrorCode::InvalidConfig, "workers must be >= 1");
  }
};

struct EventualityPath {
  std::vector<NodeId> nodes;
  std::vector<RelationType> relations;

  std::size_t hops() const { return relations.size(); }
  bool operator==(const EventualityPath&) const = default;
};

// Returns an empty string when `path` satisfies every structural rule, else a
// description of the first violation.
inline std::string check_path(const EventualityPath& path, const WalkConfig& config) {
  if (path.nodes.size() != path.relations.size() + 1) return "node/relation count mismatch";
  const auto hops = static_cast<int>(path.relations.size());
  if (hops < 1 || hops > config.max_hops) return "hop count out of range";
  for (std::size_t i = 0; i < path.relations.size(); ++i) {
    const auto r = path.relations[i];
    if (!is_discourse(r)) return "CoOccurrence inside a path";
    if (i + 1 < path.relations.size() && r == path.relations[i + 1] &&
        !config.transitive_relations.contains(r)) {
      return "repeated non-transitive relation";
    }
  }
  return {};
}

// Weighted categorical over eligible start nodes.
class StartSampler {
 public:
  StartSampler(const KnowledgeGraph& graph, const WalkConfig& config) {
    if (graph.num_nodes() == 0) throw Error(ErrorCode::EmptyGraph, "empty graph");
    cap_ = graph.frequency_percentile(config.downsample_percentile);
    std::vector<double> masses;
    for (const auto& n : graph.nodes()) {
      if (n.frequency <= config.min_start_frequency) continue;
      if (graph.discourse_out(n.id).empty()) continue;
      nodes_.push_back(n.id);
      const auto capped = static_cast<double>(std::min(n.frequency, cap_));
      masses.push_back(std::pow(capped, config.downsample_power));
    }
    if (nodes_.empty()) throw Error(ErrorCode::NoEligibleStartNodes, "no eligible start nodes");
    table_ = AliasTable(masses);
  }

  NodeId sample(Rng& rng) const { return nodes_[table_.sample(rng)]; }

  std::span<const NodeId> eligible() const { return nodes_; }
  double probability(std::size_t i) const { return table_.probability(i); }
  std::uint64_t cap() const { return cap_; }

 private:
  std::vector<NodeId> nodes_;
  AliasTable table_;
  std::uint64_t cap_ = 0;
};

// Candidate masses of a single walk step, aligned with graph.discourse_out(current).
// Excluded candidates get mass 0.
inline std::vector<double> next_edge_masses(const KnowledgeGraph& graph, NodeId current,
                                            std::optional<RelationType> previous,
                                            const WalkConfig& config) {
  const auto edges = graph.discourse_out(current);
  std::vector<double> masses(edges.size(), 0.0);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const auto& e = edges[i];
    if (previous && e.relation == *previous && !config.transitive_relations.contains(*previous)) {
      continue;
    }
    double mass = e.weight;
    if (previous == RelationType::Condition && e.relation == RelationType::Reason) {
      mass *= config.pattern_boost;
    }
    masses[i] = mass;
  }
  return masses;
}

inline std::optional<Edge> next_edge(const KnowledgeGraph& graph, NodeId current,
                                     std::optional<RelationType> previous, Rng& rng,
                                     const WalkConfig& config) {
  const auto edges = graph.discourse_out(current);
  const auto masses = next_edge_masses(graph, current, previous, config);
  bool any = false;
  for (double m : masses) any = any || m > 0.0;
  if (!any) return std::nullopt;
  return edges[sample_proportional(masses, rng)];
}

inline std::optional<EventualityPath> sample_path(const KnowledgeGraph& graph,
                                                  const StartSampler& starts, Rng& rng,
                                                  const WalkConfig& config) {
  const auto target = static_cast<int>(rng.between(config.min_hops, config.max_hops));
  EventualityPath path;
  path.nodes.push_back(starts.sample(rng));
  std::optional<RelationType> previous;
  while (static_cast<int>(path.relations.size()) < target) {
    auto edge = next_edge(graph, path.nodes.back(), previous, rng, config);
    if (!edge) break;
    path.nodes.push_back(edge->tail);
    path.relations.push_back(edge->relation);
    previous = edge->relation;
  }
  if (static_cast<int>(path.relations.size()) < config.min_hops) return std::nullopt;
  return path;
}

// Paths per hop count, 1..max_hops.
struct LengthHistogram {
  std::vector<std::size_t> counts;  // counts[h-1] = paths with h hops

  explicit LengthHistogram(int max_hops = 5) : counts(static_cast<std::size_t>(max_hops), 0) {}

  void add(const EventualityPath& p) { ++counts.at(p.hops() - 1); }

  std::size_t total() const {
    std::size_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t h = 0; h < counts.size(); ++h) j[std::to_string(h + 1)] = counts[h];
    return j;
  }
};

struct Corpus {
  std::vector<EventualityPath> paths;
  LengthHistogram histogram;
};

// Samples exactly config.num_sequences paths. Worker w draws from its own
// stream derive_seed(seed, w) and owns global indices w, w+W, ...; the output
// is merged round-robin, so the result depends on the worker count but not
// on scheduling.
inline Corpus sample_corpus(const KnowledgeGraph& graph, const WalkConfig& config) {
  config.validate();
  const StartSampler starts(graph, config);
  const unsigned workers = config.workers;
  std::vector<std::vector<EventualityPath>> shards(workers);
  std::vector<std::exception_ptr> failures(workers);

  auto run = [&](unsigned w) {
    try {
      const std::size_t quota =
          config.num_sequences / workers + (w < config.num_sequences % workers ? 1 : 0);
      Rng rng(derive_seed(config.seed, w));
      auto& out = shards[w];
      out.reserve(quota);
      std::size_t failures_in_a_row = 0;
      while (out.size() < quota) {
        auto path = sample_path(graph, starts, rng, config);
        if (!path) {
          if (++failures_in_a_row >= config.retry_budget) {
            throw Error(ErrorCode::SamplingStalled,
                        std::to_string(failures_in_a_row) + " consecutive failed walks");
          }
          continue;
        }
        failures_in_a_row = 0;
        out.push_back(std::move(*path));
      }
    } catch (...) {
      failures[w] = std::current_exception();
    }
  };

  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (unsigned w = 0; w < workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  Corpus corpus{{}, LengthHistogram(config.max_hops)};
  corpus.paths.reserve(config.num_sequences);
  for (std::size_t round = 0; corpus.paths.size() < config.num_sequences; ++round) {
    for (unsigned w = 0; w < workers; ++w) {
      if (round < shards[w].size()) corpus.paths.push_back(std::move(shards[w][round]));
    }
  }
  for (const auto& p : corpus.paths) corpus.histogram.add(p);
  return corpus;
}

inline nlohmann::ordered_json path_to_json(const EventualityPath& p) {
  nlohmann::ordered_json j;
  j["nodes"] = p.nodes;
  auto rels = nlohmann::ordered_json::array();
  for (auto r : p.relations) rels.push_back(std::string(relation_name(r)));
  j["relations"] = rels;
  return j;
}

inline EventualityPath path_from_json(const nlohmann::json& j) {
  EventualityPath p;
  p.nodes = j.at("nodes").get<std::vector<NodeId>>();
  for (const auto& r : j.at("relations")) p.relations.push_back(parse_relation(r.get<std::string>()));
  return p;
}

inline void write_corpus(std::ostream& out, std::span<const EventualityPath> paths) {
  for (const auto& p : paths) out << path_to_json(p).dump() << '\n';
}

inline std::vector<EventualityPath> read_corpus(std::istream& in) {
  std::vector<EventualityPath> paths;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      paths.push_back(path_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedLine, "corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return paths;
}

}  // namespace cocolm
