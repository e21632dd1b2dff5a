#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "cocolm/error.hpp"
#include "cocolm/relation.hpp"

namespace cocolm {

using NodeId = std::uint32_t;

struct Eventuality {
  NodeId id = 0;
  std::vector<std::string> text;
  std::uint64_t frequency = 0;

  bool operator==(const Eventuality&) const = default;
};

struct Edge {
  NodeId head = 0;
  NodeId tail = 0;
  RelationType relation = RelationType::Precedence;
  double weight = 1.0;

  bool operator==(const Edge&) const = default;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      std::string w(text.substr(i, j - i));
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back(std::move(w));
    }
    i = j;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view text, T& out) {
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

[[noreturn]] inline void line_error(ErrorCode code, const char* source, std::size_t line_no,
                                    const std::string& what) {
  throw Error(code, std::string(source) + " line " + std::to_string(line_no) + ": " + what);
}

}  // namespace detail

// Immutable eventuality graph. Out-edges are held in compressed-row form,
// split into discourse edges (walkable) and CoOccurrence edges, each sorted by
// (tail, relation).
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  // Builds and validates a graph from in-memory parts. Node i must have id i.
  static KnowledgeGraph build(std::vector<Eventuality> nodes, std::vector<Edge> edges) {
    KnowledgeGraph g;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].id != i) throw Error(ErrorCode::MalformedLine, "node ids must be dense");
      if (nodes[i].text.empty()) throw Error(ErrorCode::MalformedLine, "empty eventuality text");
    }
    g.nodes_ = std::move(nodes);
    const auto n = g.nodes_.size();
    for (const auto& e : edges) {
      if (e.head >= n || e.tail >= n) {
        throw Error(ErrorCode::UnknownNodeReference, "edge references a missing node");
      }
      if (!(e.weight > 0.0)) throw Error(ErrorCode::NonPositiveWeight, "edge weight must be > 0");
    }
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
      if (a.head != b.head) return a.head < b.head;
      if (a.tail != b.tail) return a.tail < b.tail;
      return a.relation < b.relation;
    });
    for (std::size_t i = 1; i < edges.size(); ++i) {
      const auto& a = edges[i - 1];
      const auto& b = edges[i];
      if (a.head == b.head && a.tail == b.tail && a.relation == b.relation) {
        throw Error(ErrorCode::DuplicateEdge, "duplicate edge " + std::to_string(a.head) + " -> " +
                                                  std::to_string(a.tail) + " " +
                                                  std::string(relation_name(a.relation)));
      }
    }
    g.discourse_offsets_.assign(n + 1, 0);
    g.cooc_offsets_.assign(n + 1, 0);
    for (const auto& e : edges) {
      if (is_discourse(e.relation)) {
        g.discourse_edges_.push_back(e);
        ++g.discourse_offsets_[e.head + 1];
      } else {
        g.cooc_edges_.push_back(e);
        ++g.cooc_offsets_[e.head + 1];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      g.discourse_offsets_[i + 1] += g.discourse_offsets_[i];
      g.cooc_offsets_[i + 1] += g.cooc_offsets_[i];
    }
    g.sorted_frequencies_.reserve(n);
    for (const auto& node : g.nodes_) g.sorted_frequencies_.push_back(node.frequency);
    std::sort(g.sorted_frequencies_.begin(), g.sorted_frequencies_.end());
    return g;
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_edges() const { return discourse_edges_.size() + cooc_edges_.size(); }
  std::size_t num_discourse_edges() const { return discourse_edges_.size(); }
  std::size_t num_cooccurrence_edges() const { return cooc_edges_.size(); }

  const Eventuality& node(NodeId id) const {
    check(id);
    return nodes_[id];
  }
  std::span<const Eventuality> nodes() const { return nodes_; }

  std::span<const Edge> discourse_out(NodeId id) const {
    check(id);
    return std::span<const Edge>(discourse_edges_)
        .subspan(discourse_offsets_[id], discourse_offsets_[id + 1] - discourse_offsets_[id]);
  }

  std::span<const Edge> cooccurrence_out(NodeId id) const {
    check(id);
    return std::span<const Edge>(cooc_edges_)
        .subspan(cooc_offsets_[id], cooc_offsets_[id + 1] - cooc_offsets_[id]);
  }

  // Out-edges of `id` in (tail, relation) order.
  std::vector<Edge> neighbors(NodeId id, bool include_co_occurrence) const {
    auto disc = discourse_out(id);
    std::vector<Edge> out(disc.begin(), disc.end());
    if (include_co_occurrence) {
      auto co = cooccurrence_out(id);
      std::vector<Edge> merged;
      merged.reserve(out.size() + co.size());
      std::merge(out.begin(), out.end(), co.begin(), co.end(), std::back_inserter(merged),
                 [](const Edge& a, const Edge& b) {
                   return a.tail != b.tail ? a.tail < b.tail : a.relation < b.relation;
                 });
      out = std::move(merged);
    }
    return out;
  }

  // Nearest-rank percentile: smallest f with at least fraction q of nodes <= f.
  std::uint64_t frequency_percentile(double q) const {
    if (nodes_.empty()) throw Error(ErrorCode::EmptyGraph, "frequency_percentile on empty graph");
    if (!(q > 0.0 && q <= 1.0)) throw Error(ErrorCode::InvalidConfig, "percentile must be in (0,1]");
    const auto n = sorted_frequencies_.size();
    auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-12));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return sorted_frequencies_[rank - 1];
  }

  bool operator==(const KnowledgeGraph& other) const {
    return nodes_ == other.nodes_ && discourse_edges_ == other.discourse_edges_ &&
           cooc_edges_ == other.cooc_edges_;
  }

 private:
  void check(NodeId id) const {
    if (id >= nodes_.size()) {
      throw Error(ErrorCode::NodeOutOfRange, "node " + std::to_string(id) + " out of range");
    }
  }

  std::vector<Eventuality> nodes_;
  std::vector<Edge> discourse_edges_;
  std::vector<std::size_t> discourse_offsets_;
  std::vector<Edge> cooc_edges_;
  std::vector<std::size_t> cooc_offsets_;
  std::vector<std::uint64_t> sorted_frequencies_;
};

inline std::vector<Eventuality> read_nodes(std::istream& in) {
  std::vector<Eventuality> nodes;
  std::unordered_set<NodeId> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    const auto fields = detail::split(line, '\t');
    if (fields.size() != 3) {
      detail::line_error(ErrorCode::MalformedLine, "nodes", line_no, "expected 3 tab-separated fields");
    }
    Eventuality ev;
    if (!detail::parse_number(fields[0], ev.id)) {
      detail::line_error(ErrorCode::MalformedLine, "nodes", line_no, "bad id");
    }
    if (!detail::parse_number(fields[1], ev.frequency)) {
      detail::line_error(ErrorCode::MalformedLine, "nodes", line_no, "bad frequency");
    }
    ev.text = detail::words(fields[2]);
    if (ev.text.empty()) detail::line_error(ErrorCode::MalformedLine, "nodes", line_no, "empty text");
    if (!seen.insert(ev.id).second) {
      detail::line_error(ErrorCode::DuplicateNodeId, "nodes", line_no,
                         "duplicate id " + std::to_string(ev.id));
    }
    nodes.push_back(std::move(ev));
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Eventuality& a, const Eventuality& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id != i) {
      throw Error(ErrorCode::MalformedLine, "node ids are not dense: missing id " + std::to_string(i));
    }
  }
  return nodes;
}

inline std::vector<Edge> read_edges(std::istream& in, std::size_t num_nodes) {
  std::vector<Edge> edges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    const auto fields = detail::split(line, '\t');
    if (fields.size() != 4) {
      detail::line_error(ErrorCode::MalformedLine, "edges", line_no, "expected 4 tab-separated fields");
    }
    Edge e;
    if (!detail::parse_number(fields[0], e.head) || !detail::parse_number(fields[1], e.tail)) {
      detail::line_error(ErrorCode::MalformedLine, "edges", line_no, "bad node id");
    }
    auto rel = try_parse_relation(fields[2]);
    if (!rel) {
      detail::line_error(ErrorCode::UnknownRelationLabel, "edges", line_no,
                         "unknown relation '" + std::string(fields[2]) + "'");
    }
    e.relation = *rel;
    if (!detail::parse_number(fields[3], e.weight)) {
      detail::line_error(ErrorCode::MalformedLine, "edges", line_no, "bad weight");
    }
    if (!(e.weight > 0.0) || !std::isfinite(e.weight)) {
      detail::line_error(ErrorCode::NonPositiveWeight, "edges", line_no, "weight must be positive");
    }
    if (e.head >= num_nodes || e.tail >= num_nodes) {
      detail::line_error(ErrorCode::UnknownNodeReference, "edges", line_no, "unknown node id");
    }
    if (e.head == e.tail) detail::line_error(ErrorCode::MalformedLine, "edges", line_no, "self loop");
    edges.push_back(e);
  }
  return edges;
}

inline KnowledgeGraph load_graph(std::istream& nodes_source, std::istream& edges_source) {
  auto nodes = read_nodes(nodes_source);
  auto edges = read_edges(edges_source, nodes.size());
  return KnowledgeGraph::build(std::move(nodes), std::move(edges));
}

inline void write_nodes(std::ostream& out, const KnowledgeGraph& graph) {
  for (const auto& n : graph.nodes()) {
    out << n.id << '\t' << n.frequency << '\t';
    for (std::size_t i = 0; i < n.text.size(); ++i) out << (i ? " " : "") << n.text[i];
    out << '\n';
  }
}

inline void write_edges(std::ostream& out, const KnowledgeGraph& graph) {
  for (NodeId id = 0; id < graph.num_nodes(); ++id) {
    for (const auto& e : graph.neighbors(id, true)) {
      out << e.head << '\t' << e.tail << '\t' << relation_name(e.relation) << '\t'
          << detail::format_double(e.weight) << '\n';
    }
  }
}

inline std::string join_words(std::span<const std::string> words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

}  // namespace cocolm
