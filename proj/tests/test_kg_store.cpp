#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cocolm;
using cocolm::test::graph_from_tsv;

namespace {

ErrorCode load_error(const std::string& nodes, const std::string& edges) {
  try {
    graph_from_tsv(nodes, edges);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a load error";
  return ErrorCode::Io;
}

const std::string kTwoNodes = "0\t12\tthey speak\n1\t7\tthey have a interest\n";

}  // namespace

TEST(KgStore, LoadsTwoNodeGraph) {
  const auto g = graph_from_tsv(kTwoNodes, "0\t1\tResult\t3.0\n");
  EXPECT_EQ(g.num_nodes(), 2u);
  EXPECT_EQ(g.num_edges(), 1u);
  EXPECT_EQ(g.node(1).text, (std::vector<std::string>{"they", "have", "a", "interest"}));
  EXPECT_EQ(g.node(0).frequency, 12u);
  const auto out = g.neighbors(0, false);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], (Edge{0, 1, RelationType::Result, 3.0}));
  EXPECT_TRUE(g.neighbors(1, true).empty());
}

TEST(KgStore, RelationNamesAreCaseInsensitive) {
  const auto g = graph_from_tsv(kTwoNodes, "0\t1\trEsUlT\t1\n1\t0\tchosenalternative\t2\n");
  EXPECT_EQ(g.neighbors(0, false)[0].relation, RelationType::Result);
  EXPECT_EQ(g.neighbors(1, false)[0].relation, RelationType::ChosenAlternative);
}

TEST(KgStore, CommentsAndCrlfAreIgnored) {
  const auto g = graph_from_tsv("# header\r\n0\t12\tThey Speak\r\n1\t7\tok\r\n", "# h\n0\t1\tResult\t3\r\n");
  EXPECT_EQ(g.node(0).text, (std::vector<std::string>{"they", "speak"}));
  EXPECT_EQ(g.num_edges(), 1u);
}

TEST(KgStore, LoadErrors) {
  EXPECT_EQ(load_error("0\t1\n", ""), ErrorCode::MalformedLine);
  EXPECT_EQ(load_error("0\tx\tthey\n", ""), ErrorCode::MalformedLine);
  EXPECT_EQ(load_error("0\t1\tthey\n0\t2\tthem\n", ""), ErrorCode::DuplicateNodeId);
  EXPECT_EQ(load_error(kTwoNodes, "0\t2\tResult\t1\n"), ErrorCode::UnknownNodeReference);
  EXPECT_EQ(load_error(kTwoNodes, "0\t1\tResult\t0\n"), ErrorCode::NonPositiveWeight);
  EXPECT_EQ(load_error(kTwoNodes, "0\t1\tResult\t-2\n"), ErrorCode::NonPositiveWeight);
  EXPECT_EQ(load_error(kTwoNodes, "0\t1\tCausation\t1\n"), ErrorCode::UnknownRelationLabel);
  EXPECT_EQ(load_error(kTwoNodes, "0\t1\tResult\n"), ErrorCode::MalformedLine);
  EXPECT_EQ(load_error(kTwoNodes, "0\t1\tResult\t1\n0\t1\tresult\t2\n"), ErrorCode::DuplicateEdge);
}

TEST(KgStore, ErrorMentionsLineNumber) {
  try {
    graph_from_tsv(kTwoNodes, "0\t1\tResult\t1\n\n1\t0\tBogus\t1\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(KgStore, OutOfRangeNodeLookup) {
  const auto g = graph_from_tsv(kTwoNodes, "");
  EXPECT_THROW(g.neighbors(2, true), Error);
  try {
    g.node(9);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NodeOutOfRange);
  }
}

TEST(KgStore, NeighborsFilterCoOccurrence) {
  const auto g = test::fan_out_graph();
  const auto disc = g.neighbors(0, false);
  ASSERT_EQ(disc.size(), 2u);
  double sum = 0;
  for (const auto& e : disc) sum += e.weight;
  EXPECT_DOUBLE_EQ(sum, 4.0);
  EXPECT_EQ(g.neighbors(0, true).size(), 3u);
  EXPECT_EQ(g.num_cooccurrence_edges(), 1u);
}

TEST(KgStore, FrequencyPercentile) {
  auto make = [](std::vector<std::uint64_t> freqs) {
    std::vector<Eventuality> nodes;
    for (std::size_t i = 0; i < freqs.size(); ++i) nodes.push_back(test::node(static_cast<NodeId>(i), freqs[i], "x"));
    return KnowledgeGraph::build(nodes, {});
  };
  EXPECT_EQ(make({1, 2, 3, 4}).frequency_percentile(0.5), 2u);
  EXPECT_EQ(make({4, 3, 2, 1}).frequency_percentile(0.51), 3u);
  EXPECT_EQ(make({4, 3, 2, 1}).frequency_percentile(1.0), 4u);
  for (double q : {0.01, 0.3, 0.999, 1.0}) EXPECT_EQ(make({5, 5, 5}).frequency_percentile(q), 5u);
  try {
    KnowledgeGraph{}.frequency_percentile(0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyGraph);
  }
}

TEST(KgStore, PercentileMatchesSortOracle) {
  const auto& g = test::fixture_graph();
  std::vector<std::uint64_t> f;
  for (const auto& n : g.nodes()) f.push_back(n.frequency);
  std::sort(f.begin(), f.end());
  // Smallest value v in the sorted list with count(<= v) >= q*n.
  for (double q : {0.5, 0.9, 0.99, 0.999}) {
    std::uint64_t expected = 0;
    for (auto v : f) {
      const auto at_most = std::count_if(f.begin(), f.end(), [&](auto x) { return x <= v; });
      if (static_cast<double>(at_most) >= q * static_cast<double>(f.size())) {
        expected = v;
        break;
      }
    }
    EXPECT_EQ(g.frequency_percentile(q), expected) << q;
  }
}

TEST(KgStore, RoundTripThroughTsv) {
  const auto& g = test::fixture_graph();
  std::ostringstream nodes, edges;
  write_nodes(nodes, g);
  write_edges(edges, g);
  const auto back = graph_from_tsv(nodes.str(), edges.str());
  EXPECT_TRUE(back == g);
}

TEST(KgStore, AdjacencyProperties) {
  const auto& g = test::fixture_graph();
  std::size_t total = 0;
  for (NodeId n = 0; n < g.num_nodes(); ++n) {
    const auto a = g.neighbors(n, true);
    EXPECT_EQ(a, g.neighbors(n, true));
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].head, n);
      if (i) {
        EXPECT_TRUE(std::pair(a[i - 1].tail, a[i - 1].relation) < std::pair(a[i].tail, a[i].relation));
      }
    }
    total += a.size();
  }
  EXPECT_EQ(total, g.num_edges());
}

TEST(Relation, ParseAndNames) {
  for (int i = 0; i < kNumRelationTypes; ++i) {
    const auto r = relation_from_index(i);
    EXPECT_EQ(parse_relation(relation_name(r)), r);
  }
  EXPECT_FALSE(is_discourse(RelationType::CoOccurrence));
  EXPECT_TRUE(is_discourse(RelationType::Exception));
  EXPECT_FALSE(try_parse_relation("Reasons"));
}
