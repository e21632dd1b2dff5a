#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cocolm;
using test::CausalFixture;

namespace {

// Synthetic sequence with eventuality spans of the given lengths joined by
// one-token connectives.
TokenSequence spans_of(std::vector<int> lengths) {
  TokenSequence seq;
  TokenId next = 10;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (i) {
      const int s = static_cast<int>(seq.token_ids.size());
      seq.token_ids.push_back(next++);
      seq.connective_spans.push_back({s, s + 1, RelationType::Result});
    }
    const int s = static_cast<int>(seq.token_ids.size());
    for (int k = 0; k < lengths[i]; ++k) seq.token_ids.push_back(next++);
    seq.eventuality_spans.push_back({s, s + lengths[i], static_cast<NodeId>(i)});
  }
  return seq;
}

int masked_span_start(const TrainingInstance& inst) { return inst.mlm_targets.begin()->first - 1; }

struct FixtureCorpus {
  const KnowledgeGraph& graph = test::fixture_graph();
  std::vector<EventualityPath> paths;
  ConnectiveLexicon lexicon;
  Vocabulary vocab;
  FixtureCorpus() {
    WalkConfig cfg;
    cfg.num_sequences = 10'000;
    cfg.seed = 21;
    paths = sample_corpus(graph, cfg).paths;
    vocab = build_vocab(paths, graph, lexicon);
  }
};

const FixtureCorpus& corpus() {
  static const FixtureCorpus c;
  return c;
}

}  // namespace

TEST(Masking, Budget) {
  EXPECT_EQ(masking_budget(12, 0.25), 3);
  EXPECT_EQ(masking_budget(13, 0.25), 4);
  EXPECT_EQ(masking_budget(4, 0.25), 1);
}

TEST(Masking, OnlySpanWithinBudgetIsChosen) {
  // {3,4,3} plus two connectives: n = 12, budget 3.
  const auto seq = spans_of({3, 4, 3});
  ASSERT_EQ(seq.token_ids.size(), 12u);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto inst = apply_whole_eventuality_mask(seq, rng, 100);
    EXPECT_EQ(check_instance(inst, seq), "");
    EXPECT_EQ(inst.mlm_targets.size(), 3u);
    EXPECT_FALSE(inst.fallback);
    EXPECT_NE(masked_span_start(inst), 4);
  }
}

TEST(Masking, FallbackToShortestSpan) {
  // {9,8,8} plus two connectives: n = 27, budget 7, nothing fits.
  const auto seq = spans_of({9, 8, 8});
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto inst = apply_whole_eventuality_mask(seq, rng, 100);
    EXPECT_TRUE(inst.fallback);
    EXPECT_EQ(masked_span_start(inst), 10);  // first of the two shortest
    EXPECT_EQ(check_instance(inst, seq), "");
  }
}

TEST(Masking, UniformChoiceAmongEligibleSpans) {
  const auto seq = spans_of({2, 9, 2});  // n = 15, budget 4
  Rng rng(3);
  int first = 0;
  const int draws = 10'000;
  for (int i = 0; i < draws; ++i) first += masked_span_start(apply_whole_eventuality_mask(seq, rng, 100)) == 0;
  EXPECT_NEAR(first / static_cast<double>(draws), 0.5, 0.02);
}

TEST(Masking, EightyTenTenCorruption) {
  const auto seq = spans_of({4, 12, 4});
  Rng rng(4);
  std::size_t mask = 0, keep = 0, other = 0;
  for (int i = 0; i < 20'000; ++i) {
    const auto inst = apply_whole_eventuality_mask(seq, rng, 1000);
    for (const auto& [pos, original] : inst.mlm_targets) {
      const auto now = inst.input_ids[static_cast<std::size_t>(pos)];
      if (now == kMaskId) {
        ++mask;
      } else if (now == original) {
        ++keep;
      } else {
        ASSERT_GE(now, kNumReserved);
        ASSERT_LT(now, 1000);
        ++other;
      }
    }
  }
  const double total = static_cast<double>(mask + keep + other);
  EXPECT_NEAR(mask / total, 0.8, 0.01);
  // A random replacement equal to the original looks like keep: 0.1 * 1/995.
  EXPECT_NEAR(keep / total, 0.1, 0.01);
  EXPECT_NEAR(other / total, 0.1, 0.01);
}

TEST(Masking, NoSpansErrors) {
  Rng rng(1);
  try {
    apply_whole_eventuality_mask(TokenSequence{}, rng, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoEventualitySpans);
  }
  try {
    apply_connective_mask(spans_of({3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoConnectiveSpans);
  }
}

TEST(Masking, ConnectiveMaskOnCausalPath) {
  CausalFixture f;
  const auto seq = verbalize(f.path, f.graph, f.lexicon, f.vocab);
  const auto inst = apply_connective_mask(seq);
  EXPECT_EQ(check_instance(inst, seq), "");
  // [CLS] shifts positions by one: "if" sits at 3, "because" at 8.
  EXPECT_EQ(inst.relation_targets,
            (std::map<int, RelationType>{{3, RelationType::Condition}, {8, RelationType::Reason}}));
  EXPECT_EQ(inst.input_ids[3], kMaskId);
  EXPECT_EQ(inst.input_ids[8], kMaskId);
  EXPECT_EQ(inst.mlm_targets.at(3), f.vocab.id("if"));
  EXPECT_EQ(inst.mlm_targets.at(8), f.vocab.id("because"));
  EXPECT_EQ(inst.mlm_targets.size(), 2u);
  // Labels round-trip to the original connective words.
  for (const auto& [pos, rel] : inst.relation_targets) {
    EXPECT_EQ(f.vocab.token(inst.mlm_targets.at(pos)), f.lexicon.connective(rel).front());
  }
}

TEST(Masking, OneHopPathHasOneRelationTarget) {
  const auto inst = apply_connective_mask(spans_of({2, 3}));
  EXPECT_EQ(inst.relation_targets.size(), 1u);
}

TEST(Masking, ConnectiveMaskCountsEqualSpanSums) {
  const auto& c = corpus();
  for (std::size_t i = 0; i < 2000; ++i) {
    const auto seq = verbalize(c.paths[i], c.graph, c.lexicon, c.vocab);
    const auto inst = apply_connective_mask(seq);
    std::size_t expected = 0;
    for (const auto& s : seq.connective_spans) expected += static_cast<std::size_t>(s.length());
    ASSERT_EQ(inst.mlm_targets.size(), expected);
    ASSERT_EQ(check_instance(inst, seq), "");
  }
}

TEST(Cooccurrence, SingletonNeighbourAlwaysChosen) {
  const auto g = KnowledgeGraph::build(
      {test::node(0, 9, "a"), test::node(1, 9, "b"), test::node(2, 9, "x"), test::node(3, 9, "y"),
       test::node(4, 9, "z")},
      {{0, 1, RelationType::Result, 1}, {0, 2, RelationType::CoOccurrence, 1}});
  const EventualityPath p{{0, 1}, {RelationType::Result}};
  ConnectiveLexicon lex;
  const auto v = build_vocab(std::span<const EventualityPath>(&p, 1), g, lex);
  const auto seq = verbalize(p, g, lex, v);
  Rng rng(6);
  for (int i = 0; i < 500; ++i) {
    const auto c = make_cooccurrence_instance(p, seq, g, rng, v);
    if (c.positive) {
      EXPECT_EQ(c.candidate_node, 2u);
    } else {
      EXPECT_TRUE(c.candidate_node == 3 || c.candidate_node == 4);
    }
    const auto s = c.serialize();
    EXPECT_EQ(std::count(s.begin(), s.end(), kSepId), 2);
    EXPECT_EQ(std::count(s.begin(), s.end(), kClsId), 1);
    EXPECT_EQ(s.front(), kClsId);
    EXPECT_EQ(s.back(), kSepId);
  }
}

TEST(Cooccurrence, NoPositiveCandidate) {
  CausalFixture f;
  const auto seq = verbalize(f.path, f.graph, f.lexicon, f.vocab);
  Rng rng(1);
  try {
    make_cooccurrence_instance(f.path, seq, f.graph, rng, f.vocab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoPositiveCandidate);
  }
  // build_instance skips the co-occurrence part instead of failing.
  EXPECT_FALSE(build_instance(seq, f.path, f.graph, rng, f.vocab).cooc);
}

TEST(Cooccurrence, BalancedLabelsAndValidCandidates) {
  const auto& c = corpus();
  Rng rng(7);
  int positives = 0, total = 0;
  for (const auto& p : c.paths) {
    const auto seq = verbalize(p, c.graph, c.lexicon, c.vocab);
    const auto cand = cooccurrence_candidates(p, c.graph);
    if (cand.empty()) continue;
    const auto inst = make_cooccurrence_instance(p, seq, c.graph, rng, c.vocab);
    const bool on_path = std::find(p.nodes.begin(), p.nodes.end(), inst.candidate_node) != p.nodes.end();
    const bool neighbour = std::binary_search(cand.begin(), cand.end(), inst.candidate_node);
    EXPECT_FALSE(on_path);
    EXPECT_EQ(neighbour, inst.positive);
    positives += inst.positive;
    ++total;
  }
  ASSERT_GT(total, 9000);
  EXPECT_NEAR(positives / static_cast<double>(total), 0.5, 0.02);
}

TEST(BuildInstance, StrategySplitAndInvariants) {
  const auto& c = corpus();
  Rng rng(8);
  int eventuality = 0;
  int with_cooc = 0;
  for (const auto& p : c.paths) {
    const auto seq = verbalize(p, c.graph, c.lexicon, c.vocab);
    const auto inst = build_instance(seq, p, c.graph, rng, c.vocab);
    ASSERT_EQ(check_instance(inst, seq), "");
    eventuality += inst.strategy == MaskStrategy::WholeEventuality;
    with_cooc += inst.cooc.has_value();
    if (inst.cooc) {
      const auto in = inst.model_input();
      EXPECT_EQ(std::count(in.begin(), in.end(), kSepId), 2);
    }
    if (!inst.fallback && inst.strategy == MaskStrategy::WholeEventuality) {
      const int n = static_cast<int>(seq.token_ids.size());
      EXPECT_LE(static_cast<int>(inst.mlm_targets.size()), masking_budget(n, 0.25));
    }
  }
  EXPECT_NEAR(eventuality / static_cast<double>(c.paths.size()), 0.5, 0.02);
  EXPECT_GT(with_cooc, 9000);
}

TEST(BuildInstance, Reproducible) {
  const auto& c = corpus();
  auto run = [&] {
    Rng rng(9);
    std::ostringstream out;
    for (std::size_t i = 0; i < 500; ++i) {
      const auto seq = verbalize(c.paths[i], c.graph, c.lexicon, c.vocab);
      out << instance_to_json(build_instance(seq, c.paths[i], c.graph, rng, c.vocab)).dump() << '\n';
    }
    return out.str();
  };
  EXPECT_EQ(run(), run());
}

TEST(BuildInstance, JsonRoundTrip) {
  const auto& c = corpus();
  Rng rng(10);
  std::vector<TrainingInstance> insts;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto seq = verbalize(c.paths[i], c.graph, c.lexicon, c.vocab);
    insts.push_back(build_instance(seq, c.paths[i], c.graph, rng, c.vocab));
  }
  std::stringstream s;
  write_instances(s, insts);
  EXPECT_EQ(read_instances(s), insts);
  const auto j = instance_to_json(insts[0]);
  EXPECT_TRUE(j.contains("input_ids") && j.contains("mlm_targets") && j.contains("relation_targets") &&
              j.contains("strategy"));
}

TEST(CheckInstance, DetectsViolations) {
  const auto seq = spans_of({2, 2, 2});
  auto inst = apply_connective_mask(seq);
  ASSERT_EQ(check_instance(inst, seq), "");
  auto bad = inst;
  bad.mlm_targets[1] = seq.token_ids[0];
  EXPECT_NE(check_instance(bad, seq), "");
  bad = inst;
  bad.relation_targets.clear();
  EXPECT_NE(check_instance(bad, seq), "");
  bad = inst;
  bad.input_ids[1] = kMaskId;
  EXPECT_NE(check_instance(bad, seq), "");
}
