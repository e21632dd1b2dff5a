#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cocolm/encoder.hpp"
#include "cocolm/trainer.hpp"
#include "cocolm/verbalizer.hpp"

namespace cocolm {

struct ProbeQuery {
  std::string left;
  std::string right;
  int top_k = 5;
};

struct RankedWord {
  std::string word;
  double probability = 0.0;
};

namespace detail {

inline bool all_unknown(const std::vector<TokenId>& ids) {
  return std::all_of(ids.begin(), ids.end(), [](TokenId id) { return id == kUnkId; });
}

template <class Real>
Matrix<Real> mask_logits(const Parameters<Real>& params, const std::vector<TokenId>& input, int mask_pos) {
  TrainingInstance inst;
  inst.input_ids = input;
  inst.mlm_targets[mask_pos] = kMaskId;
  const auto batch = make_batch(std::span<const TrainingInstance>(&inst, 1));
  if (batch.length > params.config.max_len) {
    throw Error(ErrorCode::SequenceTooLong, "probe exceeds the model's max_len");
  }
  return forward(params, batch).mlm_logits;
}

}  // namespace detail

// Cloze probe "[CLS] left [MASK] right [SEP]". By default the MLM distribution
// at [MASK] is restricted to the first word of each connective and
// renormalized; results carry the full connective phrase. With
// full_vocabulary the top_k tokens of the unrestricted distribution are returned.
template <class Real>
std::vector<RankedWord> probe_connective(const Parameters<Real>& params, const Vocabulary& vocab,
                                         const ConnectiveLexicon& lexicon, const ProbeQuery& query,
                                         bool full_vocabulary = false) {
  const auto left = vocab.encode(detail::words(query.left));
  const auto right = vocab.encode(detail::words(query.right));
  if (left.empty() || right.empty()) throw Error(ErrorCode::EmptyAfterUnking, "probe text is empty");
  if (detail::all_unknown(left) && detail::all_unknown(right)) {
    throw Error(ErrorCode::EmptyAfterUnking, "every probe word is out of vocabulary");
  }
  std::vector<TokenId> input{kClsId};
  input.insert(input.end(), left.begin(), left.end());
  const int mask_pos = static_cast<int>(input.size());
  input.push_back(kMaskId);
  input.insert(input.end(), right.begin(), right.end());
  input.push_back(kSepId);
  const auto logits = detail::mask_logits(params, input, mask_pos);

  std::vector<RankedWord> ranked;
  std::vector<double> scores;
  if (full_vocabulary) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      ranked.push_back({vocab.token(static_cast<TokenId>(j)), 0.0});
      scores.push_back(static_cast<double>(logits(0, j)));
    }
  } else {
    for (int r = 0; r < kNumDiscourseRelations; ++r) {
      const auto& phrase = lexicon.connective(relation_from_index(r));
      if (!vocab.contains(phrase.front())) continue;
      ranked.push_back({join_words(phrase), 0.0});
      scores.push_back(static_cast<double>(logits(0, vocab.id(phrase.front()))));
    }
    if (ranked.empty()) throw Error(ErrorCode::EmptyAfterUnking, "no connective is in the vocabulary");
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - mx);
  for (std::size_t i = 0; i < ranked.size(); ++i) ranked[i].probability = std::exp(scores[i] - mx) / z;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedWord& a, const RankedWord& b) { return a.probability > b.probability; });
  if (query.top_k > 0 && static_cast<std::size_t>(query.top_k) < ranked.size()) {
    ranked.resize(static_cast<std::size_t>(query.top_k));
  }
  return ranked;
}

struct ChoiceTask {
  std::string context;
  std::vector<std::string> candidates;
  std::optional<int> gold;
};

struct ChoiceResult {
  int chosen = 0;
  std::vector<double> scores;  // positive-class probability per candidate
};

// Positive co-occurrence probability of "[CLS] context [SEP] candidate [SEP]".
template <class Real>
double cooccurrence_score(const Parameters<Real>& params, const std::vector<TokenId>& context,
                          const std::vector<TokenId>& candidate) {
  TrainingInstance inst;
  inst.input_ids.push_back(kClsId);
  inst.input_ids.insert(inst.input_ids.end(), context.begin(), context.end());
  inst.input_ids.push_back(kSepId);
  inst.cooc = CoocLabel{candidate, true};
  const auto batch = make_batch(std::span<const TrainingInstance>(&inst, 1));
  if (batch.length > params.config.max_len) {
    throw Error(ErrorCode::SequenceTooLong, "choice input exceeds the model's max_len");
  }
  const auto act = forward(params, batch);
  const double a = static_cast<double>(act.cooc_logits(0, 0));
  const double b = static_cast<double>(act.cooc_logits(0, 1));
  return 1.0 / (1.0 + std::exp(a - b));
}

// Each candidate is scored in its own forward pass so a candidate's score does
// not depend on its neighbours in the list.
template <class Real>
ChoiceResult score_choice(const Parameters<Real>& params, const Vocabulary& vocab, const ChoiceTask& task) {
  if (task.candidates.size() < 2) throw Error(ErrorCode::TooFewCandidates, "need at least two candidates");
  const auto context = vocab.encode(detail::words(task.context));
  ChoiceResult result;
  for (const auto& c : task.candidates) {
    result.scores.push_back(cooccurrence_score(params, context, vocab.encode(detail::words(c))));
  }
  for (std::size_t i = 1; i < result.scores.size(); ++i) {
    if (result.scores[i] > result.scores[static_cast<std::size_t>(result.chosen)]) {
      result.chosen = static_cast<int>(i);
    }
  }
  return result;
}

struct RelationPrediction {
  Edge edge;
  RelationType predicted = RelationType::Precedence;  // relation head argmax
  RelationType cloze = RelationType::Precedence;      // top connective of the cloze probe
};

struct RelationEvalReport {
  double accuracy = 0.0;
  double cloze_accuracy = 0.0;
  std::array<double, kNumDiscourseRelations> per_relation_accuracy{};
  std::array<std::size_t, kNumDiscourseRelations> support{};
  std::array<std::array<std::size_t, kNumDiscourseRelations>, kNumDiscourseRelations> confusion{};
  std::vector<RelationPrediction> predictions;
};

// Verbalizes every held-out edge as a one-hop sequence, masks its connective
// and reads the relation head at the connective's first token. The same pair
// is also probed with a single-[MASK] connective cloze.
template <class Real>
RelationEvalReport eval_relation_heldout(const Parameters<Real>& params, std::span<const Edge> held_out,
                                         const KnowledgeGraph& graph, const ConnectiveLexicon& lexicon,
                                         const Vocabulary& vocab, int batch_size = 64) {
  if (held_out.empty()) throw Error(ErrorCode::EmptyHeldOut, "no held-out edges");
  RelationEvalReport report;
  std::vector<TrainingInstance> instances;
  instances.reserve(held_out.size());
  for (const auto& e : held_out) {
    if (!is_discourse(e.relation)) throw Error(ErrorCode::InvalidConfig, "held-out edge is not discourse");
    const EventualityPath path{{e.head, e.tail}, {e.relation}};
    instances.push_back(apply_connective_mask(verbalize(path, graph, lexicon, vocab)));
  }
  LossSwitches only_relations;
  only_relations.use_mlm = false;
  only_relations.use_occur = false;
  for (std::size_t start = 0; start < instances.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(instances.size(), start + static_cast<std::size_t>(batch_size));
    const auto chunk = std::span<const TrainingInstance>(instances).subspan(start, stop - start);
    const auto batch = make_batch(chunk, only_relations);
    const auto act = forward(params, batch);
    for (std::size_t k = 0; k < batch.relations.size(); ++k) {
      const auto& e = held_out[start + static_cast<std::size_t>(batch.relations[k].item)];
      RelationPrediction p;
      p.edge = e;
      p.predicted = relation_from_index(argmax_row(act.rel_logits, static_cast<Eigen::Index>(k)));
      const ProbeQuery q{join_words(graph.node(e.head).text), join_words(graph.node(e.tail).text), 1};
      const auto top = probe_connective(params, vocab, lexicon, q);
      p.cloze = *lexicon.relation_for_first_word(detail::words(top.front().word).front());
      report.predictions.push_back(p);
    }
  }
  std::array<std::size_t, kNumDiscourseRelations> hits{};
  std::size_t total_hits = 0, cloze_hits = 0;
  for (const auto& p : report.predictions) {
    const int gold = relation_index(p.edge.relation);
    const int pred = relation_index(p.predicted);
    ++report.support[static_cast<std::size_t>(gold)];
    ++report.confusion[static_cast<std::size_t>(gold)][static_cast<std::size_t>(pred)];
    if (gold == pred) {
      ++hits[static_cast<std::size_t>(gold)];
      ++total_hits;
    }
    cloze_hits += p.cloze == p.edge.relation;
  }
  const double n = static_cast<double>(report.predictions.size());
  report.accuracy = static_cast<double>(total_hits) / n;
  report.cloze_accuracy = static_cast<double>(cloze_hits) / n;
  for (std::size_t r = 0; r < hits.size(); ++r) {
    report.per_relation_accuracy[r] =
        report.support[r] ? static_cast<double>(hits[r]) / static_cast<double>(report.support[r]) : 0.0;
  }
  return report;
}

}  // namespace cocolm
