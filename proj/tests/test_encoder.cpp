#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cocolm;

namespace {

ModelConfig small_config(int vocab = 30) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.num_layers = 2;
  c.num_heads = 4;
  c.d_ff = 32;
  c.max_len = 32;
  return c;
}

TrainingInstance make_instance(std::vector<TokenId> body, std::map<int, TokenId> mlm = {},
                               std::map<int, RelationType> rel = {}, std::optional<CoocLabel> cooc = {}) {
  TrainingInstance inst;
  inst.input_ids.push_back(kClsId);
  inst.input_ids.insert(inst.input_ids.end(), body.begin(), body.end());
  inst.input_ids.push_back(kSepId);
  inst.mlm_targets = std::move(mlm);
  inst.relation_targets = std::move(rel);
  inst.cooc = std::move(cooc);
  inst.strategy = inst.relation_targets.empty() ? MaskStrategy::WholeEventuality : MaskStrategy::Connective;
  return inst;
}

std::vector<TrainingInstance> random_instances(Rng& rng, int count, int vocab) {
  std::vector<TrainingInstance> out;
  for (int i = 0; i < count; ++i) {
    const int n = 3 + static_cast<int>(rng.below(10));
    std::vector<TokenId> body;
    for (int t = 0; t < n; ++t) body.push_back(kNumReserved + static_cast<TokenId>(rng.below(vocab - kNumReserved)));
    std::map<int, TokenId> mlm;
    std::map<int, RelationType> rel;
    const int p = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    mlm[p] = body[static_cast<std::size_t>(p - 1)];
    body[static_cast<std::size_t>(p - 1)] = kMaskId;
    if (rng.bernoulli(0.5)) rel[p] = relation_from_index(static_cast<int>(rng.below(kNumDiscourseRelations)));
    std::optional<CoocLabel> cooc;
    if (rng.bernoulli(0.7)) cooc = CoocLabel{{kNumReserved + 1, kNumReserved + 2}, rng.bernoulli(0.5)};
    out.push_back(make_instance(body, mlm, rel, cooc));
  }
  return out;
}

Parameters<double> trained_like(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  auto p = init_params<double>(c, rng);
  p.for_each([&](const std::string&, Matrix<double>& m, ParamKind) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.2 * rng.normal();
  });
  return p;
}

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = small_config();
  c.d_model = 6;
  c.num_heads = 4;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
  }
  Rng rng(1);
  EXPECT_THROW(init_params<double>(c, rng), Error);
  EXPECT_NO_THROW(small_config().validate());
}

TEST(InitParams, DeterministicAndScaled) {
  const auto c = small_config();
  Rng a(5), b(5);
  const auto pa = init_params<double>(c, a);
  const auto pb = init_params<double>(c, b);
  std::ostringstream sa, sb;
  write_checkpoint(sa, pa);
  write_checkpoint(sb, pb);
  EXPECT_EQ(sa.str(), sb.str());
  pa.for_each([](const std::string& name, const Matrix<double>& m, ParamKind kind) {
    if (kind == ParamKind::Bias) {
      EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0) << name;
    } else if (kind == ParamKind::Norm) {
      EXPECT_EQ(m.cwiseAbs().maxCoeff(), name.ends_with("gain") ? 1.0 : 0.0) << name;
      EXPECT_EQ(m.cwiseAbs().minCoeff(), name.ends_with("gain") ? 1.0 : 0.0) << name;
    } else {
      EXPECT_LE(m.cwiseAbs().maxCoeff(), 0.04) << name;
      EXPECT_GT(m.cwiseAbs().maxCoeff(), 0.0) << name;
    }
  });
}

TEST(InitParams, ClosedFormParameterCount) {
  ModelConfig c;
  c.vocab_size = 1000;
  const std::size_t V = 1000, d = 128, L = 2, ff = 512, T = 128, R = 14;
  const std::size_t embeddings = V * d + T * d + 2 * d;
  const std::size_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
  const std::size_t heads = 2 * d + V + (d * R + R) + (d * 2 + 2);
  EXPECT_EQ(Parameters<double>::zeros(c).count(), embeddings + L * per_layer + heads);
}

TEST(Forward, EmptyMlmAndDefinedCls) {
  const auto c = small_config();
  const auto p = trained_like(c, 1);
  const std::vector<TrainingInstance> one{make_instance({7, 8, 9})};
  const auto batch = make_batch(one);
  const auto act = forward(p, batch);
  EXPECT_EQ(act.mlm_logits.rows(), 0);
  EXPECT_EQ(act.rel_logits.rows(), 0);
  EXPECT_EQ(act.cooc_logits.rows(), 0);
  EXPECT_TRUE(act.cls(0, batch.length).allFinite());
  const auto l = loss(act, batch);
  EXPECT_EQ(l.l_total, 0.0);
}

TEST(Forward, SequenceTooLong) {
  const auto c = small_config();
  const auto p = trained_like(c, 1);
  const std::vector<TrainingInstance> one{make_instance(std::vector<TokenId>(40, 7))};
  try {
    forward(p, make_batch(one));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SequenceTooLong);
  }
}

TEST(Forward, PermutationEquivariance) {
  const auto c = small_config();
  const auto p = trained_like(c, 2);
  Rng rng(3);
  const auto insts = random_instances(rng, 6, c.vocab_size);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<TrainingInstance> shuffled;
  for (auto i : perm) shuffled.push_back(insts[i]);
  const auto ba = make_batch(insts), bb = make_batch(shuffled);
  const auto a = forward(p, ba), b = forward(p, bb);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const int i = static_cast<int>(perm[k]);
    const int n = ba.lengths[static_cast<std::size_t>(i)];
    for (int t = 0; t < n; ++t) {
      EXPECT_LT((a.hidden.row(i * ba.length + t) - b.hidden.row(static_cast<int>(k) * bb.length + t)).norm(), 1e-12);
    }
  }
  const auto la = loss(a, ba), lb = loss(b, bb);
  EXPECT_NEAR(la.l_total, lb.l_total, 1e-12);
}

TEST(Forward, PaddingDoesNotLeak) {
  const auto c = small_config();
  const auto p = trained_like(c, 4);
  const auto short_inst = make_instance({6, kMaskId, 8}, {{2, 7}}, {{2, RelationType::Result}},
                                        CoocLabel{{9, 10}, true});
  const auto long_inst = make_instance(std::vector<TokenId>(20, 11));
  const std::vector<TrainingInstance> alone{short_inst};
  const std::vector<TrainingInstance> padded{short_inst, long_inst};
  const auto ba = make_batch(alone), bb = make_batch(padded);
  ASSERT_GT(bb.length, ba.length);
  const auto a = forward(p, ba), b = forward(p, bb);
  EXPECT_LT((a.cls(0, ba.length) - b.cls(0, bb.length)).norm(), 1e-12);
  EXPECT_LT((a.mlm_logits.row(0) - b.mlm_logits.row(0)).norm(), 1e-12);
  EXPECT_LT((a.cooc_logits.row(0) - b.cooc_logits.row(0)).norm(), 1e-12);
}

TEST(Forward, SoftmaxAndAttentionRowsNormalize) {
  const auto c = small_config();
  const auto p = trained_like(c, 5);
  Rng rng(6);
  const auto insts = random_instances(rng, 4, c.vocab_size);
  const auto batch = make_batch(insts);
  const auto act = forward(p, batch);
  for (const auto& layer : act.layers) {
    for (const auto& probs : layer.probs) {
      for (Eigen::Index r = 0; r < probs.rows(); ++r) EXPECT_NEAR(probs.row(r).sum(), 1.0, 1e-6);
    }
  }
  for (Eigen::Index r = 0; r < act.rel_logits.rows(); ++r) {
    const Eigen::RowVectorXd e = (act.rel_logits.row(r).array() - act.rel_logits.row(r).maxCoeff()).exp();
    EXPECT_NEAR((e / e.sum()).sum(), 1.0, 1e-6);
  }
}

TEST(Loss, UniformLogitsGiveLogCardinality) {
  auto c = small_config(1000);
  auto p = Parameters<double>::zeros(c);  // all-zero heads give uniform logits
  const std::vector<TrainingInstance> one{
      make_instance({6, kMaskId, 8}, {{2, 7}}, {{2, RelationType::Reason}}, CoocLabel{{9}, false})};
  const auto batch = make_batch(one);
  const auto l = loss(forward(p, batch), batch);
  EXPECT_NEAR(l.l_mlm, std::log(1000.0), 1e-9);
  EXPECT_NEAR(l.l_rel, std::log(14.0), 1e-9);
  EXPECT_NEAR(l.l_occur, std::log(2.0), 1e-9);
}

TEST(Loss, RelationTermSumsWithinItem) {
  auto p = Parameters<double>::zeros(small_config());
  const std::vector<TrainingInstance> one{make_instance(
      {kMaskId, 6, kMaskId}, {{1, 7}, {3, 8}}, {{1, RelationType::Reason}, {3, RelationType::Result}})};
  const auto batch = make_batch(one);
  const auto l = loss(forward(p, batch), batch);
  EXPECT_NEAR(l.l_rel, 2 * std::log(14.0), 1e-9);
  EXPECT_NEAR(l.l_mlm, std::log(30.0), 1e-9);
}

TEST(Loss, TotalIsExactSum) {
  const auto c = small_config();
  const auto p = trained_like(c, 7);
  Rng rng(8);
  for (int b = 0; b < 20; ++b) {
    const auto insts = random_instances(rng, 5, c.vocab_size);
    const auto batch = make_batch(insts);
    const auto l = loss(forward(p, batch), batch);
    EXPECT_EQ(l.l_total, l.l_mlm + l.l_rel + l.l_occur);
    EXPECT_GE(l.l_mlm, 0.0);
    EXPECT_GE(l.l_rel, 0.0);
    EXPECT_GE(l.l_occur, 0.0);
  }
}

TEST(Loss, MissingLabelPosition) {
  auto inst = make_instance({6, 7});
  inst.mlm_targets[9] = 6;
  const std::vector<TrainingInstance> one{inst};
  try {
    make_batch(one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingLabelPosition);
  }
}

TEST(Loss, SwitchesDropLabels) {
  Rng rng(9);
  const auto insts = random_instances(rng, 10, 30);
  LossSwitches s;
  s.use_rel = false;
  s.use_occur = false;
  const auto batch = make_batch(insts, s);
  EXPECT_TRUE(batch.relations.empty());
  EXPECT_TRUE(batch.cooc.empty());
  LossSwitches no_ev;
  no_ev.use_eventuality_mask = false;
  const auto b2 = make_batch(insts, no_ev);
  for (const auto& m : b2.mlm) {
    EXPECT_EQ(insts[static_cast<std::size_t>(m.item)].strategy, MaskStrategy::Connective);
  }
}

TEST(Backward, ZeroRelationHeadBiasGradient) {
  auto p = Parameters<double>::zeros(small_config());
  const std::vector<TrainingInstance> one{make_instance({kMaskId, 6}, {{1, 7}}, {{1, RelationType::Reason}})};
  const auto batch = make_batch(one);
  const auto g = backward(p, batch, forward(p, batch));
  for (int r = 0; r < kNumDiscourseRelations; ++r) {
    const double expected = 1.0 / 14.0 - (r == relation_index(RelationType::Reason) ? 1.0 : 0.0);
    EXPECT_NEAR(g.relation_bias(0, r), expected, 1e-12);
  }
}

TEST(Backward, PaddingEmbeddingGradientIsZero) {
  const auto c = small_config();
  const auto p = trained_like(c, 10);
  Rng rng(11);
  const auto insts = random_instances(rng, 5, c.vocab_size);
  // Without the tied MLM head the PAD row could only get gradient through padded inputs.
  const auto batch = make_batch(insts, LossSwitches{false, true, true, true});
  ASSERT_FALSE(batch.relations.empty());
  const auto g = backward(p, batch, forward(p, batch));
  EXPECT_EQ(g.token_embedding.row(kPadId).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.token_embedding.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_LT(relative_error(-5.5e-17, 8.9e-12), 1e-4);
  EXPECT_NEAR(relative_error(1.0e-3, 1.001e-3), 1e-3 / 1.001, 1e-12);
  EXPECT_DOUBLE_EQ(relative_error(2.0, -2.0), 2.0);
}

TEST(Backward, FiniteDifferenceOnFixture) {
  auto fx = make_gradcheck_fixture(3);
  Rng rng(4);
  const auto report = gradient_check(fx.params, make_batch(fx.instances), rng);
  EXPECT_GE(report.entries.size(), 200u);
  EXPECT_EQ(report.groups_covered, report.groups_total);
  EXPECT_LT(report.max_relative_error, 1e-4);
}

TEST(Backward, FiniteDifferencePerHead) {
  auto fx = make_gradcheck_fixture(5);
  const LossSwitches only_mlm{true, false, false, true};
  const LossSwitches only_rel{false, true, false, true};
  const LossSwitches only_occur{false, false, true, true};
  for (const auto& s : {only_mlm, only_rel, only_occur}) {
    Rng rng(6);
    const auto report = gradient_check(fx.params, make_batch(fx.instances, s), rng, 4, 100);
    EXPECT_LT(report.max_relative_error, 1e-4);
    EXPECT_GT(report.loss.l_total, 0.0);
  }
}

TEST(Backward, DropoutForwardIsDeterministicPerSeed) {
  auto c = small_config();
  c.dropout_rate = 0.1;
  const auto p = trained_like(c, 12);
  Rng data(13);
  const auto insts = random_instances(data, 4, c.vocab_size);
  const auto batch = make_batch(insts);
  Rng r1(1), r2(1), r3(2);
  const auto a = forward(p, batch, {&r1});
  const auto b = forward(p, batch, {&r2});
  const auto d = forward(p, batch, {&r3});
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_NE(a.hidden, d.hidden);
  // No rng means inference mode.
  EXPECT_EQ(forward(p, batch).hidden, forward(p, batch).hidden);
}

TEST(Encoder, TiedProjection) {
  const auto c = small_config();
  auto p = trained_like(c, 14);
  const std::vector<TrainingInstance> one{make_instance({kMaskId, 9, 6}, {{1, 9}})};
  const auto batch = make_batch(one);
  const auto before = forward(p, batch);
  p.token_embedding.row(20).array() += 1.0;  // token 20 does not occur in the input
  const auto after = forward(p, batch);
  EXPECT_EQ(before.hidden, after.hidden);
  EXPECT_NE(before.mlm_logits(0, 20), after.mlm_logits(0, 20));
  for (int k = 0; k < c.vocab_size; ++k) {
    if (k != 20) EXPECT_EQ(before.mlm_logits(0, k), after.mlm_logits(0, k));
  }
}

TEST(Checkpoint, RoundTripAndShapeChecks) {
  const auto c = small_config();
  const auto p = trained_like(c, 15);
  std::stringstream s;
  write_checkpoint(s, p);
  const auto back = read_checkpoint<double>(s);
  EXPECT_EQ(back.config, p.config);
  std::vector<const Matrix<double>*> a, b;
  p.for_each([&](const std::string&, const Matrix<double>& m, ParamKind) { a.push_back(&m); });
  back.for_each([&](const std::string&, const Matrix<double>& m, ParamKind) { b.push_back(&m); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);

  std::string bytes = s.str();
  std::istringstream truncated(bytes.substr(0, bytes.size() - 16));
  EXPECT_THROW(read_checkpoint<double>(truncated), Error);
  std::istringstream garbage("not a checkpoint at all");
  try {
    read_checkpoint<double>(garbage);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(AdamW, DecayTouchesMatricesOnly) {
  const auto c = small_config();
  auto p = trained_like(c, 16);
  const auto before = p;
  auto zero = Parameters<double>::zeros(c);
  AdamW<double> opt(c, {0.1, 0.9, 0.999, 1e-8, 0.5});
  opt.step(p, zero);
  // With zero gradients only decoupled decay moves parameters: factor 1 - 0.1 * 0.5.
  EXPECT_EQ(p.token_embedding.row(kPadId), before.token_embedding.row(kPadId));
  EXPECT_NEAR((p.token_embedding.row(7) - 0.95 * before.token_embedding.row(7)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((p.layers[0].qkv_weight - 0.95 * before.layers[0].qkv_weight).norm(), 0.0, 1e-12);
  EXPECT_EQ(p.layers[0].qkv_bias, before.layers[0].qkv_bias);
  EXPECT_EQ(p.layers[1].ln2_gain, before.layers[1].ln2_gain);
  EXPECT_EQ(p.mlm_bias, before.mlm_bias);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  const auto c = small_config();
  auto p = Parameters<double>::zeros(c);
  auto g = Parameters<double>::zeros(c);
  g.cooc_bias(0, 0) = 3.0;
  g.cooc_bias(0, 1) = -0.5;
  AdamW<double> opt(c, {0.01, 0.9, 0.999, 1e-8, 0.0});
  opt.step(p, g);
  // Bias-corrected Adam's first step is lr * sign(g).
  EXPECT_NEAR(p.cooc_bias(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.cooc_bias(0, 1), 0.01, 1e-9);
}

TEST(AdamW, GlobalNormClipping) {
  const auto c = small_config();
  auto g = Parameters<double>::zeros(c);
  g.cooc_bias(0, 0) = 3.0;
  g.mlm_bias(0, 1) = 4.0;
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-12);
  EXPECT_NEAR(g.cooc_bias(0, 0), 0.6, 1e-12);
}
