#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cocolm/encoder.hpp"

namespace cocolm {

struct GradCheckEntry {
  std::string tensor;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;
  std::size_t groups_covered = 0;
  std::size_t groups_total = 0;
  LossBreakdown loss;
};

// |a - n| / max(|a|, |n|, floor). The floor sits above the roundoff of a
// central difference at step 1e-4 (about 1e-11 for O(1) losses), so exactly
// zero gradients such as the key biases do not read as large errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares backward() against central differences of loss(forward()) on
// `samples_per_group` random coordinates of every tensor (at least
// `min_samples` overall). Dropout must be off.
inline GradCheckReport gradient_check(Parameters<double> params, const Batch& batch, Rng& rng,
                                      std::size_t samples_per_group = 8, std::size_t min_samples = 200,
                                      double step = 1e-4) {
  GradCheckReport report;
  const auto act = forward(params, batch);
  report.loss = loss(act, batch);
  auto grads = backward(params, batch, act);

  std::vector<std::pair<std::string, Matrix<double>*>> tensors, grad_tensors;
  params.for_each([&](const std::string& name, Matrix<double>& m, ParamKind) { tensors.emplace_back(name, &m); });
  grads.for_each([&](const std::string& name, Matrix<double>& m, ParamKind) { grad_tensors.emplace_back(name, &m); });
  report.groups_total = tensors.size();

  const std::size_t per_group =
      std::max(samples_per_group, (min_samples + tensors.size() - 1) / tensors.size());
  auto objective = [&]() { return loss(forward(params, batch), batch).l_total; };
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& m = *tensors[t].second;
    const auto count = std::min<std::size_t>(per_group, static_cast<std::size_t>(m.size()));
    std::vector<Eigen::Index> picks;
    while (picks.size() < count) {
      const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(m.size())));
      if (std::find(picks.begin(), picks.end(), i) == picks.end()) picks.push_back(i);
    }
    for (auto i : picks) {
      const double saved = m.data()[i];
      m.data()[i] = saved + step;
      const double up = objective();
      m.data()[i] = saved - step;
      const double down = objective();
      m.data()[i] = saved;
      GradCheckEntry e;
      e.tensor = tensors[t].first;
      e.index = i;
      e.analytic = grad_tensors[t].second->data()[i];
      e.numeric = (up - down) / (2.0 * step);
      e.relative_error = relative_error(e.analytic, e.numeric);
      report.max_relative_error = std::max(report.max_relative_error, e.relative_error);
      report.entries.push_back(e);
    }
    if (count > 0) ++report.groups_covered;
  }
  return report;
}

// A small model with O(1)-scale random weights (so every path carries signal)
// and a padded batch that exercises all three heads.
struct GradCheckFixture {
  Parameters<double> params;
  std::vector<TrainingInstance> instances;
};

inline GradCheckFixture make_gradcheck_fixture(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig config;
  config.vocab_size = 23;
  config.d_model = 16;
  config.num_layers = 2;
  config.num_heads = 4;
  config.d_ff = 24;
  config.max_len = 24;
  GradCheckFixture fx;
  fx.params = init_params<double>(config, rng);
  fx.params.for_each([&](const std::string& name, Matrix<double>& m, ParamKind kind) {
    const double base = (kind == ParamKind::Norm && name.ends_with("gain")) ? 1.0 : 0.0;
    const double scale = kind == ParamKind::Weight ? 0.3 : 0.5;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = base + scale * rng.normal();
  });
  const int lengths[] = {9, 6, 11};
  for (int b = 0; b < 3; ++b) {
    TrainingInstance inst;
    inst.input_ids.push_back(kClsId);
    for (int t = 0; t < lengths[b]; ++t) {
      inst.input_ids.push_back(kNumReserved + static_cast<TokenId>(rng.below(config.vocab_size - kNumReserved)));
    }
    inst.input_ids.push_back(kSepId);
    // Two masked slots, one of them a relation target.
    for (int pos : {2, lengths[b] - 1}) {
      inst.mlm_targets[pos] = inst.input_ids[static_cast<std::size_t>(pos)];
      inst.input_ids[static_cast<std::size_t>(pos)] = kMaskId;
    }
    inst.relation_targets[2] = relation_from_index(static_cast<int>(rng.below(kNumDiscourseRelations)));
    inst.strategy = MaskStrategy::Connective;
    std::vector<TokenId> cand;
    for (int t = 0; t < 3; ++t) cand.push_back(kNumReserved + static_cast<TokenId>(rng.below(config.vocab_size - kNumReserved)));
    inst.cooc = CoocLabel{cand, b % 2 == 0};
    fx.instances.push_back(std::move(inst));
  }
  return fx;
}

}  // namespace cocolm
