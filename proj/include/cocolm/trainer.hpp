#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cocolm/adamw.hpp"
#include "cocolm/encoder.hpp"

namespace cocolm {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 32;
  int epochs = 10;
  int max_steps = 0;  // 0: no cap beyond epochs
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  LossSwitches switches;
  int checkpoint_every = 0;
  std::string checkpoint_path;

  // Continual-pretraining setting with a large base model.
  static TrainConfig continual_preset() {
    TrainConfig c;
    c.learning_rate = 1e-5;
    c.batch_size = 128;
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
    if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
    if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 1");
    if (max_steps < 0 || checkpoint_every < 0) throw Error(ErrorCode::InvalidConfig, "negative step count");
  }
};

struct StepRecord {
  int step = 0;
  LossBreakdown loss;
};

template <class Real>
struct TrainResult {
  Parameters<Real> params;
  std::vector<StepRecord> trace;
};

// Mean l_total over the `window` steps ending at `step` (1-based, inclusive).
inline double smoothed_total(std::span<const StepRecord> trace, int step, int window = 25) {
  const int hi = std::min<int>(step, static_cast<int>(trace.size()));
  const int lo = std::max(1, hi - window + 1);
  double sum = 0.0;
  for (int s = lo; s <= hi; ++s) sum += trace[static_cast<std::size_t>(s - 1)].loss.l_total;
  return sum / (hi - lo + 1);
}

inline void write_trace_header(std::ostream& out) { out << "step,l_mlm,l_rel,l_occur,l_total\n"; }

inline void write_trace_row(std::ostream& out, const StepRecord& r) {
  out << r.step << ',' << detail::format_double(r.loss.l_mlm) << ',' << detail::format_double(r.loss.l_rel)
      << ',' << detail::format_double(r.loss.l_occur) << ',' << detail::format_double(r.loss.l_total) << '\n';
}

inline int longest_instance(std::span<const TrainingInstance> instances) {
  std::size_t n = 0;
  for (const auto& inst : instances) {
    n = std::max(n, inst.input_ids.size() + (inst.cooc ? inst.cooc->candidate_ids.size() + 1 : 0));
  }
  return static_cast<int>(n);
}

template <class Real>
void save_checkpoint(const std::string& path, const Parameters<Real>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  write_checkpoint(out, params);
}

template <class Real>
Parameters<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open checkpoint " + path);
  return read_checkpoint<Real>(in);
}

template <class Real>
TrainResult<Real> train(std::span<const TrainingInstance> corpus, const ModelConfig& model_config,
                        const TrainConfig& config,
                        const std::function<void(const StepRecord&)>& on_step = {}) {
  config.validate();
  model_config.validate();
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "no training instances");
  if (longest_instance(corpus) > model_config.max_len) {
    throw Error(ErrorCode::SequenceTooLong, "an instance exceeds max_len");
  }

  Rng init_rng(derive_seed(config.seed, 0));
  Rng order_rng(derive_seed(config.seed, 1));
  Rng dropout_rng(derive_seed(config.seed, 2));

  TrainResult<Real> result{init_params<Real>(model_config, init_rng), {}};
  auto& params = result.params;
  AdamW<Real> optimizer(model_config, {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  Parameters<Real> last_good = params;

  std::vector<std::size_t> order(corpus.size());
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      if (config.max_steps > 0 && step >= config.max_steps) return result;
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<const TrainingInstance*> items;
      for (auto i = start; i < stop; ++i) items.push_back(&corpus[order[i]]);
      const Batch batch = make_batch(items, config.switches);

      ForwardOptions options;
      options.dropout_rng = &dropout_rng;
      const auto act = forward(params, batch, options);
      const auto losses = loss(act, batch);
      if (!std::isfinite(losses.l_total)) {
        if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, last_good);
        throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(step + 1));
      }
      auto grads = backward(params, batch, act);
      clip_global_norm(grads, config.clip_norm);
      last_good = params;
      optimizer.step(params, grads);
      ++step;
      result.trace.push_back({step, losses});
      if (on_step) on_step(result.trace.back());
      if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() &&
          step % config.checkpoint_every == 0) {
        save_checkpoint(config.checkpoint_path, params);
      }
    }
  }
  return result;
}

struct EvalReport {
  LossBreakdown mean_loss;
  double relation_accuracy = 0.0;
  std::size_t relation_count = 0;
  double cooc_accuracy = 0.0;
  std::size_t cooc_count = 0;
  double mlm_accuracy = 0.0;
  std::size_t mlm_count = 0;
};

template <class Real>
int argmax_row(const Matrix<Real>& m, Eigen::Index r) {
  Eigen::Index best = 0;
  m.row(r).maxCoeff(&best);
  return static_cast<int>(best);
}

// Read-only evaluation: mean losses (weighted by batch size) and argmax accuracies.
template <class Real>
EvalReport evaluate(const Parameters<Real>& params, std::span<const TrainingInstance> held_out,
                    int batch_size = 64, const LossSwitches& switches = {}) {
  EvalReport report;
  if (held_out.empty()) return report;
  if (longest_instance(held_out) > params.config.max_len) {
    throw Error(ErrorCode::ShapeMismatch, "held-out instance longer than the model's max_len");
  }
  std::size_t rel_hits = 0, cooc_hits = 0, mlm_hits = 0;
  for (std::size_t start = 0; start < held_out.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(held_out.size(), start + static_cast<std::size_t>(batch_size));
    const auto chunk = held_out.subspan(start, stop - start);
    const auto batch = make_batch(chunk, switches);
    for (const auto& inst : chunk) {
      for (auto id : inst.model_input()) {
        if (id < 0 || id >= params.config.vocab_size) {
          throw Error(ErrorCode::ShapeMismatch, "token id outside the model vocabulary");
        }
      }
    }
    const auto act = forward(params, batch);
    const auto l = loss(act, batch);
    const double w = static_cast<double>(chunk.size());
    report.mean_loss.l_mlm += l.l_mlm * w;
    report.mean_loss.l_rel += l.l_rel * w;
    report.mean_loss.l_occur += l.l_occur * w;
    for (std::size_t k = 0; k < batch.relations.size(); ++k) {
      rel_hits += argmax_row(act.rel_logits, static_cast<Eigen::Index>(k)) == batch.relations[k].label;
    }
    for (std::size_t k = 0; k < batch.cooc.size(); ++k) {
      cooc_hits += argmax_row(act.cooc_logits, static_cast<Eigen::Index>(k)) == batch.cooc[k].label;
    }
    for (std::size_t k = 0; k < batch.mlm.size(); ++k) {
      mlm_hits += argmax_row(act.mlm_logits, static_cast<Eigen::Index>(k)) == batch.mlm[k].target;
    }
    report.relation_count += batch.relations.size();
    report.cooc_count += batch.cooc.size();
    report.mlm_count += batch.mlm.size();
  }
  const double n = static_cast<double>(held_out.size());
  report.mean_loss.l_mlm /= n;
  report.mean_loss.l_rel /= n;
  report.mean_loss.l_occur /= n;
  report.mean_loss.l_total = report.mean_loss.l_mlm + report.mean_loss.l_rel + report.mean_loss.l_occur;
  auto ratio = [](std::size_t hits, std::size_t count) {
    return count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0;
  };
  report.relation_accuracy = ratio(rel_hits, report.relation_count);
  report.cooc_accuracy = ratio(cooc_hits, report.cooc_count);
  report.mlm_accuracy = ratio(mlm_hits, report.mlm_count);
  return report;
}

}  // namespace cocolm
