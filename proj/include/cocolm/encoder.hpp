#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cocolm/masking.hpp"
#include "cocolm/random.hpp"
#include "cocolm/relation.hpp"

namespace cocolm {

template <class Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int num_layers = 2;
  int num_heads = 4;
  int d_ff = 512;
  int max_len = 128;
  int num_relations = kNumDiscourseRelations;
  double dropout_rate = 0.0;
  // "fixed": every matrix ~ truncated normal(0.02). "fan_in": weight matrices
  // use stddev 1/sqrt(fan_in) instead, embeddings keep 0.02.
  std::string init_scheme = "fixed";

  void validate() const {
    if (vocab_size <= kNumReserved) throw Error(ErrorCode::InvalidConfig, "vocab_size too small");
    if (d_model <= 0 || num_heads <= 0 || d_model % num_heads != 0) {
      throw Error(ErrorCode::InvalidConfig, "d_model must be a positive multiple of num_heads");
    }
    if (num_layers < 0 || d_ff <= 0 || max_len <= 0 || num_relations <= 0) {
      throw Error(ErrorCode::InvalidConfig, "non-positive model dimension");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "dropout_rate must be in [0,1)");
    }
    if (init_scheme != "fixed" && init_scheme != "fan_in") {
      throw Error(ErrorCode::InvalidConfig, "init_scheme must be fixed or fan_in");
    }
  }

  int head_dim() const { return d_model / num_heads; }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
                     {"d_ff", c.d_ff},             {"max_len", c.max_len},
                     {"num_relations", c.num_relations}, {"dropout_rate", c.dropout_rate},
                     {"init_scheme", c.init_scheme}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_len = j.value("max_len", c.max_len);
  c.num_relations = j.value("num_relations", c.num_relations);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.init_scheme = j.value("init_scheme", c.init_scheme);
}

// How the optimizer treats a tensor.
enum class ParamKind { Weight, Embedding, Bias, Norm };

template <class Real>
struct LayerParams {
  Matrix<Real> ln1_gain, ln1_bias;
  Matrix<Real> qkv_weight, qkv_bias;  // fused query/key/value projection, d x 3d
  Matrix<Real> out_weight, out_bias;
  Matrix<Real> ln2_gain, ln2_bias;
  Matrix<Real> ff1_weight, ff1_bias;
  Matrix<Real> ff2_weight, ff2_bias;
};

// Pre-LN transformer encoder with a tied MLM projection, the relation head
// softmax(x_i W + b) and a binary co-occurrence head on x_cls.
template <class Real>
struct Parameters {
  ModelConfig config;
  Matrix<Real> token_embedding;     // V x d, also the MLM output projection
  Matrix<Real> position_embedding;  // max_len x d
  Matrix<Real> segment_embedding;   // 2 x d: sequence, candidate
  std::vector<LayerParams<Real>> layers;
  Matrix<Real> final_ln_gain, final_ln_bias;
  Matrix<Real> mlm_bias;            // 1 x V
  Matrix<Real> relation_weight;     // d x R
  Matrix<Real> relation_bias;       // 1 x R
  Matrix<Real> cooc_weight;         // d x 2
  Matrix<Real> cooc_bias;           // 1 x 2

  static Parameters zeros(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    Parameters p;
    p.config = config;
    p.token_embedding = Matrix<Real>::Zero(config.vocab_size, d);
    p.position_embedding = Matrix<Real>::Zero(config.max_len, d);
    p.segment_embedding = Matrix<Real>::Zero(2, d);
    p.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (auto& l : p.layers) {
      l.ln1_gain = Matrix<Real>::Zero(1, d);
      l.ln1_bias = Matrix<Real>::Zero(1, d);
      l.qkv_weight = Matrix<Real>::Zero(d, 3 * d);
      l.qkv_bias = Matrix<Real>::Zero(1, 3 * d);
      l.out_weight = Matrix<Real>::Zero(d, d);
      l.out_bias = Matrix<Real>::Zero(1, d);
      l.ln2_gain = Matrix<Real>::Zero(1, d);
      l.ln2_bias = Matrix<Real>::Zero(1, d);
      l.ff1_weight = Matrix<Real>::Zero(d, config.d_ff);
      l.ff1_bias = Matrix<Real>::Zero(1, config.d_ff);
      l.ff2_weight = Matrix<Real>::Zero(config.d_ff, d);
      l.ff2_bias = Matrix<Real>::Zero(1, d);
    }
    p.final_ln_gain = Matrix<Real>::Zero(1, d);
    p.final_ln_bias = Matrix<Real>::Zero(1, d);
    p.mlm_bias = Matrix<Real>::Zero(1, config.vocab_size);
    p.relation_weight = Matrix<Real>::Zero(d, config.num_relations);
    p.relation_bias = Matrix<Real>::Zero(1, config.num_relations);
    p.cooc_weight = Matrix<Real>::Zero(d, 2);
    p.cooc_bias = Matrix<Real>::Zero(1, 2);
    return p;
  }

  // Visits every tensor in a fixed order as f(name, tensor, kind).
  template <class F>
  void for_each(F&& f) {
    f("token_embedding", token_embedding, ParamKind::Embedding);
    f("position_embedding", position_embedding, ParamKind::Embedding);
    f("segment_embedding", segment_embedding, ParamKind::Embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1_gain", l.ln1_gain, ParamKind::Norm);
      f(p + "ln1_bias", l.ln1_bias, ParamKind::Norm);
      f(p + "qkv_weight", l.qkv_weight, ParamKind::Weight);
      f(p + "qkv_bias", l.qkv_bias, ParamKind::Bias);
      f(p + "out_weight", l.out_weight, ParamKind::Weight);
      f(p + "out_bias", l.out_bias, ParamKind::Bias);
      f(p + "ln2_gain", l.ln2_gain, ParamKind::Norm);
      f(p + "ln2_bias", l.ln2_bias, ParamKind::Norm);
      f(p + "ff1_weight", l.ff1_weight, ParamKind::Weight);
      f(p + "ff1_bias", l.ff1_bias, ParamKind::Bias);
      f(p + "ff2_weight", l.ff2_weight, ParamKind::Weight);
      f(p + "ff2_bias", l.ff2_bias, ParamKind::Bias);
    }
    f("final_ln_gain", final_ln_gain, ParamKind::Norm);
    f("final_ln_bias", final_ln_bias, ParamKind::Norm);
    f("mlm_bias", mlm_bias, ParamKind::Bias);
    f("relation_weight", relation_weight, ParamKind::Weight);
    f("relation_bias", relation_bias, ParamKind::Bias);
    f("cooc_weight", cooc_weight, ParamKind::Weight);
    f("cooc_bias", cooc_bias, ParamKind::Bias);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each(
        [&](const std::string& name, Matrix<Real>& m, ParamKind kind) {
          f(name, static_cast<const Matrix<Real>&>(m), kind);
        });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<Real>& m, ParamKind) {
      n += static_cast<std::size_t>(m.size());
    });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Matrix<Real>& m, ParamKind) { ok = ok && m.allFinite(); });
    return ok;
  }
};

template <class Real>
Parameters<Real> init_params(const ModelConfig& config, Rng& rng) {
  auto p = Parameters<Real>::zeros(config);
  p.for_each([&](const std::string& name, Matrix<Real>& m, ParamKind kind) {
    switch (kind) {
      case ParamKind::Weight:
      case ParamKind::Embedding: {
        const double stddev = kind == ParamKind::Weight && config.init_scheme == "fan_in"
                                  ? 1.0 / std::sqrt(static_cast<double>(m.rows()))
                                  : 0.02;
        for (Eigen::Index i = 0; i < m.size(); ++i) {
          m.data()[i] = static_cast<Real>(rng.truncated_normal(stddev));
        }
        break;
      }
      case ParamKind::Norm:
        if (name.ends_with("gain")) m.setOnes();
        break;
      case ParamKind::Bias:
        break;
    }
  });
  return p;
}

// Which loss terms a batch carries labels for.
struct LossSwitches {
  bool use_mlm = true;
  bool use_rel = true;
  bool use_occur = true;
  bool use_eventuality_mask = true;  // false drops MLM labels of WholeEventuality instances
};

struct MlmLabel {
  int item = 0;
  int position = 0;
  TokenId target = 0;
};

struct RelationLabel {
  int item = 0;
  int position = 0;
  int label = 0;
};

struct CoocTarget {
  int item = 0;
  int label = 0;
};

// Padded batch: ids is size x length row-major, padding is [PAD].
struct Batch {
  int size = 0;
  int length = 0;
  std::vector<TokenId> ids;
  std::vector<int> segment_start;  // first candidate position per item, == length when none
  std::vector<int> lengths;
  std::vector<int> mlm_count;  // |M| per item after switches
  std::vector<MlmLabel> mlm;
  std::vector<RelationLabel> relations;
  std::vector<CoocTarget> cooc;

  TokenId id(int item, int pos) const { return ids[static_cast<std::size_t>(item * length + pos)]; }
  int segment(int item, int pos) const { return pos >= segment_start[static_cast<std::size_t>(item)] ? 1 : 0; }
};

inline Batch make_batch(std::span<const TrainingInstance* const> instances,
                        const LossSwitches& switches = {}) {
  Batch batch;
  batch.size = static_cast<int>(instances.size());
  std::vector<std::vector<TokenId>> inputs;
  inputs.reserve(instances.size());
  for (const auto* inst : instances) {
    inputs.push_back(inst->model_input());
    batch.length = std::max(batch.length, static_cast<int>(inputs.back().size()));
  }
  batch.ids.assign(static_cast<std::size_t>(batch.size * batch.length), kPadId);
  batch.mlm_count.assign(instances.size(), 0);
  for (int b = 0; b < batch.size; ++b) {
    const auto& in = inputs[static_cast<std::size_t>(b)];
    const auto& inst = *instances[static_cast<std::size_t>(b)];
    const int n = static_cast<int>(in.size());
    std::copy(in.begin(), in.end(), batch.ids.begin() + b * batch.length);
    batch.lengths.push_back(n);
    batch.segment_start.push_back(static_cast<int>(inst.input_ids.size()));
    const bool keep_mlm =
        switches.use_mlm &&
        (switches.use_eventuality_mask || inst.strategy != MaskStrategy::WholeEventuality);
    if (keep_mlm) {
      for (const auto& [pos, target] : inst.mlm_targets) {
        if (pos < 0 || pos >= n) throw Error(ErrorCode::MissingLabelPosition, "MLM label out of range");
        batch.mlm.push_back({b, pos, target});
        ++batch.mlm_count[static_cast<std::size_t>(b)];
      }
    }
    if (switches.use_rel) {
      for (const auto& [pos, rel] : inst.relation_targets) {
        if (pos < 0 || pos >= n) {
          throw Error(ErrorCode::MissingLabelPosition, "relation label out of range");
        }
        batch.relations.push_back({b, pos, relation_index(rel)});
      }
    }
    if (switches.use_occur && inst.cooc) batch.cooc.push_back({b, inst.cooc->positive ? 1 : 0});
  }
  return batch;
}

inline Batch make_batch(std::span<const TrainingInstance> instances, const LossSwitches& switches = {}) {
  std::vector<const TrainingInstance*> ptrs;
  for (const auto& i : instances) ptrs.push_back(&i);
  return make_batch(ptrs, switches);
}

struct LossBreakdown {
  double l_mlm = 0.0;
  double l_rel = 0.0;
  double l_occur = 0.0;
  double l_total = 0.0;
};

template <class Real>
struct LayerCache {
  Matrix<Real> input;             // residual stream entering the layer
  Matrix<Real> ln1_hat;           // normalized, before gain/bias
  std::vector<Real> ln1_rstd;
  Matrix<Real> ln1_out;
  Matrix<Real> qkv;
  std::vector<Matrix<Real>> probs;  // [item * heads + head], length x valid_len
  Matrix<Real> attn;              // concatenated head outputs
  Matrix<Real> attn_drop;         // dropout keep-mask scaled by 1/(1-p), empty if none
  Matrix<Real> mid;               // residual after attention
  Matrix<Real> ln2_hat;
  std::vector<Real> ln2_rstd;
  Matrix<Real> ln2_out;
  Matrix<Real> ff_pre;
  Matrix<Real> ff_act;
  Matrix<Real> ff_drop;
};

template <class Real>
struct Activations {
  Matrix<Real> hidden;       // (size*length) x d, final-layer x_i
  Matrix<Real> mlm_logits;   // one row per batch.mlm label
  Matrix<Real> rel_logits;   // one row per batch.relations label
  Matrix<Real> cooc_logits;  // one row per batch.cooc label

  // Backward cache.
  Matrix<Real> embed_drop;
  std::vector<LayerCache<Real>> layers;
  Matrix<Real> final_hat;
  std::vector<Real> final_rstd;

  // x_cls of item b.
  auto cls(int item, int length) const { return hidden.row(static_cast<Eigen::Index>(item) * length); }
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <class Real>
void layer_norm(const Matrix<Real>& x, const Matrix<Real>& gain, const Matrix<Real>& bias,
                Matrix<Real>& hat, std::vector<Real>& rstd, Matrix<Real>& out) {
  const auto rows = x.rows();
  const auto d = static_cast<Real>(x.cols());
  hat.resize(rows, x.cols());
  out.resize(rows, x.cols());
  rstd.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Real mean = x.row(r).sum() / d;
    const auto centered = (x.row(r).array() - mean).matrix();
    const Real var = centered.squaredNorm() / d;
    const Real s = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    rstd[static_cast<std::size_t>(r)] = s;
    hat.row(r) = centered * s;
  }
  out = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

template <class Real>
Matrix<Real> layer_norm_backward(const Matrix<Real>& dy, const Matrix<Real>& hat,
                                 const std::vector<Real>& rstd, const Matrix<Real>& gain,
                                 Matrix<Real>& dgain, Matrix<Real>& dbias) {
  dgain.row(0) += (dy.array() * hat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Real d = static_cast<Real>(dy.cols());
  Matrix<Real> dhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
  Matrix<Real> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Real mean_dhat = dhat.row(r).sum() / d;
    const Real mean_dhat_hat = dhat.row(r).dot(hat.row(r)) / d;
    dx.row(r) = rstd[static_cast<std::size_t>(r)] *
                (dhat.row(r).array() - mean_dhat - hat.row(r).array() * mean_dhat_hat).matrix();
  }
  return dx;
}

template <class Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.7071067811865476)));
}

template <class Real>
Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.7071067811865476)));
  const Real pdf = Real(0.3989422804014327) * std::exp(Real(-0.5) * x * x);
  return cdf + x * pdf;
}

template <class Real>
void softmax_rows(Matrix<Real>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Real mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
}

template <class Real>
Matrix<Real> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Matrix<Real> mask(rows, cols);
  const Real keep = static_cast<Real>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < rate ? Real(0) : keep;
  return mask;
}

template <class Real>
Eigen::Index row_of(const Batch& batch, int item, int pos) {
  return static_cast<Eigen::Index>(item) * batch.length + pos;
}

}  // namespace detail

struct ForwardOptions {
  Rng* dropout_rng = nullptr;  // dropout is active only when set and the rate is positive
};

template <class Real>
Activations<Real> forward(const Parameters<Real>& params, const Batch& batch,
                          const ForwardOptions& options = {}) {
  const auto& cfg = params.config;
  if (batch.length > cfg.max_len) {
    throw Error(ErrorCode::SequenceTooLong, "batch length " + std::to_string(batch.length) +
                                                " exceeds max_len " + std::to_string(cfg.max_len));
  }
  const int d = cfg.d_model;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int T = batch.length;
  const Eigen::Index rows = static_cast<Eigen::Index>(batch.size) * T;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const bool dropout = options.dropout_rng != nullptr && cfg.dropout_rate > 0.0;

  Activations<Real> act;
  Matrix<Real> x(rows, d);
  for (int b = 0; b < batch.size; ++b) {
    for (int t = 0; t < T; ++t) {
      const auto id = batch.id(b, t);
      if (id < 0 || id >= cfg.vocab_size) throw Error(ErrorCode::IdOutOfRange, "token id out of range");
      x.row(detail::row_of<Real>(batch, b, t)) = params.token_embedding.row(id) + params.position_embedding.row(t) +
                                                   params.segment_embedding.row(batch.segment(b, t));
    }
  }
  if (dropout) {
    act.embed_drop = detail::dropout_mask<Real>(rows, d, cfg.dropout_rate, *options.dropout_rng);
    x.array() *= act.embed_drop.array();
  }

  act.layers.resize(params.layers.size());
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& p = params.layers[li];
    auto& c = act.layers[li];
    c.input = x;
    detail::layer_norm(c.input, p.ln1_gain, p.ln1_bias, c.ln1_hat, c.ln1_rstd, c.ln1_out);
    c.qkv.noalias() = c.ln1_out * p.qkv_weight;
    c.qkv.rowwise() += p.qkv_bias.row(0);
    c.attn = Matrix<Real>::Zero(rows, d);
    c.probs.resize(static_cast<std::size_t>(batch.size * heads));
    for (int b = 0; b < batch.size; ++b) {
      const int len = batch.lengths[static_cast<std::size_t>(b)];
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * T;
      for (int h = 0; h < heads; ++h) {
        const auto q = c.qkv.block(r0, h * dh, T, dh);
        const auto k = c.qkv.block(r0, d + h * dh, len, dh);
        const auto v = c.qkv.block(r0, 2 * d + h * dh, len, dh);
        auto& probs = c.probs[static_cast<std::size_t>(b * heads + h)];
        // Keys beyond the item's length are padding and are left out entirely.
        probs.noalias() = (q * k.transpose()) * scale;
        detail::softmax_rows(probs);
        c.attn.block(r0, h * dh, T, dh).noalias() = probs * v;
      }
    }
    Matrix<Real> branch = c.attn * p.out_weight;
    branch.rowwise() += p.out_bias.row(0);
    if (dropout) {
      c.attn_drop = detail::dropout_mask<Real>(rows, d, cfg.dropout_rate, *options.dropout_rng);
      branch.array() *= c.attn_drop.array();
    }
    c.mid = c.input + branch;

    detail::layer_norm(c.mid, p.ln2_gain, p.ln2_bias, c.ln2_hat, c.ln2_rstd, c.ln2_out);
    c.ff_pre.noalias() = c.ln2_out * p.ff1_weight;
    c.ff_pre.rowwise() += p.ff1_bias.row(0);
    c.ff_act = c.ff_pre.unaryExpr([](Real v) { return detail::gelu(v); });
    branch.noalias() = c.ff_act * p.ff2_weight;
    branch.rowwise() += p.ff2_bias.row(0);
    if (dropout) {
      c.ff_drop = detail::dropout_mask<Real>(rows, d, cfg.dropout_rate, *options.dropout_rng);
      branch.array() *= c.ff_drop.array();
    }
    x = c.mid + branch;
  }
  detail::layer_norm(x, params.final_ln_gain, params.final_ln_bias, act.final_hat, act.final_rstd,
                     act.hidden);

  act.mlm_logits.resize(static_cast<Eigen::Index>(batch.mlm.size()), cfg.vocab_size);
  for (std::size_t k = 0; k < batch.mlm.size(); ++k) {
    const auto r = detail::row_of<Real>(batch, batch.mlm[k].item, batch.mlm[k].position);
    act.mlm_logits.row(static_cast<Eigen::Index>(k)).noalias() =
        act.hidden.row(r) * params.token_embedding.transpose();
  }
  if (act.mlm_logits.rows() > 0) act.mlm_logits.rowwise() += params.mlm_bias.row(0);

  act.rel_logits.resize(static_cast<Eigen::Index>(batch.relations.size()), cfg.num_relations);
  for (std::size_t k = 0; k < batch.relations.size(); ++k) {
    const auto r = detail::row_of<Real>(batch, batch.relations[k].item, batch.relations[k].position);
    act.rel_logits.row(static_cast<Eigen::Index>(k)).noalias() =
        act.hidden.row(r) * params.relation_weight + params.relation_bias.row(0);
  }

  act.cooc_logits.resize(static_cast<Eigen::Index>(batch.cooc.size()), 2);
  for (std::size_t k = 0; k < batch.cooc.size(); ++k) {
    const auto r = detail::row_of<Real>(batch, batch.cooc[k].item, 0);
    act.cooc_logits.row(static_cast<Eigen::Index>(k)).noalias() =
        act.hidden.row(r) * params.cooc_weight + params.cooc_bias.row(0);
  }
  return act;
}

namespace detail {

// -log softmax(row)[target], computed stably.
template <class Real>
double nll(const Eigen::Ref<const Matrix<Real>>& row, int target) {
  const double mx = static_cast<double>(row.maxCoeff());
  double sum = 0.0;
  for (Eigen::Index j = 0; j < row.cols(); ++j) sum += std::exp(static_cast<double>(row(0, j)) - mx);
  return std::log(sum) + mx - static_cast<double>(row(0, target));
}

}  // namespace detail

// Per item: mean NLL over its masked tokens, summed NLL over its relation
// targets, NLL of its co-occurrence label. Each term is then averaged over the
// batch; absent terms contribute zero.
template <class Real>
LossBreakdown loss(const Activations<Real>& act, const Batch& batch) {
  LossBreakdown out;
  if (batch.size == 0) return out;
  for (std::size_t k = 0; k < batch.mlm.size(); ++k) {
    const auto& m = batch.mlm[k];
    out.l_mlm += detail::nll<Real>(act.mlm_logits.row(static_cast<Eigen::Index>(k)), m.target) /
                 batch.mlm_count[static_cast<std::size_t>(m.item)];
  }
  for (std::size_t k = 0; k < batch.relations.size(); ++k) {
    out.l_rel += detail::nll<Real>(act.rel_logits.row(static_cast<Eigen::Index>(k)), batch.relations[k].label);
  }
  for (std::size_t k = 0; k < batch.cooc.size(); ++k) {
    out.l_occur += detail::nll<Real>(act.cooc_logits.row(static_cast<Eigen::Index>(k)), batch.cooc[k].label);
  }
  out.l_mlm /= batch.size;
  out.l_rel /= batch.size;
  out.l_occur /= batch.size;
  out.l_total = out.l_mlm + out.l_rel + out.l_occur;
  return out;
}

// Reverse-mode gradients of loss(forward(params, batch)).l_total. `act` must
// come from forward on the same params and batch.
template <class Real>
Parameters<Real> backward(const Parameters<Real>& params, const Batch& batch,
                          const Activations<Real>& act) {
  const auto& cfg = params.config;
  auto grad = Parameters<Real>::zeros(cfg);
  if (batch.size == 0) return grad;
  const int d = cfg.d_model;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int T = batch.length;
  const Eigen::Index rows = static_cast<Eigen::Index>(batch.size) * T;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const Real inv_batch = Real(1) / static_cast<Real>(batch.size);

  Matrix<Real> dz = Matrix<Real>::Zero(rows, d);

  auto softmax_minus_onehot = [](const auto& logits, int target, Real coef) {
    Matrix<Real> g = logits;
    detail::softmax_rows(g);
    g(0, target) -= Real(1);
    return Matrix<Real>(g * coef);
  };

  if (!batch.mlm.empty()) {
    Matrix<Real> dlogits(static_cast<Eigen::Index>(batch.mlm.size()), cfg.vocab_size);
    Matrix<Real> z(static_cast<Eigen::Index>(batch.mlm.size()), d);
    for (std::size_t k = 0; k < batch.mlm.size(); ++k) {
      const auto& m = batch.mlm[k];
      const Real coef = inv_batch / static_cast<Real>(batch.mlm_count[static_cast<std::size_t>(m.item)]);
      const auto ki = static_cast<Eigen::Index>(k);
      dlogits.row(ki) = softmax_minus_onehot(act.mlm_logits.row(ki), m.target, coef);
      z.row(ki) = act.hidden.row(detail::row_of<Real>(batch, m.item, m.position));
    }
    grad.token_embedding.noalias() += dlogits.transpose() * z;
    grad.mlm_bias.row(0) += dlogits.colwise().sum();
    const Matrix<Real> dzm = dlogits * params.token_embedding;
    for (std::size_t k = 0; k < batch.mlm.size(); ++k) {
      dz.row(detail::row_of<Real>(batch, batch.mlm[k].item, batch.mlm[k].position)) +=
          dzm.row(static_cast<Eigen::Index>(k));
    }
  }
  for (std::size_t k = 0; k < batch.relations.size(); ++k) {
    const auto& rl = batch.relations[k];
    const auto ki = static_cast<Eigen::Index>(k);
    const Matrix<Real> g = softmax_minus_onehot(act.rel_logits.row(ki), rl.label, inv_batch);
    const auto r = detail::row_of<Real>(batch, rl.item, rl.position);
    grad.relation_weight.noalias() += act.hidden.row(r).transpose() * g;
    grad.relation_bias += g;
    dz.row(r).noalias() += g * params.relation_weight.transpose();
  }
  for (std::size_t k = 0; k < batch.cooc.size(); ++k) {
    const auto& cl = batch.cooc[k];
    const auto ki = static_cast<Eigen::Index>(k);
    const Matrix<Real> g = softmax_minus_onehot(act.cooc_logits.row(ki), cl.label, inv_batch);
    const auto r = detail::row_of<Real>(batch, cl.item, 0);
    grad.cooc_weight.noalias() += act.hidden.row(r).transpose() * g;
    grad.cooc_bias += g;
    dz.row(r).noalias() += g * params.cooc_weight.transpose();
  }

  Matrix<Real> dx = detail::layer_norm_backward(dz, act.final_hat, act.final_rstd, params.final_ln_gain,
                                                grad.final_ln_gain, grad.final_ln_bias);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& p = params.layers[li];
    const auto& c = act.layers[li];
    auto& g = grad.layers[li];

    // Feed-forward branch: x = mid + drop(gelu(ln2(mid) W1 + b1) W2 + b2).
    Matrix<Real> dbranch = dx;
    if (c.ff_drop.size() > 0) dbranch.array() *= c.ff_drop.array();
    g.ff2_weight.noalias() += c.ff_act.transpose() * dbranch;
    g.ff2_bias.row(0) += dbranch.colwise().sum();
    Matrix<Real> dpre = dbranch * p.ff2_weight.transpose();
    dpre.array() *= c.ff_pre.unaryExpr([](Real v) { return detail::gelu_grad(v); }).array();
    g.ff1_weight.noalias() += c.ln2_out.transpose() * dpre;
    g.ff1_bias.row(0) += dpre.colwise().sum();
    const Matrix<Real> dln2 = dpre * p.ff1_weight.transpose();
    Matrix<Real> dmid = dx + detail::layer_norm_backward(dln2, c.ln2_hat, c.ln2_rstd, p.ln2_gain,
                                                         g.ln2_gain, g.ln2_bias);

    // Attention branch: mid = input + drop(attn Wo + bo).
    dbranch = dmid;
    if (c.attn_drop.size() > 0) dbranch.array() *= c.attn_drop.array();
    g.out_weight.noalias() += c.attn.transpose() * dbranch;
    g.out_bias.row(0) += dbranch.colwise().sum();
    const Matrix<Real> dattn = dbranch * p.out_weight.transpose();
    Matrix<Real> dqkv = Matrix<Real>::Zero(rows, 3 * d);
    for (int b = 0; b < batch.size; ++b) {
      const int len = batch.lengths[static_cast<std::size_t>(b)];
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * T;
      for (int h = 0; h < heads; ++h) {
        const auto& probs = c.probs[static_cast<std::size_t>(b * heads + h)];
        const auto q = c.qkv.block(r0, h * dh, T, dh);
        const auto k = c.qkv.block(r0, d + h * dh, len, dh);
        const auto v = c.qkv.block(r0, 2 * d + h * dh, len, dh);
        const auto da = dattn.block(r0, h * dh, T, dh);
        dqkv.block(r0, 2 * d + h * dh, len, dh).noalias() += probs.transpose() * da;
        Matrix<Real> dprobs = da * v.transpose();
        const Eigen::Matrix<Real, Eigen::Dynamic, 1> dot =
            (dprobs.array() * probs.array()).rowwise().sum();
        Matrix<Real> dscores = (probs.array() * (dprobs.array().colwise() - dot.array())).matrix() * scale;
        dqkv.block(r0, h * dh, T, dh).noalias() += dscores * k;
        dqkv.block(r0, d + h * dh, len, dh).noalias() += dscores.transpose() * q;
      }
    }
    g.qkv_weight.noalias() += c.ln1_out.transpose() * dqkv;
    g.qkv_bias.row(0) += dqkv.colwise().sum();
    const Matrix<Real> dln1 = dqkv * p.qkv_weight.transpose();
    dx = dmid + detail::layer_norm_backward(dln1, c.ln1_hat, c.ln1_rstd, p.ln1_gain, g.ln1_gain,
                                            g.ln1_bias);
  }

  if (act.embed_drop.size() > 0) dx.array() *= act.embed_drop.array();
  for (int b = 0; b < batch.size; ++b) {
    const int len = batch.lengths[static_cast<std::size_t>(b)];
    for (int t = 0; t < len; ++t) {
      const auto r = detail::row_of<Real>(batch, b, t);
      grad.token_embedding.row(batch.id(b, t)) += dx.row(r);
      grad.position_embedding.row(t) += dx.row(r);
      grad.segment_embedding.row(batch.segment(b, t)) += dx.row(r);
    }
  }
  return grad;
}

// Binary checkpoint: "CCLMCKPT", u32 version, u64 header size, JSON header
// (config and tensor table), then every tensor as little-endian float64 in
// header order.
inline constexpr char kCheckpointMagic[8] = {'C', 'C', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
void write_checkpoint(std::ostream& out, const Parameters<Real>& params) {
  nlohmann::json header;
  header["config"] = params.config;
  header["tensors"] = nlohmann::json::array();
  params.for_each([&](const std::string& name, const Matrix<Real>& m, ParamKind) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  const std::string text = header.dump();
  const std::uint64_t size = text.size();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  params.for_each([&](const std::string&, const Matrix<Real>& m, ParamKind) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = static_cast<double>(m.data()[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  });
  if (!out) throw Error(ErrorCode::Io, "failed writing checkpoint");
}

template <class Real>
Parameters<Real> read_checkpoint(std::istream& in) {
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t size = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "not a checkpoint file");
  }
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::ShapeMismatch, "unsupported checkpoint version " + std::to_string(version));
  }
  if (size > (1u << 26)) throw Error(ErrorCode::ShapeMismatch, "checkpoint header too large");
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ShapeMismatch, std::string("bad checkpoint header: ") + e.what());
  }
  auto params = Parameters<Real>::zeros(header.at("config").get<ModelConfig>());
  const auto& tensors = header.at("tensors");
  std::size_t index = 0;
  params.for_each([&](const std::string& name, Matrix<Real>& m, ParamKind) {
    if (index >= tensors.size()) throw Error(ErrorCode::ShapeMismatch, "missing tensor " + name);
    const auto& t = tensors[index++];
    if (t.at("name") != name || t.at("rows").get<Eigen::Index>() != m.rows() ||
        t.at("cols").get<Eigen::Index>() != m.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "tensor " + name + " does not match the config");
    }
  });
  if (index != tensors.size()) throw Error(ErrorCode::ShapeMismatch, "unexpected extra tensors");
  params.for_each([&](const std::string& name, Matrix<Real>& m, ParamKind) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      m.data()[i] = static_cast<Real>(v);
    }
    if (!in) throw Error(ErrorCode::ShapeMismatch, "truncated tensor " + name);
  });
  return params;
}

}  // namespace cocolm
