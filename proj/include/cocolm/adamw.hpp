#pragma once

#include <cmath>
#include <string>

#include "cocolm/encoder.hpp"

namespace cocolm {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Decay reaches weight matrices and
// embeddings (except the [PAD] row), never biases or layer norms.
template <class Real>
class AdamW {
 public:
  AdamW(const ModelConfig& config, AdamWConfig hyper)
      : hyper_(hyper),
        first_(Parameters<Real>::zeros(config)),
        second_(Parameters<Real>::zeros(config)) {}

  void step(Parameters<Real>& params, Parameters<Real>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    const Real lr = static_cast<Real>(hyper_.learning_rate);
    const Real b1 = static_cast<Real>(hyper_.beta1);
    const Real b2 = static_cast<Real>(hyper_.beta2);
    const Real eps = static_cast<Real>(hyper_.epsilon);
    const Real decay = static_cast<Real>(1.0 - hyper_.learning_rate * hyper_.weight_decay);

    std::vector<Matrix<Real>*> g, m, v;
    grads.for_each([&](const std::string&, Matrix<Real>& x, ParamKind) { g.push_back(&x); });
    first_.for_each([&](const std::string&, Matrix<Real>& x, ParamKind) { m.push_back(&x); });
    second_.for_each([&](const std::string&, Matrix<Real>& x, ParamKind) { v.push_back(&x); });
    std::size_t i = 0;
    params.for_each([&](const std::string& name, Matrix<Real>& p, ParamKind kind) {
      auto& gi = *g[i];
      auto& mi = *m[i];
      auto& vi = *v[i];
      ++i;
      if (kind == ParamKind::Weight || kind == ParamKind::Embedding) {
        if (name == "token_embedding") {
          const Matrix<Real> pad_row = p.row(kPadId);
          p *= decay;
          p.row(kPadId) = pad_row;
        } else {
          p *= decay;
        }
      }
      mi = b1 * mi + (Real(1) - b1) * gi;
      vi = b2 * vi + (Real(1) - b2) * gi.cwiseProduct(gi);
      p.array() -= lr * (mi.array() / static_cast<Real>(c1)) /
                   ((vi.array() / static_cast<Real>(c2)).sqrt() + eps);
    });
  }

  std::size_t steps() const { return t_; }

 private:
  AdamWConfig hyper_;
  Parameters<Real> first_;
  Parameters<Real> second_;
  std::size_t t_ = 0;
};

template <class Real>
double global_norm(const Parameters<Real>& grads) {
  double sq = 0.0;
  grads.for_each([&](const std::string&, const Matrix<Real>& m, ParamKind) {
    sq += static_cast<double>(m.squaredNorm());
  });
  return std::sqrt(sq);
}

// Scales grads so their global norm is at most max_norm; returns the norm before clipping.
template <class Real>
double clip_global_norm(Parameters<Real>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const Real s = static_cast<Real>(max_norm / norm);
    grads.for_each([&](const std::string&, Matrix<Real>& m, ParamKind) { m *= s; });
  }
  return norm;
}

}  // namespace cocolm
