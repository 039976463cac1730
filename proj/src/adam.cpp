#include "compostruct/adam.hpp"

#include <cmath>
#include <string>

namespace compostruct {

void AdamState::step(std::span<Tensor* const> params) {
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (m_[k].size() != params[k]->size())
      throw ShapeError("adam: parameter " + std::to_string(k) + " changed shape between steps");
    for (double g : params[k]->grad())
      if (!std::isfinite(g))
        throw NonFiniteError("adam: non-finite gradient in parameter " + std::to_string(k) + " at step " +
                             std::to_string(step_ + 1));
  }

  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    if (!p.has_grad()) p.zero_grad();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace compostruct
