#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "parabart/tensor.hpp"

namespace parabart {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// One decoupled-weight-decay Adam update of a single parameter buffer.
/// `step` is the 1-based step index used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::size_t step, const AdamWOptions& opt) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw_update: buffer sizes differ");
  }
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T lr = static_cast<T>(opt.lr);
  const T decay = static_cast<T>(1.0 - opt.lr * opt.weight_decay);
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T c1 = static_cast<T>(1.0 / bc1), c2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(opt.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T{1} - b1) * g;
    v[i] = b2 * v[i] + (T{1} - b2) * g * g;
    const T mhat = m[i] * c1;
    const T vhat = v[i] * c2;
    param[i] = param[i] * decay - lr * mhat / (std::sqrt(vhat) + eps);
  }
}

/// AdamW over parameter groups with per-group options. Parameters that
/// received no gradient since the last zero_grad() are left untouched.
template <typename T>
class AdamW {
 public:
  struct Group {
    std::vector<BasicTensor<T>> params;
    AdamWOptions options;
  };

  void add_group(std::vector<BasicTensor<T>> params, AdamWOptions options) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), T{0});
      v_.emplace_back(p.numel(), T{0});
    }
    groups_.push_back({std::move(params), options});
  }

  void step() {
    ++step_count_;
    std::size_t slot = 0;
    for (auto& group : groups_) {
      for (auto& p : group.params) {
        if (p.has_grad()) {
          adamw_update<T>(p.mutable_data(), p.grad(), m_[slot], v_[slot], step_count_, group.options);
        }
        ++slot;
      }
    }
  }

  void zero_grad() {
    for (auto& group : groups_)
      for (auto& p : group.params) p.zero_grad();
  }

  std::size_t step_count() const { return step_count_; }
  void set_step_count(std::size_t n) { step_count_ = n; }
  std::vector<Group>& groups() { return groups_; }
  const std::vector<Group>& groups() const { return groups_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_count_ = 0;
};

template <typename T>
double global_grad_norm(std::span<const BasicTensor<T>> params) {
  double total = 0.0;
  for (const auto& p : params)
    for (T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(total);
}

/// Rescales gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const BasicTensor<T>> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params)
      if (p.has_grad())
        for (T& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

}  // namespace parabart
