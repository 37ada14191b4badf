// Adam over a ParamStore. Moments are keyed by parameter path; parameters that
// are frozen or received no gradient are left untouched.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "lsirr/nn.hpp"

namespace lsirr::optim {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }

  std::map<std::string, Tensor<T>>& first_moments() { return m_; }
  std::map<std::string, Tensor<T>>& second_moments() { return v_; }
  const std::map<std::string, Tensor<T>>& first_moments() const { return m_; }
  const std::map<std::string, Tensor<T>>& second_moments() const { return v_; }

  void step(nn::ParamStore<T>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (auto& [path, p] : params.entries()) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      const auto& g = p.grad_buffer();
      auto& m = moment(m_, path, g.shape());
      auto& v = moment(v_, path, g.shape());
      auto& w = p.mutable_value();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * g[i];
        v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
        const double mhat = static_cast<double>(m[i]) / c1;
        const double vhat = static_cast<double>(v[i]) / c2;
        w[i] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  static Tensor<T>& moment(std::map<std::string, Tensor<T>>& store, const std::string& path, const Shape& shape) {
    auto it = store.find(path);
    if (it == store.end()) it = store.emplace(path, Tensor<T>(shape)).first;
    return it->second;
  }

  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Tensor<T>> m_, v_;
};

}  // namespace lsirr::optim
