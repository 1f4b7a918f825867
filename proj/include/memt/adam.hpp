#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "memt/tensor.hpp"

namespace memt {

template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <class T>
using GradMap = std::map<std::string, std::vector<T>>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double base_lr = 1.0;   // multiplies the inverse-sqrt schedule
  int warmup_steps = 400;
  int model_dim = 128;    // schedule scale: model_dim^-0.5
  double clip_norm = 1.0; // global grad-norm clip; 0 disables
};

struct AdamStepResult {
  bool applied = false;
  std::string diagnostic;  // set when the step was rejected
};

// Adam with bias correction and the inverse-square-root schedule with linear
// warmup: lr(s) = base * d^-0.5 * min(s^-0.5, s * warmup^-1.5).
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return step_; }

  double effective_lr(long step) const {
    double s = static_cast<double>(step);
    double w = static_cast<double>(cfg_.warmup_steps);
    return cfg_.base_lr * std::pow(static_cast<double>(cfg_.model_dim), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
  }

  // Applies one update to every parameter present in grads and not frozen.
  // A non-finite gradient anywhere rejects the whole step.
  AdamStepResult step(ParamMap<T>& params, const GradMap<T>& grads,
                      const std::set<std::string>& frozen = {}) {
    for (const auto& [name, g] : grads) {
      for (T x : g) {
        if (!std::isfinite(static_cast<double>(x)))
          return {false, "non-finite gradient in parameter " + name};
      }
    }
    ++step_;
    double lr = effective_lr(step_);

    double scale = 1.0;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (const auto& [name, g] : grads) {
        if (frozen.count(name)) continue;
        for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
      }
      double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end() || frozen.count(name)) continue;
      const std::vector<T>& g = git->second;
      if (g.size() != p.node()->value.size())
        throw std::invalid_argument("adam: gradient shape mismatch for " + name);
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      auto vals = p.raw();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double gi = static_cast<double>(g[i]) * scale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        vals[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    return {true, ""};
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace memt
