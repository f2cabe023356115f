#pragma once

#include <cmath>
#include <cstdint>

#include "dseg/errors.hpp"
#include "dseg/model.hpp"

namespace dseg {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay: p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps)).
class AdamW {
 public:
  AdamW() = default;
  AdamW(const DeferralNet& net, AdamWConfig cfg) : cfg_(cfg) {
    for (std::size_t k = 0; k < kParamCount; ++k) {
      m_[k] = ValueGrid(net.params()[k].shape());
      v_[k] = ValueGrid(net.params()[k].shape());
    }
  }

  void step(DeferralNet& net, const DeferralNet::Params& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < kParamCount; ++k) {
      auto p = net.params()[k].data();
      const auto& g = grads[k];
      if (g.size() != p.size()) throw ShapeError("AdamW: gradient size mismatch for " + std::string(kParamNames[k]));
      auto m = m_[k].data();
      auto v = v_[k].data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        p[i] -= lr * (cfg_.weight_decay * p[i] + upd);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  AdamWConfig cfg_{};
  DeferralNet::Params m_{}, v_{};
  std::uint64_t t_ = 0;
};

// lr(epoch) = lr0 * gamma^floor(epoch / step)
struct StepLR {
  double lr0 = 1e-4;
  double gamma = 0.8;
  std::size_t step = 2;

  double at(std::size_t epoch) const {
    if (step == 0) throw ConfigError("StepLR: step must be positive");
    return lr0 * std::pow(gamma, static_cast<double>(epoch / step));
  }
};

}  // namespace dseg
