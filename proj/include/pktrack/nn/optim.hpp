// Adam with per-group learning rates and optional global-norm clipping.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pktrack/nn/layers.hpp"

namespace pktrack::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_grad_norm = 0.0;  // 0 disables clipping
  std::map<std::string, double> group_lr;
  double default_lr = 1e-3;

  double lr_for(const std::string& group) const {
    auto it = group_lr.find(group);
    return it == group_lr.end() ? default_lr : it->second;
  }
};

class Adam {
 public:
  Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(std::move(cfg)) {
    for (const auto& p : store_.params()) {
      m_.push_back(Mat::Zero(p.tensor.rows(), p.tensor.cols()));
      v_.push_back(Mat::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }

  /// Applies one update from the accumulated gradients, then clears them.
  void step() {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_grad_norm > 0.0) {
      double sq = 0.0;
      for (const auto& p : store_.params()) sq += p.tensor.grad().squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_grad_norm) scale = cfg_.clip_grad_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& params = store_.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Mat g = params[i].tensor.grad() * scale;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const double lr = cfg_.lr_for(params[i].group) * lr_scale_;
      params[i].tensor.mutable_value().array() -=
          lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
    store_.zero_grad();
  }

  long steps() const { return t_; }
  /// Multiplies every group's learning rate (for schedules).
  void set_lr_scale(double s) { lr_scale_ = s; }

 private:
  ParamStore& store_;
  AdamConfig cfg_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
  double lr_scale_ = 1.0;
};

/// Cosine decay from 1 to `floor` over `total` epochs.
inline double cosine_lr_scale(int epoch, int total, double floor = 0.05) {
  if (total <= 1) return 1.0;
  const double x = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(total - 1));
  return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(x * 3.141592653589793));
}

}  // namespace pktrack::nn
