#include "gssm/optim.hpp"

#include <atomic>
#include <cmath>

namespace gssm::ad {

namespace {
std::atomic<std::uint64_t> g_global_steps{0};
}

Adam::Adam(std::vector<Param*> params, AdamConfig config)
    : params_(std::move(params)), state_(params_.size()), config_(config) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    state_[i].m = Matrix::Zero(params_[i]->value.rows(), params_[i]->value.cols());
    state_[i].v = Matrix::Zero(params_[i]->value.rows(), params_[i]->value.cols());
  }
}

std::uint64_t Adam::global_step_count() { return g_global_steps.load(); }

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    Moments& s = state_[i];
    if (p.grad.size() != p.value.size() || !p.grad.allFinite()) {
      ++skipped_;
      continue;
    }
    ++s.t;
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * p.grad;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * p.grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.t));
    p.value.array() -= config_.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + config_.eps);
  }
  ++steps_;
  ++g_global_steps;
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

double global_grad_norm(const std::vector<Param*>& params) {
  double sq = 0.0;
  for (const Param* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

double clip_global_norm(const std::vector<Param*>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (std::isfinite(norm) && norm > max_norm) {
    const double s = max_norm / norm;
    for (Param* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace gssm::ad
