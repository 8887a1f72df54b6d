#include "vlminv/nn.hpp"

#include <cmath>

namespace vlminv::nn {

void init_dense(Matrix& weight, Rng& rng, Real gain) {
  const Real scale = gain / std::sqrt(static_cast<Real>(weight.cols()));
  std::normal_distribution<Real> normal(0.0, 1.0);
  for (Index j = 0; j < weight.cols(); ++j)
    for (Index i = 0; i < weight.rows(); ++i) weight(i, j) = scale * normal(rng);
}

void zero_like(const std::vector<ParamRef>& src, const std::vector<ParamRef>& dst) {
  if (src.size() != dst.size()) throw ContractViolation("parameter tables differ in length");
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].value->setZero(src[i].value->rows(), src[i].value->cols());
}

Adam::Adam(std::vector<ParamRef> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    first_moment_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    second_moment_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
  }
}

void Adam::step(const std::vector<ParamRef>& grads) {
  if (grads.size() != params_.size()) throw ContractViolation("gradient table does not match parameters");
  ++step_count_;
  const Real c1 = 1.0 - std::pow(options_.beta1, static_cast<Real>(step_count_));
  const Real c2 = 1.0 - std::pow(options_.beta2, static_cast<Real>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Matrix& g = *grads[i].value;
    first_moment_[i] = options_.beta1 * first_moment_[i] + (1.0 - options_.beta1) * g;
    second_moment_[i] = options_.beta2 * second_moment_[i] + (1.0 - options_.beta2) * g.cwiseAbs2();
    params_[i].value->array() -= options_.learning_rate * (first_moment_[i].array() / c1) /
                                 ((second_moment_[i].array() / c2).sqrt() + options_.epsilon);
  }
}

}  // namespace vlminv::nn
