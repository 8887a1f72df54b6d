#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vlminv/core.hpp"
#include "vlminv/rng.hpp"

// Small dense-network helpers shared by the toy models.
namespace vlminv::nn {

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return (Scalar(1) + (-x).exp()).inverse();
}

/// Named handle to one parameter tensor of a model.
struct ParamRef {
  std::string name;
  Matrix* value;
};

/// Gaussian init scaled by 1/sqrt(fan_in).
void init_dense(Matrix& weight, Rng& rng, Real gain = 1.0);

/// Copies the shape of every tensor and zeroes it.
void zero_like(const std::vector<ParamRef>& src, const std::vector<ParamRef>& dst);

struct AdamOptions {
  Real learning_rate = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ParamRef> params, AdamOptions options);

  /// `grads` must be index-aligned with the parameters given at construction.
  void step(const std::vector<ParamRef>& grads);
  void set_learning_rate(Real lr) { options_.learning_rate = lr; }

 private:
  std::vector<ParamRef> params_;
  std::vector<Matrix> first_moment_;
  std::vector<Matrix> second_moment_;
  AdamOptions options_;
  long step_count_ = 0;
};

}  // namespace vlminv::nn
