#include "attnseg/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace attnseg {

namespace {

inline Scalar clamp_prob(Scalar p) {
  if (p < kBceEps) return kBceEps;
  if (p > 1.0 - kBceEps) return 1.0 - kBceEps;
  return p;
}

}  // namespace

Scalar bce(Scalar prob, Scalar target) {
  Scalar p = clamp_prob(prob);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

Scalar bce(const Tensor& prob, const Tensor& target) {
  check_same_shape(prob, target, "bce");
  if (prob.empty()) throw std::invalid_argument("bce: empty input");
  Scalar sum = 0.0;
  for (size_t i = 0; i < prob.v.size(); ++i) sum += bce(prob.v[i], target.v[i]);
  return sum / static_cast<Scalar>(prob.v.size());
}

Scalar bce_grad(Scalar prob, Scalar target) {
  if (prob < kBceEps || prob > 1.0 - kBceEps) return 0.0;  // clamp region
  return (prob - target) / (prob * (1.0 - prob));
}

Tensor bce_grad(const Tensor& prob, const Tensor& target) {
  check_same_shape(prob, target, "bce_grad");
  Tensor g = prob;
  const Scalar inv_n = 1.0 / static_cast<Scalar>(prob.v.size());
  for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = bce_grad(prob.v[i], target.v[i]) * inv_n;
  return g;
}

LossBreakdown joint_loss(const Tensor& seg_prob, const Tensor& mask, Scalar class_prob,
                         Scalar label, Scalar lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("lambda must be in [0, 1], got " + std::to_string(lambda));
  LossBreakdown b;
  b.lambda = lambda;
  b.seg_loss = bce(seg_prob, mask);
  b.class_loss = bce(class_prob, label);
  b.total = lambda * b.seg_loss + (1.0 - lambda) * b.class_loss;
  return b;
}

LossBreakdown seg_only_loss(const Tensor& seg_prob, const Tensor& mask) {
  LossBreakdown b;
  b.lambda = 1.0;
  b.seg_loss = bce(seg_prob, mask);
  b.class_loss = 0.0;
  b.total = b.seg_loss;
  return b;
}

}  // namespace attnseg
