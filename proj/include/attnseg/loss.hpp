#pragma once

#include "attnseg/tensor.hpp"

namespace attnseg {

/// L = lambda * L_S + (1 - lambda) * L_C, both binary cross-entropies.
struct LossBreakdown {
  Scalar seg_loss = 0.0;
  Scalar class_loss = 0.0;
  Scalar total = 0.0;
  Scalar lambda = 0.0;
};

constexpr Scalar kBceEps = 1e-7;

/// Mean binary cross-entropy, probabilities clamped to [eps, 1-eps].
Scalar bce(const Tensor& prob, const Tensor& target);
Scalar bce(Scalar prob, Scalar target);

/// d(bce)/d(prob); zero where the clamp is active.
Tensor bce_grad(const Tensor& prob, const Tensor& target);
Scalar bce_grad(Scalar prob, Scalar target);

LossBreakdown joint_loss(const Tensor& seg_prob, const Tensor& mask, Scalar class_prob,
                         Scalar label, Scalar lambda);

/// Segmentation-only reduction of the joint loss (lambda pinned to 1).
LossBreakdown seg_only_loss(const Tensor& seg_prob, const Tensor& mask);

}  // namespace attnseg
