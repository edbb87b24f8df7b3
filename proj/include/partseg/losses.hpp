#pragma once

#include <vector>

#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

namespace partseg::loss {

struct LossWeights {
  double lambda_mask = 5.0;
  double lambda_dice = 5.0;
  double lambda_cls = 2.0;
  std::vector<double> w_cls = std::vector<double>(kNumClasses, 1.0);
};

// mean binary cross-entropy over sampled points; probabilities clamped to
// [1e-7, 1-1e-7]
Tensor bce_loss(const Tensor& p, const Tensor& y);

// 1 - 2*sum(p*y) / (sum(p^2) + sum(y^2) + 1e-6), whole-map overlap
Tensor dice_loss(const Tensor& p, const Tensor& y);

// per-class present/absent cross-entropy from (n_cls, 2) logits, summed over
// classes with per-class weights
Tensor cls_loss(const Tensor& logits, const std::vector<double>& presence,
                const std::vector<double>& w_cls);

Tensor total_loss(const Tensor& mask, const Tensor& dice, const Tensor& cls,
                  const LossWeights& w = LossWeights());

// uncertainty-guided point selection: oversample uniformly, keep the most
// uncertain (smallest |logit|) importance fraction, fill the rest uniformly
std::vector<int> sample_uncertain_points(const std::vector<double>& logits, int n_points,
                                         int oversample_ratio, double importance_fraction,
                                         Rng& rng);

}  // namespace partseg::loss
