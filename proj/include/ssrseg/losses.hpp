#pragma once

#include <vector>

#include "ssrseg/model.hpp"
#include "ssrseg/tensor.hpp"

namespace ssrseg {

struct LossWeights {
  double alpha = 1.0;    // image reconstruction path
  double beta = 1.0;     // feature affinity
  double gamma = 1.0;    // scale affinity
  double lambda1 = 0.8;  // reconstruction weight inside the lesion
  double lambda2 = 0.2;  // reconstruction weight outside the lesion
  double xi = 1e-5;      // Dice smoothing

  void validate() const;
};

// 1 - (2 sum(p*y) + xi) / (sum(p^2) + sum(y^2) + xi), averaged over the batch axis.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred_prob, const Tensor<T>& target, T xi);

// (lambda1 * sum_in (q-x)^2 + lambda2 * sum_out (q-x)^2) / N where "in" is the
// set of voxels with mask value 1 and N counts all voxels of a sample.
template <typename T>
Tensor<T> weighted_mse_loss(const Tensor<T>& recon, const Tensor<T>& hr_image,
                            const Tensor<T>& lesion_mask, T lambda1, T lambda2);

// Pooled extent used by the affinity losses: max(1, extent / 16).
std::vector<std::size_t> affinity_pool_extents(const Shape& feature_shape);

// F'^T F' where F' is [C, prod(pooled)] from a [1,C,spatial...] feature.
template <typename T>
Tensor<T> gram_matrix(const Tensor<T>& feature, const std::vector<std::size_t>& pooled);

// gram_matrix with the affinity pooling rule.
template <typename T>
Tensor<T> gram_feature(const Tensor<T>& feature);

// Mean squared difference of two equally sized Gram matrices.
template <typename T>
Tensor<T> gram_distance(const Tensor<T>& g_seg, const Tensor<T>& g_sr);

template <typename T>
Tensor<T> fa_loss(const Tensor<T>& feat_seg, const Tensor<T>& feat_sr);

// Scale maps of each branch are resized to the largest map, stacked along
// channels and compared through their spatial Gram matrices.
template <typename T>
Tensor<T> sa_loss(const std::vector<Tensor<T>>& maps_seg, const std::vector<Tensor<T>>& maps_sr,
                  std::size_t expected_maps = 12);

template <typename T>
struct LossTerms {
  Tensor<T> total;
  double dice = 0.0;  // raw (unweighted) term values; 0 for disabled terms
  double lisr = 0.0;
  double fa = 0.0;
  double sa = 0.0;
};

// L = L_dice(sigmoid(seg logits)) + alpha L_lisr + beta L_fa + gamma L_sa.
// Terms whose weight is 0 or whose inputs are absent are not built.
template <typename T>
LossTerms<T> total_loss(const ForwardBundle<T>& bundle, const Tensor<T>& hr_image,
                        const Tensor<T>& hr_mask, const LossWeights& w);

struct Metrics {
  double dsc = 0.0;
  double iou = 0.0;
  double mae = 0.0;
};

// DSC and IOU on the prediction binarized at `threshold` (both 1 when the
// prediction and target are empty); MAE on the soft probabilities.
template <typename T>
Metrics segmentation_metrics(const Tensor<T>& pred_prob, const Tensor<T>& target,
                             double threshold = 0.5);

}  // namespace ssrseg
