#include "ssrseg/losses.hpp"

#include <cmath>
#include <string>

#include "ssrseg/ops.hpp"

namespace ssrseg {

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ContractError(std::string(op) + ": shapes differ, " + shape_str(a) + " vs " + shape_str(b));
  }
}

// Mean over the batch axis of a per-sample scalar loss.
template <typename T, typename Fn>
Tensor<T> batch_mean(std::size_t batch, Fn&& per_sample) {
  Tensor<T> acc = per_sample(std::size_t{0});
  for (std::size_t n = 1; n < batch; ++n) acc = add(acc, per_sample(n));
  return batch == 1 ? acc : mul_scalar(acc, T(1) / static_cast<T>(batch));
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {alpha, beta, gamma, lambda1, lambda2}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
  if (!std::isfinite(xi) || xi <= 0.0) throw ConfigError("dice smoothing xi must be positive");
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred_prob, const Tensor<T>& target, T xi) {
  require_same_shape(pred_prob.shape(), target.shape(), "dice_loss");
  auto one = [&](const Tensor<T>& p, const Tensor<T>& y) {
    auto inter = reduce_sum(mul(p, y));
    auto num = add_scalar(mul_scalar(inter, T(2)), xi);
    auto den = add_scalar(add(reduce_sum(square(p)), reduce_sum(square(y))), xi);
    return add_scalar(mul_scalar(div(num, den), T(-1)), T(1));
  };
  if (pred_prob.rank() < 2) return one(pred_prob, target);
  const std::size_t batch = pred_prob.dim(0);
  if (batch == 1) return one(pred_prob, target);
  return batch_mean<T>(batch, [&](std::size_t n) {
    return one(slice_batch(pred_prob, n), slice_batch(target, n));
  });
}

template <typename T>
Tensor<T> weighted_mse_loss(const Tensor<T>& recon, const Tensor<T>& hr_image,
                            const Tensor<T>& lesion_mask, T lambda1, T lambda2) {
  require_same_shape(recon.shape(), hr_image.shape(), "weighted_mse_loss");
  require_same_shape(recon.shape(), lesion_mask.shape(), "weighted_mse_loss");
  const auto m = lesion_mask.data();
  std::vector<T> weights(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) weights[i] = m[i] > T(0.5) ? lambda1 : lambda2;
  // Every sample has the same voxel count, so the batch mean of the
  // per-sample losses is the total divided by all voxels.
  auto sq = square(sub(recon, hr_image));
  return mul_scalar(reduce_sum(mul(sq, Tensor<T>(recon.shape(), std::move(weights)))),
                    T(1) / static_cast<T>(recon.numel()));
}

std::vector<std::size_t> affinity_pool_extents(const Shape& feature_shape) {
  std::vector<std::size_t> out;
  for (std::size_t i = 2; i < feature_shape.size(); ++i) {
    out.push_back(std::max<std::size_t>(1, feature_shape[i] / 16));
  }
  return out;
}

template <typename T>
Tensor<T> gram_matrix(const Tensor<T>& feature, const std::vector<std::size_t>& pooled) {
  if (feature.rank() < 3 || feature.dim(0) != 1) {
    throw ContractError("gram_matrix: expected a single-sample [1,C,spatial...] feature, got " +
                        shape_str(feature.shape()));
  }
  auto p = adaptive_avg_pool(feature, pooled);
  std::size_t cells = 1;
  for (auto e : pooled) cells *= e;
  auto f = reshape(p, {feature.dim(1), cells});
  return matmul(transpose(f), f);
}

template <typename T>
Tensor<T> gram_feature(const Tensor<T>& feature) {
  return gram_matrix(feature, affinity_pool_extents(feature.shape()));
}

template <typename T>
Tensor<T> gram_distance(const Tensor<T>& g_seg, const Tensor<T>& g_sr) {
  require_same_shape(g_seg.shape(), g_sr.shape(), "gram_distance");
  return reduce_mean(square(sub(g_seg, g_sr)));
}

template <typename T>
Tensor<T> fa_loss(const Tensor<T>& feat_seg, const Tensor<T>& feat_sr) {
  require_same_shape(feat_seg.shape(), feat_sr.shape(), "fa_loss");
  if (feat_seg.rank() < 3) throw ContractError("fa_loss: expected [N,C,spatial...] features");
  return batch_mean<T>(feat_seg.dim(0), [&](std::size_t n) {
    const auto a = feat_seg.dim(0) == 1 ? feat_seg : slice_batch(feat_seg, n);
    const auto b = feat_sr.dim(0) == 1 ? feat_sr : slice_batch(feat_sr, n);
    return gram_distance(gram_feature(a), gram_feature(b));
  });
}

namespace {

// Resizes all maps to the largest one and stacks them along channels.
template <typename T>
Tensor<T> stack_scale_maps(const std::vector<Tensor<T>>& maps) {
  const Tensor<T>* largest = &maps.front();
  for (const auto& m : maps) {
    if (m.rank() < 3 || m.dim(1) != 1) {
      throw ContractError("sa_loss: scale maps must be single-channel, got " + shape_str(m.shape()));
    }
    if (m.numel() > largest->numel()) largest = &m;
  }
  const Shape& target_shape = largest->shape();
  const std::vector<std::size_t> target(target_shape.begin() + 2, target_shape.end());
  std::vector<Tensor<T>> resized;
  for (const auto& m : maps) {
    resized.push_back(m.shape() == target_shape ? m : resize_linear(m, target));
  }
  return concat(resized, 1);
}

}  // namespace

template <typename T>
Tensor<T> sa_loss(const std::vector<Tensor<T>>& maps_seg, const std::vector<Tensor<T>>& maps_sr,
                  std::size_t expected_maps) {
  if (maps_seg.size() != expected_maps || maps_sr.size() != expected_maps) {
    throw ContractError("sa_loss: expected " + std::to_string(expected_maps) +
                        " scale maps per branch, got " + std::to_string(maps_seg.size()) + " and " +
                        std::to_string(maps_sr.size()));
  }
  const auto all_seg = stack_scale_maps(maps_seg);
  const auto all_sr = stack_scale_maps(maps_sr);
  require_same_shape(all_seg.shape(), all_sr.shape(), "sa_loss");
  return batch_mean<T>(all_seg.dim(0), [&](std::size_t n) {
    const auto a = all_seg.dim(0) == 1 ? all_seg : slice_batch(all_seg, n);
    const auto b = all_sr.dim(0) == 1 ? all_sr : slice_batch(all_sr, n);
    return gram_distance(gram_feature(a), gram_feature(b));
  });
}

template <typename T>
LossTerms<T> total_loss(const ForwardBundle<T>& bundle, const Tensor<T>& hr_image,
                        const Tensor<T>& hr_mask, const LossWeights& w) {
  w.validate();
  LossTerms<T> out;
  require_same_shape(bundle.seg_logits_hr.shape(), hr_mask.shape(), "total_loss (mask)");
  out.total = dice_loss(sigmoid(bundle.seg_logits_hr), hr_mask, static_cast<T>(w.xi));
  out.dice = static_cast<double>(out.total.item());

  if (w.alpha > 0.0 && bundle.sr_image_hr.defined()) {
    require_same_shape(bundle.sr_image_hr.shape(), hr_image.shape(), "total_loss (image)");
    auto l = weighted_mse_loss(bundle.sr_image_hr, hr_image, hr_mask,
                               static_cast<T>(w.lambda1), static_cast<T>(w.lambda2));
    out.lisr = static_cast<double>(l.item());
    out.total = add(out.total, mul_scalar(l, static_cast<T>(w.alpha)));
  }
  if (w.beta > 0.0 && bundle.fa_feature_sr.defined()) {
    auto l = fa_loss(bundle.fa_feature_seg, bundle.fa_feature_sr);
    out.fa = static_cast<double>(l.item());
    out.total = add(out.total, mul_scalar(l, static_cast<T>(w.beta)));
  }
  if (w.gamma > 0.0 && !bundle.scale_maps_seg.empty() && !bundle.scale_maps_sr.empty()) {
    auto l = sa_loss(bundle.scale_maps_seg, bundle.scale_maps_sr, bundle.scale_maps_seg.size());
    out.sa = static_cast<double>(l.item());
    out.total = add(out.total, mul_scalar(l, static_cast<T>(w.gamma)));
  }
  return out;
}

template <typename T>
Metrics segmentation_metrics(const Tensor<T>& pred_prob, const Tensor<T>& target,
                             double threshold) {
  require_same_shape(pred_prob.shape(), target.shape(), "metrics");
  const auto p = pred_prob.data();
  const auto y = target.data();
  std::size_t inter = 0, pred = 0, truth = 0;
  double abs_err = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pi = static_cast<double>(p[i]) >= threshold;
    const bool yi = y[i] > T(0.5);
    inter += pi && yi;
    pred += pi;
    truth += yi;
    abs_err += std::abs(static_cast<double>(p[i]) - static_cast<double>(y[i]));
  }
  Metrics m;
  const std::size_t uni = pred + truth - inter;
  m.dsc = (pred + truth == 0) ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(pred + truth);
  m.iou = (uni == 0) ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  m.mae = abs_err / static_cast<double>(p.size());
  return m;
}

#define SSRSEG_INSTANTIATE_LOSSES(T)                                                              \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, T);                            \
  template Tensor<T> weighted_mse_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,   \
                                       T);                                                        \
  template Tensor<T> gram_matrix(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> gram_feature(const Tensor<T>&);                                              \
  template Tensor<T> gram_distance(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> fa_loss(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sa_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,        \
                             std::size_t);                                                        \
  template LossTerms<T> total_loss(const ForwardBundle<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                   const LossWeights&);                                           \
  template Metrics segmentation_metrics(const Tensor<T>&, const Tensor<T>&, double);

SSRSEG_INSTANTIATE_LOSSES(float)
SSRSEG_INSTANTIATE_LOSSES(double)

}  // namespace ssrseg
