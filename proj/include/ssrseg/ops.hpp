#pragma once

#include <cstddef>
#include <vector>

#include "ssrseg/tensor.hpp"

namespace ssrseg {

// Geometry of one convolution. All per-axis vectors have the spatial rank.
struct ConvSpec {
  std::vector<std::size_t> kernel;
  std::vector<std::size_t> dilation;
  std::vector<std::size_t> stride;
  std::vector<std::size_t> padding;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  std::size_t rank() const { return kernel.size(); }

  // Stride 1 with padding dilation*(kernel-1)/2 on every axis, which keeps
  // the spatial extents unchanged for odd kernels.
  static ConvSpec same(std::size_t rank, std::size_t in_channels, std::size_t out_channels,
                       std::size_t kernel, std::size_t dilation = 1);

  // Throws ConfigError on malformed geometry.
  void validate() const;
  // floor((in + 2p - d(k-1) - 1)/s) + 1 per axis; ConfigError if < 1.
  std::vector<std::size_t> output_extents(const std::vector<std::size_t>& in) const;
};

// Zero-padded, dilated, strided cross-correlation over 2 or 3 spatial axes.
// input [N,Cin,spatial...], weight [Cout,Cin,kernel...], bias [Cout] or undefined.
template <typename T>
Tensor<T> conv_nd(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                  const ConvSpec& spec);

// Mean over near-even contiguous bins: bin i of n over extent L covers
// [floor(i*L/n), ceil((i+1)*L/n)). Works on 1-3 spatial axes.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, const std::vector<std::size_t>& target);

// Multi-linear resampling with half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> resize_linear(const Tensor<T>& input, const std::vector<std::size_t>& target);

// [N, C*r^d, s...] -> [N, C, r*s...] and its inverse.
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& input, std::size_t factor);
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& input, std::size_t factor);

// Per (sample, channel) normalization over the spatial axes, no affine part.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, T eps = T(1e-5));

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> square(const Tensor<T>& x);

// Binary elementwise ops. Operands must have equal shapes, or one of them
// is a single value, or one of them has channel extent 1 (axis 1) with the
// other extents equal, in which case it is broadcast across channels.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T value);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
// Sub-tensor [index, index+1) along axis 0, keeping the leading extent.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t index);
template <typename T>
Tensor<T> transpose(const Tensor<T>& matrix);
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x);

}  // namespace ssrseg
