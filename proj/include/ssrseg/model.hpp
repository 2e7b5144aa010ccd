#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssrseg/ops.hpp"
#include "ssrseg/tensor.hpp"

namespace ssrseg {

struct ModelConfig {
  std::size_t image_channels = 1;
  std::size_t levels = 3;  // encoder down-sampling stages
  std::size_t width = 8;   // channels of the first stage; stage i has width * 2^i
  std::size_t kernel = 3;
  std::vector<std::size_t> dilations{1, 2, 3, 5};
  std::size_t edsr_blocks = 2;
  bool sdc = true;  // scale-aware dilated convolution blocks in the decoders
  bool dsr = true;  // second (image super-resolution) decoder

  void validate() const;
  std::size_t stage_width(std::size_t stage) const { return width << stage; }
};

// Ordered name -> leaf tensor map. Registration order is the iteration
// order everywhere (initialization, checkpoints, optimizer state).
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    double init_gain = 0.0;  // U(-b, b) with b = sqrt(gain / fan_in); 0 => zeros
    std::size_t fan_in = 1;
  };

  void add(const std::string& name, const Shape& shape, double init_gain, std::size_t fan_in);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor<T>> tensors() const;
  std::size_t scalar_count() const;

  // Same values in fresh leaves with independent gradient buffers.
  ParameterStore fork() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
struct SdcOutput {
  Tensor<T> output;
  std::vector<Tensor<T>> scale_maps;       // S_i, each [N,1,spatial...]
  std::vector<Tensor<T>> branch_outputs;   // DilatedConv_i(x), kept for inspection
};

// Parallel dilated convolutions gated voxel-wise by sigmoid scale maps:
//   S_i = sigmoid(Conv_i(x)),  out = sum_i S_i * DilatedConv_i(x)
// The single-channel S_i is broadcast over the branch output channels.
template <typename T>
class SdcBlock {
 public:
  SdcBlock() = default;
  SdcBlock(std::string prefix, std::size_t in_channels, std::size_t out_channels,
           std::vector<std::size_t> dilations, std::size_t kernel, std::size_t rank);

  void register_parameters(ParameterStore<T>& store) const;
  SdcOutput<T> forward(const ParameterStore<T>& params, const Tensor<T>& x) const;

  std::size_t branches() const { return dilations_.size(); }
  const std::vector<std::size_t>& dilations() const { return dilations_; }
  std::string branch_weight(std::size_t i) const;
  std::string branch_bias(std::size_t i) const;
  std::string gate_weight(std::size_t i) const;
  std::string gate_bias(std::size_t i) const;
  ConvSpec branch_spec(std::size_t i) const;
  ConvSpec gate_spec() const;

 private:
  std::string prefix_;
  std::size_t in_channels_ = 0, out_channels_ = 0, kernel_ = 3, rank_ = 3;
  std::vector<std::size_t> dilations_;
};

template <typename T>
SdcOutput<T> sdc_forward(const SdcBlock<T>& block, const ParameterStore<T>& params,
                         const Tensor<T>& x);

template <typename T>
struct ForwardBundle {
  Tensor<T> seg_logits_hr;   // [N,1,2D,2H,2W]
  Tensor<T> sr_image_hr;     // [N,C_img,2D,2H,2W]; undefined without the dsr path
  Tensor<T> fa_feature_seg;  // [N,w,D,H,W]
  Tensor<T> fa_feature_sr;   // undefined without the dsr path
  std::vector<Tensor<T>> scale_maps_seg;  // 4 maps x 3 blocks, deepest block first
  std::vector<Tensor<T>> scale_maps_sr;
};

// Dual-path super-resolution segmentation network: one shared U-Net style
// encoder, a mask decoder (LMSR) and an image decoder (LISR) fed by the same
// skip connections, SDC blocks in every decoder stage, an EDSR-style
// sub-pixel head on the image path and a x2 resized logit head on the mask path.
template <typename T>
class SSRNet {
 public:
  explicit SSRNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

  // Fan-in scaled uniform weights and zero biases, reproducible from seed.
  void init_parameters(std::uint64_t seed);

  ForwardBundle<T> forward(const Tensor<T>& lr_image) const { return forward(params_, lr_image); }
  ForwardBundle<T> forward(const ParameterStore<T>& params, const Tensor<T>& lr_image) const;

  // sigmoid of the HR mask logits; the image decoder and EDSR head are skipped.
  Tensor<T> inference(const Tensor<T>& lr_image) const { return inference(params_, lr_image); }
  Tensor<T> inference(const ParameterStore<T>& params, const Tensor<T>& lr_image) const;

  const std::vector<SdcBlock<T>>& sdc_blocks_seg() const { return sdc_seg_; }
  const std::vector<SdcBlock<T>>& sdc_blocks_sr() const { return sdc_sr_; }

 private:
  struct Encoded {
    std::vector<Tensor<T>> skips;
    Tensor<T> bottom;
  };
  struct Decoded {
    Tensor<T> features;
    std::vector<Tensor<T>> scale_maps;
  };

  void check_input(const Tensor<T>& lr_image) const;
  Tensor<T> conv(const ParameterStore<T>& p, const std::string& name, const Tensor<T>& x,
                 std::size_t in, std::size_t out, std::size_t kernel, bool bias) const;
  Tensor<T> conv_norm_relu(const ParameterStore<T>& p, const std::string& name,
                           const Tensor<T>& x, std::size_t in, std::size_t out) const;
  Encoded encode(const ParameterStore<T>& p, const Tensor<T>& x) const;
  Decoded decode(const ParameterStore<T>& p, const std::string& prefix,
                 const std::vector<SdcBlock<T>>& blocks, const Encoded& enc) const;
  Tensor<T> seg_head(const ParameterStore<T>& p, const Tensor<T>& fa_feature) const;
  Tensor<T> fa_conv(const ParameterStore<T>& p, const std::string& name,
                    const Tensor<T>& decoded) const;

  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                bool bias, double gain);

  ModelConfig config_;
  ParameterStore<T> params_;
  std::vector<SdcBlock<T>> sdc_seg_, sdc_sr_;
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class SdcBlock<float>;
extern template class SdcBlock<double>;
extern template class SSRNet<float>;
extern template class SSRNet<double>;

}  // namespace ssrseg
