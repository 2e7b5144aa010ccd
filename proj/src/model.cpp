#include "ssrseg/model.hpp"

#include <cmath>
#include <random>

namespace ssrseg {

namespace {

constexpr std::size_t kRank = 3;
// Gains for U(-b, b), b = sqrt(gain / fan_in).
constexpr double kReluGain = 6.0;    // followed by a rectifier
constexpr double kLinearGain = 3.0;  // unit variance preserving

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::vector<std::size_t> doubled(const Shape& shape) {
  std::vector<std::size_t> out;
  for (std::size_t i = 2; i < shape.size(); ++i) out.push_back(2 * shape[i]);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (image_channels == 0) throw ConfigError("model: image_channels must be positive");
  if (levels == 0) throw ConfigError("model: levels must be positive");
  if (width == 0) throw ConfigError("model: width must be positive");
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("model: kernel must be odd");
  if (dilations.empty()) throw ConfigError("model: at least one dilation rate is required");
  for (auto d : dilations) {
    if (d == 0) throw ConfigError("model: dilation rates must be positive");
  }
}

// ---------------------------------------------------------------- ParameterStore

template <typename T>
void ParameterStore<T>::add(const std::string& name, const Shape& shape, double init_gain,
                            std::size_t fan_in) {
  if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.push_back({name, Tensor<T>::zeros(shape, true), init_gain, fan_in});
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return entries_[it->second].value;
}

template <typename T>
std::vector<Tensor<T>> ParameterStore<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

template <typename T>
ParameterStore<T> ParameterStore<T>::fork() const {
  ParameterStore copy = *this;
  for (auto& e : copy.entries_) e.value = e.value.detach(true);
  return copy;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

// ---------------------------------------------------------------- SdcBlock

template <typename T>
SdcBlock<T>::SdcBlock(std::string prefix, std::size_t in_channels, std::size_t out_channels,
                      std::vector<std::size_t> dilations, std::size_t kernel, std::size_t rank)
    : prefix_(std::move(prefix)),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      rank_(rank),
      dilations_(std::move(dilations)) {}

template <typename T>
std::string SdcBlock<T>::branch_weight(std::size_t i) const {
  return prefix_ + ".branch" + std::to_string(i) + ".weight";
}
template <typename T>
std::string SdcBlock<T>::branch_bias(std::size_t i) const {
  return prefix_ + ".branch" + std::to_string(i) + ".bias";
}
template <typename T>
std::string SdcBlock<T>::gate_weight(std::size_t i) const {
  return prefix_ + ".gate" + std::to_string(i) + ".weight";
}
template <typename T>
std::string SdcBlock<T>::gate_bias(std::size_t i) const {
  return prefix_ + ".gate" + std::to_string(i) + ".bias";
}

template <typename T>
ConvSpec SdcBlock<T>::branch_spec(std::size_t i) const {
  return ConvSpec::same(rank_, in_channels_, out_channels_, kernel_, dilations_.at(i));
}

template <typename T>
ConvSpec SdcBlock<T>::gate_spec() const {
  return ConvSpec::same(rank_, in_channels_, 1, kernel_, 1);
}

template <typename T>
void SdcBlock<T>::register_parameters(ParameterStore<T>& store) const {
  std::size_t taps = 1;
  for (std::size_t a = 0; a < rank_; ++a) taps *= kernel_;
  Shape branch{out_channels_, in_channels_};
  Shape gate{1, in_channels_};
  for (std::size_t a = 0; a < rank_; ++a) {
    branch.push_back(kernel_);
    gate.push_back(kernel_);
  }
  const std::size_t fan_in = in_channels_ * taps;
  for (std::size_t i = 0; i < branches(); ++i) {
    store.add(branch_weight(i), branch, kLinearGain, fan_in);
    store.add(branch_bias(i), {out_channels_}, 0.0, 1);
    store.add(gate_weight(i), gate, kLinearGain, fan_in);
    store.add(gate_bias(i), {1}, 0.0, 1);
  }
}

template <typename T>
SdcOutput<T> SdcBlock<T>::forward(const ParameterStore<T>& params, const Tensor<T>& x) const {
  if (x.rank() != rank_ + 2 || x.dim(1) != in_channels_) {
    throw ContractError("sdc block " + prefix_ + ": input " + shape_str(x.shape()) +
                        " does not have " + std::to_string(in_channels_) + " channels on axis 1");
  }
  SdcOutput<T> out;
  for (std::size_t i = 0; i < branches(); ++i) {
    auto branch = conv_nd(x, params.get(branch_weight(i)), params.get(branch_bias(i)), branch_spec(i));
    auto scale = sigmoid(conv_nd(x, params.get(gate_weight(i)), params.get(gate_bias(i)), gate_spec()));
    auto term = mul(branch, scale);
    out.output = out.output.defined() ? add(out.output, term) : term;
    out.scale_maps.push_back(std::move(scale));
    out.branch_outputs.push_back(std::move(branch));
  }
  return out;
}

template <typename T>
SdcOutput<T> sdc_forward(const SdcBlock<T>& block, const ParameterStore<T>& params,
                         const Tensor<T>& x) {
  return block.forward(params, x);
}

// ---------------------------------------------------------------- SSRNet

template <typename T>
SSRNet<T>::SSRNet(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const std::size_t k = c.kernel;

  std::size_t in = c.image_channels;
  for (std::size_t i = 0; i < c.levels; ++i) {
    const std::size_t w = c.stage_width(i);
    add_conv("encoder." + std::to_string(i) + ".conv1", in, w, k, false, kReluGain);
    add_conv("encoder." + std::to_string(i) + ".conv2", w, w, k, false, kReluGain);
    in = w;
  }
  add_conv("encoder.bottleneck.conv1", in, in, k, false, kReluGain);
  add_conv("encoder.bottleneck.conv2", in, in, k, false, kReluGain);

  auto build_decoder = [&](const std::string& prefix, std::vector<SdcBlock<T>>& blocks) {
    std::size_t below = c.stage_width(c.levels - 1);
    for (std::size_t j = 0; j < c.levels; ++j) {
      const std::size_t level = c.levels - 1 - j;
      const std::size_t w = c.stage_width(level);
      const std::string stage = prefix + "." + std::to_string(j);
      add_conv(stage + ".conv1", below + w, w, k, false, kReluGain);
      if (c.sdc) {
        blocks.emplace_back(stage + ".sdc", w, w, c.dilations, k, kRank);
        blocks.back().register_parameters(params_);
      } else {
        add_conv(stage + ".conv2", w, w, k, false, kReluGain);
      }
      below = w;
    }
  };

  build_decoder("decoder_seg", sdc_seg_);
  add_conv("fa_seg", c.width, c.width, k, true, kReluGain);
  add_conv("seg_head", c.width, 1, 1, true, kLinearGain);

  if (c.dsr) {
    build_decoder("decoder_sr", sdc_sr_);
    add_conv("fa_sr", c.width, c.width, k, true, kReluGain);
    for (std::size_t b = 0; b < c.edsr_blocks; ++b) {
      add_conv("edsr." + std::to_string(b) + ".conv1", c.width, c.width, k, true, kReluGain);
      add_conv("edsr." + std::to_string(b) + ".conv2", c.width, c.width, k, true, kLinearGain);
    }
    add_conv("edsr.upsample", c.width, c.image_channels * 8, k, true, kLinearGain);
  }
}

template <typename T>
void SSRNet<T>::add_conv(const std::string& name, std::size_t in, std::size_t out,
                         std::size_t kernel, bool bias, double gain) {
  Shape shape{out, in, kernel, kernel, kernel};
  params_.add(name + ".weight", shape, gain, in * kernel * kernel * kernel);
  if (bias) params_.add(name + ".bias", {out}, 0.0, 1);
}

template <typename T>
void SSRNet<T>::init_parameters(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& e : params_.entries()) {
    std::vector<T> v(e.value.numel(), T(0));
    if (e.init_gain > 0.0) {
      const double bound = std::sqrt(e.init_gain / static_cast<double>(e.fan_in));
      for (auto& x : v) x = static_cast<T>((2.0 * unit_uniform(rng) - 1.0) * bound);
    }
    e.value.set_leaf_data(std::move(v));
  }
}

template <typename T>
void SSRNet<T>::check_input(const Tensor<T>& lr_image) const {
  const Shape& s = lr_image.shape();
  if (s.size() != 5 || s[1] != config_.image_channels) {
    throw ContractError("ssrnet: expected input [N," + std::to_string(config_.image_channels) +
                        ",D,H,W], got " + shape_str(s));
  }
  const std::size_t factor = std::size_t{1} << config_.levels;
  for (std::size_t i = 2; i < 5; ++i) {
    if (s[i] % factor != 0) {
      throw ConfigError("ssrnet: spatial extent " + std::to_string(s[i]) + " on axis " +
                        std::to_string(i) + " must be divisible by 2^levels = " +
                        std::to_string(factor));
    }
  }
}

template <typename T>
Tensor<T> SSRNet<T>::conv(const ParameterStore<T>& p, const std::string& name, const Tensor<T>& x,
                          std::size_t in, std::size_t out, std::size_t kernel, bool bias) const {
  return conv_nd(x, p.get(name + ".weight"), bias ? p.get(name + ".bias") : Tensor<T>(),
                 ConvSpec::same(kRank, in, out, kernel));
}

template <typename T>
Tensor<T> SSRNet<T>::conv_norm_relu(const ParameterStore<T>& p, const std::string& name,
                                    const Tensor<T>& x, std::size_t in, std::size_t out) const {
  return relu(instance_norm(conv(p, name, x, in, out, config_.kernel, false)));
}

template <typename T>
typename SSRNet<T>::Encoded SSRNet<T>::encode(const ParameterStore<T>& p, const Tensor<T>& x) const {
  Encoded enc;
  Tensor<T> h = x;
  std::size_t in = config_.image_channels;
  for (std::size_t i = 0; i < config_.levels; ++i) {
    const std::size_t w = config_.stage_width(i);
    const std::string stage = "encoder." + std::to_string(i);
    h = conv_norm_relu(p, stage + ".conv1", h, in, w);
    h = conv_norm_relu(p, stage + ".conv2", h, w, w);
    enc.skips.push_back(h);
    const Shape& s = h.shape();
    h = adaptive_avg_pool(h, {s[2] / 2, s[3] / 2, s[4] / 2});
    in = w;
  }
  h = conv_norm_relu(p, "encoder.bottleneck.conv1", h, in, in);
  enc.bottom = conv_norm_relu(p, "encoder.bottleneck.conv2", h, in, in);
  return enc;
}

template <typename T>
typename SSRNet<T>::Decoded SSRNet<T>::decode(const ParameterStore<T>& p, const std::string& prefix,
                                              const std::vector<SdcBlock<T>>& blocks,
                                              const Encoded& enc) const {
  Decoded dec;
  Tensor<T> h = enc.bottom;
  std::size_t below = config_.stage_width(config_.levels - 1);
  for (std::size_t j = 0; j < config_.levels; ++j) {
    const std::size_t level = config_.levels - 1 - j;
    const std::size_t w = config_.stage_width(level);
    const std::string stage = prefix + "." + std::to_string(j);
    h = resize_linear(h, doubled(h.shape()));
    h = concat<T>({h, enc.skips[level]}, 1);
    h = conv_norm_relu(p, stage + ".conv1", h, below + w, w);
    if (config_.sdc) {
      auto sdc = sdc_forward(blocks[j], p, h);
      h = relu(instance_norm(sdc.output));
      for (auto& m : sdc.scale_maps) dec.scale_maps.push_back(std::move(m));
    } else {
      h = conv_norm_relu(p, stage + ".conv2", h, w, w);
    }
    below = w;
  }
  dec.features = std::move(h);
  return dec;
}

template <typename T>
Tensor<T> SSRNet<T>::fa_conv(const ParameterStore<T>& p, const std::string& name,
                             const Tensor<T>& decoded) const {
  return relu(conv(p, name, decoded, config_.width, config_.width, config_.kernel, true));
}

template <typename T>
Tensor<T> SSRNet<T>::seg_head(const ParameterStore<T>& p, const Tensor<T>& fa_feature) const {
  auto logits = conv(p, "seg_head", fa_feature, config_.width, 1, 1, true);
  return resize_linear(logits, doubled(logits.shape()));
}

template <typename T>
ForwardBundle<T> SSRNet<T>::forward(const ParameterStore<T>& p, const Tensor<T>& lr_image) const {
  check_input(lr_image);
  const Encoded enc = encode(p, lr_image);
  ForwardBundle<T> out;

  auto seg = decode(p, "decoder_seg", sdc_seg_, enc);
  out.fa_feature_seg = fa_conv(p, "fa_seg", seg.features);
  out.seg_logits_hr = seg_head(p, out.fa_feature_seg);
  out.scale_maps_seg = std::move(seg.scale_maps);

  if (config_.dsr) {
    auto sr = decode(p, "decoder_sr", sdc_sr_, enc);
    out.fa_feature_sr = fa_conv(p, "fa_sr", sr.features);
    Tensor<T> h = out.fa_feature_sr;
    const std::size_t w = config_.width;
    for (std::size_t b = 0; b < config_.edsr_blocks; ++b) {
      const std::string blk = "edsr." + std::to_string(b);
      auto r = relu(conv(p, blk + ".conv1", h, w, w, config_.kernel, true));
      h = add(h, conv(p, blk + ".conv2", r, w, w, config_.kernel, true));
    }
    auto up = conv(p, "edsr.upsample", h, w, config_.image_channels * 8, config_.kernel, true);
    out.sr_image_hr = pixel_shuffle(up, 2);
    out.scale_maps_sr = std::move(sr.scale_maps);
  }
  return out;
}

template <typename T>
Tensor<T> SSRNet<T>::inference(const ParameterStore<T>& p, const Tensor<T>& lr_image) const {
  check_input(lr_image);
  const Encoded enc = encode(p, lr_image);
  auto seg = decode(p, "decoder_seg", sdc_seg_, enc);
  return sigmoid(seg_head(p, fa_conv(p, "fa_seg", seg.features)));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class SdcBlock<float>;
template class SdcBlock<double>;
template class SSRNet<float>;
template class SSRNet<double>;
template SdcOutput<float> sdc_forward(const SdcBlock<float>&, const ParameterStore<float>&,
                                      const Tensor<float>&);
template SdcOutput<double> sdc_forward(const SdcBlock<double>&, const ParameterStore<double>&,
                                       const Tensor<double>&);

}  // namespace ssrseg
