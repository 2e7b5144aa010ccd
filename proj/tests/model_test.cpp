#include <gtest/gtest.h>

#include <cmath>

#include "ssrseg/losses.hpp"
#include "ssrseg/model.hpp"
#include "test_util.hpp"

namespace ssrseg {
namespace {

using testing::Rng;
using TD = Tensor<double>;
using TF = Tensor<float>;

ModelConfig small_config() {
  ModelConfig c;
  c.levels = 2;
  c.width = 2;
  return c;
}

template <typename T>
void set_param(ParameterStore<T>& store, const std::string& name, std::vector<T> values) {
  for (auto& e : store.entries()) {
    if (e.name == name) {
      e.value.set_leaf_data(std::move(values));
      return;
    }
  }
  FAIL() << "no parameter " << name;
}

template <typename T>
void fill_param(ParameterStore<T>& store, const std::string& name, T value) {
  set_param(store, name, std::vector<T>(store.get(name).numel(), value));
}

// Random parameters for a standalone SDC block.
template <typename T>
ParameterStore<T> random_block_params(const SdcBlock<T>& block, Rng& rng) {
  ParameterStore<T> store;
  block.register_parameters(store);
  for (auto& e : store.entries()) {
    std::vector<T> v(e.value.numel());
    for (auto& x : v) x = static_cast<T>(rng.uniform(-0.5, 0.5));
    e.value.set_leaf_data(std::move(v));
  }
  return store;
}

TEST(SSRNet, OutputsAreTwiceTheInputExtents) {
  SSRNet<float> net(ModelConfig{});
  net.init_parameters(1);
  Rng rng(2);
  auto out = net.forward(rng.tensor<float>({1, 1, 16, 16, 16}, 0, 1));
  EXPECT_EQ(out.seg_logits_hr.shape(), (Shape{1, 1, 32, 32, 32}));
  EXPECT_EQ(out.sr_image_hr.shape(), (Shape{1, 1, 32, 32, 32}));
  EXPECT_EQ(out.scale_maps_seg.size(), 12u);
  EXPECT_EQ(out.scale_maps_sr.size(), 12u);
  EXPECT_EQ(out.fa_feature_seg.shape(), out.fa_feature_sr.shape());
}

TEST(SSRNet, IndivisibleExtentsNameTheRequiredDivisibility) {
  SSRNet<float> net(ModelConfig{});
  try {
    net.forward(TF::zeros({1, 1, 16, 12, 16}));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 2^levels = 8"), std::string::npos) << e.what();
  }
}

TEST(SSRNet, ZeroSegHeadGivesZeroLogits) {
  SSRNet<double> net(small_config());
  net.init_parameters(3);
  fill_param(net.parameters(), "seg_head.weight", 0.0);
  fill_param(net.parameters(), "seg_head.bias", 0.0);
  Rng rng(4);
  auto out = net.forward(rng.tensor({1, 1, 8, 8, 8}, 0, 1));
  for (double v : out.seg_logits_hr.data()) EXPECT_EQ(v, 0.0);
}

TEST(SSRNet, SameSeedSameParameters) {
  SSRNet<float> a(ModelConfig{}), b(ModelConfig{}), c(ModelConfig{});
  a.init_parameters(42);
  b.init_parameters(42);
  c.init_parameters(43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().entries().size(); ++i) {
    const auto& pa = a.parameters().entries()[i].value;
    const auto& pb = b.parameters().entries()[i].value;
    const auto& pc = c.parameters().entries()[i].value;
    for (std::size_t k = 0; k < pa.numel(); ++k) {
      ASSERT_EQ(pa.data()[k], pb.data()[k]);
      any_diff |= pa.data()[k] != pc.data()[k];
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(SSRNet, BiasesStartAtZero) {
  SSRNet<float> net(ModelConfig{});
  net.init_parameters(9);
  for (const auto& e : net.parameters().entries()) {
    if (e.name.ends_with(".bias")) {
      for (float v : e.value.data()) EXPECT_EQ(v, 0.0f) << e.name;
    }
  }
}

TEST(SSRNet, EncoderIsSharedAndDrivesBothOutputs) {
  SSRNet<double> net(small_config());
  net.init_parameters(5);
  std::size_t encoder_params = 0;
  for (const auto& e : net.parameters().entries()) {
    encoder_params += e.name.starts_with("encoder.");
    EXPECT_EQ(e.name.find("encoder", 1), std::string::npos) << "encoder copy inside " << e.name;
  }
  EXPECT_GT(encoder_params, 0u);

  Rng rng(6);
  auto x = rng.tensor({1, 1, 8, 8, 8}, 0, 1);
  auto before = net.forward(x);
  auto w = net.parameters().get("encoder.0.conv1.weight");
  std::vector<double> v(w.data().begin(), w.data().end());
  v[0] += 0.1;
  set_param(net.parameters(), "encoder.0.conv1.weight", v);
  auto after = net.forward(x);
  auto changed = [](const TD& a, const TD& b) {
    for (std::size_t i = 0; i < a.numel(); ++i)
      if (a.data()[i] != b.data()[i]) return true;
    return false;
  };
  EXPECT_TRUE(changed(before.seg_logits_hr, after.seg_logits_hr));
  EXPECT_TRUE(changed(before.sr_image_hr, after.sr_image_hr));
}

TEST(SSRNet, AllScaleMapsStrictlyInsideUnitInterval) {
  SSRNet<float> net(ModelConfig{});
  net.init_parameters(7);
  Rng rng(8);
  auto out = net.forward(rng.tensor<float>({1, 1, 16, 16, 16}, 0, 1));
  std::size_t maps = 0;
  for (const auto* list : {&out.scale_maps_seg, &out.scale_maps_sr}) {
    for (const auto& m : *list) {
      ++maps;
      EXPECT_EQ(m.dim(1), 1u);
      for (float v : m.data()) {
        ASSERT_GT(v, 0.0f);
        ASSERT_LT(v, 1.0f);
      }
    }
  }
  EXPECT_EQ(maps, 24u);
}

TEST(SSRNet, InferenceMatchesSigmoidOfForwardLogits) {
  SSRNet<double> net(small_config());
  net.init_parameters(10);
  Rng rng(11);
  auto x = rng.tensor({1, 1, 8, 8, 8}, 0, 1);
  auto prob = net.inference(x);
  auto full = sigmoid(net.forward(x).seg_logits_hr);
  ASSERT_EQ(prob.shape(), full.shape());
  for (std::size_t i = 0; i < prob.numel(); ++i) {
    EXPECT_EQ(prob.data()[i], full.data()[i]);
    EXPECT_GT(prob.data()[i], 0.0);
    EXPECT_LT(prob.data()[i], 1.0);
  }
}

TEST(SSRNet, SegOutputIndependentOfImagePath) {
  ModelConfig with_sr = small_config();
  ModelConfig without_sr = small_config();
  without_sr.dsr = false;
  SSRNet<double> a(with_sr), b(without_sr);
  a.init_parameters(12);
  // Copy the shared parameters; the image path only exists in `a`.
  for (auto& e : b.parameters().entries()) {
    auto src = a.parameters().get(e.name).data();
    e.value.set_leaf_data(std::vector<double>(src.begin(), src.end()));
  }
  Rng rng(13);
  auto x = rng.tensor({1, 1, 8, 8, 8}, 0, 1);
  auto la = a.forward(x).seg_logits_hr;
  auto lb = b.forward(x).seg_logits_hr;
  EXPECT_FALSE(b.forward(x).sr_image_hr.defined());
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la.data()[i], lb.data()[i]);
}

TEST(SSRNet, DiceAloneLeavesImageDecoderWithoutGradient) {
  SSRNet<double> net(small_config());
  net.init_parameters(14);
  Rng rng(15);
  auto x = rng.tensor({1, 1, 8, 8, 8}, 0, 1);
  std::vector<double> mask(16 * 16 * 16, 0.0);
  for (std::size_t i = 0; i < mask.size(); i += 7) mask[i] = 1.0;
  TD y({1, 1, 16, 16, 16}, mask);
  auto out = net.forward(x);
  backward(dice_loss(sigmoid(out.seg_logits_hr), y, 1e-5));
  bool encoder_moved = false;
  for (const auto& e : net.parameters().entries()) {
    const auto g = e.value.grad();
    const bool nonzero = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    if (e.name.starts_with("decoder_sr") || e.name.starts_with("fa_sr") || e.name.starts_with("edsr")) {
      EXPECT_FALSE(nonzero) << e.name;
    }
    if (e.name.starts_with("encoder")) encoder_moved |= nonzero;
  }
  EXPECT_TRUE(encoder_moved);
}

TEST(SSRNet, PlainDecoderWithoutSdcHasNoGates) {
  ModelConfig c = small_config();
  c.sdc = false;
  SSRNet<float> net(c);
  for (const auto& e : net.parameters().entries()) {
    EXPECT_EQ(e.name.find("gate"), std::string::npos) << e.name;
  }
  net.init_parameters(1);
  auto out = net.forward(TF::full({1, 1, 8, 8, 8}, 0.5f));
  EXPECT_TRUE(out.scale_maps_seg.empty());
  EXPECT_TRUE(out.scale_maps_sr.empty());
}

// ---------------------------------------------------------------- SDC block

TEST(SdcBlock, EqualsExternallyComposedSum) {
  SdcBlock<double> block("blk", 3, 2, {1, 2, 3, 5}, 3, 3);
  Rng rng(20);
  auto params = random_block_params(block, rng);
  auto x = rng.tensor({1, 3, 6, 5, 7});
  auto out = sdc_forward(block, params, x);
  ASSERT_EQ(out.scale_maps.size(), 4u);

  TD manual;
  for (std::size_t i = 0; i < 4; ++i) {
    auto branch = conv_nd(x, params.get(block.branch_weight(i)), params.get(block.branch_bias(i)),
                          ConvSpec::same(3, 3, 2, 3, block.dilations()[i]));
    auto gate = sigmoid(conv_nd(x, params.get(block.gate_weight(i)), params.get(block.gate_bias(i)),
                                ConvSpec::same(3, 3, 1, 3, 1)));
    auto term = mul(branch, gate);
    manual = manual.defined() ? add(manual, term) : term;
  }
  for (std::size_t i = 0; i < manual.numel(); ++i) EXPECT_EQ(out.output.data()[i], manual.data()[i]);
}

TEST(SdcBlock, HalfGatesWithIdenticalBranchesDoubleOneBranch) {
  SdcBlock<float> block("blk", 2, 2, {1, 2, 3, 5}, 3, 3);
  ParameterStore<float> params;
  block.register_parameters(params);
  // Only the centre tap is non-zero, so every dilation gives the same output.
  std::vector<float> w(2 * 2 * 27, 0.0f);
  for (std::size_t co = 0; co < 2; ++co)
    for (std::size_t ci = 0; ci < 2; ++ci) w[(co * 2 + ci) * 27 + 13] = 0.3f + 0.2f * co - 0.5f * ci;
  for (std::size_t i = 0; i < 4; ++i) {
    set_param(params, block.branch_weight(i), w);
    set_param(params, block.branch_bias(i), {0.1f, -0.2f});
  }
  Rng rng(21);
  auto x = rng.tensor<float>({1, 2, 5, 5, 5});
  auto out = sdc_forward(block, params, x);
  for (const auto& m : out.scale_maps)
    for (float v : m.data()) ASSERT_EQ(v, 0.5f);
  const auto& one = out.branch_outputs[0];
  for (std::size_t i = 0; i < one.numel(); ++i) {
    EXPECT_NEAR(out.output.data()[i], 2.0f * one.data()[i], 4 * 1.2e-7f * (1.0f + std::abs(one.data()[i])));
  }
}

TEST(SdcBlock, SaturatedGateSelectsOneBranch) {
  SdcBlock<float> block("blk", 2, 3, {1, 2, 3, 5}, 3, 3);
  Rng rng(22);
  auto params = random_block_params(block, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    fill_param(params, block.gate_weight(i), 0.0f);
    set_param(params, block.gate_bias(i), {i == 0 ? 40.0f : -40.0f});
  }
  auto x = rng.tensor<float>({1, 2, 6, 6, 6});
  auto out = sdc_forward(block, params, x);
  const auto& first = out.branch_outputs[0];
  for (std::size_t i = 0; i < first.numel(); ++i) {
    EXPECT_NEAR(out.output.data()[i], first.data()[i], 1.2e-7f * (1.0f + std::abs(first.data()[i])));
  }
}

TEST(SdcBlock, ZeroInputWithZeroBiasesGivesZero) {
  SdcBlock<double> block("blk", 2, 2, {1, 2, 3, 5}, 3, 3);
  Rng rng(23);
  auto params = random_block_params(block, rng);
  for (std::size_t i = 0; i < 4; ++i) fill_param(params, block.branch_bias(i), 0.0);
  auto out = sdc_forward(block, params, TD::zeros({1, 2, 4, 4, 4}));
  for (double v : out.output.data()) EXPECT_EQ(v, 0.0);
}

TEST(SdcBlock, RejectsWrongChannelCount) {
  SdcBlock<double> block("blk", 2, 2, {1, 2}, 3, 3);
  ParameterStore<double> params;
  block.register_parameters(params);
  EXPECT_THROW(sdc_forward(block, params, TD::zeros({1, 3, 4, 4, 4})), ContractError);
}

TEST(SdcBlock, InitialScaleMapsAverageOneHalf) {
  // 1000 random inputs through a freshly initialized model's first block.
  ModelConfig c = small_config();
  SSRNet<float> net(c);
  net.init_parameters(31);
  const auto& block = net.sdc_blocks_seg().back();
  Rng rng(32);
  double sum = 0.0;
  std::size_t count = 0;
  for (int s = 0; s < 1000; ++s) {
    auto x = rng.tensor<float>({1, c.width, 3, 3, 3}, -1.0, 1.0);
    auto out = sdc_forward(block, net.parameters(), x);
    for (const auto& m : out.scale_maps) {
      for (float v : m.data()) sum += v;
      count += m.numel();
    }
  }
  EXPECT_NEAR(sum / static_cast<double>(count), 0.5, 0.05);
}

}  // namespace
}  // namespace ssrseg
