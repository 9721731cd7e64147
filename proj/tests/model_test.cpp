#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "canopy/adam.hpp"
#include "canopy/model.hpp"
#include "canopy/trainer.hpp"
#include "canopy/weights.hpp"
#include "oracles.hpp"

using namespace canopy;

namespace {

// Count implied by the channel plan: backbone 13 convs, two decoders of
// 10 convs each, two 1x1 heads. Every conv carries weights and a bias;
// each batchnorm carries gamma, beta, running mean and running variance.
constexpr std::size_t kReferenceParameterCount = 17059334;

Tensor<float> random_input(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w) {
  Rng rng(seed);
  Tensor<float> x({n, h, w, 5});
  for (auto& v : x.storage()) v = static_cast<float>(rng.uniform(-100.0, 100.0));
  return x;
}

}  // namespace

TEST(BuildModel, SameSeedIsBitIdentical) {
  const auto a = build_model(7, 4), b = build_model(7, 4);
  ASSERT_EQ(a.params.names(), b.params.names());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value(), b.params[i].value());
  const auto c = build_model(8, 4);
  EXPECT_NE(a.params.at("backbone.block1.conv1.weight").value(), c.params.at("backbone.block1.conv1.weight").value());
}

TEST(BuildModel, FirstConvTakesFiveBands) {
  const auto mp = build_model(0);
  EXPECT_EQ(mp.params.at("backbone.block1.conv1.weight").value().shape(), (Shape{3, 3, 5, 64}));
  EXPECT_EQ(mp.params.at("confidence_head.conv.weight").value().shape(), (Shape{1, 1, 32, 1}));
  EXPECT_EQ(mp.params.scalar_count(), kReferenceParameterCount);
}

TEST(BuildModel, ChannelPlan) {
  const auto specs = arch::conv_specs(ModelMeta{});
  std::size_t backbone = 0, attention = 0, confidence = 0, heads = 0;
  for (const auto& s : specs) {
    if (s.name.starts_with("backbone.")) ++backbone;
    if (s.name.starts_with("attention_decoder.")) ++attention;
    if (s.name.starts_with("confidence_decoder.")) ++confidence;
    if (s.name.ends_with("_head.conv")) ++heads;
  }
  EXPECT_EQ(backbone, 13u);
  EXPECT_EQ(attention, 10u);
  EXPECT_EQ(confidence, 10u);
  EXPECT_EQ(heads, 2u);
  const std::size_t expected_out[] = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  for (std::size_t i = 0; i < 13; ++i) EXPECT_EQ(specs[i].cout, expected_out[i]) << specs[i].name;
}

TEST(BuildModel, InitializationStatistics) {
  const auto mp = build_model(3);
  for (const auto* name : {"backbone.block3.conv2.weight", "confidence_decoder.block1.conv2.weight"}) {
    const auto& w = mp.params.at(name).value();
    const double fan_in = static_cast<double>(w.dim(0) * w.dim(1) * w.dim(2));
    const double fan_out = static_cast<double>(w.dim(0) * w.dim(1) * w.dim(3));
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    const double sd = limit / std::sqrt(3.0);
    double mean = 0.0;
    for (float v : w.storage()) {
      EXPECT_LE(std::abs(v), limit);
      mean += v;
    }
    mean /= static_cast<double>(w.size());
    EXPECT_LT(std::abs(mean), 3.0 * sd / std::sqrt(static_cast<double>(w.size()))) << name;
  }
  for (float v : mp.params.at("backbone.block1.conv1.bias").value().storage()) EXPECT_EQ(v, 0.0f);
  for (float v : mp.params.at("backbone.block1.bn1.gamma").value().storage()) EXPECT_EQ(v, 1.0f);
  for (float v : mp.params.at("backbone.block1.bn1.moving_variance").value().storage()) EXPECT_EQ(v, 1.0f);
}

TEST(Forward, FullResolutionOutputsAtReferenceWidth) {
  const auto mp = build_model(1);
  const auto out = infer(mp, random_input(2, 1, 64, 64));
  EXPECT_EQ(out.confidence.shape(), (Shape{1, 64, 64, 1}));
  EXPECT_EQ(out.attention.shape(), (Shape{1, 64, 64, 1}));
  for (float a : out.attention.storage()) {
    EXPECT_GT(a, 0.0f);
    EXPECT_LT(a, 1.0f);
  }
}

TEST(Forward, OutputSizeMatchesInputForMultiplesOf16) {
  const auto mp = build_model(1, 16);
  for (std::size_t h : {16, 32, 48}) {
    for (std::size_t w : {16, 80}) {
      const auto out = infer(mp, random_input(h + w, 1, h, w));
      EXPECT_EQ(out.confidence.shape(), (Shape{1, h, w, 1}));
    }
  }
}

TEST(Forward, RejectsIndivisibleSize) {
  const auto mp = build_model(1, 16);
  try {
    infer(mp, random_input(1, 1, 24, 32));
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
  EXPECT_THROW(infer(mp, Tensor<float>({1, 16, 16, 4})), InvalidArgument);
}

TEST(Forward, ClosedAttentionGateLeavesOnlyHeadBias) {
  auto mp = build_model(5, 8);
  // Drive the attention batchnorm output far negative: sigmoid -> 0.
  auto& beta = mp.params.at("attention_head.bn.beta").mutable_value();
  beta.fill(-200.0f);
  auto& bias = mp.params.at("confidence_head.conv.bias").mutable_value();
  bias.fill(0.375f);
  const auto out = infer(mp, random_input(6, 1, 32, 32));
  for (float a : out.attention.storage()) EXPECT_LT(a, 1e-30f);
  for (float c : out.confidence.storage()) EXPECT_NEAR(c, 0.375f, 1e-6f);
}

TEST(Forward, InferenceIsPure) {
  const auto mp = build_model(2, 8);
  const auto x = random_input(3, 2, 32, 32);
  const auto before = mp.params.at("backbone.block1.bn1.moving_mean").value();
  const auto a = infer(mp, x), b = infer(mp, x);
  EXPECT_EQ(a.confidence, b.confidence);
  EXPECT_EQ(a.attention, b.attention);
  EXPECT_EQ(mp.params.at("backbone.block1.bn1.moving_mean").value(), before);
}

TEST(Forward, SingleStepDecreasesLossOnThatExample) {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto mp = build_model(seed, 8);
    Rng rng(seed + 100);
    const auto x = random_input(seed + 200, 1, 32, 32);
    PointSet pts;
    for (int i = 0; i < 3; ++i) pts.points.push_back({rng.uniform(4.0, 27.0), rng.uniform(4.0, 27.0)});
    const Grid t = build_target(pts, 32, 32, 3.0);
    const Grid m = build_attention_mask(t, 0.001);
    const Tensor<float> target({1, 32, 32, 1}, t.data), mask({1, 32, 32, 1}, m.data);
    auto loss_at = [&](BasicModelParams<float>& p) {
      NoGradGuard ng;
      const auto out = forward(p, Var<float>::leaf(x), Mode::kTrain);
      return combined_loss(out.confidence, out.attention, target, mask, 0.01).value()[0];
    };
    // Measure before and after in training mode on a copy so the running
    // statistics do not shift between the two measurements.
    auto probe = mp.cast<float>();
    const float before = loss_at(probe);
    const auto out = forward(mp, Var<float>::leaf(x), Mode::kTrain);
    backward(combined_loss(out.confidence, out.attention, target, mask, 0.01));
    AdamState<float> st;
    adam_step(mp.params, st);
    auto probe2 = mp.cast<float>();
    const float after = loss_at(probe2);
    if (after < before) ++decreased;
  }
  EXPECT_GE(decreased, 9);
}

TEST(Weights, RoundTripIsByteExact) {
  auto mp = build_model(9, 16);
  mp.params.at("backbone.block2.bn1.moving_mean").mutable_value().fill(0.125f);
  const auto bytes = encode_checkpoint({mp, std::nullopt});
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.model.meta, mp.meta);
  ASSERT_EQ(back.model.params.names(), mp.params.names());
  for (std::size_t i = 0; i < mp.params.size(); ++i) {
    EXPECT_EQ(back.model.params[i].value(), mp.params[i].value());
    EXPECT_EQ(back.model.params[i].requires_grad(), mp.params[i].requires_grad());
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Weights, OptimizerStateRoundTrips) {
  auto mp = build_model(9, 16);
  mp.params.zero_grad();
  for (std::size_t i = 0; i < mp.params.size(); ++i)
    if (mp.params[i].requires_grad()) mp.params[i].node()->grad_buffer().fill(0.5f);
  AdamState<float> st;
  adam_step(mp.params, st);
  const auto bytes = encode_checkpoint({mp, st});
  const auto back = decode_checkpoint(bytes);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 1u);
  EXPECT_EQ(back.optimizer->first_moment, st.first_moment);
  EXPECT_EQ(back.optimizer->second_moment, st.second_moment);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Weights, DamagedFilesAreRejected) {
  const auto bytes = encode_checkpoint({build_model(1, 32), std::nullopt});
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), TruncatedPayload);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), MalformedHeader);
  EXPECT_THROW(decode_checkpoint("{not json"), DataError);
  const auto dir = oracle::scratch_dir("weights");
  EXPECT_THROW(load_model(dir / "missing.weights"), MissingPath);
}
