#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "parabart/adamw.hpp"
#include "parabart/checkpoint.hpp"
#include "parabart/ops.hpp"

using namespace parabart;

TEST(AdamW, ZeroGradientAndNoDecayLeavesParameters) {
  auto p = Tensor::from_data({3}, {1, -2, 3}, true);
  AdamW<float> opt;
  opt.add_group({p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  p.mutable_grad();  // zeros
  opt.step();
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), (std::vector<float>{1, -2, 3}));
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, SingleStepClosedForm) {
  // m_hat = 1, v_hat = 1, so the step is -lr * 1 / (1 + eps).
  auto p = Tensor::from_data({1}, {0.5f}, true);
  AdamW<float> opt;
  opt.add_group({p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  p.mutable_grad()[0] = 1.0f;
  opt.step();
  EXPECT_NEAR(p.at(0) - 0.5, -0.1 / (1 + 1e-8), 1e-6);
}

TEST(AdamW, DecayIsDecoupledFromGradient) {
  // With g = 0 the moments stay zero, so only the decay term acts.
  auto p = Tensor::from_data({1}, {2.0f}, true);
  AdamW<float> opt;
  opt.add_group({p}, {0.1, 0.9, 0.999, 1e-8, 0.5});
  p.mutable_grad();
  opt.step();
  EXPECT_NEAR(p.at(0), 2.0 * (1 - 0.1 * 0.5), 1e-6);
}

TEST(AdamW, ConvergesOnSquare) {
  auto theta = Tensor::from_data({1}, {1.0f}, true);
  AdamW<float> opt;
  opt.add_group({theta}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 100; ++i) {
    theta.zero_grad();
    sum(mul(theta, theta)).backward();
    opt.step();
  }
  EXPECT_LT(std::abs(theta.at(0)), 0.1);
}

TEST(AdamW, ParametersWithoutGradientAreSkipped) {
  auto a = Tensor::from_data({1}, {1.0f}, true);
  auto b = Tensor::from_data({1}, {1.0f}, true);
  AdamW<float> opt;
  opt.add_group({a, b}, {0.1, 0.9, 0.999, 1e-8, 0.1});
  a.mutable_grad()[0] = 1.0f;
  opt.step();
  EXPECT_NE(a.at(0), 1.0f);
  EXPECT_EQ(b.at(0), 1.0f);
}

TEST(ClipGradNorm, RescalesToMaxAndNeverIncreases) {
  auto a = Tensor::from_data({2}, {0, 0}, true);
  auto b = Tensor::from_data({1}, {0}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 0;
  b.mutable_grad()[0] = 4;
  std::vector<Tensor> ps{a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm<float>(ps, 1.0), 5.0);
  EXPECT_NEAR(global_grad_norm<float>(ps), 1.0, 1e-6);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-6);
  EXPECT_NEAR(clip_grad_norm<float>(ps, 10.0), 1.0, 1e-6);
  EXPECT_NEAR(global_grad_norm<float>(ps), 1.0, 1e-6);
}

TEST(Pbt1, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> d(-1e3, 1e3);
  std::vector<float> v(24);
  for (auto& x : v) x = d(rng);
  v[0] = -0.0f;
  v[1] = std::numeric_limits<float>::denorm_min();
  std::vector<NamedTensor> in{{"a.weight", Tensor::from_data({4, 6}, v)},
                              {"scalar", Tensor::scalar(3.25f)},
                              {"", Tensor::from_data({0}, {})}};
  const std::string bytes = encode_pbt1(in);
  const auto out = decode_pbt1(bytes);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].name, in[i].name);
    EXPECT_EQ(out[i].tensor.shape(), in[i].tensor.shape());
    EXPECT_EQ(std::memcmp(out[i].tensor.data().data(), in[i].tensor.data().data(), in[i].tensor.numel() * 4), 0);
  }
  EXPECT_EQ(encode_pbt1(out), bytes);
}

TEST(Pbt1, LayoutIsLittleEndian) {
  const std::string bytes = encode_pbt1({{"w", Tensor::from_data({1}, {1.0f})}});
  const std::string expect("PBT1\x01\x00\x00\x00\x01\x00w\x01\x01\x00\x00\x00\x00\x00\x80\x3f", 20);
  EXPECT_EQ(bytes, expect);
}

TEST(Pbt1, RejectsCorruptArchives) {
  const std::string good = encode_pbt1({{"w", Tensor::from_data({2}, {1.0f, 2.0f})}});
  EXPECT_THROW(decode_pbt1("PBT2" + good.substr(4)), IoError);
  EXPECT_THROW(decode_pbt1(good.substr(0, good.size() - 1)), IoError);
  EXPECT_THROW(decode_pbt1(good + "x"), IoError);
  EXPECT_THROW(decode_pbt1(""), IoError);
}

TEST(Pbt1, FileHelpersAndHash) {
  const auto path = std::filesystem::temp_directory_path() / "pbt1_roundtrip_test.pbt";
  std::vector<NamedTensor> in{{"x", Tensor::from_data({2}, {0.5f, -1.5f})}};
  save_pbt1(path.string(), in);
  EXPECT_EQ(read_file(path.string()), encode_pbt1(in));
  EXPECT_EQ(load_pbt1(path.string())[0].tensor.at(1), -1.5f);
  std::filesystem::remove(path);
  EXPECT_THROW(load_pbt1(path.string()), IoError);
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}
