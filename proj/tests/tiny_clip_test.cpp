// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "sgma/synthetic.hpp"
#include "sgma/tiny_clip.hpp"

using namespace sgma;

namespace {

TinyClipConfig small_config() {
  TinyClipConfig c;
  c.id = "small";
  c.resolution = 32;
  c.patch_size = 8;
  c.width = 16;
  c.heads = 2;
  c.mlp_width = 32;
  c.embed_dim = 12;
  c.text_width = 16;
  c.text_mlp_width = 24;
  c.vocab = synthetic::vocabulary();
  return c;
}

ImageTensor random_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor3 t(size, size);
  for (auto& v : t.values) v = u(rng);
  return ImageTensor::from(std::move(t));
}

}  // namespace

TEST(TinyClip, ShapesFollowConfig) {
  const auto model = TinyClip::initialize(small_config(), 3);
  EXPECT_EQ(model.info().grid_h, 4);
  EXPECT_EQ(model.info().patch_count(), 16);
  EXPECT_EQ(model.info().token_count(), 17);
  const auto f = forward_tokens(model, random_image(32, 1));
  EXPECT_EQ(f.all_tokens.rows(), 17);
  EXPECT_EQ(f.all_tokens.cols(), 16);
  EXPECT_EQ(f.attn_cls.size(), 16);
  EXPECT_EQ(f.values.rows(), 16);
  // Head-averaged attention from CLS over patches excludes the CLS column, so it sums below one.
  EXPECT_GT(f.attn_cls.sum(), 0.0);
  EXPECT_LT(f.attn_cls.sum(), 1.0);
  EXPECT_GE(f.attn_cls.minCoeff(), 0.0);
}

TEST(TinyClip, PixelGradientMatchesFiniteDifferences) {
  const auto model = TinyClip::initialize(small_config(), 5);
  const auto image = random_image(32, 2);
  const auto text = embed_text(model, "a red circle on grass");
  const auto obj = objective::text_image_distance(text);
  const auto g = pixel_gradient(model, image, obj);

  auto value_at = [&](const Tensor3& t) { return pixel_gradient(model, ImageTensor::from(t), obj).value; };
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> pick(0, image.size() - 1);
  const double h = 1e-5;
  for (int k = 0; k < 24; ++k) {
    const std::size_t i = pick(rng);
    Tensor3 plus = image.tensor(), minus = image.tensor();
    plus.values[i] += h;
    minus.values[i] -= h;
    const double numeric = (value_at(plus) - value_at(minus)) / (2 * h);
    EXPECT_NEAR(g.gradient.values[i], numeric, 1e-6 + 1e-5 * std::abs(numeric)) << "pixel " << i;
  }
}

TEST(TinyClip, ParameterGradientMatchesFiniteDifferences) {
  auto model = TinyClip::initialize(small_config(), 7);
  const auto image = random_image(32, 4);
  const auto ids = model.tokenizer().encode("a blue square", 16).ids;
  auto loss_of = [&](const TinyClip& m, ad::Tape& tape, const BoundParameters& b) {
    auto tr = m.trace(tape, tape.constant(detail::pixel_column(image)), b);
    return ad::sum_all(ad::mul(tr.embedding, m.trace_text(tape, ids, b)));
  };
  ad::Tape tape;
  auto bound = model.bind(tape, true);
  tape.backward(loss_of(model, tape, bound));
  for (const std::string name : {"patch_w", "l1.wq", "l0.fc2_b", "proj", "tok_emb", "t_ln1_g"}) {
    const Matrix analytic = tape.grad(bound[name]);
    const Matrix base = model.parameters().at(name);
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(base.size(), 6); ++i) {
      const Eigen::Index at = (i * 7919) % base.size();
      double f[2];
      for (int s = 0; s < 2; ++s) {
        ParameterMap p = model.parameters();
        p[name].data()[at] += s == 0 ? 1e-6 : -1e-6;
        TinyClip m(model.config(), p);
        ad::Tape t;
        f[s] = ad::value(loss_of(m, t, m.bind(t, false)))(0, 0);
      }
      const double numeric = (f[0] - f[1]) / 2e-6;
      EXPECT_NEAR(analytic.data()[at], numeric, 1e-6 + 1e-5 * std::abs(numeric)) << name << "[" << at << "]";
    }
  }
}

TEST(TinyClip, SaveLoadRoundTripIsExact) {
  const auto model = TinyClip::initialize(small_config(), 11);
  const auto path = std::filesystem::temp_directory_path() / "sgma_tiny_clip_roundtrip.sgw";
  model.save(path);
  const auto back = TinyClip::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.info().id, "small");
  EXPECT_EQ(back.parameters(), model.parameters());
  const auto image = random_image(32, 6);
  EXPECT_EQ(embed_image(back, image).vector(), embed_image(model, image).vector());
}

TEST(TinyClip, LoadRejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "sgma_tiny_clip_garbage.sgw";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a weights file";
  }
  try {
    TinyClip::load(path);
    FAIL() << "expected load error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::load);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(TinyClip::load(path), Error);
}

TEST(TinyClip, WrongResolutionIsRejected) {
  const auto model = TinyClip::initialize(small_config(), 1);
  try {
    embed_image(model, random_image(48, 1));
    FAIL() << "expected a resolution error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::resolution);
  }
}

TEST(TinyClip, TextTruncationIsReported) {
  const auto model = TinyClip::initialize(small_config(), 1);
  std::string long_text;
  for (int i = 0; i < 40; ++i) long_text += "red ";
  EXPECT_TRUE(model.embed_text(long_text).truncated);
  EXPECT_FALSE(model.embed_text("red circle").truncated);
  EXPECT_THROW(model.embed_text("   "), Error);
}
