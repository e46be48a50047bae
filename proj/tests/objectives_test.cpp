// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "sgma/objectives.hpp"
#include "test_support.hpp"

using namespace sgma;
using namespace sgma::testing;

namespace {

Embedding unit(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x(i++) = d;
  return Embedding::normalized(x);
}

TokenFeatures tokens(Matrix m) {
  TokenFeatures t;
  t.all_tokens = std::move(m);
  return t;
}

PhraseRegion region(std::vector<int> idx, Vector center) {
  return PhraseRegion{"p", Matrix(), std::move(idx), std::move(center)};
}

// Captures warnings while alive.
struct WarningCapture {
  std::vector<std::string> messages;
  LogSink previous;
  WarningCapture() {
    previous = set_log_sink([this](LogLevel level, std::string_view m) {
      if (level == LogLevel::warning) messages.emplace_back(m);
    });
  }
  ~WarningCapture() { set_log_sink(previous); }
};

struct Fixture {
  std::shared_ptr<const TinyClip> model = small_model(21);
  ImageTensor clean = random_image(32, 31);
  ImageTensor adv = random_image(32, 32);
  std::string caption = "a red circle and a blue square on grass";
  std::vector<PhraseRegion> regions;

  Fixture() {
    std::vector<PhraseRegion> raw;
    for (const auto& p : extract_noun_phrases(caption)) raw.push_back(associate(*model, clean, p, 0.3));
    regions = phrase_centers(forward_tokens(*model, clean), raw);
  }
};

}  // namespace

TEST(TextImage, IdentityOrthogonalAntipodal) {
  EXPECT_NEAR(loss_text_image(unit({1, 2, 3}), unit({1, 2, 3})), 0.0, 1e-15);
  EXPECT_NEAR(loss_text_image(unit({1, 0}), unit({0, 1})), 1.0, 1e-15);
  EXPECT_NEAR(loss_text_image(unit({1, 1}), unit({-1, -1})), 2.0, 1e-15);
  EXPECT_EQ(baseline_text_feature(unit({0.3, 0.4}), unit({1, 0})), loss_text_image(unit({0.3, 0.4}), unit({1, 0})));
}

TEST(TextImage, ZeroNormIsNumericError) {
  try {
    Embedding::normalized(Vector::Zero(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(ImageImage, SelfAndNegation) {
  const Matrix m = random_matrix(5, 4, 3);
  EXPECT_NEAR(loss_image_image(tokens(m), tokens(m)), 0.0, 1e-15);
  EXPECT_NEAR(loss_image_image(tokens(-m), tokens(m)), 2.0, 1e-15);
}

TEST(ImageImage, HandComputedStub) {
  Matrix clean(3, 2), adv(3, 2);
  clean << 1, 0, 0, 1, 1, 1;
  adv << 0, 1, 0, 3, -1, 0;
  // per-row cosines: 0, 1, -1/sqrt(2)
  const double expected = ((1 - 0.0) + (1 - 1.0) + (1 + 1 / std::sqrt(2.0))) / 3.0;
  EXPECT_NEAR(loss_image_image(tokens(adv), tokens(clean)), expected, 1e-12);
  EXPECT_EQ(baseline_feature_distance(tokens(adv), tokens(clean)), loss_image_image(tokens(adv), tokens(clean)));
}

TEST(ImageImage, ZeroRowNamesRow) {
  Matrix m = Matrix::Ones(3, 2);
  m.row(2).setZero();
  try {
    loss_image_image(tokens(m), tokens(Matrix::Ones(3, 2)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
}

TEST(Local, SingletonAtIdentityIsZero) {
  const Matrix m = random_matrix(5, 3, 8);
  const auto regions = phrase_centers(tokens(m), {region({1}, Vector())});
  EXPECT_NEAR(loss_local(tokens(m), regions), 0.0, 1e-15);
}

TEST(Local, NoRegionsWarnsAndIsZero) {
  WarningCapture cap;
  EXPECT_EQ(loss_local(tokens(Matrix::Ones(3, 2)), {}), 0.0);
  ASSERT_EQ(cap.messages.size(), 1u);
  EXPECT_NE(cap.messages[0].find("no retained"), std::string::npos);
}

TEST(Local, HandComputedDoubleMean) {
  Matrix adv(5, 2);
  adv << 7, 7,  // CLS
      1, 0,     // patch 0
      0, 2,     // patch 1
      -3, 0,    // patch 2
      1, 1;     // patch 3
  Vector c1(2), c2(2);
  c1 << 1, 0;
  c2 << 0, 5;  // not unit; cosine uses its direction
  const std::vector<PhraseRegion> regions{region({0, 1}, c1), region({2, 3}, c2)};
  const double r1 = ((1 - 1.0) + (1 - 0.0)) / 2;
  const double r2 = ((1 - 0.0) + (1 - 1 / std::sqrt(2.0))) / 2;
  EXPECT_NEAR(loss_local(tokens(adv), regions), (r1 + r2) / 2, 1e-12);
}

TEST(Local, ExcludedRegionsDoNotCount) {
  Matrix adv(3, 2);
  adv << 1, 1, 1, 0, 0, 1;
  Vector c(2);
  c << 1, 0;
  const std::vector<PhraseRegion> regions{region({0}, c), region({}, c),
                                          PhraseRegion{"q", Matrix(), {1}, std::nullopt}};
  EXPECT_NEAR(loss_local(tokens(adv), regions), 0.0, 1e-15);
}

TEST(Totals, IdentityValuesAndToggles) {
  Fixture f;
  const auto b = total_untargeted(*f.model, f.clean, f.clean, f.caption, f.regions);
  EXPECT_EQ(b.image_image, 0.0);
  EXPECT_NEAR(b.text_image,
              1.0 - cosine(embed_image(*f.model, f.clean), embed_text(*f.model, f.caption)), 1e-12);
  EXPECT_EQ(b.total, b.text_image + b.image_image + b.local);

  for (int mask = 0; mask < 8; ++mask) {
    LossToggles on{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
    const auto t = total_untargeted(*f.model, f.adv, f.clean, f.caption, f.regions, on);
    if (!on.text_image) EXPECT_EQ(t.text_image, 0.0);
    if (!on.image_image) EXPECT_EQ(t.image_image, 0.0);
    if (!on.local) EXPECT_EQ(t.local, 0.0);
    EXPECT_NEAR(t.total, t.text_image + t.image_image + t.local, 1e-9);
  }
}

TEST(Totals, MatchesIndependentComponents) {
  Fixture f;
  ASSERT_FALSE(retained_regions(f.regions).empty());
  const auto b = total_untargeted(*f.model, f.adv, f.clean, f.caption, f.regions);
  const auto adv_tokens = forward_tokens(*f.model, f.adv);
  EXPECT_NEAR(b.text_image, loss_text_image(embed_image(*f.model, f.adv), embed_text(*f.model, f.caption)), 1e-12);
  EXPECT_NEAR(b.image_image, loss_image_image(adv_tokens, forward_tokens(*f.model, f.clean)), 1e-12);
  EXPECT_NEAR(b.local, loss_local(adv_tokens, f.regions), 1e-12);
  EXPECT_NEAR(b.total, b.text_image + b.image_image + b.local, 1e-12);
  for (double v : {b.text_image, b.image_image, b.local}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(Targeted, CancellationIsExactlyZero) {
  Fixture f;
  AttackGoal goal{GoalMode::targeted, f.caption, f.clean, 1.0};
  const auto b = total_targeted(*f.model, f.clean, f.clean, f.caption, goal, f.regions, f.regions);
  EXPECT_EQ(b.text_image, 0.0);
  EXPECT_EQ(b.image_image, 0.0);
  EXPECT_EQ(b.local, 0.0);
  EXPECT_EQ(b.total, 0.0);
}

TEST(Targeted, ZeroLambdaReducesToUntargeted) {
  Fixture f;
  AttackGoal goal{GoalMode::targeted, "a yellow triangle on sand", random_image(32, 99), 0.0};
  const auto t = total_targeted(*f.model, f.adv, f.clean, f.caption, goal, f.regions, f.regions);
  const auto u = total_untargeted(*f.model, f.adv, f.clean, f.caption, f.regions);
  EXPECT_EQ(t.text_image, u.text_image);
  EXPECT_EQ(t.image_image, u.image_image);
  EXPECT_EQ(t.local, u.local);
  EXPECT_EQ(t.total, u.total);
}

TEST(Targeted, MatchesHandDifferences) {
  Fixture f;
  const auto target = random_image(32, 77);
  const std::string tcap = "a yellow triangle on sand";
  std::vector<PhraseRegion> traw;
  for (const auto& p : extract_noun_phrases(tcap)) traw.push_back(associate(*f.model, target, p, 0.3));
  const auto tregions = phrase_centers(forward_tokens(*f.model, target), traw);
  for (double lambda : {1.0, 0.5}) {
    AttackGoal goal{GoalMode::targeted, tcap, target, lambda};
    const auto b = total_targeted(*f.model, f.adv, f.clean, f.caption, goal, f.regions, tregions);
    const auto adv_tokens = forward_tokens(*f.model, f.adv);
    const auto adv_emb = embed_image(*f.model, f.adv);
    const double ti = loss_text_image(adv_emb, embed_text(*f.model, f.caption)) -
                      lambda * loss_text_image(adv_emb, embed_text(*f.model, tcap));
    const double ii = loss_image_image(adv_tokens, forward_tokens(*f.model, f.clean)) -
                      lambda * loss_image_image(adv_tokens, forward_tokens(*f.model, target));
    const double lo = loss_local(adv_tokens, f.regions) - lambda * loss_local(adv_tokens, tregions);
    EXPECT_NEAR(b.text_image, ti, 1e-12);
    EXPECT_NEAR(b.image_image, ii, 1e-12);
    EXPECT_NEAR(b.local, lo, 1e-12);
    EXPECT_GE(b.total, -2 * lambda * 3);
    EXPECT_LE(b.total, 6.0);
  }
}

TEST(Targeted, MissingArtifactsAreConfigErrors) {
  Fixture f;
  AttackGoal no_image{GoalMode::targeted, "a dog", std::nullopt, 1.0};
  AttackGoal no_caption{GoalMode::targeted, "", f.clean, 1.0};
  for (const auto& g : {no_image, no_caption}) {
    try {
      total_targeted(*f.model, f.adv, f.clean, f.caption, g, f.regions, f.regions);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::config);
    }
  }
}

// Central-difference audit of each loss through the full encoder.
class GradientAudit : public ::testing::Test {
 protected:
  void check(const Objective& obj) {
    const auto g = pixel_gradient(*f.model, f.adv, obj);
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> pick(0, f.adv.size() - 1);
    const double h = 1e-5;
    for (int k = 0; k < 12; ++k) {
      const std::size_t i = pick(rng);
      Tensor3 p = f.adv.tensor(), m = f.adv.tensor();
      p.values[i] += h;
      m.values[i] -= h;
      const double num = (pixel_gradient(*f.model, ImageTensor::from(p), obj).value -
                          pixel_gradient(*f.model, ImageTensor::from(m), obj).value) /
                         (2 * h);
      EXPECT_NEAR(g.gradient.values[i], num, 1e-7 + 1e-4 * std::abs(num)) << obj.name << " pixel " << i;
    }
  }
  Fixture f;
};

TEST_F(GradientAudit, EachLoss) {
  const auto targets = untargeted_targets(*f.model, f.clean, f.caption, f.regions);
  ASSERT_FALSE(targets.regions.empty());
  check(objective::text_image_distance(embed_text(*f.model, f.caption)));
  check(objective::image_image(targets.clean_unit));
  check(objective::local(targets.regions));
  check(objective::total(targets));
  AttackGoal goal{GoalMode::targeted, "a yellow triangle on sand", random_image(32, 5), 1.0};
  check(objective::total(targeted_targets(*f.model, f.clean, f.caption, goal, f.regions, f.regions)));
}

TEST(PixelGradient, ConstantAndPixelSum) {
  const auto model = small_model();
  const auto img = random_image(32, 3);
  const auto c = pixel_gradient(*model, img, objective::constant(3.0));
  EXPECT_EQ(c.value, 3.0);
  for (double v : c.gradient.values) EXPECT_EQ(v, 0.0);
  const auto s = pixel_gradient(*model, img, objective::pixel_sum());
  for (double v : s.gradient.values) EXPECT_EQ(v, 1.0);
}

TEST(PixelGradient, NonDifferentiableComponentIsNamed) {
  const auto model = small_model();
  Objective bad = objective::constant(1.0);
  bad.name = "argmax_vote";
  bad.differentiable = false;
  const Objective parts[] = {objective::pixel_sum(), bad};
  try {
    pixel_gradient(*model, random_image(32, 1), parts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::not_differentiable);
    EXPECT_NE(std::string(e.what()).find("argmax_vote"), std::string::npos);
  }
}
