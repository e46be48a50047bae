// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Contrastive pretraining of a TinyClip on the procedural world.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sgma/synthetic.hpp"
#include "sgma/tiny_clip.hpp"

namespace sgma {

struct TrainOptions {
  int steps = 1500;
  int batch = 32;
  double learning_rate = 2e-3;
  double final_learning_rate = 1e-4;
  int warmup = 50;
  double logit_scale = 20.0;
  std::uint64_t seed = 1;
  std::function<void(int step, double loss)> on_step;
};

/// Symmetric InfoNCE over a batch of (image, caption) pairs, optimized with Adam.
inline TinyClip train_contrastive(TinyClipConfig config, const TrainOptions& opt) {
  config.vocab = synthetic::vocabulary();
  TinyClip model = TinyClip::initialize(config, opt.seed);
  std::mt19937_64 rng(opt.seed ^ 0x9E3779B97F4A7C15ULL);

  ParameterMap params = model.parameters();
  ParameterMap m1, m2;
  for (const auto& [k, v] : params) {
    m1[k] = Matrix::Zero(v.rows(), v.cols());
    m2[k] = Matrix::Zero(v.rows(), v.cols());
  }
  constexpr double beta1 = 0.9, beta2 = 0.98, eps = 1e-8;
  synthetic::SceneOptions scene_opt;
  scene_opt.size = config.resolution;

  for (int step = 0; step < opt.steps; ++step) {
    ad::Tape tape;
    auto bound = model.bind(tape, true);
    std::vector<ad::Var> img_rows, txt_rows;
    for (int b = 0; b < opt.batch; ++b) {
      const auto scene = synthetic::random_scene(rng, scene_opt);
      const auto image = synthetic::render(scene, config.resolution);
      auto tr = model.trace(tape, tape.constant(detail::pixel_column(image)), bound);
      img_rows.push_back(tr.embedding);
      auto ids = model.tokenizer().encode(synthetic::training_caption(scene, rng), config.context_length).ids;
      txt_rows.push_back(model.trace_text(tape, ids, bound));
    }
    auto imgs = ad::concat_rows(img_rows);
    auto txts = ad::concat_rows(txt_rows);
    auto logits = ad::scale(ad::matmul(imgs, ad::transpose(txts)), opt.logit_scale);
    std::vector<int> diag(static_cast<std::size_t>(opt.batch));
    for (int i = 0; i < opt.batch; ++i) diag[static_cast<std::size_t>(i)] = i;
    auto loss = ad::scale(ad::add(ad::cross_entropy_rows(logits, diag), ad::cross_entropy_rows(ad::transpose(logits), diag)), 0.5);
    tape.backward(loss);

    const double progress = static_cast<double>(step) / std::max(1, opt.steps - 1);
    double lr = opt.final_learning_rate +
                0.5 * (opt.learning_rate - opt.final_learning_rate) * (1 + std::cos(progress * 3.141592653589793));
    if (step < opt.warmup) lr *= static_cast<double>(step + 1) / opt.warmup;
    const double c1 = 1 - std::pow(beta1, step + 1), c2 = 1 - std::pow(beta2, step + 1);
    for (auto& [name, value] : params) {
      const Matrix g = tape.grad(bound[name]);
      m1[name] = beta1 * m1[name] + (1 - beta1) * g;
      m2[name] = beta2 * m2[name] + (1 - beta2) * g.cwiseProduct(g);
      value.array() -= lr * (m1[name].array() / c1) / ((m2[name].array() / c2).sqrt() + eps);
    }
    model.set_parameters(params);
    if (opt.on_step) opt.on_step(step, ad::value(loss)(0, 0));
  }
  return model;
}

}  // namespace sgma
