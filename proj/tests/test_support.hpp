// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <memory>
#include <random>

#include "sgma/synthetic.hpp"
#include "sgma/tiny_clip.hpp"

namespace sgma::testing {

inline TinyClipConfig small_config(int resolution = 32, int patch = 8) {
  TinyClipConfig c;
  c.id = "small";
  c.resolution = resolution;
  c.patch_size = patch;
  c.width = 16;
  c.heads = 2;
  c.mlp_width = 32;
  c.embed_dim = 12;
  c.text_width = 16;
  c.text_mlp_width = 24;
  c.vocab = synthetic::vocabulary();
  return c;
}

inline std::shared_ptr<const TinyClip> small_model(std::uint64_t seed = 3, int resolution = 32, int patch = 8) {
  return std::make_shared<const TinyClip>(TinyClip::initialize(small_config(resolution, patch), seed));
}

inline ImageTensor random_image(int size, std::uint64_t seed, double lo = 0.05, double hi = 0.95) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor3 t(size, size);
  for (auto& v : t.values) v = u(rng);
  return ImageTensor::from(std::move(t));
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline std::filesystem::path data_dir() { return SGMA_DATA_DIR; }

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sgma_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace sgma::testing
