// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural "shapes on textures" world.
//
// Used to pretrain the bundled encoders and to render the pinned desk corpus.
// Each scene is one textured background (grass, sand, water, stone, wood)
// with one or two textured colored shapes. Rendering is a pure function of
// the scene description and its seed.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sgma/image.hpp"

namespace sgma::synthetic {

struct Color {
  const char* name;
  std::array<double, 3> rgb;
};

inline const std::array<Color, 8>& colors() {
  static const std::array<Color, 8> c{{{"red", {0.86, 0.14, 0.12}},
                                       {"green", {0.16, 0.70, 0.22}},
                                       {"blue", {0.15, 0.30, 0.88}},
                                       {"yellow", {0.95, 0.86, 0.16}},
                                       {"purple", {0.55, 0.20, 0.72}},
                                       {"orange", {0.96, 0.52, 0.10}},
                                       {"white", {0.94, 0.94, 0.92}},
                                       {"black", {0.08, 0.08, 0.09}}}};
  return c;
}

enum class Shape { circle, square, triangle, cross, ring };

inline constexpr std::array<Shape, 5> kShapes{Shape::circle, Shape::square, Shape::triangle, Shape::cross, Shape::ring};

/// Canonical noun followed by accepted synonyms.
inline const std::vector<std::string>& shape_words(Shape s) {
  static const std::array<std::vector<std::string>, 5> words{{{"circle", "disk"},
                                                               {"square", "box"},
                                                               {"triangle", "wedge"},
                                                               {"cross", "plus"},
                                                               {"ring", "donut"}}};
  return words[static_cast<int>(s)];
}

struct Texture {
  const char* name;
  std::array<double, 3> base;
  double amplitude;
  double scale;  // feature size in pixels
  bool waves;
  bool grain;
};

inline const std::array<Texture, 5>& textures() {
  static const std::array<Texture, 5> t{{{"grass", {0.30, 0.55, 0.20}, 0.16, 6.0, false, false},
                                         {"sand", {0.82, 0.72, 0.52}, 0.12, 4.0, false, false},
                                         {"water", {0.18, 0.42, 0.66}, 0.14, 14.0, true, false},
                                         {"stone", {0.52, 0.52, 0.54}, 0.18, 9.0, false, false},
                                         {"wood", {0.55, 0.36, 0.20}, 0.14, 20.0, false, true}}};
  return t;
}

/// Every word the captions can produce, in a fixed order.
inline std::vector<std::string> vocabulary() {
  std::vector<std::string> v{"<unk>", "a", "an", "the", "photo", "picture", "image", "of", "on", "and", "with", "in",
                             "top", "shape", "shapes", "object", "objects", "background", "small", "large", "two"};
  for (const auto& c : colors()) v.emplace_back(c.name);
  for (Shape s : kShapes)
    for (const auto& w : shape_words(s)) v.push_back(w);
  for (const auto& t : textures()) v.emplace_back(t.name);
  return v;
}

struct ShapeInstance {
  Shape shape = Shape::circle;
  int color = 0;
  double cx = 0, cy = 0, radius = 0, angle = 0;
};

struct Scene {
  int texture = 0;
  std::vector<ShapeInstance> objects;
  std::uint64_t seed = 0;
};

namespace detail {

/// Multi-octave value noise in roughly [-1, 1].
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, int size, double feature) : size_(size) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int o = 0; o < kOctaves; ++o) {
      const double cell = std::max(1.0, feature / (1 << o));
      const int n = static_cast<int>(std::ceil(size / cell)) + 2;
      cells_[o] = cell;
      dims_[o] = n;
      grids_[o].resize(static_cast<std::size_t>(n) * n);
      for (auto& g : grids_[o]) g = u(rng);
    }
  }

  double at(double y, double x) const {
    double sum = 0, norm = 0, amp = 1;
    for (int o = 0; o < kOctaves; ++o) {
      const double gy = y / cells_[o], gx = x / cells_[o];
      const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
      const double fy = smooth(gy - y0), fx = smooth(gx - x0);
      const int n = dims_[o];
      auto g = [&](int yy, int xx) { return grids_[o][static_cast<std::size_t>(std::min(yy, n - 1)) * n + std::min(xx, n - 1)]; };
      const double top = g(y0, x0) * (1 - fx) + g(y0, x0 + 1) * fx;
      const double bot = g(y0 + 1, x0) * (1 - fx) + g(y0 + 1, x0 + 1) * fx;
      sum += amp * (top * (1 - fy) + bot * fy);
      norm += amp;
      amp *= 0.55;
    }
    return sum / norm;
  }

 private:
  static constexpr int kOctaves = 4;
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  int size_;
  std::array<double, kOctaves> cells_{};
  std::array<int, kOctaves> dims_{};
  std::array<std::vector<double>, kOctaves> grids_;
};

/// Signed distance (negative inside) of a point to a shape in pixels.
inline double signed_distance(const ShapeInstance& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
  const double r = s.radius;
  switch (s.shape) {
    case Shape::circle: return std::hypot(u, v) - r;
    case Shape::ring: return std::abs(std::hypot(u, v) - 0.72 * r) - 0.28 * r;
    case Shape::square: {
      const double h = 0.82 * r;
      const double qx = std::abs(u) - h, qy = std::abs(v) - h;
      return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0);
    }
    case Shape::cross: {
      const double arm = 0.3 * r;
      auto box = [](double a, double b, double ha, double hb) {
        const double qa = std::abs(a) - ha, qb = std::abs(b) - hb;
        return std::hypot(std::max(qa, 0.0), std::max(qb, 0.0)) + std::min(std::max(qa, qb), 0.0);
      };
      return std::min(box(u, v, r, arm), box(u, v, arm, r));
    }
    case Shape::triangle: {
      // Upward-pointing equilateral triangle with circumradius r.
      const double k = std::sqrt(3.0) / 2.0;
      return std::max({v, k * u - 0.5 * v, -k * u - 0.5 * v}) - 0.5 * r;
    }
  }
  return 1e9;
}

}  // namespace detail

inline ImageTensor render(const Scene& scene, int size) {
  const auto& tex = textures().at(static_cast<std::size_t>(scene.texture));
  detail::ValueNoise bg(scene.seed * 7919 + 17, size, tex.scale);
  detail::ValueNoise fine(scene.seed * 104729 + 5, size, 2.0);
  detail::ValueNoise tint(scene.seed * 1299709 + 3, size, 40.0);
  Tensor3 t(size, size);
  const double unit = size / 224.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double n = bg.at(y, x);
      if (tex.waves) n = 0.6 * n + 0.4 * std::sin((y + 6.0 * n * unit) / (5.0 * unit));
      if (tex.grain) n = 0.5 * n + 0.5 * std::sin(x / (3.0 * unit) + 4.0 * n);
      const double f = fine.at(y, x);
      const double shade = 0.06 * tint.at(y, x);
      for (int c = 0; c < 3; ++c) t.at(y, x, c) = tex.base[c] * (1 + shade) + tex.amplitude * n + 0.05 * f;
    }
  for (const auto& obj : scene.objects) {
    const auto& col = colors().at(static_cast<std::size_t>(obj.color)).rgb;
    detail::ValueNoise surf(scene.seed * 31 + static_cast<std::uint64_t>(obj.cx * 13 + obj.cy), size, 5.0);
    const int lo_y = std::max(0, static_cast<int>(obj.cy - obj.radius * 1.5) - 2);
    const int hi_y = std::min(size - 1, static_cast<int>(obj.cy + obj.radius * 1.5) + 2);
    const int lo_x = std::max(0, static_cast<int>(obj.cx - obj.radius * 1.5) - 2);
    const int hi_x = std::min(size - 1, static_cast<int>(obj.cx + obj.radius * 1.5) + 2);
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x) {
        const double d = detail::signed_distance(obj, y + 0.5, x + 0.5) / unit;
        const double cover = std::clamp(0.5 - d, 0.0, 1.0);
        if (cover <= 0) continue;
        const double light = 1.0 - 0.18 * ((y - obj.cy) / (obj.radius + 1e-9));
        const double s = surf.at(y, x);
        for (int c = 0; c < 3; ++c) {
          const double v = col[c] * light + 0.07 * s;
          t.at(y, x, c) = (1 - cover) * t.at(y, x, c) + cover * v;
        }
      }
  }
  for (auto& v : t.values) v = std::clamp(v, 0.0, 1.0);
  return ImageTensor::from(std::move(t));
}

/// Canonical caption: "a red circle and a blue square on grass".
inline std::string caption(const Scene& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (i) out += " and ";
    out += "a ";
    out += colors()[o.color].name;
    out += " " + shape_words(o.shape).front();
  }
  out += " on ";
  out += textures()[scene.texture].name;
  return out;
}

/// Randomized caption for training: synonyms, optional template prefix and
/// dropped mentions, so partial phrases also match the image.
template <typename Rng>
std::string training_caption(const Scene& scene, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::string> parts;
  for (const auto& o : scene.objects) {
    if (scene.objects.size() > 1 && u(rng) < 0.25) continue;
    const auto& words = shape_words(o.shape);
    std::string noun = words[static_cast<std::size_t>(u(rng) * words.size()) % words.size()];
    parts.push_back(u(rng) < 0.85 ? std::string(colors()[o.color].name) + " " + noun : noun);
  }
  const bool with_texture = parts.empty() || u(rng) < 0.75;
  std::string out;
  const double t = u(rng);
  if (t < 0.2) out = "a photo of ";
  else if (t < 0.3) out = "a picture of ";
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += " and ";
    out += "a " + parts[i];
  }
  if (with_texture) {
    if (parts.empty()) out += std::string(textures()[scene.texture].name) + " background";
    else out += std::string(" on ") + textures()[scene.texture].name;
  }
  return out;
}

struct SceneOptions {
  int min_objects = 1;
  int max_objects = 2;
  int size = 224;
  int forced_shape = -1;  // force the first object to this shape
  int forced_color = -1;
};

template <typename Rng>
Scene random_scene(Rng& rng, const SceneOptions& opt = {}) {
  std::uniform_int_distribution<int> tex(0, static_cast<int>(textures().size()) - 1);
  std::uniform_int_distribution<int> shape(0, static_cast<int>(kShapes.size()) - 1);
  std::uniform_int_distribution<int> color(0, static_cast<int>(colors().size()) - 1);
  std::uniform_int_distribution<int> count(opt.min_objects, opt.max_objects);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double unit = opt.size / 224.0;
  Scene s;
  s.seed = rng();
  s.texture = tex(rng);
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    ShapeInstance o;
    o.shape = kShapes[static_cast<std::size_t>(i == 0 && opt.forced_shape >= 0 ? opt.forced_shape : shape(rng))];
    o.color = i == 0 && opt.forced_color >= 0 ? opt.forced_color : color(rng);
    o.radius = (26.0 + 20.0 * u(rng)) * unit;
    o.angle = (o.shape == Shape::circle || o.shape == Shape::ring) ? 0.0 : (u(rng) - 0.5) * 0.6;
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double margin = o.radius + 6 * unit;
      o.cx = margin + u(rng) * (opt.size - 2 * margin);
      o.cy = margin + u(rng) * (opt.size - 2 * margin);
      bool clear = true;
      for (const auto& other : s.objects)
        clear = clear && std::hypot(o.cx - other.cx, o.cy - other.cy) > o.radius + other.radius + 8 * unit;
      if (clear) break;
    }
    s.objects.push_back(o);
  }
  return s;
}

}  // namespace sgma::synthetic
