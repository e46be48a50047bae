// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <openssl/evp.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "sgma/common.hpp"

namespace sgma {

/// Row-major R x R scalar field (masks, budgets, heatmaps). (row, col) = (y, x).
using Plane = Eigen::MatrixXd;

/// Signed H x W x 3 tensor in HWC order. Holds perturbations and gradients.
struct Tensor3 {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  static constexpr int channels = 3;

  Tensor3() = default;
  Tensor3(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w * channels, fill) {}

  std::size_t size() const { return values.size(); }
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int y, int x, int c) { return values[index(y, x, c)]; }
  double at(int y, int x, int c) const { return values[index(y, x, c)]; }
  bool same_shape(const Tensor3& o) const { return height == o.height && width == o.width; }
  bool operator==(const Tensor3&) const = default;
};

/// RGB image with every element in [0, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, double fill = 0.0) : t_(height, width, fill) {
    if (fill < 0.0 || fill > 1.0) fail(ErrorKind::input, "image fill value outside [0,1]");
  }

  /// Takes ownership of raw values; throws if any value leaves [0,1] or is non-finite.
  static ImageTensor from(Tensor3 t) {
    if (t.values.size() != static_cast<std::size_t>(t.height) * t.width * Tensor3::channels)
      fail(ErrorKind::input, "tensor size does not match its shape");
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double v = t.values[i];
      if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::input, "pixel ", i, " = ", v, " outside [0,1]");
    }
    ImageTensor img;
    img.t_ = std::move(t);
    return img;
  }

  int height() const { return t_.height; }
  int width() const { return t_.width; }
  std::size_t size() const { return t_.size(); }
  bool empty() const { return t_.values.empty(); }
  double at(int y, int x, int c) const { return t_.at(y, x, c); }
  std::span<const double> data() const { return t_.values; }
  const Tensor3& tensor() const { return t_; }

  /// Writes a value, clamped into [0,1].
  void set(int y, int x, int c, double v) { t_.at(y, x, c) = std::clamp(v, 0.0, 1.0); }

  bool operator==(const ImageTensor&) const = default;

 private:
  Tensor3 t_;
};

/// Clamps clean + delta into the unit cube.
inline ImageTensor add_clamped(const ImageTensor& clean, const Tensor3& delta) {
  if (!clean.tensor().same_shape(delta)) fail(ErrorKind::resolution, "delta shape mismatch");
  Tensor3 out(clean.height(), clean.width());
  const auto src = clean.data();
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = std::clamp(src[i] + delta.values[i], 0.0, 1.0);
  return ImageTensor::from(std::move(out));
}

// 8-bit quantization ---------------------------------------------------------

/// Round-half-away-from-zero onto the 1/255 grid.
inline std::uint8_t quantize_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v * 255.0), 0.0, 255.0));
}

inline ImageTensor quantize(const ImageTensor& img) {
  Tensor3 t(img.height(), img.width());
  const auto src = img.data();
  for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = quantize_u8(src[i]) / 255.0;
  return ImageTensor::from(std::move(t));
}

namespace detail {

inline cv::Mat to_bgr8(const ImageTensor& img) {
  cv::Mat m(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      row[3 * x + 0] = quantize_u8(img.at(y, x, 2));
      row[3 * x + 1] = quantize_u8(img.at(y, x, 1));
      row[3 * x + 2] = quantize_u8(img.at(y, x, 0));
    }
  }
  return m;
}

inline ImageTensor from_bgr8(const cv::Mat& m) {
  if (m.type() != CV_8UC3) fail(ErrorKind::parse, "expected an 8-bit 3-channel image");
  Tensor3 t(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      t.at(y, x, 0) = row[3 * x + 2] / 255.0;
      t.at(y, x, 1) = row[3 * x + 1] / 255.0;
      t.at(y, x, 2) = row[3 * x + 0] / 255.0;
    }
  }
  return ImageTensor::from(std::move(t));
}

inline cv::Mat normalize_channels(const cv::Mat& raw) {
  cv::Mat out;
  if (raw.depth() != CV_8U) {
    cv::Mat scaled;
    raw.convertTo(scaled, CV_8U, raw.depth() == CV_16U ? 1.0 / 257.0 : 1.0);
    return normalize_channels(scaled);
  }
  switch (raw.channels()) {
    case 1: cv::cvtColor(raw, out, cv::COLOR_GRAY2BGR); break;
    case 4: cv::cvtColor(raw, out, cv::COLOR_BGRA2BGR); break;
    default: out = raw;
  }
  return out;
}

inline const std::vector<int>& png_params() {
  static const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  return params;
}

}  // namespace detail

// Codecs ---------------------------------------------------------------------

inline ImageTensor read_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) fail(ErrorKind::io, "cannot read image ", path.string());
  return detail::from_bgr8(detail::normalize_channels(raw));
}

/// 8-bit lossless PNG; pixel values are quantized with round-half-away.
inline void write_png(const std::filesystem::path& path, const ImageTensor& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), detail::to_bgr8(img), detail::png_params()))
    fail(ErrorKind::io, "cannot write ", path.string());
}

inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", detail::to_bgr8(img), buf, detail::png_params()))
    fail(ErrorKind::io, "png encoding failed");
  return buf;
}

inline ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  cv::Mat raw = cv::imdecode(cv::Mat(1, static_cast<int>(bytes.size()), CV_8U,
                                     const_cast<std::uint8_t*>(bytes.data())),
                             cv::IMREAD_UNCHANGED);
  if (raw.empty()) fail(ErrorKind::parse, "cannot decode image bytes");
  return detail::from_bgr8(detail::normalize_channels(raw));
}

/// JPEG encode at `quality` then decode; dimensions are preserved.
inline ImageTensor jpeg_roundtrip(const ImageTensor& img, int quality) {
  std::vector<std::uint8_t> buf;
  const std::vector<int> params{cv::IMWRITE_JPEG_QUALITY, quality};
  if (!cv::imencode(".jpg", detail::to_bgr8(img), buf, params)) fail(ErrorKind::io, "jpeg encoding failed");
  return decode_image(buf);
}

/// Bicubic resize of the 8-bit image to size x size.
inline ImageTensor resize_bicubic(const ImageTensor& img, int size) {
  if (img.height() == size && img.width() == size) return img;
  cv::Mat out;
  cv::resize(detail::to_bgr8(img), out, cv::Size(size, size), 0, 0, cv::INTER_CUBIC);
  return detail::from_bgr8(out);
}

// Diagnostics export -----------------------------------------------------------

/// Writes a [0,1] plane as 8-bit grayscale PNG (values clamped).
inline void write_gray_png(const std::filesystem::path& path, const Plane& plane) {
  cv::Mat m(static_cast<int>(plane.rows()), static_cast<int>(plane.cols()), CV_8UC1);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) m.at<std::uint8_t>(y, x) = quantize_u8(std::clamp(plane(y, x), 0.0, 1.0));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m, detail::png_params())) fail(ErrorKind::io, "cannot write ", path.string());
}

/// Red-tinted overlay of a [0,1] plane (resized to the image) on top of an image.
inline ImageTensor overlay_heat(const ImageTensor& img, const Plane& heat, double opacity = 0.5) {
  cv::Mat src(static_cast<int>(heat.rows()), static_cast<int>(heat.cols()), CV_64F);
  for (int y = 0; y < src.rows; ++y)
    for (int x = 0; x < src.cols; ++x) src.at<double>(y, x) = std::clamp(heat(y, x), 0.0, 1.0);
  cv::Mat scaled;
  cv::resize(src, scaled, cv::Size(img.width(), img.height()), 0, 0, cv::INTER_LINEAR);
  Tensor3 t(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double h = std::clamp(scaled.at<double>(y, x), 0.0, 1.0) * opacity;
      t.at(y, x, 0) = (1 - h) * img.at(y, x, 0) + h;
      t.at(y, x, 1) = (1 - h) * img.at(y, x, 1);
      t.at(y, x, 2) = (1 - h) * img.at(y, x, 2);
    }
  return ImageTensor::from(std::move(t));
}

inline void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write ", path.string());
  out.precision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << m(r, c);
    }
    out << '\n';
  }
  if (!out) fail(ErrorKind::io, "write failed for ", path.string());
}

// Hashing ----------------------------------------------------------------------

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    fail(ErrorKind::invariant, "sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Hash of the 8-bit quantized pixels and shape; stable under sub-quantum float noise.
inline std::string image_hash(const ImageTensor& img) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(img.size() + 8);
  for (int v : {img.height(), img.width()})
    for (int s = 0; s < 32; s += 8) bytes.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
  for (double v : img.data()) bytes.push_back(quantize_u8(v));
  return sha256_hex(bytes);
}

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace sgma
