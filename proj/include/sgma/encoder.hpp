// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Surrogate vision-language encoders.
//
// VisionLanguageEncoder is the uniform interface the attack engine talks to.
// It exposes joint-space embeddings, the final-layer token matrix (after the
// final layer norm, before the projection head), the head-averaged [CLS]
// attention and value vectors of the last attention block, and a
// differentiable vision trace so any scalar objective can be pulled back to
// pixels.

#pragma once

#include <cctype>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "sgma/autodiff.hpp"
#include "sgma/common.hpp"
#include "sgma/image.hpp"

namespace sgma {

using ad::Matrix;
using Vector = Eigen::VectorXd;

struct EncoderInfo {
  std::string id;
  int resolution = 0;  // R
  int patch_size = 0;
  int grid_h = 0;       // H
  int grid_w = 0;       // W
  int joint_dim = 0;    // d
  int hidden_dim = 0;   // d_v

  int patch_count() const { return grid_h * grid_w; }
  int token_count() const { return patch_count() + 1; }
};

/// Unit-norm vector in the joint image-text space.
class Embedding {
 public:
  Embedding() = default;

  static Embedding normalized(Vector v) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorKind::numeric, "cannot normalize a zero or non-finite embedding");
    Embedding e;
    e.v_ = v / n;
    return e;
  }

  const Vector& vector() const { return v_; }
  Eigen::Index dim() const { return v_.size(); }

 private:
  Vector v_;
};

struct TextEmbedding {
  Embedding embedding;
  bool truncated = false;
  int token_count = 0;
};

inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorKind::numeric, "cosine of a zero-norm vector");
  return a.dot(b) / (na * nb);
}

inline double cosine(const Embedding& a, const Embedding& b) { return cosine(a.vector(), b.vector()); }

/// Final-layer visual tokens and attention internals of one image.
struct TokenFeatures {
  Matrix all_tokens;  // (HW+1) x d_v, [CLS] at row 0
  Vector attn_cls;    // HW, head-averaged [CLS] -> patch attention
  Matrix values;      // HW x d_v, last-layer value vectors of the patch tokens
  Vector cls_output;  // d_v, equals all_tokens.row(0)

  Eigen::Index patch_count() const { return all_tokens.rows() - 1; }
  auto patch_tokens() const { return all_tokens.bottomRows(all_tokens.rows() - 1); }
};

/// Differentiable forward pass over a pixel variable.
struct VisionTrace {
  ad::Var all_tokens;  // (HW+1) x d_v
  ad::Var embedding;   // 1 x d, unit norm
  Vector attn_cls;
  Matrix values;
};

struct Capabilities {
  bool exposes_internals = true;
  bool differentiable = true;
  bool concurrent_safe = true;
};

class VisionLanguageEncoder {
 public:
  virtual ~VisionLanguageEncoder() = default;

  virtual const EncoderInfo& info() const = 0;
  virtual Capabilities capabilities() const = 0;

  /// `pixels` holds an R x R x 3 image flattened in HWC order as a column.
  virtual VisionTrace trace(ad::Tape& tape, ad::Var pixels) const = 0;

  virtual TextEmbedding embed_text(std::string_view text) const = 0;
};

using EncoderPtr = std::shared_ptr<const VisionLanguageEncoder>;

// Free-function surface -----------------------------------------------------------

namespace detail {

inline void check_resolution(const VisionLanguageEncoder& enc, const ImageTensor& image) {
  const int r = enc.info().resolution;
  if (image.height() != r || image.width() != r)
    fail(ErrorKind::resolution, "encoder ", enc.info().id, " expects ", r, "x", r, " input, got ", image.height(), "x",
         image.width());
}

inline Matrix pixel_column(const ImageTensor& image) {
  const auto data = image.data();
  return Eigen::Map<const Matrix>(data.data(), static_cast<Eigen::Index>(data.size()), 1);
}

}  // namespace detail

inline Embedding embed_image(const VisionLanguageEncoder& enc, const ImageTensor& image) {
  detail::check_resolution(enc, image);
  ad::Tape tape;
  auto trace = enc.trace(tape, tape.constant(detail::pixel_column(image)));
  return Embedding::normalized(ad::value(trace.embedding).row(0).transpose());
}

inline Embedding embed_text(const VisionLanguageEncoder& enc, std::string_view text) {
  return enc.embed_text(text).embedding;
}

inline TokenFeatures forward_tokens(const VisionLanguageEncoder& enc, const ImageTensor& image) {
  if (!enc.capabilities().exposes_internals)
    fail(ErrorKind::capability, "encoder ", enc.info().id, " does not expose attention/value hooks");
  detail::check_resolution(enc, image);
  ad::Tape tape;
  auto trace = enc.trace(tape, tape.constant(detail::pixel_column(image)));
  TokenFeatures f;
  f.all_tokens = ad::value(trace.all_tokens);
  f.attn_cls = trace.attn_cls;
  f.values = trace.values;
  f.cls_output = f.all_tokens.row(0).transpose();
  if (f.all_tokens.rows() != enc.info().token_count())
    fail(ErrorKind::invariant, "token count ", f.all_tokens.rows(), " != HW+1");
  return f;
}

/// A scalar objective over the vision trace. Components marked
/// non-differentiable are rejected by pixel_gradient.
struct Objective {
  std::string name;
  bool differentiable = true;
  std::function<ad::Var(ad::Tape&, ad::Var pixels, const VisionTrace&)> build;
};

namespace objective {

inline Objective constant(double c) {
  return {"constant", true, [c](ad::Tape& t, ad::Var, const VisionTrace&) {
            return t.constant(Matrix::Constant(1, 1, c));
          }};
}

inline Objective pixel_sum() {
  return {"pixel_sum", true, [](ad::Tape&, ad::Var pixels, const VisionTrace&) { return ad::sum_all(pixels); }};
}

/// 1 - cos(f_v(image), text)
inline Objective text_image_distance(const Embedding& text) {
  return {"text_image", true, [t = text.vector()](ad::Tape& tape, ad::Var, const VisionTrace& tr) {
            auto txt = tape.constant(t.transpose());
            return ad::affine(ad::row_dot(tr.embedding, txt), -1.0, 1.0);
          }};
}

}  // namespace objective

struct ObjectiveValue {
  double value = 0.0;
  Tensor3 gradient;
};

/// Exact gradient of the summed objectives with respect to the image pixels.
inline ObjectiveValue pixel_gradient(const VisionLanguageEncoder& enc, const ImageTensor& image,
                                     std::span<const Objective> objectives) {
  detail::check_resolution(enc, image);
  if (!enc.capabilities().differentiable)
    fail(ErrorKind::capability, "encoder ", enc.info().id, " is not differentiable");
  for (const auto& o : objectives)
    if (!o.differentiable) fail(ErrorKind::not_differentiable, "objective component '", o.name, "' has no gradient");
  ad::Tape tape;
  auto pixels = tape.variable(detail::pixel_column(image));
  auto trace = enc.trace(tape, pixels);
  std::vector<ad::Var> terms;
  for (const auto& o : objectives) terms.push_back(o.build(tape, pixels, trace));
  if (terms.empty()) fail(ErrorKind::input, "no objective given");
  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  tape.backward(total);
  ObjectiveValue out;
  out.value = ad::value(total)(0, 0);
  out.gradient = Tensor3(image.height(), image.width());
  const Matrix g = tape.grad(pixels);
  std::copy(g.data(), g.data() + g.size(), out.gradient.values.begin());
  return out;
}

inline ObjectiveValue pixel_gradient(const VisionLanguageEncoder& enc, const ImageTensor& image,
                                     const Objective& objective) {
  return pixel_gradient(enc, image, std::span<const Objective>(&objective, 1));
}

// Tokenizer ----------------------------------------------------------------------

/// Lower-cased alphanumeric word split.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Word-level vocabulary; id 0 is the unknown-word token.
class WordTokenizer {
 public:
  WordTokenizer() = default;
  explicit WordTokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    if (vocab_.empty() || vocab_.front() != "<unk>") vocab_.insert(vocab_.begin(), "<unk>");
    for (std::size_t i = 0; i < vocab_.size(); ++i) index_.emplace(vocab_[i], static_cast<int>(i));
  }

  struct Result {
    std::vector<int> ids;
    bool truncated = false;
  };

  Result encode(std::string_view text, std::size_t context_length) const {
    Result r;
    for (const auto& w : split_words(text)) {
      auto it = index_.find(w);
      r.ids.push_back(it == index_.end() ? 0 : it->second);
    }
    if (r.ids.size() > context_length) {
      r.ids.resize(context_length);
      r.truncated = true;
    }
    return r;
  }

  const std::vector<std::string>& vocab() const { return vocab_; }
  std::size_t size() const { return vocab_.size(); }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

/// Serializes every call into an encoder that declared exclusive access.
class SerializedEncoder final : public VisionLanguageEncoder {
 public:
  explicit SerializedEncoder(EncoderPtr inner) : inner_(std::move(inner)) {}

  const EncoderInfo& info() const override { return inner_->info(); }
  Capabilities capabilities() const override {
    auto c = inner_->capabilities();
    c.concurrent_safe = true;
    return c;
  }
  VisionTrace trace(ad::Tape& tape, ad::Var pixels) const override {
    std::lock_guard lock(mutex_);
    return inner_->trace(tape, pixels);
  }
  TextEmbedding embed_text(std::string_view text) const override {
    std::lock_guard lock(mutex_);
    return inner_->embed_text(text);
  }

 private:
  EncoderPtr inner_;
  mutable std::mutex mutex_;
};

inline EncoderPtr make_concurrent(EncoderPtr enc) {
  if (!enc) fail(ErrorKind::load, "null encoder");
  if (enc->capabilities().concurrent_safe) return enc;
  return std::make_shared<SerializedEncoder>(std::move(enc));
}

}  // namespace sgma
