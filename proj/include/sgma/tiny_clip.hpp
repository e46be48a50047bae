// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// A compact CLIP-style dual encoder.
//
// Vision tower: patch embedding, [CLS] token, learned positions, pre-norm
// transformer blocks with QuickGELU MLPs, final layer norm applied to every
// token, and a linear projection of [CLS] into the joint space.
// Text tower: word embeddings, mean pooling, one residual MLP block, layer
// norm and projection.
//
// Weights live in a single binary file: magic "SGMAWTS1", a JSON config
// block, then named row-major float64 tensors.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgma/autodiff.hpp"
#include "sgma/encoder.hpp"

namespace sgma {

struct TinyClipConfig {
  std::string id = "tiny-clip";
  int resolution = 224;
  int patch_size = 16;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int mlp_width = 256;
  int embed_dim = 64;
  int text_width = 64;
  int text_mlp_width = 128;
  int context_length = 16;
  std::array<double, 3> pixel_mean{0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> pixel_std{0.26862954, 0.26130258, 0.27577711};
  std::vector<std::string> vocab;

  int grid() const { return resolution / patch_size; }

  void validate() const {
    if (resolution <= 0 || patch_size <= 0 || resolution % patch_size != 0)
      fail(ErrorKind::config, "resolution ", resolution, " is not a positive multiple of patch size ", patch_size);
    if (width <= 0 || layers <= 0 || heads <= 0 || width % heads != 0)
      fail(ErrorKind::config, "width ", width, " must be a positive multiple of heads ", heads);
    if (embed_dim <= 0 || mlp_width <= 0 || text_width <= 0 || text_mlp_width <= 0 || context_length <= 0)
      fail(ErrorKind::config, "dimensions must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TinyClipConfig& c) {
  j = nlohmann::json{{"id", c.id},
                     {"resolution", c.resolution},
                     {"patch_size", c.patch_size},
                     {"width", c.width},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"mlp_width", c.mlp_width},
                     {"embed_dim", c.embed_dim},
                     {"text_width", c.text_width},
                     {"text_mlp_width", c.text_mlp_width},
                     {"context_length", c.context_length},
                     {"pixel_mean", c.pixel_mean},
                     {"pixel_std", c.pixel_std},
                     {"vocab", c.vocab}};
}

inline void from_json(const nlohmann::json& j, TinyClipConfig& c) {
  TinyClipConfig d;
  c.id = j.value("id", d.id);
  c.resolution = j.value("resolution", d.resolution);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.width = j.value("width", d.width);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.mlp_width = j.value("mlp_width", d.mlp_width);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.text_width = j.value("text_width", d.text_width);
  c.text_mlp_width = j.value("text_mlp_width", d.text_mlp_width);
  c.context_length = j.value("context_length", d.context_length);
  c.pixel_mean = j.value("pixel_mean", d.pixel_mean);
  c.pixel_std = j.value("pixel_std", d.pixel_std);
  c.vocab = j.value("vocab", std::vector<std::string>{});
}

using ParameterMap = std::map<std::string, Matrix>;

/// Parameters placed on a tape, as constants (inference) or variables (training).
struct BoundParameters {
  std::map<std::string, ad::Var> vars;

  ad::Var operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) fail(ErrorKind::load, "missing parameter '", name, "'");
    return it->second;
  }
};

class TinyClip final : public VisionLanguageEncoder {
 public:
  TinyClip(TinyClipConfig config, ParameterMap params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    tokenizer_ = WordTokenizer(config_.vocab);
    config_.vocab = tokenizer_.vocab();
    info_.id = config_.id;
    info_.resolution = config_.resolution;
    info_.patch_size = config_.patch_size;
    info_.grid_h = info_.grid_w = config_.grid();
    info_.joint_dim = config_.embed_dim;
    info_.hidden_dim = config_.width;
    check_shapes();
    build_patch_index();
  }

  /// Random initialization for training from scratch.
  static TinyClip initialize(TinyClipConfig config, std::uint64_t seed) {
    config.validate();
    WordTokenizer tok(config.vocab);
    config.vocab = tok.vocab();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto randn = [&](Eigen::Index r, Eigen::Index c, double std) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * std;
      return m;
    };
    const int w = config.width;
    const int p2 = 3 * config.patch_size * config.patch_size;
    const int n = config.grid() * config.grid() + 1;
    ParameterMap p;
    p["patch_w"] = randn(p2, w, 1.0 / std::sqrt(static_cast<double>(p2)));
    p["cls"] = randn(1, w, 0.02);
    p["pos"] = randn(n, w, 0.02);
    p["ln_pre_g"] = Matrix::Ones(1, w);
    p["ln_pre_b"] = Matrix::Zero(1, w);
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(w));
    for (int l = 0; l < config.layers; ++l) {
      const std::string pre = "l" + std::to_string(l) + ".";
      p[pre + "ln1_g"] = Matrix::Ones(1, w);
      p[pre + "ln1_b"] = Matrix::Zero(1, w);
      for (const char* name : {"wq", "wk", "wv", "wo"}) p[pre + name] = randn(w, w, proj_std);
      for (const char* name : {"bq", "bk", "bv", "bo"}) p[pre + name] = Matrix::Zero(1, w);
      p[pre + "ln2_g"] = Matrix::Ones(1, w);
      p[pre + "ln2_b"] = Matrix::Zero(1, w);
      p[pre + "fc1_w"] = randn(w, config.mlp_width, proj_std);
      p[pre + "fc1_b"] = Matrix::Zero(1, config.mlp_width);
      p[pre + "fc2_w"] = randn(config.mlp_width, w, 1.0 / std::sqrt(static_cast<double>(config.mlp_width)));
      p[pre + "fc2_b"] = Matrix::Zero(1, w);
    }
    p["ln_post_g"] = Matrix::Ones(1, w);
    p["ln_post_b"] = Matrix::Zero(1, w);
    p["proj"] = randn(w, config.embed_dim, proj_std);

    const int tw = config.text_width;
    p["tok_emb"] = randn(static_cast<Eigen::Index>(config.vocab.size()), tw, 1.0);
    p["t_ln1_g"] = Matrix::Ones(1, tw);
    p["t_ln1_b"] = Matrix::Zero(1, tw);
    p["t_fc1_w"] = randn(tw, config.text_mlp_width, 1.0 / std::sqrt(static_cast<double>(tw)));
    p["t_fc1_b"] = Matrix::Zero(1, config.text_mlp_width);
    p["t_fc2_w"] = randn(config.text_mlp_width, tw, 1.0 / std::sqrt(static_cast<double>(config.text_mlp_width)));
    p["t_fc2_b"] = Matrix::Zero(1, tw);
    p["t_ln_g"] = Matrix::Ones(1, tw);
    p["t_ln_b"] = Matrix::Zero(1, tw);
    p["t_proj"] = randn(tw, config.embed_dim, 1.0 / std::sqrt(static_cast<double>(tw)));
    return TinyClip(std::move(config), std::move(p));
  }

  const EncoderInfo& info() const override { return info_; }
  Capabilities capabilities() const override { return {}; }
  const TinyClipConfig& config() const { return config_; }
  const ParameterMap& parameters() const { return params_; }
  const WordTokenizer& tokenizer() const { return tokenizer_; }

  BoundParameters bind(ad::Tape& tape, bool trainable) const {
    BoundParameters b;
    for (const auto& [name, m] : params_) b.vars.emplace(name, trainable ? tape.variable(m) : tape.constant(m));
    return b;
  }

  VisionTrace trace(ad::Tape& tape, ad::Var pixels) const override { return trace(tape, pixels, bind(tape, false)); }

  VisionTrace trace(ad::Tape& tape, ad::Var pixels, const BoundParameters& p) const {
    const auto& px = tape.value(pixels);
    const Eigen::Index expected = 3LL * config_.resolution * config_.resolution;
    if (px.rows() != expected || px.cols() != 1)
      fail(ErrorKind::resolution, "encoder ", config_.id, " expects ", expected, " pixels, got ", px.size());
    const int hw = info_.patch_count();
    const int p2 = 3 * config_.patch_size * config_.patch_size;
    const int w = config_.width;
    const int dh = w / config_.heads;

    auto patches = ad::gather(pixels, patch_index_, hw, p2);
    patches = ad::add_row(ad::mul(patches, tape.constant(norm_scale_)), tape.constant(norm_shift_));
    auto x = ad::matmul(patches, p["patch_w"]);
    const ad::Var rows[] = {p["cls"], x};
    x = ad::add(ad::concat_rows(rows), p["pos"]);
    x = ad::layer_norm(x, p["ln_pre_g"], p["ln_pre_b"]);

    VisionTrace out;
    for (int l = 0; l < config_.layers; ++l) {
      const std::string pre = "l" + std::to_string(l) + ".";
      const bool last = l + 1 == config_.layers;
      auto h = ad::layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"]);
      auto q = ad::add_row(ad::matmul(h, p[pre + "wq"]), p[pre + "bq"]);
      auto k = ad::add_row(ad::matmul(h, p[pre + "wk"]), p[pre + "bk"]);
      auto v = ad::add_row(ad::matmul(h, p[pre + "wv"]), p[pre + "bv"]);
      std::vector<ad::Var> heads;
      Vector attn = Vector::Zero(hw);
      for (int hd = 0; hd < config_.heads; ++hd) {
        auto qh = ad::slice_cols(q, hd * dh, dh);
        auto kh = ad::slice_cols(k, hd * dh, dh);
        auto vh = ad::slice_cols(v, hd * dh, dh);
        auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        auto probs = ad::softmax_rows(scores);
        if (last) attn += tape.value(probs).row(0).segment(1, hw).transpose();
        heads.push_back(ad::matmul(probs, vh));
      }
      if (last) {
        out.attn_cls = attn / static_cast<double>(config_.heads);
        out.values = tape.value(v).bottomRows(hw);
      }
      auto attn_out = ad::add_row(ad::matmul(ad::concat_cols(heads), p[pre + "wo"]), p[pre + "bo"]);
      x = ad::add(x, attn_out);
      auto h2 = ad::layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"]);
      auto mlp = ad::quick_gelu(ad::add_row(ad::matmul(h2, p[pre + "fc1_w"]), p[pre + "fc1_b"]));
      mlp = ad::add_row(ad::matmul(mlp, p[pre + "fc2_w"]), p[pre + "fc2_b"]);
      x = ad::add(x, mlp);
    }
    out.all_tokens = ad::layer_norm(x, p["ln_post_g"], p["ln_post_b"]);
    out.embedding = ad::normalize_rows(ad::matmul(ad::slice_rows(out.all_tokens, 0, 1), p["proj"]));
    return out;
  }

  /// Differentiable text tower on token ids; returns a 1 x d unit row.
  ad::Var trace_text(ad::Tape&, const std::vector<int>& ids, const BoundParameters& p) const {
    if (ids.empty()) fail(ErrorKind::input, "empty token sequence");
    auto h = ad::mean_rows(ad::gather_rows(p["tok_emb"], ids));
    auto m = ad::layer_norm(h, p["t_ln1_g"], p["t_ln1_b"]);
    m = ad::quick_gelu(ad::add_row(ad::matmul(m, p["t_fc1_w"]), p["t_fc1_b"]));
    m = ad::add_row(ad::matmul(m, p["t_fc2_w"]), p["t_fc2_b"]);
    h = ad::add(h, m);
    h = ad::layer_norm(h, p["t_ln_g"], p["t_ln_b"]);
    return ad::normalize_rows(ad::matmul(h, p["t_proj"]));
  }

  TextEmbedding embed_text(std::string_view text) const override {
    auto enc = tokenizer_.encode(text, static_cast<std::size_t>(config_.context_length));
    if (enc.ids.empty()) fail(ErrorKind::input, "text is empty");
    ad::Tape tape;
    auto e = trace_text(tape, enc.ids, bind_text(tape));
    TextEmbedding out;
    out.embedding = Embedding::normalized(tape.value(e).row(0).transpose());
    out.truncated = enc.truncated;
    out.token_count = static_cast<int>(enc.ids.size());
    return out;
  }

  // Persistence -------------------------------------------------------------

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write weights to ", path.string());
    const std::string header = nlohmann::json(config_).dump();
    out.write(kMagic, 8);
    write_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_u64(out, params_.size());
    for (const auto& [name, m] : params_) {
      write_u64(out, name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u64(out, static_cast<std::uint64_t>(m.rows()));
      write_u64(out, static_cast<std::uint64_t>(m.cols()));
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          const double v = m(r, c);
          out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
    }
    if (!out) fail(ErrorKind::io, "write failed for ", path.string());
  }

  static TinyClip load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::load, "cannot open weights ", path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string_view(magic, 8) != std::string_view(kMagic, 8))
      fail(ErrorKind::load, path.string(), " is not an sgma weights file");
    const auto header_len = read_u64(in, path);
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    TinyClipConfig config;
    try {
      config = nlohmann::json::parse(header).get<TinyClipConfig>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::load, "bad config block in ", path.string(), ": ", e.what());
    }
    ParameterMap params;
    const auto count = read_u64(in, path);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string name(read_u64(in, path), '\0');
      in.read(name.data(), static_cast<std::streamsize>(name.size()));
      const auto rows = static_cast<Eigen::Index>(read_u64(in, path));
      const auto cols = static_cast<Eigen::Index>(read_u64(in, path));
      Matrix m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) in.read(reinterpret_cast<char*>(&m(r, c)), sizeof(double));
      if (!in) fail(ErrorKind::load, "truncated weights file ", path.string());
      params.emplace(std::move(name), std::move(m));
    }
    return TinyClip(std::move(config), std::move(params));
  }

  /// Replaces parameter values (training updates); shapes must match.
  void set_parameters(ParameterMap params) {
    params_ = std::move(params);
    check_shapes();
  }

 private:
  static constexpr char kMagic[8] = {'S', 'G', 'M', 'A', 'W', 'T', 'S', '1'};

  static void write_u64(std::ofstream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
  static std::uint64_t read_u64(std::ifstream& in, const std::filesystem::path& path) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) fail(ErrorKind::load, "truncated weights file ", path.string());
    return v;
  }

  BoundParameters bind_text(ad::Tape& tape) const {
    BoundParameters b;
    for (const auto& [name, m] : params_)
      if (name.rfind("t_", 0) == 0 || name == "tok_emb") b.vars.emplace(name, tape.constant(m));
    return b;
  }

  void expect(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail(ErrorKind::load, "weights for ", config_.id, " lack '", name, "'");
    if (it->second.rows() != rows || it->second.cols() != cols)
      fail(ErrorKind::load, "parameter '", name, "' is ", it->second.rows(), "x", it->second.cols(), ", expected ", rows,
           "x", cols);
  }

  void check_shapes() const {
    const int w = config_.width;
    const int p2 = 3 * config_.patch_size * config_.patch_size;
    expect("patch_w", p2, w);
    expect("cls", 1, w);
    expect("pos", info_.token_count(), w);
    expect("proj", w, config_.embed_dim);
    for (int l = 0; l < config_.layers; ++l) {
      const std::string pre = "l" + std::to_string(l) + ".";
      for (const char* n : {"wq", "wk", "wv", "wo"}) expect(pre + n, w, w);
      expect(pre + "fc1_w", w, config_.mlp_width);
      expect(pre + "fc2_w", config_.mlp_width, w);
    }
    expect("tok_emb", static_cast<Eigen::Index>(tokenizer_.size()), config_.text_width);
    expect("t_proj", config_.text_width, config_.embed_dim);
  }

  void build_patch_index() {
    const int r = config_.resolution;
    const int ps = config_.patch_size;
    const int g = config_.grid();
    const int p2 = 3 * ps * ps;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(g) * g * p2);
    norm_scale_.resize(g * g, p2);
    norm_shift_.resize(1, p2);
    for (int py = 0; py < g; ++py)
      for (int px = 0; px < g; ++px)
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < ps; ++dy)
            for (int dx = 0; dx < ps; ++dx) {
              const int row = py * g + px;
              const int col = (c * ps + dy) * ps + dx;
              (*idx)[static_cast<std::size_t>(row) * p2 + col] = ((py * ps + dy) * r + (px * ps + dx)) * 3 + c;
              norm_scale_(row, col) = 1.0 / config_.pixel_std[c];
              norm_shift_(0, col) = -config_.pixel_mean[c] / config_.pixel_std[c];
            }
    patch_index_ = std::move(idx);
  }

  TinyClipConfig config_;
  ParameterMap params_;
  WordTokenizer tokenizer_;
  EncoderInfo info_;
  std::shared_ptr<const std::vector<int>> patch_index_;
  Matrix norm_scale_;
  Matrix norm_shift_;
};

}  // namespace sgma
