// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Encoder registry: a JSON file mapping encoder ids to weight sources.
//
//   {"encoders": [{"id": "tiny-clip-a", "source": "encoders/tiny-clip-a.sgw",
//                  "resolution": 224, "patch_size": 16}]}
//
// A source is a path (relative to the registry file), "hub:<name>" resolved
// under the cache directory, or an http(s) URL downloaded into the cache.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>

#include <json.hpp>

#include "sgma/http.hpp"
#include "sgma/tiny_clip.hpp"

namespace sgma {

namespace fs = std::filesystem;

/// $SGMA_CACHE_DIR, else $XDG_CACHE_HOME/sgma, else ~/.cache/sgma.
inline fs::path cache_directory() {
  if (const char* dir = std::getenv("SGMA_CACHE_DIR"); dir && *dir) return dir;
  if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg && *xdg) return fs::path(xdg) / "sgma";
  if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "sgma";
  return fs::temp_directory_path() / "sgma-cache";
}

struct RegistryEntry {
  std::string id;
  std::string source;
  int resolution = 0;
  int patch_size = 0;
  std::string sha256;  // optional pin for downloaded weights
};

namespace detail {

inline bool is_url(std::string_view s) { return s.starts_with("http://") || s.starts_with("https://"); }

/// Downloads `url` to `dest` unless it is already cached.
inline void download(const std::string& url, const fs::path& dest) {
  const auto scheme_end = url.find("://");
  const auto path_start = url.find('/', scheme_end + 3);
  const std::string origin = url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
  httplib::Client client(origin);
  client.set_follow_location(true);
  client.set_connection_timeout(30);
  client.set_read_timeout(300);
  auto res = client.Get(path);
  if (!res) fail(ErrorKind::load, "download of ", url, " failed: ", httplib::to_string(res.error()));
  if (res->status != 200) fail(ErrorKind::load, "download of ", url, " returned HTTP ", res->status);
  fs::create_directories(dest.parent_path());
  const fs::path partial = dest.string() + ".part";
  {
    std::ofstream out(partial, std::ios::binary);
    out.write(res->body.data(), static_cast<std::streamsize>(res->body.size()));
    if (!out) fail(ErrorKind::io, "cannot write ", partial.string());
  }
  fs::rename(partial, dest);
}

inline std::string file_sha256(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::load, "cannot read ", p.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace detail

/// Checks the registration contract and wraps exclusive-access adapters.
inline EncoderPtr admit_encoder(EncoderPtr enc) {
  if (!enc) fail(ErrorKind::load, "encoder is not initialized");
  const auto& info = enc->info();
  const auto caps = enc->capabilities();
  if (!caps.exposes_internals)
    fail(ErrorKind::capability, "encoder ", info.id, " does not expose CLS attention and value vectors");
  if (info.resolution <= 0 || info.grid_h <= 0 || info.grid_w <= 0 || info.joint_dim <= 0 || info.hidden_dim <= 0)
    fail(ErrorKind::load, "encoder ", info.id, " reports non-positive dimensions");
  return caps.concurrent_safe ? enc : make_concurrent(std::move(enc));
}

class EncoderRegistry {
 public:
  EncoderRegistry() = default;

  static EncoderRegistry from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::load, "cannot open encoder registry ", path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, "encoder registry ", path.string(), ": ", e.what());
    }
    EncoderRegistry reg;
    reg.base_ = path.parent_path();
    if (!j.contains("encoders") || !j["encoders"].is_array())
      fail(ErrorKind::parse, "encoder registry ", path.string(), " has no \"encoders\" array");
    for (const auto& e : j["encoders"]) {
      RegistryEntry entry;
      try {
        entry.id = e.at("id").get<std::string>();
        entry.source = e.at("source").get<std::string>();
        entry.resolution = e.value("resolution", 0);
        entry.patch_size = e.value("patch_size", 0);
        entry.sha256 = e.value("sha256", "");
      } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::parse, "encoder registry entry: ", ex.what());
      }
      reg.add(entry);
    }
    return reg;
  }

  void add(RegistryEntry entry) {
    if (entry.id.empty()) fail(ErrorKind::config, "registry entry without id");
    if (entries_.count(entry.id)) fail(ErrorKind::config, "duplicate encoder id '", entry.id, "'");
    order_.push_back(entry.id);
    entries_.emplace(entry.id, std::move(entry));
  }

  /// Registers an in-process adapter under its own id.
  void add(EncoderPtr enc) {
    enc = admit_encoder(std::move(enc));
    RegistryEntry entry{enc->info().id, "memory", enc->info().resolution, enc->info().patch_size, ""};
    add(entry);
    std::lock_guard lock(cache_->mutex);
    cache_->loaded[entry.id] = std::move(enc);
  }

  bool contains(const std::string& id) const { return entries_.count(id) > 0; }
  const std::vector<std::string>& ids() const { return order_; }

  const RegistryEntry& entry(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) fail(ErrorKind::config, "unknown encoder id '", id, "'");
    return it->second;
  }

  /// Local file holding the weights, downloading into the cache if needed.
  fs::path resolve_source(const RegistryEntry& e) const {
    if (e.source.starts_with("hub:")) {
      const fs::path p = cache_directory() / e.source.substr(4);
      if (!fs::exists(p)) fail(ErrorKind::load, "hub weights for ", e.id, " not found in cache at ", p.string());
      return p;
    }
    if (detail::is_url(e.source)) {
      const fs::path p = cache_directory() / "downloads" / (sha256_hex(e.source).substr(0, 16) + ".sgw");
      if (!fs::exists(p)) {
        log_info("downloading weights for ", e.id, " from ", e.source);
        detail::download(e.source, p);
      }
      return p;
    }
    fs::path p = e.source;
    if (p.is_relative()) p = base_ / p;
    return p;
  }

  /// Loads (once) and returns the encoder for `id`.
  EncoderPtr load(const std::string& id) const {
    {
      std::lock_guard lock(cache_->mutex);
      if (auto it = cache_->loaded.find(id); it != cache_->loaded.end()) return it->second;
    }
    const auto& e = entry(id);
    const fs::path weights = resolve_source(e);
    if (!e.sha256.empty() && detail::file_sha256(weights) != e.sha256)
      fail(ErrorKind::load, "weights for ", id, " do not match the pinned sha256");
    auto model = std::make_shared<TinyClip>(TinyClip::load(weights));
    const auto& info = model->info();
    if (info.id != id) fail(ErrorKind::load, "weights at ", weights.string(), " carry id '", info.id, "', expected '", id, "'");
    if (e.resolution && info.resolution != e.resolution)
      fail(ErrorKind::load, "encoder ", id, " resolution ", info.resolution, " != registry ", e.resolution);
    if (e.patch_size && info.patch_size != e.patch_size)
      fail(ErrorKind::load, "encoder ", id, " patch size ", info.patch_size, " != registry ", e.patch_size);
    EncoderPtr admitted = admit_encoder(std::move(model));
    std::lock_guard lock(cache_->mutex);
    return cache_->loaded.emplace(id, std::move(admitted)).first->second;
  }

  std::vector<EncoderPtr> load_all(const std::vector<std::string>& ids) const {
    std::vector<EncoderPtr> out;
    for (const auto& id : ids) out.push_back(load(id));
    return out;
  }

 private:
  fs::path base_;
  std::map<std::string, RegistryEntry> entries_;
  std::vector<std::string> order_;
  struct Cache {
    std::mutex mutex;
    std::map<std::string, EncoderPtr> loaded;
  };
  std::unique_ptr<Cache> cache_ = std::make_unique<Cache>();
};

}  // namespace sgma
