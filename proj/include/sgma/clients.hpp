// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Clients for caption proxies, victim models and judges. A client wraps a
// transport (mock, in-process adapter, or chat-completion HTTP endpoint)
// with retries and a token-bucket rate limiter.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

#include <json.hpp>

#include "sgma/encoder.hpp"
#include "sgma/http.hpp"

namespace sgma {

inline constexpr std::string_view kCaptionPrompt = "Describe this image in a short sentence.";
inline constexpr std::string_view kCaptioningTaskPrompt = "Describe the image in one sentence.";
inline constexpr std::string_view kClassificationPrompt =
    "You are an image classifier.\n"
    "Given an image, classify it into exactly one of these 10 categories: airplane | automobile | bird | cat | deer | "
    "dog | frog | horse | ship | truck.\n"
    "Respond with only the category name.";

enum class FailureKind { auth, rate_limit, timeout, server, malformed, unavailable };

inline const char* to_string(FailureKind k) {
  switch (k) {
    case FailureKind::auth: return "auth";
    case FailureKind::rate_limit: return "rate_limit";
    case FailureKind::timeout: return "timeout";
    case FailureKind::server: return "server";
    case FailureKind::malformed: return "malformed";
    case FailureKind::unavailable: return "unavailable";
  }
  return "?";
}

inline bool retryable(FailureKind k) {
  return k == FailureKind::rate_limit || k == FailureKind::timeout || k == FailureKind::server ||
         k == FailureKind::unavailable;
}

/// Raised by transports. Retried by the client when the failure kind allows it.
class TransportFailure : public Error {
 public:
  TransportFailure(FailureKind kind, const std::string& message)
      : Error(kind == FailureKind::malformed ? ErrorKind::parse : ErrorKind::transport,
              std::string(to_string(kind)) + ": " + message),
        failure_(kind) {}

  FailureKind failure() const noexcept { return failure_; }

 private:
  FailureKind failure_;
};

struct VLMResponse {
  std::string text;
  double latency = 0.0;  // seconds, last attempt
  int attempt_count = 0;
  bool truncated = false;
};

struct DecodingParams {
  double temperature = 0.0;
  int max_tokens = 128;
};

struct VLMRequest {
  const ImageTensor* image = nullptr;
  std::string image_hash;
  std::string prompt;
  DecodingParams decoding;
};

struct TransportReply {
  std::string text;
  bool truncated = false;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string kind() const = 0;
  virtual TransportReply send(const VLMRequest& request) = 0;
};

/// Canned responses keyed by (image hash, prompt). An optional fallback
/// handles unlisted keys; `fail_next` scripts transient failures.
class MockTransport final : public Transport {
 public:
  using Fallback = std::function<std::string(const std::string& image_hash, const std::string& prompt)>;

  MockTransport() = default;
  explicit MockTransport(Fallback fallback) : fallback_(std::move(fallback)) {}

  void add(const std::string& image_hash, const std::string& prompt, std::string response) {
    canned_[{image_hash, prompt}] = std::move(response);
  }
  void add(const ImageTensor& image, std::string_view prompt, std::string response) {
    add(image_hash(image), std::string(prompt), std::move(response));
  }

  /// The next `n` calls fail with `kind`.
  void fail_next(int n, FailureKind kind = FailureKind::timeout) {
    failure_kind_ = kind;
    pending_failures_ = n;
  }

  int calls() const { return calls_.load(); }
  std::string kind() const override { return "mock"; }

  TransportReply send(const VLMRequest& request) override {
    ++calls_;
    if (pending_failures_.fetch_sub(1) > 0) throw TransportFailure(failure_kind_, "scripted mock failure");
    if (auto it = canned_.find({request.image_hash, request.prompt}); it != canned_.end()) return {it->second, false};
    if (fallback_) return {fallback_(request.image_hash, request.prompt), false};
    throw TransportFailure(FailureKind::malformed, "mock has no response for this image and prompt");
  }

 private:
  std::map<std::pair<std::string, std::string>, std::string> canned_;
  Fallback fallback_;
  std::atomic<int> calls_{0};
  std::atomic<int> pending_failures_{0};
  FailureKind failure_kind_ = FailureKind::timeout;
};

/// In-process model: (image, prompt) -> text.
class LocalTransport final : public Transport {
 public:
  using Adapter = std::function<std::string(const ImageTensor&, const std::string& prompt)>;

  explicit LocalTransport(Adapter adapter) : adapter_(std::move(adapter)) {}
  std::string kind() const override { return "local"; }
  TransportReply send(const VLMRequest& request) override { return {adapter_(*request.image, request.prompt), false}; }

 private:
  Adapter adapter_;
};

/// Chat-completion endpoint taking the image as a base64 PNG data URL.
class HttpTransport final : public Transport {
 public:
  HttpTransport(std::string base_url, std::string path, std::string model, std::string credential_env,
                double timeout_seconds)
      : base_url_(std::move(base_url)),
        path_(std::move(path)),
        model_(std::move(model)),
        credential_env_(std::move(credential_env)),
        timeout_(timeout_seconds) {}

  std::string kind() const override { return "http"; }

  static nlohmann::json request_body(const std::string& model, const VLMRequest& r) {
    const std::string data_url = "data:image/png;base64," + base64_encode(encode_png(*r.image));
    return {{"model", model},
            {"temperature", r.decoding.temperature},
            {"max_tokens", r.decoding.max_tokens},
            {"messages",
             nlohmann::json::array({{{"role", "user"},
                                     {"content", nlohmann::json::array({{{"type", "text"}, {"text", r.prompt}},
                                                                        {{"type", "image_url"},
                                                                         {"image_url", {{"url", data_url}}}}})}}})}};
  }

  TransportReply send(const VLMRequest& r) override {
    httplib::Client client(base_url_);
    const auto secs = static_cast<time_t>(timeout_);
    const auto usecs = static_cast<time_t>((timeout_ - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    httplib::Headers headers;
    if (!credential_env_.empty()) {
      const char* key = std::getenv(credential_env_.c_str());
      if (!key || !*key) throw TransportFailure(FailureKind::auth, "credential variable " + credential_env_ + " is unset");
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = client.Post(path_, headers, request_body(model_, r).dump(), "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::Read || err == httplib::Error::Write ||
                             err == httplib::Error::ConnectionTimeout;
      throw TransportFailure(timed_out ? FailureKind::timeout : FailureKind::unavailable,
                             base_url_ + path_ + ": " + httplib::to_string(err));
    }
    if (res->status == 401 || res->status == 403) throw TransportFailure(FailureKind::auth, "HTTP " + std::to_string(res->status));
    if (res->status == 429) throw TransportFailure(FailureKind::rate_limit, "HTTP 429");
    if (res->status == 408) throw TransportFailure(FailureKind::timeout, "HTTP 408");
    if (res->status >= 500) throw TransportFailure(FailureKind::server, "HTTP " + std::to_string(res->status));
    if (res->status != 200) throw TransportFailure(FailureKind::malformed, "HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto& choice = j.at("choices").at(0);
      TransportReply reply;
      reply.text = choice.at("message").at("content").get<std::string>();
      reply.truncated = choice.value("finish_reason", "") == "length";
      return reply;
    } catch (const nlohmann::json::exception& e) {
      throw TransportFailure(FailureKind::malformed, std::string("unexpected response body: ") + e.what());
    }
  }

 private:
  std::string base_url_, path_, model_, credential_env_;
  double timeout_;
};

struct RetryPolicy {
  int max_attempts = 3;
  double base_delay = 1.0;  // seconds
  double factor = 2.0;

  double delay_before(int attempt) const {  // attempt >= 2
    double d = base_delay;
    for (int i = 2; i < attempt; ++i) d *= factor;
    return d;
  }
};

using Sleeper = std::function<void(double seconds)>;

inline Sleeper real_sleeper() {
  return [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
}

/// Token bucket; rate <= 0 disables limiting.
class TokenBucket {
 public:
  TokenBucket(double rate_per_second, double burst) : rate_(rate_per_second), burst_(std::max(1.0, burst)), tokens_(burst_) {}

  /// Seconds the caller must wait before its request may go out.
  double reserve() {
    if (rate_ <= 0.0) return 0.0;
    std::lock_guard lock(mutex_);
    const auto now = std::chrono::steady_clock::now();
    if (started_) tokens_ = std::min(burst_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
    started_ = true;
    last_ = now;
    tokens_ -= 1.0;
    return tokens_ >= 0.0 ? 0.0 : -tokens_ / rate_;
  }

 private:
  double rate_, burst_, tokens_;
  bool started_ = false;
  std::chrono::steady_clock::time_point last_;
  std::mutex mutex_;
};

struct ClientConfig {
  std::string id;
  std::string transport = "mock";  // mock | local | http
  std::string endpoint;            // http base url
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string credential_env;  // name of the variable, never its value
  RetryPolicy retry;
  double timeout = 60.0;
  double rate_per_second = 0.0;
  double burst = 1.0;
  DecodingParams decoding;

  /// Serializable description; holds the variable name only.
  nlohmann::json describe() const {
    return {{"id", id},
            {"transport", transport},
            {"endpoint", endpoint},
            {"model", model},
            {"credential_env", credential_env},
            {"max_attempts", retry.max_attempts},
            {"temperature", decoding.temperature},
            {"max_tokens", decoding.max_tokens}};
  }
};

class VLMClient {
 public:
  VLMClient(ClientConfig config, std::shared_ptr<Transport> transport, Sleeper sleeper = real_sleeper())
      : config_(std::move(config)),
        transport_(std::move(transport)),
        sleeper_(std::move(sleeper)),
        bucket_(std::make_unique<TokenBucket>(config_.rate_per_second, config_.burst)) {
    if (!transport_) fail(ErrorKind::config, "client ", config_.id, " has no transport");
    if (config_.retry.max_attempts < 1) fail(ErrorKind::config, "client ", config_.id, " needs max_attempts >= 1");
  }

  static VLMClient http(ClientConfig config, Sleeper sleeper = real_sleeper()) {
    if (config.endpoint.empty()) fail(ErrorKind::config, "client ", config.id, " has no endpoint");
    auto t = std::make_shared<HttpTransport>(config.endpoint, config.path, config.model, config.credential_env,
                                             config.timeout);
    config.transport = "http";
    return VLMClient(std::move(config), std::move(t), std::move(sleeper));
  }

  const ClientConfig& config() const { return config_; }
  const std::string& id() const { return config_.id; }

  VLMResponse query(const ImageTensor& image, std::string_view prompt) const {
    if (image.empty()) fail(ErrorKind::input, "client ", config_.id, ": empty image");
    VLMRequest req{&image, image_hash(image), std::string(prompt), config_.decoding};
    for (int attempt = 1;; ++attempt) {
      if (attempt > 1) sleeper_(config_.retry.delay_before(attempt));
      if (const double wait = bucket_->reserve(); wait > 0.0) sleeper_(wait);
      const auto start = std::chrono::steady_clock::now();
      try {
        auto reply = transport_->send(req);
        VLMResponse r;
        r.latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        r.attempt_count = attempt;
        r.truncated = reply.truncated;
        r.text = std::move(reply.text);
        if (r.text.find_first_not_of(" \t\r\n") == std::string::npos)
          throw TransportFailure(FailureKind::malformed, "empty response text");
        return r;
      } catch (const TransportFailure& f) {
        if (!retryable(f.failure()))
          fail(f.kind(), "client ", config_.id, ": ", f.what());
        if (attempt >= config_.retry.max_attempts)
          fail(ErrorKind::transport, "client ", config_.id, " failed after ", attempt, " attempts: ", f.what());
        log_warning("client ", config_.id, " attempt ", attempt, " failed (", f.what(), "); retrying");
      }
    }
  }

 private:
  ClientConfig config_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
  std::unique_ptr<TokenBucket> bucket_;
};

using ClientPtr = std::shared_ptr<const VLMClient>;

/// Trims and joins lines into one.
inline std::string single_line(std::string_view text) {
  std::string out;
  bool space = false;
  for (char c : text) {
    if (c == '\n' || c == '\r' || c == '\t' || c == ' ') {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(c);
  }
  return out;
}

/// Caption for the attack; a manifest-provided caption short-circuits the client.
inline std::string caption_image(const VLMClient& client, const ImageTensor& image,
                                 const std::optional<std::string>& manifest_caption = std::nullopt) {
  if (manifest_caption && !single_line(*manifest_caption).empty()) return single_line(*manifest_caption);
  return single_line(client.query(image, kCaptionPrompt).text);
}

inline std::string describe_for_captioning_task(const VLMClient& client, const ImageTensor& image,
                                                const std::optional<std::string>& override_text = std::nullopt) {
  if (override_text && !single_line(*override_text).empty()) return single_line(*override_text);
  return single_line(client.query(image, kCaptioningTaskPrompt).text);
}

// Local adapters ----------------------------------------------------------------
//
// Stand-ins for victim models and judges built from an encoder: useful when
// no remote service is configured and for end-to-end tests.

/// Returns the candidate caption closest to the image in the encoder's space.
/// Prompts containing a category list ("a | b | c") are answered with the
/// closest category instead.
class RetrievalCaptioner {
 public:
  RetrievalCaptioner(EncoderPtr encoder, std::vector<std::string> candidates)
      : encoder_(std::move(encoder)), candidates_(std::move(candidates)) {
    if (!encoder_) fail(ErrorKind::config, "retrieval captioner needs an encoder");
    if (candidates_.empty()) fail(ErrorKind::config, "retrieval captioner needs candidate captions");
    for (const auto& c : candidates_) text_.push_back(embed_text(*encoder_, c).vector());
  }

  std::string operator()(const ImageTensor& image, const std::string& prompt) const {
    const auto img = embed_image(*encoder_, resize_bicubic(image, encoder_->info().resolution)).vector();
    if (auto cats = categories(prompt); !cats.empty()) {
      std::size_t best = 0;
      double best_score = -2;
      for (std::size_t i = 0; i < cats.size(); ++i) {
        const double s = img.dot(embed_text(*encoder_, "a photo of a " + cats[i]).vector());
        if (s > best_score) best_score = s, best = i;
      }
      return cats[best];
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates_.size(); ++i)
      if (img.dot(text_[i]) > img.dot(text_[best])) best = i;
    return candidates_[best];
  }

  static std::vector<std::string> categories(const std::string& prompt) {
    const auto colon = prompt.find("categories:");
    if (colon == std::string::npos) return {};
    const auto end = prompt.find_first_of(".\n", colon);
    const std::string list = prompt.substr(colon + 11, end == std::string::npos ? std::string::npos : end - colon - 11);
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= list.size()) {
      const auto bar = list.find('|', pos);
      const std::string item = single_line(list.substr(pos, bar == std::string::npos ? std::string::npos : bar - pos));
      if (!item.empty()) out.push_back(item);
      if (bar == std::string::npos) break;
      pos = bar + 1;
    }
    return out;
  }

 private:
  EncoderPtr encoder_;
  std::vector<std::string> candidates_;
  std::vector<Vector> text_;
};

/// Judge that answers "Match with image: Yes" when the encoder similarity of
/// the quoted description to the image reaches `threshold`.
class EncoderJudge {
 public:
  EncoderJudge(EncoderPtr encoder, double threshold) : encoder_(std::move(encoder)), threshold_(threshold) {
    if (!encoder_) fail(ErrorKind::config, "encoder judge needs an encoder");
  }

  std::string operator()(const ImageTensor& image, const std::string& prompt) const {
    static constexpr std::string_view marker = "You are given a description: ";
    const auto start = prompt.find(marker);
    if (start == std::string::npos) return "I can only judge descriptions.";
    const auto from = start + marker.size();
    const std::string description = prompt.substr(from, prompt.find('\n', from) - from);
    const auto img = embed_image(*encoder_, resize_bicubic(image, encoder_->info().resolution));
    const double s = cosine(img, embed_text(*encoder_, description));
    return std::string("Match with image: ") + (s >= threshold_ ? "Yes" : "No");
  }

 private:
  EncoderPtr encoder_;
  double threshold_;
};

}  // namespace sgma
