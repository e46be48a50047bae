// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <thread>

#include <gtest/gtest.h>

#include "sgma/clients.hpp"
#include "test_support.hpp"

using namespace sgma;
using sgma::testing::random_image;

namespace {

struct Recorder {
  std::vector<double> sleeps;
  Sleeper sleeper() {
    return [this](double s) { sleeps.push_back(s); };
  }
};

VLMClient mock_client(std::shared_ptr<MockTransport> t, Recorder& rec, int attempts = 3) {
  ClientConfig c;
  c.id = "mock";
  c.retry.max_attempts = attempts;
  return VLMClient(c, std::move(t), rec.sleeper());
}

}  // namespace

TEST(Mock, CannedResponse) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, "hello", "canned answer");
  Recorder rec;
  const auto r = mock_client(t, rec).query(img, "hello");
  EXPECT_EQ(r.text, "canned answer");
  EXPECT_EQ(r.attempt_count, 1);
  EXPECT_FALSE(r.truncated);
}

TEST(Mock, DeterministicForSameKey) {
  const auto img = random_image(8, 2);
  auto t = std::make_shared<MockTransport>([](const std::string& h, const std::string& p) { return h.substr(0, 6) + p; });
  Recorder rec;
  auto c = mock_client(t, rec);
  EXPECT_EQ(c.query(img, "x").text, c.query(img, "x").text);
  EXPECT_NE(c.query(img, "x").text, c.query(random_image(8, 3), "x").text);
}

TEST(Retry, TwoFailuresThenSuccess) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, "p", "ok");
  t->fail_next(2);
  Recorder rec;
  const auto r = mock_client(t, rec).query(img, "p");
  EXPECT_EQ(r.text, "ok");
  EXPECT_EQ(r.attempt_count, 3);
  // exponential backoff: base 1 s, factor 2
  EXPECT_EQ(rec.sleeps, (std::vector<double>{1.0, 2.0}));
}

TEST(Retry, ExhaustionIsTransportError) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, "p", "ok");
  t->fail_next(4);
  Recorder rec;
  try {
    mock_client(t, rec).query(img, "p");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::transport);
    EXPECT_NE(std::string(e.what()).find("after 3 attempts"), std::string::npos);
  }
  EXPECT_EQ(t->calls(), 3);
}

TEST(Retry, AuthFailureIsNotRetried) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, "p", "ok");
  t->fail_next(1, FailureKind::auth);
  Recorder rec;
  EXPECT_THROW(mock_client(t, rec).query(img, "p"), Error);
  EXPECT_EQ(t->calls(), 1);
  EXPECT_TRUE(rec.sleeps.empty());
}

TEST(Retry, MalformedResponseIsNotRetried) {
  auto t = std::make_shared<MockTransport>();  // no canned response -> malformed
  Recorder rec;
  try {
    mock_client(t, rec).query(random_image(8, 1), "p");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
  }
  EXPECT_EQ(t->calls(), 1);
}

TEST(Retry, EmptyTextIsMalformed) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, "p", "  \n");
  Recorder rec;
  EXPECT_THROW(mock_client(t, rec).query(img, "p"), Error);
}

TEST(RateLimit, BucketDelaysBeyondBurst) {
  TokenBucket b(10.0, 2.0);
  EXPECT_EQ(b.reserve(), 0.0);
  EXPECT_EQ(b.reserve(), 0.0);
  const double wait = b.reserve();
  EXPECT_GT(wait, 0.0);
  EXPECT_LE(wait, 0.1 + 1e-9);
  TokenBucket off(0.0, 1.0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(off.reserve(), 0.0);
}

TEST(Prompts, VerbatimStrings) {
  EXPECT_EQ(kCaptionPrompt, "Describe this image in a short sentence.");
  EXPECT_EQ(kCaptioningTaskPrompt, "Describe the image in one sentence.");
}

TEST(Caption, ProxyPromptAndTrim) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, std::string(kCaptionPrompt), "A dog in the park.");
  t->add(img, std::string(kCaptioningTaskPrompt), "  A cat on a mat.\n");
  Recorder rec;
  auto c = mock_client(t, rec);
  EXPECT_EQ(caption_image(c, img), "A dog in the park.");
  EXPECT_EQ(describe_for_captioning_task(c, img), "A cat on a mat.");
}

TEST(Caption, WhitespacePaddedIsTrimmed) {
  const auto img = random_image(8, 1);
  auto t = std::make_shared<MockTransport>();
  t->add(img, std::string(kCaptionPrompt), "\t  A red circle.  \r\n");
  Recorder rec;
  EXPECT_EQ(caption_image(mock_client(t, rec), img), "A red circle.");
}

TEST(Caption, ManifestCaptionShortCircuits) {
  auto t = std::make_shared<MockTransport>();
  Recorder rec;
  auto c = mock_client(t, rec);
  EXPECT_EQ(caption_image(c, random_image(8, 1), std::string("A given caption")), "A given caption");
  EXPECT_EQ(describe_for_captioning_task(c, random_image(8, 1), std::string("Given")), "Given");
  EXPECT_EQ(t->calls(), 0);
}

TEST(Http, ChatCompletionRoundTrip) {
  ::setenv("SGMA_TEST_API_KEY", "sk-test-secret-123", 1);
  httplib::Server server;
  std::string seen_auth, seen_prompt, seen_url;
  double seen_temp = -1;
  int seen_max = -1;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto j = nlohmann::json::parse(req.body);
    seen_temp = j["temperature"];
    seen_max = j["max_tokens"];
    seen_prompt = j["messages"][0]["content"][0]["text"];
    seen_url = j["messages"][0]["content"][1]["image_url"]["url"];
    res.set_content(R"({"choices":[{"message":{"content":"A dog."},"finish_reason":"length"}]})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ClientConfig cfg;
  cfg.id = "remote";
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.model = "m";
  cfg.credential_env = "SGMA_TEST_API_KEY";
  cfg.timeout = 5;
  Recorder rec;
  const auto client = VLMClient::http(cfg, rec.sleeper());
  const auto img = random_image(8, 4);
  const auto r = client.query(img, kCaptionPrompt);
  server.stop();
  th.join();

  EXPECT_EQ(r.text, "A dog.");
  EXPECT_TRUE(r.truncated);
  EXPECT_EQ(seen_auth, "Bearer sk-test-secret-123");
  EXPECT_EQ(seen_prompt, kCaptionPrompt);
  EXPECT_EQ(seen_temp, 0.0);
  EXPECT_EQ(seen_max, 128);
  // lossless PNG payload that decodes to the quantized image
  const std::string prefix = "data:image/png;base64,";
  ASSERT_EQ(seen_url.rfind(prefix, 0), 0u);
  EXPECT_EQ(seen_url.substr(prefix.size()), base64_encode(encode_png(img)));
  // the serialized description carries the variable name, never the value
  const std::string desc = client.config().describe().dump();
  EXPECT_EQ(desc.find("sk-test-secret-123"), std::string::npos);
  EXPECT_NE(desc.find("SGMA_TEST_API_KEY"), std::string::npos);
}

TEST(Http, StatusCodesMapToFailureKinds) {
  httplib::Server server;
  int calls = 0;
  server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = calls == 1 ? 429 : 401;
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  ClientConfig cfg;
  cfg.id = "remote";
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  Recorder rec;
  const auto client = VLMClient::http(cfg, rec.sleeper());
  EXPECT_THROW(client.query(random_image(8, 1), "p"), Error);
  server.stop();
  th.join();
  EXPECT_EQ(calls, 2);  // 429 retried once, 401 ends it
  EXPECT_EQ(rec.sleeps.size(), 1u);
}

TEST(Http, MissingCredentialIsAuthFailure) {
  ::unsetenv("SGMA_TEST_MISSING_KEY");
  ClientConfig cfg;
  cfg.id = "remote";
  cfg.endpoint = "http://127.0.0.1:1";
  cfg.credential_env = "SGMA_TEST_MISSING_KEY";
  Recorder rec;
  try {
    VLMClient::http(cfg, rec.sleeper()).query(random_image(8, 1), "p");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("auth"), std::string::npos);
  }
  EXPECT_TRUE(rec.sleeps.empty());
}

TEST(LocalAdapters, RetrievalCaptionerAndCategories) {
  auto enc = sgma::testing::small_model(5);
  RetrievalCaptioner cap(enc, {"a red circle", "a blue square"});
  const auto img = random_image(32, 9);
  const auto out = cap(img, std::string(kCaptioningTaskPrompt));
  EXPECT_TRUE(out == "a red circle" || out == "a blue square");
  const auto cats = RetrievalCaptioner::categories(std::string(kClassificationPrompt));
  ASSERT_EQ(cats.size(), 10u);
  EXPECT_EQ(cats.front(), "airplane");
  EXPECT_EQ(cats.back(), "truck");
  const auto label = cap(img, std::string(kClassificationPrompt));
  EXPECT_NE(std::find(cats.begin(), cats.end(), label), cats.end());
}

TEST(LocalAdapters, EncoderJudgeAnswersInProtocolFormat) {
  auto enc = sgma::testing::small_model(5);
  const auto img = random_image(32, 9);
  const std::string prompt = "You are given a description: a red circle\nCarefully observe";
  EXPECT_EQ(EncoderJudge(enc, -2.0)(img, prompt), "Match with image: Yes");
  EXPECT_EQ(EncoderJudge(enc, 2.0)(img, prompt), "Match with image: No");
}
