// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Noun-phrase extraction, phrase-to-patch association and clean feature
// centers for the local loss.

#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "sgma/http.hpp"
#include "sgma/saliency.hpp"

namespace sgma {

using PhraseSet = std::vector<std::string>;

/// Splits a caption into candidate noun chunks. Output is normalized by
/// extract_noun_phrases, so implementations may return raw spans.
class Chunker {
 public:
  virtual ~Chunker() = default;
  virtual std::vector<std::string> chunks(std::string_view caption) const = 0;
};

namespace detail {

inline const std::unordered_set<std::string>& determiners() {
  static const std::unordered_set<std::string> s{
      "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "all", "both",
      "either", "neither", "no", "its", "his", "her", "their", "our", "my", "your", "one", "two", "three",
      "four", "five", "six", "seven", "eight", "nine", "ten", "several", "many", "few", "another", "other",
      "such", "much", "more", "most"};
  return s;
}

inline const std::unordered_set<std::string>& function_words() {
  static const std::unordered_set<std::string> s{
      // prepositions
      "in", "on", "at", "of", "with", "without", "under", "over", "above", "below", "near", "beside", "behind",
      "between", "into", "onto", "from", "to", "by", "for", "through", "across", "along", "around", "against",
      "among", "toward", "towards", "inside", "outside", "upon", "next", "beneath", "within", "off", "like",
      "about", "after", "before", "during", "atop",
      // conjunctions and pronouns
      "and", "or", "but", "nor", "so", "yet", "while", "as", "than", "it", "they", "he", "she", "we", "i", "you",
      "them", "him", "us", "me", "there", "here", "who", "whom", "which", "what", "where", "when", "whose",
      "itself", "themselves", "something", "someone",
      // auxiliaries
      "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does", "did", "can",
      "could", "will", "would", "may", "might", "should", "must", "shall", "not", "isn't", "aren't", "it's",
      "there's",
      // adverbs and particles
      "very", "quite", "really", "just", "also", "together", "alone", "up", "down", "out", "away", "back", "too",
      "then", "now", "still", "almost", "only", "even", "again", "each", "other"};
  return s;
}

inline const std::unordered_set<std::string>& verb_stems() {
  static const std::unordered_set<std::string> s{
      "run", "sit", "stand", "lie", "lay", "walk", "play", "eat", "hold", "look", "fly", "swim", "jump", "ride",
      "rest", "show", "wear", "carry", "wait", "sleep", "grow", "float", "hang", "lean", "drive", "park", "read",
      "write", "watch", "talk", "smile", "fill", "cover", "surround", "place", "put", "set", "use", "make",
      "take", "give", "go", "come", "move", "climb", "chase", "catch", "throw", "kick", "hit", "cut",
      "cook", "drink", "open", "close", "pose", "stare", "graze", "display", "feature", "depict",
      "contain", "appear", "seem", "become", "get", "see", "perch", "sail", "land", "roll", "stack",
      "line", "arrange", "scatter", "overlap", "sink", "shine"};
  return s;
}

inline const std::unordered_set<std::string>& adjectives() {
  static const std::unordered_set<std::string> s{
      "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "brown", "gray", "grey", "pink",
      "small", "large", "big", "little", "tiny", "huge", "tall", "short", "long", "old", "young", "new",
      "bright", "dark", "light", "empty", "full", "open", "closed", "wooden", "round", "sunny",
      "cloudy", "wet", "dry", "colorful", "happy", "cute", "several", "various", "different", "same"};
  return s;
}

/// Inflected verb forms derived from the stem list (runs, running, ran is not covered).
inline bool is_verb_form(const std::string& w) {
  const auto& stems = verb_stems();
  if (stems.count(w)) return true;
  auto strip = [&](std::string_view suffix) -> std::optional<std::string> {
    if (w.size() > suffix.size() + 1 && w.ends_with(suffix)) return w.substr(0, w.size() - suffix.size());
    return std::nullopt;
  };
  for (std::string_view suf : {"s", "es", "ed", "d", "ing"}) {
    if (auto base = strip(suf)) {
      if (stems.count(*base)) return true;
      // doubled consonant (running, sitting) and dropped e (riding)
      if (suf == "ing" || suf == "ed") {
        if (base->size() > 2 && (*base)[base->size() - 1] == (*base)[base->size() - 2] &&
            stems.count(base->substr(0, base->size() - 1)))
          return true;
        if (stems.count(*base + "e")) return true;
      }
      if (suf == "es" && base->ends_with("i") && stems.count(base->substr(0, base->size() - 1) + "y")) return true;
    }
  }
  return w.size() > 4 && w.ends_with("ing");
}

}  // namespace detail

/// Deterministic lexicon chunker: maximal runs of content words, with verbs
/// recognized from a stem list unless they directly follow a determiner.
class RuleChunker final : public Chunker {
 public:
  std::vector<std::string> chunks(std::string_view caption) const override {
    const auto words = split_words(caption);
    std::vector<std::string> out;
    std::vector<std::string> run;
    auto flush = [&] {
      // a noun chunk ends in a noun: trailing adjectives are predicates
      while (!run.empty() && detail::adjectives().count(run.back())) run.pop_back();
      if (!run.empty()) out.push_back(join(run));
      run.clear();
    };
    bool after_det = false;
    for (const auto& w : words) {
      const bool det = detail::determiners().count(w) > 0;
      const bool func = detail::function_words().count(w) > 0;
      const bool adverb = w.size() > 3 && w.ends_with("ly") && !after_det;
      const bool verb = !after_det && run.empty() && detail::is_verb_form(w);
      const bool verb_mid = !after_det && !run.empty() && detail::is_verb_form(w) && !detail::adjectives().count(w);
      if (det || func || adverb || verb || verb_mid) {
        flush();
      } else {
        if (!run.empty() && run.back() == w) flush();  // "dog dog" is two mentions
        run.push_back(w);
      }
      after_det = det || (after_det && detail::adjectives().count(w));
    }
    flush();
    return out;
  }

 private:
  static std::string join(const std::vector<std::string>& words) {
    std::string s;
    for (const auto& w : words) {
      if (!s.empty()) s += ' ';
      s += w;
    }
    return s;
  }
};

/// Remote chunker: POST {"text": caption} to `url`, expects {"chunks": [...]}.
class ServiceChunker final : public Chunker {
 public:
  ServiceChunker(std::string base_url, std::string path = "/chunk", int timeout_seconds = 10)
      : base_url_(std::move(base_url)), path_(std::move(path)), timeout_(timeout_seconds) {}

  std::vector<std::string> chunks(std::string_view caption) const override {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(timeout_, 0);
    cli.set_read_timeout(timeout_, 0);
    const nlohmann::json body{{"text", std::string(caption)}};
    auto res = cli.Post(path_, body.dump(), "application/json");
    if (!res) fail(ErrorKind::transport, "chunker service ", base_url_, " unreachable: ", httplib::to_string(res.error()));
    if (res->status != 200) fail(ErrorKind::transport, "chunker service returned HTTP ", res->status);
    try {
      return nlohmann::json::parse(res->body).at("chunks").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, "chunker service response: ", e.what());
    }
  }

 private:
  std::string base_url_, path_;
  int timeout_;
};

/// Lowercased, stop-word-free, deduplicated noun phrases in order of first appearance.
inline PhraseSet extract_noun_phrases(std::string_view caption, const Chunker& chunker) {
  if (split_words(caption).empty()) fail(ErrorKind::input, "caption is empty");
  PhraseSet out;
  std::set<std::string> seen;
  for (const auto& chunk : chunker.chunks(caption)) {
    std::string phrase;
    for (const auto& w : split_words(chunk)) {
      if (detail::determiners().count(w) || detail::function_words().count(w)) continue;
      if (!phrase.empty()) phrase += ' ';
      phrase += w;
    }
    if (!phrase.empty() && seen.insert(phrase).second) out.push_back(std::move(phrase));
  }
  if (out.empty())
    fail(ErrorKind::input, "no noun phrase in caption '", caption, "'; use the whole caption as a single phrase");
  return out;
}

inline PhraseSet extract_noun_phrases(std::string_view caption) {
  static const RuleChunker chunker;
  return extract_noun_phrases(caption, chunker);
}

struct PhraseRegion {
  std::string phrase;
  Matrix relevance;             // H x W, rectified and min-max normalized (zeros if degenerate)
  std::vector<int> indices;     // flat patch indices with relevance > tau, ascending
  std::optional<Vector> center;  // mean of normalized clean patch tokens over indices

  /// Regions consumed by the losses: non-empty and with a usable center.
  bool retained() const { return !indices.empty() && center.has_value(); }
};

/// Flat indices with value strictly above tau (row-major over the grid).
inline std::vector<int> threshold_indices(const Matrix& relevance, double tau) {
  std::vector<int> idx;
  const auto w = relevance.cols();
  for (Eigen::Index i = 0; i < relevance.size(); ++i)
    if (relevance(i / w, i % w) > tau) idx.push_back(static_cast<int>(i));
  return idx;
}

inline void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) fail(ErrorKind::config, "relevance threshold must lie in (0,1), got ", tau);
}

inline PhraseRegion region_from_saliency(std::string phrase, const SaliencyMap& map, double tau) {
  check_tau(tau);
  PhraseRegion r;
  r.phrase = std::move(phrase);
  normalize_scores(map.scores, r.relevance);
  r.indices = threshold_indices(r.relevance, tau);
  return r;
}

inline PhraseRegion associate(const VisionLanguageEncoder& enc, const ImageTensor& image, const std::string& phrase,
                              double tau) {
  check_tau(tau);
  return region_from_saliency(phrase, patch_saliency(enc, image, phrase), tau);
}

/// Fills c_n from clean tokens. A zero-norm mean (opposing tokens cancel)
/// leaves the center absent so the region is excluded.
inline std::vector<PhraseRegion> phrase_centers(const TokenFeatures& tokens, std::vector<PhraseRegion> regions) {
  const auto patches = tokens.patch_tokens();
  for (auto& r : regions) {
    r.center.reset();
    if (r.indices.empty()) continue;
    Vector sum = Vector::Zero(patches.cols());
    for (int i : r.indices) {
      if (i < 0 || i >= patches.rows()) fail(ErrorKind::invariant, "region index ", i, " outside the patch grid");
      const double n = patches.row(i).norm();
      if (!(n > 0.0)) fail(ErrorKind::numeric, "zero-norm clean token at patch ", i);
      sum += patches.row(i).transpose() / n;
    }
    Vector c = sum / static_cast<double>(r.indices.size());
    if (c.norm() > 1e-12) r.center = std::move(c);
    else log_warning(concat("phrase '", r.phrase, "' has a zero-norm center; excluded"));
  }
  return regions;
}

inline std::vector<PhraseRegion> retained_regions(const std::vector<PhraseRegion>& regions) {
  std::vector<PhraseRegion> out;
  for (const auto& r : regions)
    if (r.retained()) out.push_back(r);
  return out;
}

// Phrase fixtures: one {"caption": ..., "phrases": [...]} object per line.

struct PhraseFixture {
  std::string caption;
  PhraseSet phrases;
};

inline std::vector<PhraseFixture> read_phrase_fixtures(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open ", path.string());
  std::vector<PhraseFixture> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("caption").get<std::string>(), j.at("phrases").get<PhraseSet>()});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, path.string(), " line ", n, ": ", e.what());
    }
  }
  return out;
}

inline void write_phrase_fixtures(const std::filesystem::path& path, const std::vector<PhraseFixture>& fixtures) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write ", path.string());
  for (const auto& f : fixtures) out << nlohmann::json{{"caption", f.caption}, {"phrases", f.phrases}}.dump() << '\n';
}

}  // namespace sgma
