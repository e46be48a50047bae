// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Batch orchestration: manifest ingestion, caption acquisition, attack runs,
// lossless persistence, evaluation from disk, and report tables.
//
// Output layout of run_batch:
//   clean/<id>.png        clean image at the surrogate resolution
//   adv/<id>.png          8-bit adversarial image
//   delta/<id>.f64        unquantized perturbation (optional)
//   masks/<id>.png        semantic mask
//   results.jsonl         one record per entry, in manifest order
//   timings.jsonl         wall-clock data, kept out of results.jsonl
//   summary.csv, report.md, summary.json

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "sgma/engine.hpp"
#include "sgma/evaluation.hpp"

namespace sgma {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string id;
  fs::path image_path;
  std::optional<std::string> caption;
  std::optional<std::string> label;
  std::optional<std::string> question;
  std::optional<std::string> answer;
  ImageTensor image;  // resized to the surrogate resolution
  int original_height = 0;
  int original_width = 0;
};

namespace detail {

inline std::optional<std::string> optional_string(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (!j[key].is_string()) fail(ErrorKind::parse, "manifest line ", line, ": \"", key, "\" must be a string");
  return j[key].get<std::string>();
}

}  // namespace detail

/// One JSON object per line: {"id", "image", "caption"?, "label"?,
/// "question"?, "answer"?}. Image paths are relative to the manifest.
inline std::vector<ManifestEntry> ingest(const fs::path& manifest, int resolution) {
  std::ifstream in(manifest);
  if (!in) fail(ErrorKind::io, "cannot open manifest ", manifest.string());
  if (resolution <= 0) fail(ErrorKind::config, "ingest resolution must be positive");
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, "manifest ", manifest.string(), " line ", line, ": ", e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("image") || !j["image"].is_string())
      fail(ErrorKind::parse, "manifest ", manifest.string(), " line ", line, ": needs string fields \"id\" and \"image\"");
    ManifestEntry e;
    e.id = j["id"].get<std::string>();
    if (e.id.empty() || e.id.find_first_of("/\\") != std::string::npos)
      fail(ErrorKind::parse, "manifest line ", line, ": id must be non-empty and contain no path separators");
    if (!seen.insert(e.id).second) fail(ErrorKind::parse, "manifest line ", line, ": duplicate id '", e.id, "'");
    e.image_path = j["image"].get<std::string>();
    if (e.image_path.is_relative()) e.image_path = manifest.parent_path() / e.image_path;
    e.caption = detail::optional_string(j, "caption", line);
    e.label = detail::optional_string(j, "label", line);
    e.question = detail::optional_string(j, "question", line);
    e.answer = detail::optional_string(j, "answer", line);
    ImageTensor raw;
    try {
      raw = read_image(e.image_path);
    } catch (const Error&) {
      fail(ErrorKind::io, "manifest entry '", e.id, "': cannot read image ", e.image_path.string());
    }
    e.original_height = raw.height();
    e.original_width = raw.width();
    e.image = resize_bicubic(raw, resolution);
    out.push_back(std::move(e));
  }
  return out;
}

// Persistence ----------------------------------------------------------------------

struct PersistedPaths {
  fs::path image;
  std::optional<fs::path> delta;
};

/// Raw little-endian float64 in HWC order; the shape lives in the run record.
inline void write_delta(const fs::path& path, const Tensor3& delta) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(delta.values.data()),
            static_cast<std::streamsize>(delta.values.size() * sizeof(double)));
  if (!out) fail(ErrorKind::io, "cannot write ", path.string());
}

inline Tensor3 read_delta(const fs::path& path, int height, int width) {
  Tensor3 t(height, width);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  if (!in || in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::io, "delta file ", path.string(), " has the wrong size");
  return t;
}

inline PersistedPaths persist_adversarial(const AttackRun& run, const fs::path& out_dir, const std::string& id,
                                          bool dump_delta = false) {
  PersistedPaths p;
  p.image = out_dir / "adv" / (id + ".png");
  write_png(p.image, run.adversarial);
  if (dump_delta) {
    p.delta = out_dir / "delta" / (id + ".f64");
    write_delta(*p.delta, run.delta);
  }
  return p;
}

// Batch ------------------------------------------------------------------------------

struct RunConfig {
  AttackConfig attack;
  std::vector<EncoderPtr> evaluators;
  ClientPtr proxy;   // captions for entries without one
  ClientPtr victim;  // model under evaluation
  ClientPtr judge;   // captioning verdicts
  fs::path output_dir;
  Task task = Task::captioning;
  std::optional<DefenseSpec> defense;
  int workers = 1;
  bool dump_delta = false;
};

struct BatchResult {
  std::vector<nlohmann::json> records;  // manifest order
  int failures = 0;
  std::optional<ASRSummary> asr;
};

namespace detail {

/// Writes lines in index order regardless of completion order.
class OrderedWriter {
 public:
  explicit OrderedWriter(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) fail(ErrorKind::io, "cannot write ", path.string());
  }

  void submit(std::size_t index, std::string line) {
    std::lock_guard lock(mutex_);
    pending_.emplace(index, std::move(line));
    for (auto it = pending_.find(next_); it != pending_.end(); it = pending_.find(next_)) {
      out_ << it->second << '\n';
      pending_.erase(it);
      ++next_;
    }
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::mutex mutex_;
  std::map<std::size_t, std::string> pending_;
  std::size_t next_ = 0;
};

inline std::string fixed(double v, int digits = 12) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"text_image", b.text_image}, {"image_image", b.image_image}, {"local", b.local}, {"total", b.total}};
}

inline nlohmann::json to_json(const SimilarityReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [id, s] : r.per_encoder) per[id] = s;
  return {{"per_encoder", per}, {"ensemble", r.ensemble}};
}

inline std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline double mean_surrogate_similarity(const std::vector<EncoderPtr>& encs, const ImageTensor& img,
                                        std::string_view text) {
  double s = 0.0;
  for (const auto& e : encs) s += cosine(embed_image(*e, img), embed_text(*e, text));
  return s / static_cast<double>(encs.size());
}

inline std::string relative(const fs::path& p, const fs::path& base) { return fs::relative(p, base).generic_string(); }

}  // namespace detail

/// Attack, persist and evaluate one entry. Victim and evaluators read the
/// persisted PNG, not the in-memory tensor.
inline nlohmann::json process_entry(const RunConfig& cfg, const ManifestEntry& entry, nlohmann::json& timing) {
  const auto& out = cfg.output_dir;
  nlohmann::json rec;
  rec["id"] = entry.id;
  rec["task"] = to_string(cfg.task);
  rec["original_size"] = {entry.original_height, entry.original_width};

  std::string caption;
  if (entry.caption && !single_line(*entry.caption).empty()) {
    caption = single_line(*entry.caption);
    rec["caption_source"] = "manifest";
  } else {
    if (!cfg.proxy) fail(ErrorKind::config, "entry '", entry.id, "' has no caption and no proxy client is configured");
    caption = caption_image(*cfg.proxy, entry.image);
    rec["caption_source"] = cfg.proxy->id();
  }
  rec["caption"] = caption;

  const fs::path clean_path = out / "clean" / (entry.id + ".png");
  write_png(clean_path, entry.image);
  const ImageTensor clean = read_image(clean_path);

  const AttackRun run = run_attack(clean, caption, cfg.attack);
  const auto paths = persist_adversarial(run, out, entry.id, cfg.dump_delta);
  const fs::path mask_path = out / "masks" / (entry.id + ".png");
  write_gray_png(mask_path, run.mask.values);
  timing["attack_seconds"] = run.wall_seconds;

  rec["config_hash"] = run.config_hash;
  rec["encoders"] = run.encoder_ids;
  rec["phrases"] = run.phrases;
  rec["phrase_fallback"] = run.phrase_fallback;
  rec["mask_degenerate"] = run.mask.degenerate;
  rec["clean_image"] = detail::relative(clean_path, out);
  rec["adversarial_image"] = detail::relative(paths.image, out);
  rec["mask_image"] = detail::relative(mask_path, out);
  if (paths.delta) {
    rec["delta"] = detail::relative(*paths.delta, out);
    rec["delta_shape"] = {run.delta.height, run.delta.width, Tensor3::channels};
  }
  rec["initial_loss"] = detail::to_json(run.initial_loss);
  rec["final_loss"] = detail::to_json(run.final_loss);
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& b : run.loss_trace) trace.push_back(b.total);
  rec["loss_trace"] = trace;

  const ImageTensor adv = read_image(paths.image);
  rec["quality"] = {{"ssim", ssim(clean, adv)}};
  if (std::min(clean.height(), clean.width()) >= 176) rec["quality"]["ms_ssim"] = ms_ssim(clean, adv);
  rec["surrogate_similarity"] = {{"clean", detail::mean_surrogate_similarity(cfg.attack.encoders, clean, caption)},
                                 {"adversarial", detail::mean_surrogate_similarity(cfg.attack.encoders, adv, caption)}};

  const ImageTensor victim_input = cfg.defense ? apply_defense(adv, *cfg.defense) : adv;
  rec["defense"] = cfg.defense ? nlohmann::json(cfg.defense->describe()) : nlohmann::json(nullptr);
  if (!cfg.victim) return rec;
  rec["victim"] = cfg.victim->config().describe();

  switch (cfg.task) {
    case Task::captioning: {
      const std::string clean_text = describe_for_captioning_task(*cfg.victim, clean);
      const std::string adv_text = describe_for_captioning_task(*cfg.victim, victim_input);
      rec["clean_text"] = clean_text;
      rec["adv_text"] = adv_text;
      if (!cfg.evaluators.empty()) {
        rec["similarity"] = {{"clean", detail::to_json(clip_similarity(cfg.evaluators, clean, clean_text))},
                             {"adversarial", detail::to_json(clip_similarity(cfg.evaluators, clean, adv_text))}};
      }
      if (cfg.judge) {
        rec["judge"] = cfg.judge->config().describe();
        try {
          const auto v = judge_caption(*cfg.judge, clean, adv_text);
          rec["verdict"] = v.match == Match::yes ? "Yes" : "No";
          rec["judge_raw"] = v.raw_text;
          rec["success"] = v.match == Match::no;
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::parse) throw;
          rec["verdict"] = "parse_error";
          rec["judge_raw"] = e.what();
        }
      }
      break;
    }
    case Task::classification: {
      if (!entry.label) fail(ErrorKind::input, "entry '", entry.id, "' has no label");
      const std::string pred = cfg.victim->query(victim_input, kClassificationPrompt).text;
      rec["prediction"] = single_line(pred);
      rec["label"] = *entry.label;
      bool oov = false;
      rec["success"] = sample_success(Task::classification, {std::nullopt, false, pred, entry.label}, &oov);
      rec["unparsed_prediction"] = oov;
      break;
    }
    case Task::vqa: {
      if (!entry.question || !entry.answer) fail(ErrorKind::input, "entry '", entry.id, "' needs question and answer");
      const std::string pred = cfg.victim->query(victim_input, *entry.question).text;
      rec["prediction"] = single_line(pred);
      rec["answer"] = *entry.answer;
      rec["success"] = sample_success(Task::vqa, {std::nullopt, false, pred, entry.answer});
      break;
    }
  }
  return rec;
}

/// Outcome for ASR purposes, or nullopt when the record carries no verdict.
inline std::optional<SampleOutcome> outcome_of(const nlohmann::json& rec) {
  if (rec.value("status", "") != "ok") return std::nullopt;
  if (rec.value("verdict", "") == "parse_error") return SampleOutcome{std::nullopt, true, {}, {}};
  if (!rec.contains("success")) return std::nullopt;
  // Re-express as a captioning outcome: success <=> "No".
  return SampleOutcome{rec["success"].get<bool>() ? Match::no : Match::yes, false, {}, {}};
}

inline ASRSummary asr_of_records(const std::vector<nlohmann::json>& records, Task task, bool* any = nullptr) {
  std::vector<SampleOutcome> outcomes;
  int unparsed = 0;
  for (const auto& r : records) {
    if (auto o = outcome_of(r)) outcomes.push_back(*o);
    unparsed += r.value("unparsed_prediction", false) ? 1 : 0;
  }
  if (any) *any = !outcomes.empty();
  if (outcomes.empty()) return {task, 0, 0, 0.0, 0, 0};
  auto s = compute_asr(outcomes, Task::captioning);
  s.task = task;
  s.unparsed_predictions = unparsed;
  return s;
}

namespace detail {

inline std::vector<std::string> evaluator_columns(const std::vector<nlohmann::json>& records) {
  std::vector<std::string> cols;
  for (const auto& r : records)
    if (r.contains("similarity")) {
      for (const auto& [k, v] : r["similarity"]["adversarial"]["per_encoder"].items()) cols.push_back(k);
      break;
    }
  return cols;
}

/// Per-sample CSV: id, status, per-evaluator similarity (adversarial text),
/// ensemble, success, quality and losses.
inline void write_summary_csv(const fs::path& path, const std::vector<nlohmann::json>& records) {
  const auto cols = evaluator_columns(records);
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write ", path.string());
  out << "id,status";
  for (const auto& c : cols) out << ',' << csv_field(c);
  out << ",ensemble,success,ssim,ms_ssim,initial_loss,final_loss\n";
  for (const auto& r : records) {
    out << csv_field(r["id"].get<std::string>()) << ',' << r.value("status", "");
    const bool ok = r.value("status", "") == "ok";
    for (const auto& c : cols) {
      out << ',';
      if (ok && r.contains("similarity")) out << fixed(r["similarity"]["adversarial"]["per_encoder"][c].get<double>());
    }
    out << ',';
    if (ok && r.contains("similarity")) out << fixed(r["similarity"]["adversarial"]["ensemble"].get<double>());
    out << ',';
    if (ok && r.contains("success")) out << (r["success"].get<bool>() ? 1 : 0);
    out << ',';
    if (ok) out << fixed(r["quality"]["ssim"].get<double>());
    out << ',';
    if (ok && r["quality"].contains("ms_ssim")) out << fixed(r["quality"]["ms_ssim"].get<double>());
    out << ',';
    if (ok) out << fixed(r["initial_loss"]["total"].get<double>());
    out << ',';
    if (ok) out << fixed(r["final_loss"]["total"].get<double>());
    out << '\n';
  }
  if (!out) fail(ErrorKind::io, "write failed for ", path.string());
}

/// Clean vs adversarial rows: mean per-evaluator similarity, ensemble, ASR.
inline std::string markdown_table(const std::vector<nlohmann::json>& records, Task task) {
  const auto cols = evaluator_columns(records);
  std::ostringstream md;
  md << "| Method |";
  for (const auto& c : cols) md << ' ' << c << " |";
  md << " Ensemble | ASR (%) |\n|---|";
  for (std::size_t i = 0; i < cols.size() + 2; ++i) md << "---|";
  md << '\n';
  bool any = false;
  const auto asr = asr_of_records(records, task, &any);
  for (const char* side : {"clean", "adversarial"}) {
    std::vector<double> sums(cols.size(), 0.0);
    double ens = 0.0;
    int n = 0;
    for (const auto& r : records) {
      if (r.value("status", "") != "ok" || !r.contains("similarity")) continue;
      const auto& s = r["similarity"][side];
      for (std::size_t i = 0; i < cols.size(); ++i) sums[i] += s["per_encoder"][cols[i]].get<double>();
      ens += s["ensemble"].get<double>();
      ++n;
    }
    md << "| " << (std::string_view(side) == "clean" ? "Clean" : "Adversarial") << " |";
    for (double v : sums) md << ' ' << (n ? fixed(v / n, 4) : "-") << " |";
    md << ' ' << (n ? fixed(ens / n, 4) : "-") << " | ";
    md << (std::string_view(side) == "clean" || !any ? "-" : fixed(asr.asr, 2)) << " |\n";
  }
  return md.str();
}

}  // namespace detail

/// Runs every entry; per-entry failures are recorded and the batch continues.
inline BatchResult run_batch(const RunConfig& cfg, const std::vector<ManifestEntry>& entries) {
  if (entries.empty()) fail(ErrorKind::input, "run_batch: no manifest entries");
  cfg.attack.validate();
  if (cfg.output_dir.empty()) fail(ErrorKind::config, "run_batch: no output directory");
  fs::create_directories(cfg.output_dir);
  {
    const fs::path probe = cfg.output_dir / ".write-probe";
    std::ofstream p(probe);
    if (!p) fail(ErrorKind::config, "output directory ", cfg.output_dir.string(), " is not writable");
    p.close();
    fs::remove(probe);
  }
  for (const auto& e : entries)
    if (e.image.height() != cfg.attack.resolution() || e.image.width() != cfg.attack.resolution())
      fail(ErrorKind::resolution, "entry '", e.id, "' was not ingested at the surrogate resolution");
  for (const auto& ev : cfg.evaluators)
    for (const auto& s : cfg.attack.encoders)
      if (ev->info().id == s->info().id)
        log_warning("evaluator ", ev->info().id, " is also an attack surrogate; its score is white-box");

  detail::OrderedWriter results(cfg.output_dir / "results.jsonl");
  detail::OrderedWriter timings(cfg.output_dir / "timings.jsonl");
  BatchResult out;
  out.records.resize(entries.size());
  std::atomic<int> failures{0};
  parallel_for(entries.size(), cfg.workers, [&](std::size_t i) {
    const auto& entry = entries[i];
    nlohmann::json rec, timing{{"id", entry.id}};
    const auto start = std::chrono::steady_clock::now();
    try {
      rec = process_entry(cfg, entry, timing);
      rec["status"] = "ok";
    } catch (const std::exception& e) {
      log_warning("entry ", entry.id, " failed: ", e.what());
      rec = {{"id", entry.id}, {"status", "failed"}, {"error", e.what()}};
      ++failures;
    }
    timing["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    results.submit(i, rec.dump());
    timings.submit(i, timing.dump());
    out.records[i] = std::move(rec);
  });
  out.failures = failures.load();

  detail::write_summary_csv(cfg.output_dir / "summary.csv", out.records);
  bool any = false;
  const auto asr = asr_of_records(out.records, cfg.task, &any);
  if (any) out.asr = asr;
  nlohmann::json summary{{"task", to_string(cfg.task)},
                         {"entries", entries.size()},
                         {"failures", out.failures},
                         {"config", cfg.attack.describe()},
                         {"config_hash", cfg.attack.hash()}};
  if (any)
    summary["asr"] = {{"successes", asr.successes}, {"total", asr.total}, {"asr", asr.asr},
                      {"parse_errors", asr.parse_errors}, {"unparsed_predictions", asr.unparsed_predictions}};
  if (cfg.defense) summary["defense"] = cfg.defense->describe();
  {
    std::ofstream s(cfg.output_dir / "summary.json", std::ios::trunc);
    s << summary.dump(2) << '\n';
  }
  {
    std::ofstream md(cfg.output_dir / "report.md", std::ios::trunc);
    md << detail::markdown_table(out.records, cfg.task);
  }
  return out;
}

// Report -----------------------------------------------------------------------------------

inline std::vector<nlohmann::json> read_results(const fs::path& results_dir) {
  const fs::path path = results_dir / "results.jsonl";
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "no results at ", path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, path.string(), " line ", n, ": ", e.what());
    }
  }
  if (out.empty()) fail(ErrorKind::input, "results file ", path.string(), " is empty");
  return out;
}

struct ReportOutput {
  std::vector<ASRSummary> groups;  // one per results directory with verdicts
  std::optional<ASRSummary> pooled;
  int rows = 0;
};

/// Combines one or more result directories into report.csv / report.md in
/// `out_dir`, with mask overlays and, given an encoder, patch-deviation heatmaps.
inline ReportOutput report(const std::vector<fs::path>& results_dirs, const fs::path& out_dir,
                           const EncoderPtr& deviation_encoder = nullptr) {
  if (results_dirs.empty()) fail(ErrorKind::input, "report: no results directories");
  fs::create_directories(out_dir);
  ReportOutput ro;
  std::vector<nlohmann::json> all;
  std::vector<std::string> group_of;
  for (const auto& dir : results_dirs) {
    auto recs = read_results(dir);
    const Task task = task_from_string(recs.front().value("task", "captioning"));
    bool any = false;
    const auto asr = asr_of_records(recs, task, &any);
    if (any) ro.groups.push_back(asr);
    for (auto& r : recs) {
      r["_dir"] = dir.string();
      group_of.push_back(dir.filename().string());
      all.push_back(std::move(r));
    }
  }
  if (!ro.groups.empty()) ro.pooled = pool_asr(ro.groups);

  const auto cols = detail::evaluator_columns(all);
  std::ofstream csv(out_dir / "report.csv", std::ios::trunc);
  csv << "group,id";
  for (const auto& c : cols) csv << ',' << detail::csv_field(c);
  csv << ",ensemble,success\n";
  std::ostringstream md;
  md << "| Group | Id |";
  for (const auto& c : cols) md << ' ' << c << " |";
  md << " Ensemble | Success |\n|---|---|";
  for (std::size_t i = 0; i < cols.size() + 2; ++i) md << "---|";
  md << '\n';
  for (std::size_t k = 0; k < all.size(); ++k) {
    const auto& r = all[k];
    if (r.value("status", "") != "ok") continue;
    ++ro.rows;
    const std::string id = r["id"].get<std::string>();
    csv << detail::csv_field(group_of[k]) << ',' << detail::csv_field(id);
    md << "| " << group_of[k] << " | " << id << " |";
    for (const auto& c : cols) {
      const bool has = r.contains("similarity");
      const std::string v = has ? detail::fixed(r["similarity"]["adversarial"]["per_encoder"][c].get<double>()) : "";
      csv << ',' << v;
      md << ' ' << (has ? v : "-") << " |";
    }
    const bool has = r.contains("similarity");
    const std::string ens = has ? detail::fixed(r["similarity"]["adversarial"]["ensemble"].get<double>()) : "";
    const std::string succ = r.contains("success") ? (r["success"].get<bool>() ? "1" : "0") : "";
    csv << ',' << ens << ',' << succ << '\n';
    md << ' ' << (has ? ens : "-") << " | " << (succ.empty() ? "-" : succ) << " |\n";

    // Visual diagnostics.
    const fs::path dir = r["_dir"].get<std::string>();
    if (r.contains("mask_image") && r.contains("clean_image")) {
      const ImageTensor clean = read_image(dir / r["clean_image"].get<std::string>());
      const ImageTensor mask = read_image(dir / r["mask_image"].get<std::string>());
      Matrix m(mask.height(), mask.width());
      for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) m(y, x) = mask.at(y, x, 0);
      write_png(out_dir / "overlays" / (group_of[k] + "_" + id + ".png"), overlay_heat(clean, m));
      if (deviation_encoder && r.contains("adversarial_image")) {
        const ImageTensor adv = read_image(dir / r["adversarial_image"].get<std::string>());
        const int R = deviation_encoder->info().resolution;
        const auto dev = patch_deviation(*deviation_encoder, resize_bicubic(clean, R), resize_bicubic(adv, R));
        const fs::path base = out_dir / "deviation" / (group_of[k] + "_" + id);
        export_heatmap(dev.distances, base.string() + ".png", base.string() + ".csv");
      }
    }
  }
  if (ro.rows == 0) fail(ErrorKind::input, "report: no successful records");
  if (ro.pooled) {
    md << "\nPooled ASR: " << detail::fixed(ro.pooled->asr, 2) << "% (" << ro.pooled->successes << "/"
       << ro.pooled->total << ")";
    if (ro.pooled->parse_errors) md << ", judge parse errors: " << ro.pooled->parse_errors;
    md << '\n';
  }
  std::ofstream(out_dir / "report.md", std::ios::trunc) << md.str();
  return ro;
}

}  // namespace sgma
