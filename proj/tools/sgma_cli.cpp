// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// sgma command-line interface. See README.md for the config file keys.
// Exit codes: 0 success, 1 partial or runtime failure, 2 configuration error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgma/sgma.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sgma;

namespace {

constexpr int kExitPartial = 1;
constexpr int kExitConfig = 2;

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::config, "cannot open config ", p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, "config ", p.string(), ": ", e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

/// Flag values; unset optionals fall back to the config file, then defaults.
struct Flags {
  std::string config_path, registry_path;
  std::optional<int> epsilon, steps, step_size, workers;
  std::optional<double> base_ratio, tau, lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> encoders, goal, target_caption, target_image, objective, losses, evaluators, task, defense;
  bool no_allocation = false;
  bool dump_delta = false;
};

void add_attack_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--epsilon", f.epsilon, "L-inf budget as an integer numerator over 255 (default 8)");
  cmd->add_option("--steps", f.steps, "PGD iterations (default 100)");
  cmd->add_option("--step-size", f.step_size, "step size as an integer numerator over 255 (default 1)");
  cmd->add_option("--base-ratio", f.base_ratio, "uniform share r of the budget (default 0.2)");
  cmd->add_option("--tau", f.tau, "phrase relevance threshold (default 0.3)");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--encoders", f.encoders, "comma-separated surrogate encoder ids");
  cmd->add_option("--goal", f.goal, "untargeted | targeted");
  cmd->add_option("--target-caption", f.target_caption, "target caption for targeted runs");
  cmd->add_option("--target-image", f.target_image, "target image for targeted runs");
  cmd->add_option("--lambda", f.lambda, "weight of the attract terms (default 1)");
  cmd->add_option("--objective", f.objective, "sgma | baseline_text_feature | baseline_feature_distance");
  cmd->add_option("--losses", f.losses, "enabled loss terms, e.g. text_image,image_image,local");
  cmd->add_flag("--no-allocation", f.no_allocation, "use a uniform budget instead of semantic allocation");
}

void add_eval_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--evaluators", f.evaluators, "comma-separated evaluator encoder ids");
  cmd->add_option("--task", f.task, "captioning | classification | vqa");
  cmd->add_option("--defense", f.defense, "bits:<b> or jpeg:<q> applied before the victim");
  cmd->add_option("--workers", f.workers, "parallel entries (default 1)");
}

fs::path default_registry() {
  if (const char* r = std::getenv("SGMA_REGISTRY"); r && *r) return r;
  return fs::path(SGMA_DATA_DIR) / "encoders.json";
}

struct Context {
  json config = json::object();
  fs::path config_dir = ".";
  EncoderRegistry registry;

  fs::path path_of(const std::string& p) const {
    fs::path q = p;
    return q.is_relative() ? config_dir / q : q;
  }
};

Context make_context(const Flags& f) {
  Context ctx;
  if (!f.config_path.empty()) {
    ctx.config = read_json_file(f.config_path);
    ctx.config_dir = fs::path(f.config_path).parent_path();
    if (ctx.config_dir.empty()) ctx.config_dir = ".";
  }
  fs::path reg = default_registry();
  if (!f.registry_path.empty()) reg = f.registry_path;
  else if (ctx.config.contains("registry")) reg = ctx.path_of(ctx.config["registry"].get<std::string>());
  ctx.registry = EncoderRegistry::from_file(reg);
  return ctx;
}

std::vector<std::string> encoder_list(const json& j, const char* key, const std::optional<std::string>& flag,
                                      std::vector<std::string> fallback) {
  if (flag) return split_list(*flag);
  if (j.contains(key)) return j[key].get<std::vector<std::string>>();
  return fallback;
}

AttackConfig attack_config(const Context& ctx, const Flags& f) {
  const json a = ctx.config.value("attack", json::object());
  AttackConfig c;
  c.epsilon = f.epsilon.value_or(a.value("epsilon", 8)) / 255.0;
  c.steps = f.steps.value_or(a.value("steps", 100));
  c.step_size = f.step_size.value_or(a.value("step_size", 1)) / 255.0;
  c.base_ratio = f.base_ratio.value_or(a.value("base_ratio", 0.2));
  c.tau = f.tau.value_or(a.value("tau", 0.3));
  c.seed = f.seed.value_or(a.value("seed", std::uint64_t{0}));
  c.semantic_allocation = !f.no_allocation && a.value("semantic_allocation", true);
  c.objective = objective_kind_from_string(f.objective.value_or(a.value("objective", "sgma")));
  if (f.losses || a.contains("losses")) {
    const auto on = f.losses ? split_list(*f.losses) : a["losses"].get<std::vector<std::string>>();
    auto has = [&](const char* k) { return std::find(on.begin(), on.end(), k) != on.end(); };
    for (const auto& k : on)
      if (k != "text_image" && k != "image_image" && k != "local") fail(ErrorKind::config, "unknown loss term '", k, "'");
    c.toggles = {has("text_image"), has("image_image"), has("local")};
  }
  const std::string goal = f.goal.value_or(a.value("goal", "untargeted"));
  if (goal == "targeted") {
    c.goal.mode = GoalMode::targeted;
    c.goal.target_caption = f.target_caption.value_or(a.value("target_caption", ""));
    c.goal.lambda = f.lambda.value_or(a.value("lambda", 1.0));
    const std::string img = f.target_image.value_or(a.value("target_image", ""));
    if (img.empty()) fail(ErrorKind::config, "targeted goal requires --target-image");
    c.goal.target_image = read_image(f.target_image ? fs::path(img) : ctx.path_of(img));
  } else if (goal != "untargeted") {
    fail(ErrorKind::config, "goal must be untargeted or targeted, got '", goal, "'");
  }
  const auto ids = encoder_list(a, "encoders", f.encoders, {});
  if (ids.empty()) fail(ErrorKind::config, "no surrogate encoders given (--encoders)");
  c.encoders = ctx.registry.load_all(ids);
  if (c.goal.target_image) c.goal.target_image = resize_bicubic(*c.goal.target_image, c.resolution());
  c.validate();
  return c;
}

ClientPtr build_client(const Context& ctx, const std::string& role) {
  const json clients = ctx.config.value("clients", json::object());
  if (!clients.contains(role)) return nullptr;
  const json& j = clients[role];
  ClientConfig cfg;
  cfg.id = j.value("id", role);
  cfg.transport = j.value("transport", "mock");
  cfg.endpoint = j.value("endpoint", "");
  cfg.path = j.value("path", cfg.path);
  cfg.model = j.value("model", "");
  cfg.credential_env = j.value("credential_env", "");
  cfg.timeout = j.value("timeout", cfg.timeout);
  cfg.rate_per_second = j.value("rate_per_second", 0.0);
  cfg.burst = j.value("burst", 1.0);
  cfg.retry.max_attempts = j.value("max_attempts", cfg.retry.max_attempts);
  cfg.retry.base_delay = j.value("base_delay", cfg.retry.base_delay);
  cfg.retry.factor = j.value("backoff_factor", cfg.retry.factor);
  cfg.decoding.temperature = j.value("temperature", cfg.decoding.temperature);
  cfg.decoding.max_tokens = j.value("max_tokens", cfg.decoding.max_tokens);
  if (cfg.transport == "http") return std::make_shared<VLMClient>(VLMClient::http(cfg));
  if (cfg.transport == "mock") {
    std::optional<std::string> fallback;
    if (j.contains("default")) fallback = j["default"].get<std::string>();
    auto t = fallback ? std::make_shared<MockTransport>([d = *fallback](const std::string&, const std::string&) { return d; })
                      : std::make_shared<MockTransport>();
    if (j.contains("responses")) {
      std::ifstream in(ctx.path_of(j["responses"].get<std::string>()));
      if (!in) fail(ErrorKind::config, "cannot open mock responses for ", role);
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) {
          const auto r = json::parse(line);
          t->add(r.at("image_hash").get<std::string>(), r.at("prompt").get<std::string>(), r.at("response").get<std::string>());
        }
    }
    return std::make_shared<VLMClient>(cfg, t);
  }
  if (cfg.transport == "local") {
    const std::string adapter = j.value("adapter", "");
    const auto enc = ctx.registry.load(j.value("encoder", ""));
    LocalTransport::Adapter fn;
    if (adapter == "retrieval-captioner") {
      std::vector<std::string> candidates;
      if (j.contains("candidates")) candidates = j["candidates"].get<std::vector<std::string>>();
      if (j.contains("candidates_file")) {
        std::ifstream in(ctx.path_of(j["candidates_file"].get<std::string>()));
        for (std::string line; std::getline(in, line);)
          if (!line.empty()) candidates.push_back(line);
      }
      fn = RetrievalCaptioner(enc, candidates);
    } else if (adapter == "encoder-judge") {
      fn = EncoderJudge(enc, j.value("threshold", 0.55));
    } else {
      fail(ErrorKind::config, "unknown local adapter '", adapter, "' for ", role);
    }
    return std::make_shared<VLMClient>(cfg, std::make_shared<LocalTransport>(fn));
  }
  fail(ErrorKind::config, "unknown transport '", cfg.transport, "' for ", role);
}

RunConfig run_config(const Context& ctx, const Flags& f, const fs::path& out) {
  RunConfig rc;
  rc.attack = attack_config(ctx, f);
  rc.evaluators = ctx.registry.load_all(encoder_list(ctx.config, "evaluators", f.evaluators, {}));
  rc.proxy = build_client(ctx, "proxy");
  rc.victim = build_client(ctx, "victim");
  rc.judge = build_client(ctx, "judge");
  rc.output_dir = out;
  rc.task = task_from_string(f.task.value_or(ctx.config.value("task", "captioning")));
  if (f.defense) rc.defense = DefenseSpec::parse(*f.defense);
  else if (ctx.config.contains("defense")) rc.defense = DefenseSpec::parse(ctx.config["defense"].get<std::string>());
  rc.workers = f.workers.value_or(ctx.config.value("workers", 1));
  rc.dump_delta = f.dump_delta || ctx.config.value("dump_delta", false);
  return rc;
}

void write_jsonl(const fs::path& p, const std::vector<json>& rows) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write ", p.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

void print_asr(const ASRSummary& s) {
  std::cout << "ASR " << to_string(s.task) << ": " << s.asr << "% (" << s.successes << "/" << s.total << ")";
  if (s.parse_errors) std::cout << ", parse errors: " << s.parse_errors;
  if (s.unparsed_predictions) std::cout << ", unparsed predictions: " << s.unparsed_predictions;
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sgma: semantic-guided transferable adversarial attacks on vision-language encoders"};
  app.require_subcommand(1);
  Flags f;
  std::string log_level = "info";
  app.add_option("--config", f.config_path, "JSON config file; flags override its keys");
  app.add_option("--registry", f.registry_path, "encoder registry (default $SGMA_REGISTRY or the bundled one)");
  app.add_option("--log-level", log_level, "debug | info | warning | error");

  std::string manifest, out_dir, results_dir, input, encoder_id, caption;
  std::vector<std::string> results_dirs;
  int samples = 10;
  double fd_step = 1e-3, tolerance = 1e-4;

  auto* attack = app.add_subcommand("attack", "manifest -> adversarial PNGs, run records and evaluation");
  attack->add_option("--manifest", manifest)->required();
  attack->add_option("--out", out_dir)->required();
  attack->add_flag("--dump-delta", f.dump_delta, "also write the unquantized perturbation");
  add_attack_flags(attack, f);
  add_eval_flags(attack, f);

  auto* cap = app.add_subcommand("caption", "fill missing manifest captions with the proxy client");
  cap->add_option("--manifest", manifest)->required();
  cap->add_option("--out", out_dir, "output manifest path")->required();

  auto* evaluate = app.add_subcommand("evaluate", "similarity and image quality for a results directory");
  evaluate->add_option("--results", results_dir)->required();
  add_eval_flags(evaluate, f);

  auto* judge = app.add_subcommand("judge", "captioning ASR with the judge client");
  judge->add_option("--results", results_dir)->required();

  auto* asr = app.add_subcommand("asr", "classification / VQA ASR from a predictions JSONL");
  asr->add_option("--input", input, "lines of {prediction, truth}")->required();
  asr->add_option("--task", f.task)->required();

  auto* defend = app.add_subcommand("defend", "apply a preprocessing defense to a manifest's images");
  defend->add_option("--manifest", manifest)->required();
  defend->add_option("--out", out_dir)->required();
  defend->add_option("--defense", f.defense)->required();

  auto* rep = app.add_subcommand("report", "tables and heatmaps from one or more results directories");
  rep->add_option("--results", results_dirs)->required();
  rep->add_option("--out", out_dir)->required();
  rep->add_option("--encoder", encoder_id, "encoder for patch-deviation heatmaps");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of every loss gradient");
  grad->add_option("--encoder", encoder_id, "encoder id (default: first --encoders entry)");
  grad->add_option("--image", input, "image to audit at (default: a seeded random image)");
  grad->add_option("--caption", caption, "caption for the losses")->default_val("a red circle on grass");
  grad->add_option("--samples", samples)->default_val(10);
  grad->add_option("--step", fd_step)->default_val(1e-3);
  grad->add_option("--tolerance", tolerance)->default_val(1e-4);
  add_attack_flags(grad, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (log_level == "debug") set_log_level(LogLevel::debug);
    else if (log_level == "warning") set_log_level(LogLevel::warning);
    else if (log_level == "error") set_log_level(LogLevel::error);

    if (*asr) {
      std::ifstream in(input);
      if (!in) fail(ErrorKind::config, "cannot open ", input);
      std::vector<SampleOutcome> outcomes;
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto j = json::parse(line);
        std::string truth = j.contains("truth") ? j["truth"].get<std::string>() : j.value("label", j.value("answer", ""));
        outcomes.push_back({std::nullopt, false, j.at("prediction").get<std::string>(), truth});
      }
      print_asr(compute_asr(outcomes, task_from_string(*f.task)));
      return 0;
    }
    if (*defend) {
      const auto spec = DefenseSpec::parse(*f.defense);
      std::ifstream in(manifest);
      if (!in) fail(ErrorKind::config, "cannot open ", manifest);
      fs::create_directories(out_dir);
      std::ofstream out(fs::path(out_dir) / "manifest.jsonl");
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        auto j = json::parse(line);
        fs::path img = j.at("image").get<std::string>();
        if (img.is_relative()) img = fs::path(manifest).parent_path() / img;
        const fs::path dst = fs::path(out_dir) / (j.at("id").get<std::string>() + ".png");
        write_png(dst, apply_defense(read_image(img), spec));
        j["image"] = dst.filename().string();
        j["defense"] = spec.describe();
        out << j.dump() << '\n';
      }
      return 0;
    }

    Context ctx = make_context(f);

    if (*attack) {
      const auto cfg = run_config(ctx, f, out_dir);
      const auto entries = ingest(manifest, cfg.attack.resolution());
      const auto res = run_batch(cfg, entries);
      std::cout << entries.size() - static_cast<std::size_t>(res.failures) << "/" << entries.size()
                << " entries attacked; results in " << out_dir << '\n';
      if (res.asr) print_asr(*res.asr);
      return res.failures ? kExitPartial : 0;
    }
    if (*cap) {
      const auto proxy = build_client(ctx, "proxy");
      if (!proxy) fail(ErrorKind::config, "no proxy client configured");
      std::ifstream in(manifest);
      if (!in) fail(ErrorKind::config, "cannot open ", manifest);
      std::vector<json> rows;
      int failures = 0;
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        auto j = json::parse(line);
        if (!j.contains("caption") || j["caption"].get<std::string>().empty()) {
          fs::path img = j.at("image").get<std::string>();
          if (img.is_relative()) img = fs::path(manifest).parent_path() / img;
          try {
            j["caption"] = caption_image(*proxy, read_image(img));
          } catch (const Error& e) {
            log_warning("caption for ", j.value("id", "?"), " failed: ", e.what());
            ++failures;
          }
        }
        if (j["image"].is_string() && fs::path(j["image"].get<std::string>()).is_relative())
          j["image"] = fs::absolute(fs::path(manifest).parent_path() / j["image"].get<std::string>()).string();
        rows.push_back(j);
      }
      write_jsonl(out_dir, rows);
      return failures ? kExitPartial : 0;
    }
    if (*evaluate) {
      const auto evaluators = ctx.registry.load_all(encoder_list(ctx.config, "evaluators", f.evaluators, {}));
      const auto victim = build_client(ctx, "victim");
      std::optional<DefenseSpec> defense;
      if (f.defense) defense = DefenseSpec::parse(*f.defense);
      std::vector<json> rows;
      for (const auto& r : read_results(results_dir)) {
        if (r.value("status", "") != "ok") continue;
        const auto clean = read_image(fs::path(results_dir) / r["clean_image"].get<std::string>());
        const auto adv = read_image(fs::path(results_dir) / r["adversarial_image"].get<std::string>());
        json row{{"id", r["id"]}};
        row["ssim"] = ssim(clean, adv);
        if (std::min(clean.height(), clean.width()) >= 176) row["ms_ssim"] = ms_ssim(clean, adv);
        std::string adv_text = r.value("adv_text", "");
        if (victim) adv_text = describe_for_captioning_task(*victim, defense ? apply_defense(adv, *defense) : adv);
        if (!adv_text.empty() && !evaluators.empty()) {
          const auto s = clip_similarity(evaluators, clean, adv_text, r["encoders"].get<std::vector<std::string>>());
          row["adv_text"] = adv_text;
          for (const auto& [id, v] : s.per_encoder) row["similarity"][id] = v;
          row["similarity"]["ensemble"] = s.ensemble;
        }
        rows.push_back(row);
      }
      write_jsonl(fs::path(results_dir) / "evaluation.jsonl", rows);
      std::cout << rows.size() << " records evaluated\n";
      return 0;
    }
    if (*judge) {
      const auto client = build_client(ctx, "judge");
      if (!client) fail(ErrorKind::config, "no judge client configured");
      std::vector<SampleOutcome> outcomes;
      std::vector<json> rows;
      for (const auto& r : read_results(results_dir)) {
        if (r.value("status", "") != "ok" || !r.contains("adv_text")) continue;
        const auto clean = read_image(fs::path(results_dir) / r["clean_image"].get<std::string>());
        json row{{"id", r["id"]}};
        try {
          const auto v = judge_caption(*client, clean, r["adv_text"].get<std::string>());
          outcomes.push_back({v.match, false, {}, {}});
          row["verdict"] = v.match == Match::yes ? "Yes" : "No";
          row["raw"] = v.raw_text;
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::parse) throw;
          outcomes.push_back({std::nullopt, true, {}, {}});
          row["verdict"] = "parse_error";
          row["raw"] = e.what();
        }
        rows.push_back(row);
      }
      write_jsonl(fs::path(results_dir) / "judgments.jsonl", rows);
      print_asr(compute_asr(outcomes, Task::captioning));
      return 0;
    }
    if (*rep) {
      std::vector<fs::path> dirs(results_dirs.begin(), results_dirs.end());
      EncoderPtr enc = encoder_id.empty() ? nullptr : ctx.registry.load(encoder_id);
      const auto ro = report(dirs, out_dir, enc);
      std::cout << ro.rows << " rows written to " << out_dir << '\n';
      if (ro.pooled) print_asr(*ro.pooled);
      return 0;
    }
    if (*grad) {
      std::string id = encoder_id;
      if (id.empty()) {
        const auto ids = encoder_list(ctx.config.value("attack", json::object()), "encoders", f.encoders, {});
        if (ids.empty()) fail(ErrorKind::config, "gradcheck needs --encoder");
        id = ids.front();
      }
      const auto enc = ctx.registry.load(id);
      const int R = enc->info().resolution;
      const auto clean = input.empty() ? [&] {
        std::mt19937_64 rng(f.seed.value_or(0));
        std::uniform_real_distribution<double> u(0.1, 0.9);
        Tensor3 t(R, R);
        for (auto& v : t.values) v = u(rng);
        return ImageTensor::from(std::move(t));
      }()
                                       : resize_bicubic(read_image(input), R);
      // Audit at an interior adversarial point: clean plus a seeded +-eps perturbation.
      const double eps = f.epsilon.value_or(8) / 255.0;
      std::mt19937_64 rng(f.seed.value_or(0) + 1);
      std::uniform_real_distribution<double> u(-eps, eps);
      Tensor3 d(R, R);
      for (auto& v : d.values) v = u(rng);
      const auto adv = add_clamped(clean, d);
      AttackGoal goal;
      if (f.target_caption) {
        goal.mode = GoalMode::targeted;
        goal.target_caption = *f.target_caption;
        goal.target_image = f.target_image ? resize_bicubic(read_image(*f.target_image), R) : clean;
        goal.lambda = f.lambda.value_or(1.0);
      }
      const auto results = audit_losses(*enc, clean, adv, caption, goal, f.tau.value_or(0.3), samples, fd_step,
                                        f.seed.value_or(0));
      bool ok = true;
      for (const auto& r : results) {
        const bool pass = r.max_rel_error() < tolerance;
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << r.max_rel_error() << '\n';
      }
      return ok ? 0 : kExitPartial;
    }
  } catch (const Error& e) {
    std::cerr << "sgma: " << e.what() << '\n';
    const auto k = e.kind();
    return (k == ErrorKind::config || k == ErrorKind::load || k == ErrorKind::capability) ? kExitConfig : kExitPartial;
  } catch (const std::exception& e) {
    std::cerr << "sgma: " << e.what() << '\n';
    return kExitPartial;
  }
  return 0;
}
