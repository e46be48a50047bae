// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Regenerates the bundled encoder weights and fixture corpora.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgma/synthetic.hpp"
#include "sgma/training.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"sgma fixture generator"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train-encoder", "pretrain a TinyClip on the procedural world");
  std::string out_path, id = "tiny-clip";
  sgma::TinyClipConfig config;
  sgma::TrainOptions opt;
  train->add_option("--out", out_path, "weights file")->required();
  train->add_option("--id", id);
  train->add_option("--steps", opt.steps);
  train->add_option("--batch", opt.batch);
  train->add_option("--lr", opt.learning_rate);
  train->add_option("--seed", opt.seed);
  train->add_option("--width", config.width);
  train->add_option("--layers", config.layers);
  train->add_option("--heads", config.heads);
  train->add_option("--patch", config.patch_size);

  auto* corpus = app.add_subcommand("make-corpus", "render the desk and targeted fixture corpora");
  std::string corpus_dir;
  int count = 20, size = 224;
  std::uint64_t corpus_seed = 2026;
  corpus->add_option("--out", corpus_dir, "output directory")->required();
  corpus->add_option("--count", count);
  corpus->add_option("--size", size);
  corpus->add_option("--seed", corpus_seed);

  CLI11_PARSE(app, argc, argv);

  if (*corpus) {
    namespace syn = sgma::synthetic;
    const fs::path root = corpus_dir;
    std::mt19937_64 rng(corpus_seed);
    auto write_set = [&](const fs::path& dir, int n, const syn::SceneOptions& opt) {
      fs::create_directories(dir / "images");
      std::ofstream manifest(dir / "manifest.jsonl");
      for (int i = 0; i < n; ++i) {
        const auto scene = syn::random_scene(rng, opt);
        char id[16];
        std::snprintf(id, sizeof id, "img%02d", i);
        const std::string file = std::string("images/") + id + ".png";
        sgma::write_png(dir / file, syn::render(scene, opt.size));
        nlohmann::json j{{"id", id}, {"image", file}, {"caption", syn::caption(scene)},
                         {"label", syn::shape_words(scene.objects.front().shape).front()}};
        manifest << j.dump() << '\n';
      }
    };
    syn::SceneOptions desk;
    desk.size = size;
    write_set(root / "desk", count, desk);
    // Every source image holds a red circle; the goal is a yellow triangle.
    syn::SceneOptions source = desk;
    source.max_objects = 1;
    source.forced_shape = 0;
    source.forced_color = 0;
    write_set(root / "targeted", 10, source);
    syn::SceneOptions target = source;
    target.forced_shape = 2;
    target.forced_color = 3;
    sgma::write_png(root / "targeted" / "target.png", syn::render(syn::random_scene(rng, target), size));
    std::ofstream(root / "targeted" / "target.txt") << "a photo of a yellow triangle\n";
    std::cout << "wrote corpora under " << root.string() << '\n';
  }

  if (*train) {
    config.id = id;
    config.mlp_width = 4 * config.width;
    const auto start = std::chrono::steady_clock::now();
    double running = 0;
    opt.on_step = [&](int step, double loss) {
      running = step == 0 ? loss : 0.95 * running + 0.05 * loss;
      if (step % 25 == 0 || step + 1 == opt.steps) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << "step " << step << " loss " << loss << " avg " << running << " t=" << secs << "s" << std::endl;
      }
    };
    auto model = sgma::train_contrastive(config, opt);
    model.save(out_path);
    std::cout << "wrote " << out_path << '\n';
  }
  return 0;
}
