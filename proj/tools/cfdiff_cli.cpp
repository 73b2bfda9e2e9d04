// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <png.h>
#include <zlib.h>

#include "CLI11.hpp"
#include "cfdiff/cli/pipeline.hpp"

using namespace cfdiff;

namespace {

constexpr const char* kVersion = "0.1.0";

nlohmann::json versions() {
  return {{"cfdiff", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"libpng", PNG_LIBPNG_VER_STRING},
          {"zlib", ZLIB_VERSION},
          {"compiler", __VERSION__}};
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool overwrite = false;
  std::string image, orig_prompt, edit_prompt;
};

Workspace make_workspace(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.corpus.base_seed = *o.seed;
  }
  if (!o.out.empty()) cfg.out_dir = o.out;
  const fs::path dir = cfg.out_dir;
  return Workspace(std::move(cfg), dir, o.overwrite);
}

// Runs one command, prints its summary and appends a run log.
int run(const std::string& name, const Options& o, const std::function<nlohmann::json(const Workspace&)>& fn) {
  const auto ws = make_workspace(o);
  const auto start = std::chrono::steady_clock::now();
  const auto result = fn(ws);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  nlohmann::json log = ws.stamp("run_log");
  log["command"] = name;
  log["versions"] = versions();
  log["wall_seconds"] = wall;
  log["config"] = to_json(ws.config());
  log["result"] = result;
  write_json(ws.dir() / "logs" / (name + ".json"), log);
  std::cout << result.dump(2) << "\n";
  std::fprintf(stderr, "%s finished in %.1f s (config %s)\n", name.c_str(), wall, ws.hash().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual image editing with a small latent diffusion model"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Override the run seed");
  app.add_option("--out", o.out, "Output directory (overrides out_dir)");
  app.add_flag("--overwrite", o.overwrite, "Replace existing outputs");

  using Fn = std::function<nlohmann::json(const Workspace&)>;
  std::vector<std::pair<CLI::App*, std::pair<std::string, Fn>>> commands;
  auto add = [&](const std::string& name, const std::string& help, Fn fn) {
    auto* sub = app.add_subcommand(name, help);
    commands.push_back({sub, {name, std::move(fn)}});
    return sub;
  };

  add("gen-data", "Render the synthetic corpus", cmd_gen_data);
  add("train-ae", "Train the latent autoencoder", cmd_train_ae);
  add("train-clip", "Train the contrastive text and image encoders", cmd_train_clip);
  add("train-unet", "Fine-tune the conditional U-Net", cmd_train_unet);
  add("train-classifier", "Train the multi-head and device classifiers", cmd_train_classifier);
  auto* inv = add("invert", "Invert one image", [&](const Workspace& ws) { return cmd_invert(ws, o.image, o.orig_prompt); });
  inv->add_option("--image", o.image, "PNG to invert")->required()->check(CLI::ExistingFile);
  inv->add_option("--prompt", o.orig_prompt, "Caption of the image")->required();
  auto* ed = add("edit", "Invert and edit one image", [&](const Workspace& ws) {
    return cmd_edit(ws, o.image, o.orig_prompt, o.edit_prompt);
  });
  ed->add_option("--image", o.image, "PNG to edit")->required()->check(CLI::ExistingFile);
  ed->add_option("--orig-prompt", o.orig_prompt, "Caption of the image")->required();
  ed->add_option("--edit-prompt", o.edit_prompt, "Caption after the edit")->required();
  add("eval", "Score device-removal edits on the test split", cmd_eval);
  add("augment-exp", "Run the augmentation experiment", cmd_augment);
  add("grad-check", "Finite-difference check of every primitive", cmd_grad_check);
  add("report", "Assemble the evaluation report and figures", cmd_report);
  add("all", "Run every stage in order", [](const Workspace& ws) {
    nlohmann::json j;
    j["gen-data"] = cmd_gen_data(ws);
    j["train-ae"] = cmd_train_ae(ws);
    j["train-clip"] = cmd_train_clip(ws);
    j["train-unet"] = cmd_train_unet(ws);
    j["train-classifier"] = cmd_train_classifier(ws);
    j["eval"] = cmd_eval(ws);
    j["augment-exp"] = cmd_augment(ws);
    j["report"] = cmd_report(ws);
    return j;
  });

  CLI11_PARSE(app, argc, argv);
  try {
    for (const auto& [sub, cmd] : commands) {
      if (sub->parsed()) return run(cmd.first, o, cmd.second);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
