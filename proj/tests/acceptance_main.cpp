// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Usage: cfdiff_acceptance <work_dir>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "cfdiff/cli/pipeline.hpp"

using namespace cfdiff;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  failures += !pass;
  std::printf("[%s] criterion %2d %-26s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
}

void log(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_file(const fs::path& p) {
  const auto b = read_bytes(p);
  return {b.begin(), b.end()};
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto j = grad_check_report();
  const double dt = seconds_since(t0);
  double worst = 0;
  bool all = true;
  for (const auto& p : j) {
    worst = std::max(worst, p["max_relative_error"].get<double>());
    all = all && p["pass"].get<bool>();
  }
  report(1, "gradient suite", all && dt < 30.0,
         fmt("%zu primitives x 5 seeds, worst rel err %.2e, %.1f s", j.size(), worst, dt));
}

void scheduler_algebra(const DiffusionSchedule& s) {
  const auto t0 = Clock::now();
  bool ends = s.betas().front() == 85e-5 && s.betas().back() == 12e-3;
  bool monotone = true;
  for (std::size_t t = 1; t < s.alpha_bars().size(); ++t) monotone = monotone && s.alpha_bars()[t] < s.alpha_bars()[t - 1];
  Rng rng(2024);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.num_steps() - 1)));
    const int t_prev = static_cast<int>(rng.below(static_cast<std::uint64_t>(t + 1))) - 1;  // kCleanStep allowed
    const auto x = Tensor::randn({1, 4, 8, 8}, rng);
    const auto eps = Tensor::randn({1, 4, 8, 8}, rng);
    const auto back = ddim_invert_step(ddim_step(x, eps, t, t_prev, s), eps, t_prev, t, s);
    for (std::size_t k = 0; k < x.numel(); ++k) worst = std::max(worst, double(std::abs(back.data()[k] - x.data()[k])));
  }
  const double dt = seconds_since(t0);
  report(2, "scheduler algebra", ends && monotone && worst <= 1e-5 && dt < 5.0,
         fmt("beta ends exact=%d, alpha_bar monotone=%d, max inverse err %.1e on 100 cases, %.2f s", ends, monotone,
             worst, dt));
}

// Fine-tunes the U-Net through the pipeline and checks the frozen encoders
// byte for byte against their checkpoints on disk.
FinetuneResult frozen_contract_and_finetune(const Workspace& ws, const Corpus& corpus) {
  auto m = load_models(ws, kNeedAe | kNeedClip);
  const auto ae_file = read_bytes(ws.checkpoint("ae"));
  const auto text_file = read_bytes(ws.checkpoint("text"));
  const auto ae_meta = load_checkpoint(ws.checkpoint("ae")).metadata;
  const auto text_meta = load_checkpoint(ws.checkpoint("text")).metadata;
  const auto ae_before = serialize_checkpoint({ae_meta, m.ae->params().named()});
  const auto text_before = serialize_checkpoint({text_meta, m.text->params().named()});
  const auto t0 = Clock::now();
  const auto t = train_unet_models(ws, m, corpus);
  log(fmt("U-Net fine-tuning: %zu steps in %.0f s", t.result.losses.size(), seconds_since(t0)));
  save_checkpoint(m.unet->params(), ws.checkpoint("unet"), stamp_with(ws, "unet"));
  write_loss_curve(ws, ws.dir() / "unet_loss.csv", t.result.losses);
  const bool ae_same = serialize_checkpoint({ae_meta, m.ae->params().named()}) == ae_before && ae_before == ae_file;
  const bool text_same =
      serialize_checkpoint({text_meta, m.text->params().named()}) == text_before && text_before == text_file;
  report(3, "frozen-module contract", ae_same && text_same,
         fmt("autoencoder %s, text encoder %s (%zu / %zu checkpoint bytes)", ae_same ? "byte-identical" : "CHANGED",
             text_same ? "byte-identical" : "CHANGED", ae_file.size(), text_file.size()));
  return t.result;
}

void toy_finetuning(const Workspace& ws, const FinetuneResult& r, double finetune_seconds) {
  const auto sm = smooth(r.losses, 50);
  const double initial = sm[49], final_loss = sm.back();
  // Single-sample overfit: one encoded image, one noise draw, one timestep.
  const auto t0 = Clock::now();
  UNet unet(unet_config(ws.config()), ws.derived_seed(0x0f1));
  auto m = load_models(ws, kNeedAe | kNeedClip);
  ContextCache contexts(*m.text);
  const auto corpus = load_data(ws);
  const auto* s = corpus.split(Split::train)[0];
  Tensor z0;
  {
    NoGradGuard ng;
    z0 = m.ae->encode(s->image);
  }
  Rng rng(ws.derived_seed(0x0f2));
  const auto eps = Tensor::randn(z0.shape(), rng);
  const std::vector<int> t{500};
  const auto zt = add_noise(z0, eps, t, ws.config().schedule.build());
  const auto ctx = contexts.get(s->caption.text);
  Adam opt(unet.params().tensors(), {.lr = 2e-3});
  double last = 0;
  for (int step = 0; step < 500; ++step) {
    opt.zero_grad();
    auto loss = ops::mse_loss(unet.forward(zt, t, ctx), eps);
    backward(loss);
    opt.step();
    last = loss.item();
  }
  const double total = finetune_seconds + seconds_since(t0);
  report(4, "toy fine-tuning", final_loss < 0.5 * initial && last < 0.05 && total < 600.0,
         fmt("smoothed MSE %.4f -> %.4f (ratio %.3f), single-sample overfit %.4f, %.0f s", initial, final_loss,
             final_loss / initial, last, total));
}

void inversion_and_identity(const EditEnv& env, const RunConfig& c, const SampleView& test) {
  const auto view = env.view();
  auto cfg0 = c.edit;
  cfg0.null_inner_steps = 0;
  auto identity = c.edit;
  identity.tau = 1.0;
  int improved = 0, monotone = 0, n = 0;
  double e0_sum = 0, e10_sum = 0, worst_identity = 0;
  for (std::size_t i = 0; i < test.size() && n < 20; ++i, ++n) {
    const auto* s = test[i];
    const auto& prompt = s->caption.text;
    const auto inv = invert(view, *env.contexts, s->image, prompt, c.edit);
    const auto inv0 = invert(view, *env.contexts, s->image, prompt, cfg0);
    const auto rec = env.models.ae->decode_image(inv.reconstruction);
    const double e10 = l1_identity(s->image, rec);
    const double e0 = l1_identity(s->image, env.models.ae->decode_image(inv0.reconstruction));
    improved += e10 < e0;
    e0_sum += e0;
    e10_sum += e10;
    bool ok = true;
    for (std::size_t k = 0; k < inv.nulls.loss_after.size(); ++k) ok = ok && inv.nulls.loss_after[k] <= inv.nulls.loss_before[k];
    monotone += ok;
    const auto same = edit(view, *env.contexts, inv, prompt, prompt, identity);
    worst_identity = std::max(worst_identity, l1_identity(same.counterfactual, rec));
  }
  report(5, "null-text inversion", improved == n && monotone == n,
         fmt("E10 < E0 on %d/%d images (mean %.4f vs %.4f), per-step loss non-increasing on %d/%d", improved, n,
             e10_sum / n, e0_sum / n, monotone, n));
  report(6, "identity edit", worst_identity < 1e-4,
         fmt("max mean-abs error vs reconstruction %.2e over %d images", worst_identity, n));
}

void edit_score_contract(const EditEnv& env, const SampleView& test) {
  Rng rng(77);
  double worst_pm = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<float> a(64);
    for (auto& v : a) v = static_cast<float>(rng.normal());
    std::vector<float> pos = a, neg = a;
    const double k = 0.1 + rng.uniform();
    for (auto& v : pos) v = static_cast<float>(v * k);
    for (auto& v : neg) v = static_cast<float>(-v * k);
    worst_pm = std::max({worst_pm, std::abs(directional_similarity(a, pos) - 1.0),
                         std::abs(directional_similarity(a, neg) + 1.0)});
  }
  // Real image/prompt pairs from the test split.
  std::vector<double> scores;
  bool bounded = true;
  for (std::size_t i = 0; i + 1 < test.size() && scores.size() < 100; ++i) {
    const auto* a = test[i];
    const auto* b = test[i + 1];
    if (a->caption.text == b->caption.text) continue;
    const double s = clip_edit_score(env.view(), a->image, b->image, a->caption.text, b->caption.text);
    bounded = bounded && s >= -1.0 && s <= 1.0;
    scores.push_back(s);
  }
  const double thr = 0.1;
  std::vector<std::size_t> expected;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= thr) expected.push_back(i);
  }
  const std::vector<double> edge{std::nextafter(thr, 0.0), thr, std::nextafter(thr, 1.0)};
  const bool filter_ok = filter_edits(scores, thr) == expected &&
                         filter_edits(edge, thr) == std::vector<std::size_t>{1, 2};
  report(7, "edit-score contract", bounded && worst_pm <= 1e-6 && filter_ok,
         fmt("%zu real scores in [-1,1]=%d, parallel/anti-parallel max err %.1e, filter exact=%d (%zu kept)",
             scores.size(), bounded, worst_pm, filter_ok, expected.size()));
}

EditEvaluation efficacy_and_locality(const Workspace& ws, const EditEnv& env, const SampleView& test) {
  const auto t0 = Clock::now();
  const auto ev = evaluate_device_removal(env, ws.config(), test, ws.config().eval.num_edits);
  const double dt = seconds_since(t0);
  save_edit_evaluation(ws, ev);
  const double flip = ev.flip_rate();
  const double cpg_acc = ev.mean_accepted(&EditMeasurement::cpg);
  const double cpg_id = ev.mean_all(&EditMeasurement::cpg_identity);
  const double l1 = ev.mean_accepted(&EditMeasurement::l1);
  report(8, "counterfactual efficacy",
         ev.edits.size() == 50 && ev.accepted() > 0 && flip >= 0.7 && cpg_acc - cpg_id >= 0.3 && l1 < 0.15 && dt < 600,
         fmt("%zu/%zu accepted, flip rate %.2f, CPG %.3f vs identity %.3f, L1 %.4f, %.0f s", ev.accepted(),
             ev.edits.size(), flip, cpg_acc, cpg_id, l1, dt));
  int local = 0, n = 0;
  for (std::size_t i = 0; i < ev.edits.size() && n < 20; ++i, ++n) local += ev.edits[i].change_outside < ev.edits[i].change_inside;
  report(9, "locality", local >= 18, fmt("outside-mask change < inside on %d/%d edits", local, n));
  return ev;
}

void augmentation_direction(const Workspace& ws, const EditEnv& env, const Corpus& corpus) {
  const auto t0 = Clock::now();
  AugmentationSets sets;
  const auto arms = run_augmentation(env, ws.config(), corpus, &sets);
  save_augmentation(ws, sets, arms);
  const auto by = [&](const std::string& name) -> const ArmReport& {
    for (const auto& a : arms) {
      if (a.arm == name) return a;
    }
    throw std::runtime_error("missing arm " + name);
  };
  const double orig = by("original").mean_anticorrelated("device");
  const double gen = by("original+generated").mean_anticorrelated("device");
  const double cf = by("original+counterfactual").mean_anticorrelated("device");
  log(fmt("anti-correlated disease_a: original %.3f, generated %.3f, counterfactual %.3f",
          by("original").mean_anticorrelated("disease_a"), by("original+generated").mean_anticorrelated("disease_a"),
          by("original+counterfactual").mean_anticorrelated("disease_a")));
  report(10, "augmentation direction", cf >= orig && gen <= cf,
         fmt("anti-correlated device head over %zu seeds: original %.3f, generated %.3f, counterfactual %.3f "
             "(%zu CFs, %zu generated, %.0f s)",
             ws.config().eval.seeds.size(), orig, gen, cf, sets.counterfactuals.size(), sets.generated.size(),
             seconds_since(t0)));
}

RunConfig reduced_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.corpus.n_samples = 300;
  c.corpus.base_seed = seed;
  c.autoencoder.steps = 150;
  c.clip.steps = 120;
  c.unet.epochs = 1;
  c.unet.max_steps = 120;
  c.edit.steps = 10;
  c.classifier.steps = 60;
  c.eval.num_edits = 3;
  c.eval.counterfactuals_per_subgroup = 2;
  c.eval.generated_per_subgroup = 2;
  c.eval.anti_test_size = 40;
  c.eval.min_counterfactuals = 0;
  c.eval.seeds = {1};
  return c;
}

void full_pipeline(const Workspace& ws) {
  cmd_gen_data(ws);
  cmd_train_ae(ws);
  cmd_train_clip(ws);
  cmd_train_unet(ws);
  cmd_train_classifier(ws);
  cmd_eval(ws);
  cmd_augment(ws);
  cmd_report(ws);
}

void reproducibility(const fs::path& root) {
  const auto t0 = Clock::now();
  const auto cfg = reduced_config(17);
  const Workspace a(cfg, root / "repro_a", true), b(cfg, root / "repro_b", true);
  full_pipeline(a);
  full_pipeline(b);
  bool same = true;
  std::size_t compared = 0;
  for (const char* f : {"eval_report.json", "eval/edits.json", "eval/augmentation.json", "checkpoints/unet.ckpt",
                        "checkpoints/classifier.ckpt", "data/manifest.jsonl"}) {
    same = same && read_file(a.dir() / f) == read_file(b.dir() / f) && !read_file(a.dir() / f).empty();
    ++compared;
  }
  report(11, "reproducibility", same,
         fmt("two reduced-config runs, %zu artifacts incl. EvalReport %s, %.0f s", compared,
             same ? "bit-identical" : "DIFFER", seconds_since(t0)));
}

void checkpoint_faults(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const auto ck = deserialize_checkpoint(bytes);
  const bool round_trip = serialize_checkpoint(ck) == bytes;
  std::size_t cases = 0, detected = 0;
  const auto expect_error = [&](const std::vector<unsigned char>& buf) {
    ++cases;
    try {
      deserialize_checkpoint(buf);
    } catch (const CheckpointError&) {
      ++detected;
    }
  };
  Rng rng(12);
  // Header and trailer bytes exhaustively, payload bytes sampled.
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < std::min<std::size_t>(256, bytes.size()); ++i) positions.push_back(i);
  for (std::size_t i = bytes.size() - 8; i < bytes.size(); ++i) positions.push_back(i);
  for (int i = 0; i < 2000; ++i) positions.push_back(rng.below(bytes.size()));
  for (auto p : positions) {
    auto bad = bytes;
    bad[p] ^= static_cast<unsigned char>(1u << rng.below(8));
    expect_error(bad);
  }
  for (int i = 0; i < 300; ++i) {
    const auto len = i < 64 ? static_cast<std::size_t>(i) : rng.below(bytes.size());
    expect_error({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len)});
  }
  for (std::uint32_t v : {0u, 2u, 7u, 1000u}) expect_error(serialize_checkpoint(ck, v));
  report(12, "checkpoint container", round_trip && detected == cases,
         fmt("round trip %s, %zu/%zu injected faults detected (bit flips, truncations, versions)",
             round_trip ? "bitwise" : "DIFFERS", detected, cases));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: %s <work_dir>\n", argv[0]);
    return 2;
  }
  const fs::path root = argv[1];
  const auto start = Clock::now();
  try {
    gradient_suite();
    const RunConfig cfg;
    scheduler_algebra(cfg.schedule.build());

    const Workspace ws(cfg, root / "main", true);
    log("generating data and training encoders");
    cmd_gen_data(ws);
    log(fmt("autoencoder: %s", cmd_train_ae(ws).dump().c_str()));
    log(fmt("contrastive encoders: %s", cmd_train_clip(ws)["final_margin"].dump().c_str()));
    const auto corpus = load_data(ws);
    const auto t_ft = Clock::now();
    const auto ft = frozen_contract_and_finetune(ws, corpus);
    toy_finetuning(ws, ft, seconds_since(t_ft));
    log(fmt("classifiers: %s", cmd_train_classifier(ws).dump().c_str()));

    const auto env = edit_env(ws, kNeedClassifiers);
    const auto test = corpus.split(Split::test);
    inversion_and_identity(env, cfg, test);
    edit_score_contract(env, test);
    efficacy_and_locality(ws, env, test);
    augmentation_direction(ws, env, corpus);
    cmd_report(ws);
    reproducibility(root);
    checkpoint_faults(ws.checkpoint("unet"));
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance run aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed, %.0f s total\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
