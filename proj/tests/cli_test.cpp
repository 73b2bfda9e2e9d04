// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "cfdiff/cli/pipeline.hpp"

using namespace cfdiff;

namespace {

Checkpoint sample_checkpoint() {
  Rng rng(1);
  Checkpoint ck;
  ck.metadata = R"({"kind":"test"})";
  ck.tensors.emplace_back("a.weight", Tensor::randn({3, 4}, rng));
  ck.tensors.emplace_back("a.bias", Tensor::randn({4}, rng));
  ck.tensors.emplace_back("scalar", Tensor::full({1}, -0.0f));
  return ck;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("cfdiff_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, BitwiseRoundTrip) {
  const auto ck = sample_checkpoint();
  const auto bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.metadata, ck.metadata);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape(), ck.tensors[i].second.shape());
    const auto a = back.tensors[i].second.data(), b = ck.tensors[i].second.data();
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size_bytes()));
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, EverySingleByteFlipIsDetected) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x5a;
    EXPECT_THROW(deserialize_checkpoint(bad), CheckpointError) << "byte " << i;
  }
  auto payload = bytes;
  payload[40] ^= 1;
  EXPECT_THROW(deserialize_checkpoint(payload), CheckpointCrcError);
}

TEST(Checkpoint, FutureVersionAndTruncation) {
  const auto ck = sample_checkpoint();
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(ck, kCheckpointVersion + 1)), CheckpointVersionError);
  const auto bytes = serialize_checkpoint(ck);
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    EXPECT_THROW(deserialize_checkpoint({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n)}), CheckpointError)
        << "length " << n;
  }
  EXPECT_THROW(deserialize_checkpoint({bytes.begin(), bytes.begin() + 8}), CheckpointTruncatedError);
}

TEST(Checkpoint, LoadIntoParameterSet) {
  const auto dir = scratch("ckpt");
  ParameterSet a, b;
  Rng rng(2);
  nn::Linear la(a, "lin", rng, 3, 2);
  nn::Linear lb(b, "lin", rng, 3, 2);
  EXPECT_NE(a.checksum(), b.checksum());
  save_checkpoint(a, dir / "lin.ckpt");
  load_into(b, dir / "lin.ckpt");
  EXPECT_EQ(a.checksum(), b.checksum());
  ParameterSet other;
  nn::Linear lc(other, "lin", rng, 4, 2);
  EXPECT_ANY_THROW(load_into(other, dir / "lin.ckpt"));
  EXPECT_NE(error_of([&] { load_checkpoint(dir / "absent.ckpt"); }).find("absent.ckpt"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Config, DefaultsRoundTripThroughJson) {
  const RunConfig c;
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, HashTracksEveryField) {
  RunConfig a, b;
  b.edit.tau = 0.7;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = a;
  b.seed = 18;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, RejectsUnknownKeysWithPath) {
  const auto msg = error_of([] { parse_config(R"({"edit": {"tau": 0.5, "tua": 1}})", "run.json"); });
  EXPECT_NE(msg.find("run.json"), std::string::npos);
  EXPECT_NE(msg.find("/edit/tua: unknown key"), std::string::npos) << msg;
  EXPECT_THROW(parse_config(R"({"bogus": 1})"), ConfigError);
}

TEST(Config, RejectsWrongTypesAndRanges) {
  EXPECT_NE(error_of([] { parse_config(R"({"unet": {"epochs": "many"}})"); }).find("/unet/epochs"), std::string::npos);
  EXPECT_THROW(parse_config(R"({"edit": {"tau": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"corpus": {"rho": 0.99, "p_device": 0.1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"eval": {"cpg_mode": "other"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schedule": {"kind": "cosine"}})"), ConfigError);
}

TEST(Config, SyntaxErrorsReportLine) {
  const auto msg = error_of([] { parse_config("{\n  \"seed\": 3,\n  \"edit\": {,\n}", "cfg.json"); });
  EXPECT_NE(msg.find("cfg.json:3:"), std::string::npos) << msg;
}

TEST(Config, SeedDrivesCorpus) {
  const auto c = parse_config(R"({"seed": 99, "corpus": {"n_samples": 10}})");
  EXPECT_EQ(c.corpus.base_seed, 99u);
  EXPECT_EQ(c.corpus.n_samples, 10);
}

TEST(Pipeline, StampsRefusesOverwriteAndNamesMissingInputs) {
  const auto dir = scratch("pipeline");
  RunConfig cfg;
  cfg.corpus.n_samples = 24;
  const Workspace ws(cfg, dir, false);
  const auto r = cmd_gen_data(ws);
  EXPECT_EQ(r["samples"], 24);
  std::ifstream manifest(ws.manifest());
  std::string first;
  std::getline(manifest, first);
  const auto line = nlohmann::json::parse(first);
  EXPECT_EQ(line["config_hash"], ws.hash());
  EXPECT_EQ(line["seed"], cfg.seed);

  EXPECT_THROW(cmd_gen_data(ws), PipelineError);
  EXPECT_NO_THROW(cmd_gen_data(Workspace(cfg, dir, true)));

  const auto msg = error_of([&] { cmd_train_unet(ws); });
  EXPECT_NE(msg.find("ae.ckpt"), std::string::npos) << msg;
  EXPECT_NE(msg.find("train-ae"), std::string::npos) << msg;
  EXPECT_NE(error_of([&] { cmd_report(ws); }).find("edits.json"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Pipeline, PixelModeSkipsAutoencoder) {
  const auto dir = scratch("pixel");
  RunConfig cfg;
  cfg.autoencoder.identity = true;
  const Workspace ws(cfg, dir, false);
  EXPECT_TRUE(cmd_train_ae(ws).contains("skipped"));
  EXPECT_EQ(unet_config(cfg).in_channels, 1);
  EXPECT_EQ(unet_config(cfg).resolution, 32);
  fs::remove_all(dir);
}

TEST(Pipeline, ArmsSurviveJsonRoundTrip) {
  std::vector<ArmReport> arms = {{"original", 0, {{{"device", 0.5}}}, {{{"device", 0.25}}}},
                                 {"original+counterfactual", 7, {{{"device", 0.75}}}, {{{"device", 0.125}}}}};
  const auto back = arms_from_json(arms_to_json(arms));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].arm, "original+counterfactual");
  EXPECT_EQ(back[1].extra_samples, 7u);
  EXPECT_EQ(back[1].anticorrelated, arms[1].anticorrelated);
}

TEST(Pipeline, GradCheckReportCoversPrimitives) {
  const auto j = grad_check_report();
  EXPECT_EQ(j.size(), primitive_checks().size());
  for (const auto& p : j) EXPECT_TRUE(p["pass"].get<bool>()) << p.dump();
}
