#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bltlab/training.hpp"

using namespace bltlab;

namespace {

Dataset synth(std::size_t n_super, std::size_t n_sub, std::size_t per_class, std::size_t side, std::uint64_t seed) {
  SynthOptions o;
  o.n_super = n_super;
  o.n_sub_per_super = n_sub;
  o.n_per_class = per_class;
  o.side = side;
  o.seed = seed;
  return synth_generate(o).dataset;
}

BltConfig tiny_config(const Dataset& ds, std::size_t timesteps = 2) {
  BltConfig cfg;
  cfg.channels = {4, 8};
  cfg.timesteps = timesteps;
  cfg.input_height = ds.header.height;
  cfg.input_width = ds.header.width;
  cfg.n_classes = ds.header.n_classes;
  return cfg;
}

std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> v(ds.size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void expect_code(const std::function<void()>& fn, const std::string& code) {
  try {
    fn();
    FAIL() << "expected error " << code;
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(TotalLoss, IdenticalStepsEqualSingleStep) {
  Rng rng(1);
  std::vector<double> z(12);
  for (double& v : z) v = rng.normal();
  const Tensor<double> logits({3, 4}, z);
  const std::vector<std::size_t> labels{0, 3, 1};
  const double single = softmax_cross_entropy(logits, labels).loss.item();
  const std::vector<Tensor<double>> steps{logits, logits};
  EXPECT_NEAR(total_loss<double>(steps, labels, std::vector<double>{0.5, 0.5}).item(), single, 1e-12);
  const std::vector<Tensor<double>> two{logits, Tensor<double>::zeros({3, 4})};
  EXPECT_NEAR(total_loss<double>(two, labels, std::vector<double>{1, 0}).item(), single, 1e-12);
}

TEST(TotalLoss, RandomWeightedSum) {
  Rng rng(2);
  std::vector<Tensor<double>> steps;
  std::vector<double> w{0.2, 0.3, 0.5};
  const std::vector<std::size_t> labels{1, 2};
  double manual = 0;
  for (int t = 0; t < 3; ++t) {
    std::vector<double> z(6);
    for (double& v : z) v = rng.normal();
    steps.emplace_back(Shape{2, 3}, z);
    for (std::size_t s = 0; s < 2; ++s) {
      double lse = 0;
      for (std::size_t i = 0; i < 3; ++i) lse += std::exp(z[s * 3 + i]);
      manual += w[t] * (std::log(lse) - z[s * 3 + labels[s]]) / 2;
    }
  }
  EXPECT_NEAR(total_loss<double>(steps, labels, w).item(), manual, 1e-6);
  EXPECT_THROW(total_loss<double>(steps, labels, std::vector<double>{0.5, 0.5}), Error);
}

TEST(TotalLoss, UniformLogitsHundredClasses) {
  const std::vector<Tensor<float>> steps(4, Tensor<float>::zeros({2, 100}));
  TrainConfig tc;
  const auto w = tc.weights_for(4);
  EXPECT_NEAR(total_loss<float>(steps, std::vector<std::size_t>{5, 99}, w).item(), std::log(100.0), 1e-5);
}

TEST(TrainConfig, LossWeightValidation) {
  TrainConfig tc;
  EXPECT_EQ(tc.weights_for(4), std::vector<double>(4, 0.25));
  tc.loss_weights = {0.5, 0.5};
  EXPECT_THROW(tc.weights_for(3), Error);
  tc.loss_weights = {0.5, 0.6};
  EXPECT_THROW(tc.weights_for(2), Error);
}

TEST(Train, DeterministicCheckpoints) {
  const auto ds = synth(2, 1, 5, 8, 3);
  ASSERT_EQ(ds.size(), 10u);
  const auto cfg = tiny_config(ds);
  TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 9;
  const auto a = encode_checkpoint(train(cfg, tc, ds).best);
  const auto b = encode_checkpoint(train(cfg, tc, ds).best);
  EXPECT_EQ(a, b);
  tc.seed = 10;
  EXPECT_NE(encode_checkpoint(train(cfg, tc, ds).best), a);
}

TEST(Train, OverfitsSmallSet) {
  const auto ds = synth(2, 2, 10, 8, 4);
  const auto cfg = tiny_config(ds, 3);
  TrainConfig tc;
  tc.epochs = 200;
  tc.eval_every = 1000;  // evaluate only after the final epoch so it is the one kept
  tc.seed = 1;
  const auto result = train(cfg, tc, ds);
  ASSERT_EQ(result.log.size(), 200u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(result.log[e].train_loss, result.log[e - 1].train_loss);
  EXPECT_EQ(result.best.meta.epoch, 200u);
  const auto train_idx = checkpoint_split(result.best, ds, SplitPart::train);
  ASSERT_EQ(train_idx.size(), 32u);
  const auto acc = evaluate(result.best.params, cfg, ds, train_idx, cfg.timesteps);
  EXPECT_EQ(acc.back(), 1.0);
}

TEST(Train, LogLinesAreStructured) {
  const auto ds = synth(2, 1, 5, 8, 3);
  TrainConfig tc;
  tc.epochs = 2;
  std::vector<std::string> lines;
  train(tiny_config(ds), tc, ds, [&](const EpochMetrics& m) { lines.push_back(m.to_log_line()); });
  ASSERT_EQ(lines.size(), 2u);
  const auto j = nlohmann::json::parse(lines[1]);
  EXPECT_EQ(j["epoch"], 2);
  EXPECT_TRUE(j["train_loss"].is_number());
  EXPECT_EQ(j["val_accuracy"].size(), 2u);
}

TEST(Train, DivergenceNamesEpochAndBatch) {
  const auto ds = synth(2, 1, 5, 8, 3);
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr = 1e38;
  tc.clip_norm = 0;
  try {
    train(tiny_config(ds), tc, ds);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "diverged");
    EXPECT_NE(std::string(e.what()).find("epoch "), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch "), std::string::npos);
  }
}

TEST(Evaluate, UntrainedIsNearChance) {
  const auto ds = synth(2, 5, 50, 16, 5);
  BltConfig cfg = tiny_config(ds, 3);
  const auto params = init_params<float>(cfg, 77);
  const auto acc = evaluate(params, cfg, ds, all_indices(ds), 3);
  ASSERT_EQ(acc.size(), 3u);
  for (double a : acc) EXPECT_NEAR(a, 0.1, 0.05);
}

TEST(Evaluate, ExtendedUnrollAndConsistency) {
  const auto ds = synth(2, 1, 10, 8, 6);
  const auto cfg = tiny_config(ds, 2);
  TrainConfig tc;
  tc.epochs = 2;
  const auto ckpt = train(cfg, tc, ds).best;
  EXPECT_EQ(evaluate(ckpt, ds, SplitPart::val), ckpt.meta.val_accuracy);
  EXPECT_EQ(evaluate(ckpt, ds, SplitPart::test, 16).size(), 16u);
  auto wrong = synth(2, 2, 10, 8, 6);
  EXPECT_THROW(evaluate(ckpt.params, ckpt.config, wrong, all_indices(wrong), 2), Error);
}

TEST(Checkpoint, RoundtripAndReload) {
  const auto ds = synth(2, 1, 10, 8, 7);
  auto cfg = tiny_config(ds, 2);
  cfg.readout_bias = true;
  TrainConfig tc;
  tc.epochs = 2;
  const auto ckpt = train(cfg, tc, ds).best;
  const auto bytes = encode_checkpoint(ckpt);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config, ckpt.config);
  EXPECT_EQ(back.meta, ckpt.meta);
  EXPECT_EQ(back.optimizer.step, ckpt.optimizer.step);
  EXPECT_EQ(back.optimizer.m, ckpt.optimizer.m);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  const auto path = (std::filesystem::path(::testing::TempDir()) / "ckpt.bltc").string();
  save_checkpoint(path, ckpt);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(evaluate(loaded, ds, SplitPart::val), ckpt.meta.val_accuracy);
}

TEST(Checkpoint, StructuredErrors) {
  const auto ds = synth(2, 1, 5, 8, 8);
  TrainConfig tc;
  tc.epochs = 1;
  const auto ckpt = train(tiny_config(ds), tc, ds).best;
  const auto bytes = encode_checkpoint(ckpt);
  auto mutate = [&](std::size_t at, unsigned char v) {
    auto b = bytes;
    b[at] = v;
    return b;
  };
  expect_code([&] { decode_checkpoint(mutate(0, 'Z')); }, "bad_magic");
  expect_code([&] { decode_checkpoint(mutate(4, 9)); }, "bad_version");
  expect_code([&] { decode_checkpoint(mutate(8, bytes[8] ^ 1)); }, "config_hash");
  // first shape-table dimension sits after the config text, count, name length, name and rank
  const std::size_t text_len = ckpt.config.to_text().size();
  const std::size_t first_dim = 4 + 4 + 8 + 4 + text_len + 4 + 2 + std::string("block0.bottom_up").size() + 1;
  expect_code([&] { decode_checkpoint(mutate(first_dim, bytes[first_dim] + 1)); }, "shape_table");
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  expect_code([&] { decode_checkpoint(truncated); }, "truncated");
  auto trailing = bytes;
  trailing.push_back(0);
  expect_code([&] { decode_checkpoint(trailing); }, "format");
}
