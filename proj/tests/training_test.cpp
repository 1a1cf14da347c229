#include "druseg/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "druseg/checkpoint.hpp"
#include "testutil.hpp"

namespace druseg {
namespace {

// Trivially learnable fixture: channel 0 is offset by the mask sign, the
// other channels are noise. A few gradient steps must cut the loss.
std::vector<Sample> make_threshold_samples(std::int64_t n, std::int64_t size,
                                           std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::int64_t k = 0; k < n; ++k) {
    Sample s;
    s.id = "synthetic" + std::to_string(k);
    s.image = Tensor::zeros({6, size, size});
    s.mask = Tensor::zeros({size, size});
    const std::int64_t split_col = static_cast<std::int64_t>(
        rng.uniform(0.33, 0.67) * static_cast<double>(size));
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        const bool fg = x > split_col;
        s.mask.at(y, x) = fg ? 1.0 : 0.0;
        s.image[y * size + x] = (fg ? 0.8 : -0.8) + rng.uniform(-0.1, 0.1);
        for (std::int64_t c = 1; c < 6; ++c) {
          s.image[(c * size + y) * size + x] = rng.uniform(-0.3, 0.3);
        }
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

ModelConfig small_unet_config() {
  ModelConfig cfg = ModelConfig::make(Variant::kUnet, ScalePreset::kToy);
  cfg.input_size = 16;
  return cfg;
}

TEST(Scenario, StringsAndDefaults) {
  for (Scenario s : {Scenario::kDirectTraining, Scenario::kFineTuning,
                     Scenario::kDirectTransfer}) {
    EXPECT_EQ(scenario_from_string(scenario_name(s)), s);
  }
  EXPECT_THROW(scenario_from_string("transfer"), ConfigError);
  EXPECT_DOUBLE_EQ(
      TrainConfig::defaults_for(Scenario::kDirectTraining).learning_rate,
      0.01);
  EXPECT_DOUBLE_EQ(
      TrainConfig::defaults_for(Scenario::kFineTuning).learning_rate, 0.001);
  EXPECT_DOUBLE_EQ(TrainConfig::defaults_for(Scenario::kDirectTraining).momentum,
                   0.9);
  EXPECT_EQ(TrainConfig::defaults_for(Scenario::kDirectTraining).batch_size,
            16);
  EXPECT_EQ(TrainConfig::defaults_for(Scenario::kDirectTraining).max_epochs,
            500);
  EXPECT_EQ(TrainConfig::defaults_for(Scenario::kDirectTraining).patience, 50);
}

TEST(Scenario, ConfigRejectsBadValues) {
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.val_fraction = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.patience = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Sgd, MomentumHandSequence) {
  Tensor w = Tensor::full({1}, 1.0);
  Tensor g = Tensor::full({1}, 1.0);
  Tensor v = Tensor::zeros({1});
  std::vector<ParamRef> refs{{"w", &w, &g, &v}};
  sgd_momentum_step(refs, 0.05, 0.9);
  EXPECT_NEAR(v[0], -0.05, 1e-15);
  EXPECT_NEAR(w[0], 0.95, 1e-15);
  sgd_momentum_step(refs, 0.05, 0.9);
  EXPECT_NEAR(v[0], -0.095, 1e-15);
  EXPECT_NEAR(w[0], 0.855, 1e-15);
}

TEST(EarlyStoppingRule, PatienceFixture) {
  EarlyStopping es(2);
  EXPECT_TRUE(es.update(1.0));
  EXPECT_FALSE(es.should_stop());
  EXPECT_TRUE(es.update(0.9));
  EXPECT_FALSE(es.should_stop());
  EXPECT_FALSE(es.update(0.95));
  EXPECT_FALSE(es.should_stop());
  EXPECT_FALSE(es.update(0.96));
  EXPECT_TRUE(es.should_stop());
  EXPECT_DOUBLE_EQ(es.best(), 0.9);
  EXPECT_EQ(es.best_epoch(), 2);
}

TEST(EarlyStoppingRule, EqualLossIsNotImprovement) {
  EarlyStopping es(5);
  EXPECT_TRUE(es.update(0.5));
  EXPECT_FALSE(es.update(0.5));
  EXPECT_FALSE(es.update(0.5 - 1e-9));
  EXPECT_TRUE(es.update(0.4));
  EXPECT_THROW(EarlyStopping(0), ValueError);
}

TEST(Split, PartitionProperties) {
  Rng rng(3);
  const SplitIndices s = split_validation(10, 0.2, rng);
  EXPECT_EQ(s.val.size(), 2u);
  EXPECT_EQ(s.train.size(), 8u);
  std::vector<std::int64_t> all = s.val;
  all.insert(all.end(), s.train.begin(), s.train.end());
  std::sort(all.begin(), all.end());
  for (std::int64_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);

  Rng a(5), b(5);
  const SplitIndices sa = split_validation(20, 0.25, a);
  const SplitIndices sb = split_validation(20, 0.25, b);
  EXPECT_EQ(sa.val, sb.val);
  EXPECT_EQ(sa.train, sb.train);

  Rng c(6);
  EXPECT_THROW(split_validation(1, 0.2, c), ConfigError);
  EXPECT_THROW(split_validation(10, 0.0, c), ConfigError);
  EXPECT_THROW(split_validation(10, 1.0, c), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const std::string dir = testutil::fresh_dir("druseg_ckpt_roundtrip");
  Network net(small_unet_config());
  Rng rng(21);
  net.init_params(rng);
  Rng vfill(22);
  for (auto& r : net.params()) {
    for (auto& v : r.velocity->values()) v = vfill.uniform(-0.2, 0.2);
  }
  CheckpointMeta meta;
  meta.epochs_completed = 7;
  meta.best_val_loss = 0.12345;
  meta.rng_state = Rng(55).save_state();
  meta.has_rng_state = true;
  const std::string path = dir + "/model.ckpt";
  save_checkpoint(path, net, meta);

  Network loaded(small_unet_config());
  const CheckpointMeta got = load_checkpoint(path, loaded);
  EXPECT_EQ(got.epochs_completed, 7);
  EXPECT_EQ(got.best_val_loss, 0.12345);
  ASSERT_TRUE(got.has_rng_state);
  EXPECT_EQ(got.rng_state, meta.rng_state);
  const std::vector<double> a = net.snapshot_params();
  const std::vector<double> b = loaded.snapshot_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  const std::vector<double> av = net.snapshot_velocity();
  const std::vector<double> bv = loaded.snapshot_velocity();
  for (std::size_t i = 0; i < av.size(); ++i) EXPECT_EQ(av[i], bv[i]);
}

TEST(Checkpoint, HeaderPeekAndSelfBuild) {
  const std::string dir = testutil::fresh_dir("druseg_ckpt_peek");
  ModelConfig cfg = ModelConfig::make(Variant::kDenseResidualUnet,
                                      ScalePreset::kToy);
  Network net(cfg);
  Rng rng(31);
  net.init_params(rng);
  const std::string path = dir + "/model.ckpt";
  save_checkpoint(path, net);

  const ModelConfig peeked = read_checkpoint_config(path);
  EXPECT_EQ(peeked.variant, Variant::kDenseResidualUnet);
  EXPECT_EQ(peeked.dense_growth, cfg.dense_growth);
  EXPECT_EQ(peeked.fc_width, cfg.fc_width);
  EXPECT_EQ(peeked.input_size, cfg.input_size);
  EXPECT_DOUBLE_EQ(peeked.noise_sigma, cfg.noise_sigma);
  EXPECT_DOUBLE_EQ(peeked.dropout_rate, cfg.dropout_rate);

  LoadedNetwork rebuilt = load_checkpoint_network(path);
  EXPECT_EQ(rebuilt.network.count_params(), net.count_params());
  const std::vector<double> a = net.snapshot_params();
  const std::vector<double> b = rebuilt.network.snapshot_params();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_EQ(rebuilt.meta.epochs_completed, 0);
  EXPECT_FALSE(rebuilt.meta.has_rng_state);
}

TEST(Checkpoint, ArchitectureMismatchRejected) {
  const std::string dir = testutil::fresh_dir("druseg_ckpt_mismatch");
  Network net(small_unet_config());
  Rng rng(41);
  net.init_params(rng);
  const std::string path = dir + "/model.ckpt";
  save_checkpoint(path, net);

  ModelConfig other = small_unet_config();
  other.fc_width += 1;
  Network wider(other);
  EXPECT_THROW(load_checkpoint(path, wider), StateError);
  Network dense(ModelConfig::make(Variant::kDenseResidualUnet,
                                  ScalePreset::kToy));
  EXPECT_THROW(load_checkpoint(path, dense), StateError);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const std::string dir = testutil::fresh_dir("druseg_ckpt_corrupt");
  Network net(small_unet_config());
  Rng rng(51);
  net.init_params(rng);
  const std::string path = dir + "/model.ckpt";
  save_checkpoint(path, net);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    bytes = buf.str();
  }
  const auto rewrite = [&](const std::string& name, std::string data) {
    const std::string p = dir + "/" + name;
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    return p;
  };

  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  EXPECT_THROW(load_checkpoint_network(rewrite("flip.ckpt", flipped)),
               IoError);

  EXPECT_THROW(
      load_checkpoint_network(rewrite("short.ckpt", bytes.substr(0, 10))),
      IoError);

  std::string badmagic = bytes;
  badmagic[0] = 'X';
  try {
    load_checkpoint_network(rewrite("magic.ckpt", badmagic));
    FAIL() << "bad magic was accepted";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("not a checkpoint"),
              std::string::npos);
  }

  std::string badversion = bytes;
  badversion[4] = 9;
  try {
    load_checkpoint_network(rewrite("version.ckpt", badversion));
    FAIL() << "bad version was accepted";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported version"),
              std::string::npos);
  }

  EXPECT_THROW(read_checkpoint_config(dir + "/missing.ckpt"), IoError);
  EXPECT_THROW(save_checkpoint(dir + "/no/such/dir/model.ckpt", net),
               IoError);
}

TEST(Training, LossDecreasesOnLearnableFixture) {
  Network net(small_unet_config());
  Rng rng(61);
  net.init_params(rng);
  const std::vector<Sample> data = make_threshold_samples(6, 16, 71);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 4;
  cfg.max_epochs = 25;
  cfg.patience = 50;
  cfg.seed = 5;
  cfg.augment.enabled = false;
  const TrainResult r = train(net, data, cfg);
  ASSERT_EQ(r.epochs_run, 25);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_LT(r.best_val_loss, r.history.front().val_loss);
  EXPECT_GE(r.best_epoch, 1);
}

TEST(Training, BitwiseDeterministicGivenSeed) {
  const std::vector<Sample> data = make_threshold_samples(5, 16, 81);
  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.batch_size = 2;
  cfg.max_epochs = 3;
  cfg.patience = 50;
  cfg.seed = 9;

  const auto run = [&](std::uint64_t train_seed) {
    Network net(small_unet_config());
    Rng rng(73);
    net.init_params(rng);
    TrainConfig c = cfg;
    c.seed = train_seed;
    train(net, data, c);
    return net.snapshot_params();
  };
  const std::vector<double> a = run(9);
  const std::vector<double> b = run(9);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  const std::vector<double> c = run(10);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a[i] != c[i];
  EXPECT_TRUE(differs);
}

TEST(Training, NonFiniteLossAborts) {
  Network net(small_unet_config());
  Rng rng(91);
  net.init_params(rng);
  // The head bias feeds tanh01 directly, so the NaN reaches the loss
  // (rectifiers upstream would swallow it).
  net.params().back().value->data()[0] =
      std::numeric_limits<double>::quiet_NaN();
  const std::vector<Sample> data = make_threshold_samples(4, 16, 92);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.max_epochs = 5;
  try {
    train(net, data, cfg);
    FAIL() << "non-finite loss was not detected";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch, 1);
    EXPECT_EQ(e.batch, 0);
  }
}

TEST(Training, BestEpochWeightsAreRestored) {
  Network net(small_unet_config());
  Rng rng(101);
  net.init_params(rng);
  const std::vector<Sample> data = make_threshold_samples(6, 16, 102);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 4;
  cfg.max_epochs = 12;
  cfg.patience = 50;
  cfg.seed = 11;
  cfg.augment.enabled = false;
  const TrainResult r = train(net, data, cfg);

  Rng root(cfg.seed);
  Rng split_rng = root.derive({detail::kSplitTag});
  const SplitIndices split = split_validation(
      static_cast<std::int64_t>(data.size()), cfg.val_fraction, split_rng);
  const double recomputed =
      validation_loss(net, data, split.val, cfg.batch_size);
  EXPECT_DOUBLE_EQ(recomputed, r.best_val_loss);
  double best_seen = std::numeric_limits<double>::infinity();
  for (const EpochStats& s : r.history) {
    best_seen = std::min(best_seen, s.val_loss);
  }
  EXPECT_DOUBLE_EQ(best_seen, r.best_val_loss);
}

TEST(Training, CallbackCanStopEarly) {
  Network net(small_unet_config());
  Rng rng(111);
  net.init_params(rng);
  const std::vector<Sample> data = make_threshold_samples(4, 16, 112);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.max_epochs = 50;
  cfg.seed = 13;
  const TrainResult r = train(
      net, data, cfg,
      [](const EpochStats& s, Network&) { return s.epoch == 3; });
  EXPECT_EQ(r.epochs_run, 3);
  EXPECT_EQ(r.stop_reason, StopReason::kCallback);
  EXPECT_EQ(r.history.size(), 3u);
}

TEST(Training, PatienceStopsWhenNothingMoves) {
  Network net(small_unet_config());
  Rng rng(121);
  net.init_params(rng);
  const std::vector<Sample> data = make_threshold_samples(4, 16, 122);
  TrainConfig cfg;
  cfg.learning_rate = 1e-12;  // updates far below the improvement slack
  cfg.batch_size = 2;
  cfg.max_epochs = 50;
  cfg.patience = 1;
  cfg.seed = 17;
  cfg.augment.enabled = false;
  const TrainResult r = train(net, data, cfg);
  EXPECT_EQ(r.epochs_run, 2);
  EXPECT_EQ(r.stop_reason, StopReason::kPatience);
  EXPECT_EQ(r.best_epoch, 1);
}

TEST(Scenarios, CheckpointRulesAreEnforced) {
  const std::string dir = testutil::fresh_dir("druseg_scenario_rules");
  const DatasetManifest manifest = testutil::make_blob_dataset(
      dir, {{4, "train"}, {2, "eval"}}, 32, 7);
  Network net(ModelConfig::make(Variant::kUnet, ScalePreset::kToy));
  Rng rng(131);
  net.init_params(rng);

  TrainConfig direct = TrainConfig::defaults_for(Scenario::kDirectTraining);
  EXPECT_THROW(run_scenario(net, manifest, direct, /*from_checkpoint=*/true),
               ConfigError);
  TrainConfig fine = TrainConfig::defaults_for(Scenario::kFineTuning);
  EXPECT_THROW(run_scenario(net, manifest, fine, /*from_checkpoint=*/false),
               ConfigError);
  TrainConfig transfer = TrainConfig::defaults_for(Scenario::kDirectTransfer);
  EXPECT_THROW(
      run_scenario(net, manifest, transfer, /*from_checkpoint=*/false),
      ConfigError);

  DatasetManifest no_train;
  no_train.entries = entries_with_split(manifest, "eval");
  EXPECT_THROW(run_scenario(net, no_train, direct, /*from_checkpoint=*/false),
               ConfigError);
}

TEST(Scenarios, DirectTransferLeavesWeightsUntouched) {
  const std::string dir = testutil::fresh_dir("druseg_scenario_transfer");
  const DatasetManifest manifest =
      testutil::make_blob_dataset(dir, {{3, "eval"}}, 32, 9);
  Network net(ModelConfig::make(Variant::kUnet, ScalePreset::kToy));
  Rng rng(141);
  net.init_params(rng);
  const std::vector<double> before = net.snapshot_params();

  TrainConfig cfg = TrainConfig::defaults_for(Scenario::kDirectTransfer);
  const ScenarioResult r =
      run_scenario(net, manifest, cfg, /*from_checkpoint=*/true);
  EXPECT_FALSE(r.trained);
  ASSERT_TRUE(r.has_eval);
  EXPECT_EQ(r.eval.per_image.size(), 3u);
  const std::vector<double> after = net.snapshot_params();
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(before[i], after[i]);
  }
}

TEST(Scenarios, FineTuningUsesFinetuneRowsOrFallsBack) {
  const std::string dir = testutil::fresh_dir("druseg_scenario_finetune");
  TrainConfig cfg = TrainConfig::defaults_for(Scenario::kFineTuning);
  cfg.max_epochs = 2;
  cfg.batch_size = 2;
  cfg.patience = 50;

  const DatasetManifest with_ft = testutil::make_blob_dataset(
      dir + "/a", {{4, "finetune"}, {2, "eval"}}, 32, 11);
  Network net(ModelConfig::make(Variant::kUnet, ScalePreset::kToy));
  Rng rng(151);
  net.init_params(rng);
  const ScenarioResult ra =
      run_scenario(net, with_ft, cfg, /*from_checkpoint=*/true);
  EXPECT_TRUE(ra.trained);
  EXPECT_EQ(ra.train_result.epochs_run, 2);
  ASSERT_TRUE(ra.has_eval);

  const DatasetManifest fallback = testutil::make_blob_dataset(
      dir + "/b", {{4, "train"}}, 32, 12);
  Network net2(ModelConfig::make(Variant::kUnet, ScalePreset::kToy));
  Rng rng2(152);
  net2.init_params(rng2);
  const ScenarioResult rb =
      run_scenario(net2, fallback, cfg, /*from_checkpoint=*/true);
  EXPECT_TRUE(rb.trained);
  EXPECT_FALSE(rb.has_eval);
}

}  // namespace
}  // namespace druseg
