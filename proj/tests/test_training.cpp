#include "gradcheck.hpp"
#include "moon/checkpoint.hpp"
#include "moon/training.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace moon;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("moon_test_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

DatasetManifest tiny_manifest() {
  DatasetManifest m;
  m.vocab_size = 64;
  m.topics = 8;
  m.text_len = 6;
  m.patch_dim = 6;
  m.train_count = 64;
  m.test_count = 0;
  m.seed = 3;
  return m;
}

TrainConfig tiny_config(const DatasetManifest& m, int steps) {
  TrainConfig c;
  c.encoder.vocab_size = m.vocab_size;
  c.encoder.text_len = m.text_len;
  c.encoder.patches = m.patches;
  c.encoder.patch_dim = m.patch_dim;
  c.encoder.hidden = 16;
  c.encoder.heads = 2;
  c.encoder.moe.expert_hidden = 16;
  c.batch_size = 8;
  c.steps = steps;
  c.learning_rate = 3e-4;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(TrainConfig, KvRoundTripAndHash) {
  TrainConfig c = tiny_config(tiny_manifest(), 7);
  c.mode = TrainMode::kMixed;
  c.use_intra = false;
  c.mixed_ratio = {4, 2, 1};
  const TrainConfig back = TrainConfig::from_kv(KvConfig::parse(c.to_kv().to_string()));
  EXPECT_EQ(back.to_kv().entries(), c.to_kv().entries());
  EXPECT_EQ(back.hash(), c.hash());
  TrainConfig d = c;
  d.seed = 6;
  EXPECT_NE(d.hash(), c.hash());
}

TEST(TrainConfig, InvalidValuesRejected) {
  TrainConfig c = tiny_config(tiny_manifest(), 5);
  c.tau = 0;
  EXPECT_ANY_THROW(c.validate());
  c = tiny_config(tiny_manifest(), 5);
  c.batch_size = 0;
  EXPECT_ANY_THROW(c.validate());
  KvConfig kv = c.to_kv();
  kv.set("train.mode", std::string("alternating"));
  EXPECT_THROW(TrainConfig::from_kv(kv), ConfigError);
}

TEST(MixedSchedule, FrequenciesFollowRatio) {
  MixedSchedule s({12, 3, 2}, 42);
  std::map<Modality, int> counts;
  const int n = 1700;
  for (int i = 0; i < n; ++i) ++counts[s.next()];
  EXPECT_NEAR(counts[Modality::kImage] / double(n), 12.0 / 17, 0.02);
  EXPECT_NEAR(counts[Modality::kText] / double(n), 3.0 / 17, 0.02);
  EXPECT_NEAR(counts[Modality::kMultimodal] / double(n), 2.0 / 17, 0.02);
}

TEST(MixedSchedule, DeterministicPerSeed) {
  MixedSchedule a({12, 3, 2}, 1), b({12, 3, 2}, 1), c({12, 3, 2}, 2);
  std::vector<Modality> sa, sb, sc;
  for (int i = 0; i < 34; ++i) {
    sa.push_back(a.next());
    sb.push_back(b.next());
    sc.push_back(c.next());
  }
  EXPECT_EQ(sa, sb);
  EXPECT_NE(sa, sc);
}

TEST(BatchSampler, DistinctSortedAndCoversEpoch) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  BatchSampler s(data, 8, 11);
  std::set<std::string> seen;
  for (int b = 0; b < 8; ++b) {
    const auto batch = s.next();
    ASSERT_EQ(batch.size(), 8u);
    for (std::size_t i = 1; i < batch.size(); ++i) EXPECT_LT(batch[i - 1]->triplet_id, batch[i]->triplet_id);
    for (const auto* t : batch) seen.insert(t->triplet_id);
  }
  EXPECT_EQ(seen.size(), data.size());
}

TEST(Trainer, DeterministicRuns) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  const TrainConfig c = tiny_config(tiny_manifest(), 6);
  Trainer a(c, data), b(c, data);
  const auto la = run_training(a).log, lb = run_training(b).log;
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].to_json(), lb[i].to_json());
  for (ParamId id = 0; id < a.encoder().parameters().size(); ++id)
    EXPECT_EQ(a.encoder().parameters().value(id), b.encoder().parameters().value(id));
}

TEST(Trainer, BreakdownTotalMatchesComposition) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  const TrainConfig c = tiny_config(tiny_manifest(), 4);
  Trainer t(c, data);
  for (const auto& m : run_training(t).log) {
    EXPECT_NEAR(m.breakdown.total, total_loss(m.breakdown, c.alpha_aux, c.beta), 1e-4 * std::abs(m.breakdown.total));
    double osum = 0;
    for (double w : m.breakdown.omega) osum += w;
    EXPECT_NEAR(osum, kObjectiveCount, 1e-4);
  }
}

TEST(Trainer, ScheduleAndLearningRate) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  const TrainConfig c = tiny_config(tiny_manifest(), 12);
  Trainer t(c, data);
  const auto log = run_training(t).log;
  ASSERT_EQ(log.size(), 12u);
  EXPECT_DOUBLE_EQ(log.front().delta_bar, c.filter.delta_bar_start);
  for (std::size_t i = 0; i < log.size(); ++i) {
    if (i) EXPECT_LE(log[i].delta_bar, log[i - 1].delta_bar);
    const double expected = 0.5 * c.learning_rate * (1 + std::cos(std::numbers::pi * double(i) / 12.0));
    EXPECT_NEAR(log[i].learning_rate, expected, 1e-6);
  }
}

TEST(Trainer, MixedModeUsesOneInterObjective) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  TrainConfig c = tiny_config(tiny_manifest(), 5);
  c.mode = TrainMode::kMixed;
  Trainer t(c, data);
  for (const auto& m : run_training(t).log) {
    ASSERT_TRUE(m.query_modality.has_value());
    int active = 0;
    for (bool a : m.breakdown.active) active += a;
    EXPECT_EQ(active, 1);
    EXPECT_TRUE(m.breakdown.active[static_cast<std::size_t>(inter_objective(*m.query_modality))]);
  }
}

TEST(Trainer, NoIntraDeactivatesIntraObjectives) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  TrainConfig c = tiny_config(tiny_manifest(), 2);
  c.use_intra = false;
  Trainer t(c, data);
  for (const auto& m : run_training(t).log) {
    EXPECT_FALSE(m.breakdown.active[static_cast<std::size_t>(AlignmentObjective::kIntraPositive)]);
    EXPECT_FALSE(m.breakdown.active[static_cast<std::size_t>(AlignmentObjective::kIntraNegative)]);
  }
}

TEST(Trainer, EveryParameterReceivesGradientOnAugmentedData) {
  const EncoderConfig ec = moon::testing::micro_encoder();
  auto data = moon::testing::micro_batch(ec, 17);
  TrainConfig c = moon::testing::micro_train_config(ec);
  Encoder<float> enc(ec, 1);
  std::vector<const Triplet*> batch;
  for (const auto& t : data) batch.push_back(&t);
  auto& store = enc.parameters();
  store.zero_grad();
  ad::Tape<float> tape(&store);
  tape.backward(build_batch_loss<float>(tape, enc, batch, c, 0, std::nullopt, nullptr));
  for (ParamId id = 0; id < store.size(); ++id) EXPECT_GT(store.grad(id).cwiseAbs().maxCoeff(), 0.0f) << store.name(id);
}

TEST(Trainer, LossDecreasesOnSmallRun) {
  const auto data = generate_synthetic(tiny_manifest()).train;
  TrainConfig c = tiny_config(tiny_manifest(), 60);
  c.learning_rate = 1e-3;
  Trainer t(c, data);
  const auto log = run_training(t).log;
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 10; ++i) s += log[i].breakdown.total;
    return s / 10;
  };
  EXPECT_LT(window(50), window(0));
}

TEST(TrainFile, ZeroStepsSavesInitialisation) {
  const auto dir = temp_dir("zero");
  const auto m = tiny_manifest();
  const auto files = generate_synthetic_dataset(m, dir);
  TrainConfig c = tiny_config(m, 0);
  c.train_path = files.train.string();
  train(c, dir / "ck.bin", dir / "metrics.jsonl");
  const Encoder<float> loaded = encoder_from_checkpoint(load_checkpoint(dir / "ck.bin"));
  const Encoder<float> fresh(c.encoder, c.seed);
  for (ParamId id = 0; id < fresh.parameters().size(); ++id)
    EXPECT_EQ(loaded.parameters().value(id), fresh.parameters().value(id)) << fresh.parameters().name(id);
  EXPECT_TRUE(slurp(dir / "metrics.jsonl").empty());
}

TEST(TrainFile, RerunIsBitwiseIdentical) {
  const auto dir = temp_dir("rerun");
  const auto m = tiny_manifest();
  const auto files = generate_synthetic_dataset(m, dir);
  TrainConfig c = tiny_config(m, 5);
  c.train_path = files.train.string();
  train(c, dir / "a.bin", dir / "a.jsonl");
  train(c, dir / "b.bin", dir / "b.jsonl");
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  const auto ck = load_checkpoint(dir / "a.bin");
  EXPECT_EQ(ck.meta.config_hash, c.hash());
  EXPECT_EQ(ck.meta.step, 5);
  EXPECT_TRUE(ck.meta.metrics.count("final_total"));
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto dir = temp_dir("ckpt");
  const auto m = tiny_manifest();
  const TrainConfig c = tiny_config(m, 3);
  const Encoder<float> enc(c.encoder, 8);
  CheckpointMeta meta;
  meta.step = 3;
  meta.metrics["final_total"] = 1.25;
  save_checkpoint(dir / "x.bin", enc.parameters(), c.to_kv(), meta);

  const auto ck = load_checkpoint(dir / "x.bin");
  EXPECT_EQ(ck.meta.step, 3);
  EXPECT_DOUBLE_EQ(ck.meta.metrics.at("final_total"), 1.25);
  Encoder<float> other(c.encoder, 9);
  apply_checkpoint(ck, other);
  for (ParamId id = 0; id < enc.parameters().size(); ++id)
    EXPECT_EQ(other.parameters().value(id), enc.parameters().value(id));

  const std::string bytes = slurp(dir / "x.bin");
  {
    std::ofstream out(dir / "trunc.bin", std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  EXPECT_THROW(load_checkpoint(dir / "trunc.bin"), ParseError);
  std::string flipped = bytes;
  flipped[flipped.size() / 2] = static_cast<char>(flipped[flipped.size() / 2] ^ 0x5a);
  {
    std::ofstream out(dir / "flip.bin", std::ios::binary);
    out << flipped;
  }
  EXPECT_THROW(load_checkpoint(dir / "flip.bin"), ParseError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), IoError);
}

TEST(Checkpoint, ConfigMismatchNamesField) {
  const auto dir = temp_dir("mismatch");
  const TrainConfig c = tiny_config(tiny_manifest(), 3);
  const Encoder<float> enc(c.encoder, 8);
  save_checkpoint(dir / "x.bin", enc.parameters(), c.to_kv(), {});
  TrainConfig other = c;
  other.encoder.hidden = 32;
  try {
    load_checkpoint(dir / "x.bin", other.to_kv());
    FAIL() << "expected IntegrityError";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.hidden"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(load_checkpoint(dir / "x.bin", c.to_kv()));
}
