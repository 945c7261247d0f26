#include "moon/encoder.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

using namespace moon;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.hidden = 16;
  c.text_len = 8;
  c.visual_tokens = 4;
  c.patches = 4;
  c.patch_dim = 6;
  c.vocab_size = 50;
  c.heads = 2;
  c.moe.expert_hidden = 12;
  return c;
}

ProductContent random_content(const EncoderConfig& c, std::mt19937_64& rng, int augs = 0, bool enriched = false) {
  std::uniform_int_distribution<int> tok(1, c.vocab_size - 1), len(1, c.text_len);
  std::normal_distribution<float> g(0.f, 1.f);
  ProductContent p;
  p.title.resize(static_cast<std::size_t>(len(rng)));
  for (auto& t : p.title) t = tok(rng);
  if (enriched) {
    p.enriched_title = std::vector<int>(static_cast<std::size_t>(c.text_len));
    for (auto& t : *p.enriched_title) t = tok(rng);
  }
  auto image = [&] {
    MatrixF m(c.patches, c.patch_dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
  };
  p.image = image();
  for (int a = 0; a < augs; ++a) p.aug_images.push_back(image());
  return p;
}

}  // namespace

TEST(Encoder, ZeroLayerSingleTokenIsEmbeddingRow) {
  EncoderConfig c = small_config();
  c.layers = 0;
  c.text_len = 1;
  c.normalize_output = false;
  const Encoder<float> enc(c, 3);
  ProductContent p;
  p.title = {7};
  const auto r = enc.encode(p, Modality::kText);
  const auto& table = enc.parameters().value(enc.parameters().find("embed.tokens"));
  EXPECT_EQ(r, table.row(7));
}

TEST(Encoder, UnitNormOutput) {
  const EncoderConfig c = small_config();
  const Encoder<float> enc(c, 4);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 30; ++i) {
    const auto p = random_content(c, rng, i % 3, i % 2);
    for (Modality m : {Modality::kText, Modality::kImage, Modality::kMultimodal})
      EXPECT_NEAR(enc.encode(p, m).norm(), 1.0f, 1e-6f);
  }
}

TEST(Encoder, SequenceLengthFormula) {
  EncoderConfig c = small_config();
  c.text_len = 8;
  c.visual_tokens = 4;
  std::mt19937_64 rng(2);
  const auto p = random_content(c, rng, 2, true);
  EXPECT_EQ(sequence_layout(p, Modality::kMultimodal, c).size(), 2u * 8 + 3u * 4);
  EXPECT_EQ(sequence_layout(p, Modality::kText, c).size(), 16u);
  EXPECT_EQ(sequence_layout(p, Modality::kImage, c).size(), static_cast<std::size_t>(c.prompt_len + 3 * 4));
  const Encoder<float> enc(c, 5);
  const auto maps = enc.attention_weights(p, Modality::kMultimodal);
  EXPECT_EQ(maps[0][0].rows(), 28);
}

TEST(Encoder, AttentionMapsAreStochasticAndShaped) {
  const EncoderConfig c = small_config();
  const Encoder<float> enc(c, 6);
  std::mt19937_64 rng(3);
  const auto p = random_content(c, rng, 1, true);
  const auto maps = enc.attention_weights(p, Modality::kMultimodal);
  const auto s = static_cast<Eigen::Index>(sequence_layout(p, Modality::kMultimodal, c).size());
  ASSERT_EQ(static_cast<int>(maps.size()), c.layers);
  for (const auto& layer : maps) {
    ASSERT_EQ(static_cast<int>(layer.size()), c.heads);
    for (const auto& m : layer) {
      ASSERT_EQ(m.rows(), s);
      ASSERT_EQ(m.cols(), s);
      EXPECT_GE(m.minCoeff(), 0.0f);
      for (Eigen::Index r = 0; r < s; ++r) EXPECT_NEAR(m.row(r).sum(), 1.0f, 1e-6f);
    }
  }
  EXPECT_EQ(maps, enc.attention_weights(p, Modality::kMultimodal));
}

TEST(Encoder, Deterministic) {
  const EncoderConfig c = small_config();
  std::mt19937_64 rng(4);
  const auto p = random_content(c, rng, 2, true);
  EXPECT_EQ(Encoder<float>(c, 9).encode(p, Modality::kMultimodal), Encoder<float>(c, 9).encode(p, Modality::kMultimodal));
}

TEST(Encoder, TokenOrderMatters) {
  const EncoderConfig c = small_config();
  const Encoder<float> enc(c, 7);
  ProductContent p;
  p.title = {3, 4, 5, 6};
  ProductContent q = p;
  std::swap(q.title[0], q.title[3]);
  EXPECT_NE(enc.encode(p, Modality::kText), enc.encode(q, Modality::kText));
}

TEST(Encoder, DistinctInputsGiveDistinctOutputs) {
  const EncoderConfig c = small_config();
  const Encoder<float> enc(c, 8);
  std::mt19937_64 rng(5);
  std::set<std::vector<float>> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto r = enc.encode(random_content(c, rng, i % 3, i % 2 == 0), Modality::kMultimodal);
    seen.insert(std::vector<float>(r.data(), r.data() + r.size()));
  }
  EXPECT_EQ(seen.size(), 1000u);
}

TEST(Encoder, MissingFieldsAndShapeErrors) {
  const EncoderConfig c = small_config();
  const Encoder<float> enc(c, 9);
  ProductContent text_only;
  text_only.title = {1, 2};
  EXPECT_THROW(enc.encode(text_only, Modality::kImage), ValidationError);
  EXPECT_THROW(enc.encode(text_only, Modality::kMultimodal), ValidationError);
  ProductContent image_only;
  image_only.image = MatrixF::Zero(c.patches, c.patch_dim);
  EXPECT_THROW(enc.encode(image_only, Modality::kText), ValidationError);
  ProductContent bad = text_only;
  bad.image = MatrixF::Zero(c.patches, c.patch_dim + 1);
  EXPECT_THROW(enc.encode(bad, Modality::kMultimodal), ValidationError);
  ProductContent long_title;
  long_title.title = std::vector<int>(static_cast<std::size_t>(c.text_len + 1), 1);
  EXPECT_THROW(enc.encode(long_title, Modality::kText), ValidationError);
  ProductContent oov;
  oov.title = {c.vocab_size};
  EXPECT_THROW(enc.encode(oov, Modality::kText), ValidationError);
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.patches = 6;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.moe.top_k = c.moe.experts + 1;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Encoder, ConfigKvRoundTrip) {
  EncoderConfig c = small_config();
  c.normalize_output = false;
  c.moe.experts = 6;
  EXPECT_EQ(EncoderConfig::from_kv(c.to_kv()), c);
  EXPECT_EQ(EncoderConfig::from_kv(c.to_kv()).hash(), c.hash());
}

TEST(Encoder, DoubleAndFloatAgree) {
  const EncoderConfig c = small_config();
  const Encoder<float> f(c, 10);
  Encoder<double> d(c, 11);
  copy_parameters(f, d);
  std::mt19937_64 rng(6);
  const auto p = random_content(c, rng, 2, true);
  EXPECT_TRUE(d.encode(p, Modality::kMultimodal).cast<float>().isApprox(f.encode(p, Modality::kMultimodal), 1e-4f));
}

TEST(Encoder, TraceRecordsRoutingPerLayer) {
  const EncoderConfig c = small_config();
  Encoder<double> enc(c, 12);
  std::mt19937_64 rng(7);
  const auto p = random_content(c, rng, 1, false);
  ad::Tape<double> t(&enc.parameters());
  ForwardTrace<double> trace;
  enc.forward(t, p, Modality::kMultimodal, &trace);
  ASSERT_EQ(static_cast<int>(trace.layers.size()), c.layers);
  for (const auto& l : trace.layers) {
    const MatrixD& w = t.value(l.weights);
    EXPECT_EQ(static_cast<std::size_t>(w.rows()), trace.layout.size());
    for (Eigen::Index s = 0; s < w.rows(); ++s) EXPECT_NEAR(w.row(s).sum(), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(l.assigned.sum(), static_cast<double>(l.tokens * c.moe.top_k));
  }
}
