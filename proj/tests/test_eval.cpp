#include "moon/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

using namespace moon;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("moon_test_eval_" + name);
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

MatrixF random_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.f, 1.f);
  MatrixF m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

std::vector<std::string> numbered(const std::string& prefix, int n) {
  std::vector<std::string> ids;
  char buf[32];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "%s%05d", prefix.c_str(), i);
    ids.emplace_back(buf);
  }
  return ids;
}

// Full sort of all candidates by (score desc, id asc), then position lookup.
std::map<int, double> brute_force_recall(const EmbeddingIndex& queries, const std::map<std::string, std::string>& truth,
                                         const EmbeddingIndex& index, const std::vector<int>& ks) {
  std::map<int, double> hits;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::pair<double, std::string>> scored;
    for (std::size_t c = 0; c < index.size(); ++c) {
      double s = 0;
      for (Eigen::Index j = 0; j < index.embeddings.cols(); ++j)
        s += static_cast<double>(index.embeddings(static_cast<Eigen::Index>(c), j)) *
             static_cast<double>(queries.embeddings(static_cast<Eigen::Index>(q), j));
      scored.emplace_back(s, index.ids[c]);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::string& gt = truth.at(queries.ids[q]);
    const auto pos = static_cast<int>(
        std::find_if(scored.begin(), scored.end(), [&](const auto& x) { return x.second == gt; }) - scored.begin());
    for (int k : ks) hits[k] += pos < k ? 1.0 : 0.0;
  }
  for (auto& [k, h] : hits) h /= static_cast<double>(queries.size());
  return hits;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.hidden = 16;
  c.heads = 2;
  c.vocab_size = 64;
  c.text_len = 6;
  c.patch_dim = 6;
  c.moe.expert_hidden = 16;
  return c;
}

DatasetManifest matching_manifest(int test_count) {
  DatasetManifest m;
  m.vocab_size = 64;
  m.topics = 8;
  m.text_len = 6;
  m.patch_dim = 6;
  m.train_count = 0;
  m.test_count = test_count;
  m.seed = 2;
  return m;
}

}  // namespace

TEST(Recall, MatchesBruteForceOnRandomEmbeddings) {
  std::mt19937_64 rng(1);
  const auto index = make_index(numbered("c", 1000), random_rows(1000, 16, rng));
  const auto queries = make_index(numbered("q", 200), random_rows(200, 16, rng));
  std::map<std::string, std::string> truth;
  for (int i = 0; i < 200; ++i) truth[queries.ids[static_cast<std::size_t>(i)]] = index.ids[static_cast<std::size_t>(i * 5)];
  const std::vector<int> ks{1, 5, 10};
  EXPECT_EQ(recall_at_ks(queries, truth, index, ks), brute_force_recall(queries, truth, index, ks));
}

TEST(Recall, MatchesBruteForceWithTies) {
  std::mt19937_64 rng(2);
  MatrixF cands = random_rows(100, 4, rng);
  for (int i = 0; i < 100; i += 2) cands.row(i + 1) = cands.row(i);
  const auto index = make_index(numbered("c", 100), cands);
  MatrixF q(100, 4);
  for (int i = 0; i < 100; ++i) q.row(i) = cands.row(i);
  const auto queries = make_index(numbered("q", 100), q);
  std::map<std::string, std::string> truth;
  for (int i = 0; i < 100; ++i) truth[queries.ids[static_cast<std::size_t>(i)]] = index.ids[static_cast<std::size_t>(i)];
  const std::vector<int> ks{1, 2, 5};
  const auto r = recall_at_ks(queries, truth, index, ks);
  EXPECT_EQ(r, brute_force_recall(queries, truth, index, ks));
  EXPECT_DOUBLE_EQ(r.at(1), 0.5);
  EXPECT_DOUBLE_EQ(r.at(2), 1.0);
}

TEST(Recall, RandomExpectationAndVacuousCutoff) {
  std::mt19937_64 rng(3);
  const auto index = make_index(numbered("c", 100), random_rows(100, 8, rng));
  const auto queries = make_index(numbered("q", 100), random_rows(100, 8, rng));
  std::map<std::string, std::string> truth;
  for (int i = 0; i < 100; ++i) truth[queries.ids[static_cast<std::size_t>(i)]] = index.ids[static_cast<std::size_t>(i)];
  EXPECT_EQ(recall_at_k(queries, truth, index, 1), brute_force_recall(queries, truth, index, {1}).at(1));
  EXPECT_LE(recall_at_k(queries, truth, index, 1), 0.1);
  EXPECT_DOUBLE_EQ(recall_at_k(queries, truth, index, 100), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k(queries, truth, index, 1000), 1.0);
}

TEST(Recall, ExactMatchGivesOne) {
  std::mt19937_64 rng(4);
  const MatrixF e = random_rows(50, 8, rng);
  const auto index = make_index(numbered("c", 50), e);
  const auto queries = make_index(numbered("q", 50), e);
  std::map<std::string, std::string> truth;
  for (int i = 0; i < 50; ++i) truth[queries.ids[static_cast<std::size_t>(i)]] = index.ids[static_cast<std::size_t>(i)];
  EXPECT_DOUBLE_EQ(recall_at_k(queries, truth, index, 1), 1.0);
}

TEST(Recall, MonotoneInK) {
  std::mt19937_64 rng(5);
  const auto index = make_index(numbered("c", 300), random_rows(300, 8, rng));
  const auto queries = make_index(numbered("q", 60), random_rows(60, 8, rng));
  std::map<std::string, std::string> truth;
  for (int i = 0; i < 60; ++i) truth[queries.ids[static_cast<std::size_t>(i)]] = index.ids[static_cast<std::size_t>(i)];
  const auto r = recall_at_ks(queries, truth, index, {1, 2, 5, 10, 50, 300});
  double prev = 0;
  for (const auto& [k, v] : r) {
    EXPECT_GE(v, prev) << k;
    prev = v;
  }
}

TEST(Recall, InvalidInputs) {
  std::mt19937_64 rng(6);
  const auto index = make_index(numbered("c", 5), random_rows(5, 4, rng));
  const auto queries = make_index(numbered("q", 1), random_rows(1, 4, rng));
  EXPECT_THROW(recall_at_k(queries, {}, index, 1), ValidationError);
  EXPECT_THROW(recall_at_k(queries, {{"q00000", "c00000"}}, index, 0), ValidationError);
  EXPECT_THROW(make_index({}, MatrixF(0, 4)), ValidationError);
}

TEST(Index, BuildIsUnitNormAndDeterministic) {
  const auto c = small_encoder();
  const Encoder<float> enc(c, 3);
  const auto ds = generate_synthetic(matching_manifest(20));
  std::vector<Item> items;
  for (const auto& t : ds.test) items.emplace_back(t.triplet_id, &t.positive);
  const auto a = build_index(items, Modality::kMultimodal, enc);
  ASSERT_EQ(a.size(), 20u);
  for (Eigen::Index r = 0; r < a.embeddings.rows(); ++r) EXPECT_NEAR(a.embeddings.row(r).norm(), 1.0f, 1e-5f);
  EXPECT_EQ(a.embeddings, build_index(items, Modality::kMultimodal, enc).embeddings);
  EXPECT_THROW(build_index({}, Modality::kText, enc), ValidationError);
}

TEST(Index, EvaluateRetrievalTaskNamesAndRange) {
  const auto c = small_encoder();
  const Encoder<float> enc(c, 4);
  const auto ds = generate_synthetic(matching_manifest(30));
  const auto results = evaluate_retrieval(enc, ds.test, paper_tasks(), {1, 5, 10});
  ASSERT_EQ(results.size(), 5u);
  EXPECT_EQ(results[0].task, "t2mm");
  EXPECT_EQ(results[4].task, "i2t");
  for (const auto& r : results) {
    EXPECT_EQ(r.recall.size(), 3u);
    EXPECT_LE(r.recall.at(1), r.recall.at(5));
    EXPECT_LE(r.recall.at(5), r.recall.at(10));
  }
  EXPECT_EQ(parse_task("mm2mm").name(), "mm2mm");
  EXPECT_THROW(parse_task("x2y"), ValidationError);
}

TEST(Classification, MacroMetricsHandExample) {
  const auto m = single_label_metrics({0, 0, 1, 1}, {0, 1, 1, 1}, 3);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_NEAR(m.precision, (1.0 + 2.0 / 3.0) / 2, 1e-12);
  EXPECT_NEAR(m.recall, 0.75, 1e-12);
  EXPECT_NEAR(m.f1, (2.0 / 3.0 + 0.8) / 2, 1e-12);
}

TEST(Classification, MultiLabelExactMatchAccuracy) {
  const auto m = multi_label_metrics({{0, 1}, {2}}, {{1, 0}, {1}}, 3);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
  EXPECT_THROW(multi_label_metrics({{5}}, {{0}}, 3), ValidationError);
}

TEST(Classification, EqualEmbeddingsGivePerfectAccuracy) {
  std::mt19937_64 rng(7);
  const MatrixF labels = make_index(numbered("l", 6), random_rows(6, 8, rng)).embeddings;
  MatrixF items(12, 8);
  std::vector<int> truth;
  for (int i = 0; i < 12; ++i) {
    items.row(i) = labels.row(i % 6);
    truth.push_back(i % 6);
  }
  const auto m = classify_zero_shot(items, truth, labels);
  EXPECT_DOUBLE_EQ(m.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(m.f1, 1.0);
}

TEST(Classification, TiesGoToLowerLabel) {
  MatrixF labels(3, 2);
  labels << 1, 0, 1, 0, 0, 1;
  RowVector<float> item(2);
  item << 1, 0;
  EXPECT_EQ(top_labels(item, labels, 1), (std::vector<int>{0}));
  EXPECT_EQ(top_labels(item, labels, 2), (std::vector<int>{0, 1}));
  const auto m = classify_zero_shot(item, {1}, labels);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.0);
  EXPECT_TRUE(std::isfinite(m.f1));
}

TEST(Heatmap, RowsStochasticShapeAndDeterministicFiles) {
  const auto c = small_encoder();
  const Encoder<float> enc(c, 5);
  const auto ds = generate_synthetic(matching_manifest(1));
  const auto& p = ds.test[0].positive;
  const auto h = attention_heatmap(enc, p, Modality::kMultimodal);
  const auto s = static_cast<Eigen::Index>(sequence_layout(p, Modality::kMultimodal, c).size());
  ASSERT_EQ(h.grid.rows(), s);
  ASSERT_EQ(h.grid.cols(), s);
  ASSERT_EQ(static_cast<Eigen::Index>(h.labels.size()), s);
  for (Eigen::Index r = 0; r < s; ++r) EXPECT_NEAR(h.grid.row(r).sum(), 1.0f, 1e-4f);
  const auto dir = temp_dir("heatmap");
  const auto [csv_a, pgm_a] = export_heatmap(h, dir / "a");
  const auto [csv_b, pgm_b] = export_heatmap(attention_heatmap(enc, p, Modality::kMultimodal), dir / "b");
  EXPECT_EQ(slurp(csv_a), slurp(csv_b));
  EXPECT_EQ(slurp(pgm_a), slurp(pgm_b));
  EXPECT_EQ(slurp(csv_a).substr(0, 9), "position,");
  EXPECT_EQ(slurp(pgm_a).substr(0, 2), "P5");
}

TEST(Report, CellCountAndByteIdenticalRegeneration) {
  MetricsReport r;
  r.config_hash = "00ff00ff00ff00ff";
  r.seed = 3;
  for (const auto& task : paper_tasks()) {
    TaskResult t;
    t.task = task.name();
    t.recall = {{1, 0.125}, {5, 0.5}, {10, 0.75}};
    r.retrieval.push_back(t);
  }
  ClassificationMetrics cm;
  cm.accuracy = 0.5;
  cm.items = 4;
  r.classification = cm;
  const auto dir = temp_dir("report");
  write_report(r, dir / "a");
  const std::string csv = slurp(dir / "a" / "report.csv");
  std::size_t cells = 0;
  std::istringstream lines(csv);
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("retrieval,", 0) == 0) ++cells;
  EXPECT_EQ(cells, 15u);
  EXPECT_NE(csv.find("config_hash=00ff00ff00ff00ff"), std::string::npos);

  const MetricsReport back = MetricsReport::from_json(slurp(dir / "a" / "results.json"));
  write_report(back, dir / "b");
  for (const char* f : {"report.txt", "report.csv", "results.json"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(Report, SingleTaskSingleK) {
  MetricsReport r;
  TaskResult t;
  t.task = "t2mm";
  t.recall = {{10, 0.3}};
  r.retrieval.push_back(t);
  std::size_t rows = 0;
  std::istringstream lines(report_csv(r));
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("retrieval,", 0) == 0) ++rows;
  EXPECT_EQ(rows, 1u);
}
