#pragma once

// Exhaustive-search retrieval evaluation, zero-shot classification, attention
// heatmap export and report tables.

#include "moon/data.hpp"
#include "moon/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace moon {

struct RetrievalTask {
  Modality query = Modality::kText;
  Modality candidate = Modality::kMultimodal;

  std::string name() const;  // e.g. "t2mm"
  friend bool operator==(const RetrievalTask&, const RetrievalTask&) = default;
};

RetrievalTask parse_task(std::string_view name);
std::vector<RetrievalTask> parse_tasks(std::string_view comma_list);
std::vector<RetrievalTask> paper_tasks();  // t2mm, i2mm, mm2mm, t2i, i2t

/// Unit-norm embeddings keyed by id, in insertion order.
struct EmbeddingIndex {
  std::vector<std::string> ids;
  MatrixF embeddings;  // N x D

  std::size_t size() const { return ids.size(); }
  std::ptrdiff_t find(const std::string& id) const;
};

using Item = std::pair<std::string, const ProductContent*>;

/// Encodes every candidate in `modality`; ValidationError names an id lacking the required field.
EmbeddingIndex build_index(const std::vector<Item>& candidates, Modality modality, const Encoder<float>& encoder);

/// Wraps precomputed vectors; rows are L2-normalised.
EmbeddingIndex make_index(std::vector<std::string> ids, MatrixF embeddings);

/// 0-based rank of `target` among all index rows for `query`: number of
/// candidates scoring higher, plus equal scorers with a smaller id.
std::size_t rank_of(const EmbeddingIndex& index, const RowVector<float>& query, std::size_t target);

/// Fraction of queries whose ground truth ranks within the top k by cosine.
double recall_at_k(const EmbeddingIndex& queries, const std::map<std::string, std::string>& ground_truth,
                   const EmbeddingIndex& index, int k);

/// Recall for several k with a single ranking pass.
std::map<int, double> recall_at_ks(const EmbeddingIndex& queries, const std::map<std::string, std::string>& ground_truth,
                                   const EmbeddingIndex& index, const std::vector<int>& ks);

struct TaskResult {
  std::string task;
  std::map<int, double> recall;
};

/// Test-split protocol: queries are the triplet queries; candidates are every
/// positive ("<id>/pos") and negative ("<id>/neg"); the positive is the ground truth.
std::vector<TaskResult> evaluate_retrieval(const Encoder<float>& encoder, const std::vector<Triplet>& test,
                                           const std::vector<RetrievalTask>& tasks, const std::vector<int>& ks);

struct ClassificationMetrics {
  double accuracy = 0;
  double precision = 0;  // macro
  double recall = 0;     // macro
  double f1 = 0;         // macro
  std::size_t items = 0;
};

/// Macro metrics from single-label predictions.
ClassificationMetrics single_label_metrics(const std::vector<int>& truth, const std::vector<int>& predicted,
                                           int label_count);

/// Macro per-label metrics from label sets; accuracy is exact set match.
ClassificationMetrics multi_label_metrics(const std::vector<std::vector<int>>& truth,
                                          const std::vector<std::vector<int>>& predicted, int label_count);

/// Indices of the r highest-scoring labels; ties go to the lower label id.
std::vector<int> top_labels(const RowVector<float>& item, const MatrixF& label_embeddings, int r);

/// Label-name embeddings (text-only), one row per label.
MatrixF encode_labels(const std::vector<std::vector<int>>& label_names, const Encoder<float>& encoder);

/// Nearest label per item.
ClassificationMetrics classify_zero_shot(const MatrixF& items, const std::vector<int>& truth,
                                         const MatrixF& label_embeddings);

/// Top-r labels per item with r = |truth|.
ClassificationMetrics predict_attributes(const MatrixF& items, const std::vector<std::vector<int>>& truth,
                                         const MatrixF& label_embeddings);

/// Category and attribute metrics over the positive items of `data` (multimodal encodings).
std::pair<ClassificationMetrics, ClassificationMetrics> evaluate_classification(const Encoder<float>& encoder,
                                                                                const std::vector<Triplet>& data,
                                                                                const LabelSet& labels);

/// Last-layer head-averaged attention (S x S) with token labels.
struct Heatmap {
  std::vector<std::string> labels;
  MatrixF grid;
};

Heatmap attention_heatmap(const Encoder<float>& encoder, const ProductContent& content, Modality modality);

/// Writes <out_prefix>.csv and <out_prefix>.pgm; returns both paths.
std::pair<std::filesystem::path, std::filesystem::path> export_heatmap(const Heatmap& heatmap,
                                                                       const std::filesystem::path& out_prefix);

struct MetricsReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<TaskResult> retrieval;
  std::optional<ClassificationMetrics> classification;
  std::optional<ClassificationMetrics> attributes;
  double runtime_seconds = 0;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

std::string report_text(const MetricsReport& report);
std::string report_csv(const MetricsReport& report);

/// Writes <dir>/report.txt, <dir>/report.csv and <dir>/results.json.
void write_report(const MetricsReport& report, const std::filesystem::path& dir);

}  // namespace moon
