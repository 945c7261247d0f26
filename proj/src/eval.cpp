#include "moon/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace moon {

std::string RetrievalTask::name() const {
  return std::string(modality_name(query)) + "2" + std::string(modality_name(candidate));
}

RetrievalTask parse_task(std::string_view name) {
  const auto pos = name.find('2');
  if (pos == std::string_view::npos) throw ValidationError("task `" + std::string(name) + "` must look like t2mm");
  return {parse_modality(name.substr(0, pos)), parse_modality(name.substr(pos + 1))};
}

std::vector<RetrievalTask> parse_tasks(std::string_view list) {
  std::vector<RetrievalTask> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    if (end > start) out.push_back(parse_task(list.substr(start, end - start)));
    start = end + 1;
  }
  if (out.empty()) throw ValidationError("no retrieval tasks given");
  return out;
}

std::vector<RetrievalTask> paper_tasks() {
  return {{Modality::kText, Modality::kMultimodal},
          {Modality::kImage, Modality::kMultimodal},
          {Modality::kMultimodal, Modality::kMultimodal},
          {Modality::kText, Modality::kImage},
          {Modality::kImage, Modality::kText}};
}

std::ptrdiff_t EmbeddingIndex::find(const std::string& id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  return it == ids.end() ? -1 : it - ids.begin();
}

EmbeddingIndex make_index(std::vector<std::string> ids, MatrixF embeddings) {
  if (ids.empty()) throw ValidationError("index needs at least one item");
  if (static_cast<Eigen::Index>(ids.size()) != embeddings.rows()) throw ValidationError("index id/row count mismatch");
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    const float n = embeddings.row(r).norm();
    if (!(n > 0) || !std::isfinite(n)) throw NumericError("cannot normalise embedding of " + ids[static_cast<std::size_t>(r)]);
    embeddings.row(r) /= n;
  }
  return {std::move(ids), std::move(embeddings)};
}

EmbeddingIndex build_index(const std::vector<Item>& candidates, Modality modality, const Encoder<float>& encoder) {
  if (candidates.empty()) throw ValidationError("candidate set is empty");
  std::vector<std::string> ids;
  MatrixF emb(static_cast<Eigen::Index>(candidates.size()), encoder.config().hidden);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& [id, content] = candidates[i];
    if (modality != Modality::kImage && !content->has_text())
      throw ValidationError("candidate " + id + " has no text for modality " + std::string(modality_name(modality)));
    if (modality != Modality::kText && !content->has_image())
      throw ValidationError("candidate " + id + " has no image for modality " + std::string(modality_name(modality)));
    emb.row(static_cast<Eigen::Index>(i)) = encoder.encode(*content, modality);
    ids.push_back(id);
  }
  return make_index(std::move(ids), std::move(emb));
}

namespace {
double score(const float* a, const float* b, Eigen::Index d) {
  double s = 0;
  for (Eigen::Index i = 0; i < d; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}
}  // namespace

std::size_t rank_of(const EmbeddingIndex& index, const RowVector<float>& query, std::size_t target) {
  const Eigen::Index d = index.embeddings.cols();
  if (query.cols() != d) throw ValidationError("query dimension does not match index");
  const double ts = score(index.embeddings.row(static_cast<Eigen::Index>(target)).data(), query.data(), d);
  const std::string& tid = index.ids[target];
  std::size_t rank = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (i == target) continue;
    const double s = score(index.embeddings.row(static_cast<Eigen::Index>(i)).data(), query.data(), d);
    if (s > ts || (s == ts && index.ids[i] < tid)) ++rank;
  }
  return rank;
}

std::map<int, double> recall_at_ks(const EmbeddingIndex& queries, const std::map<std::string, std::string>& ground_truth,
                                   const EmbeddingIndex& index, const std::vector<int>& ks) {
  if (queries.size() == 0) throw ValidationError("no queries");
  for (int k : ks)
    if (k < 1) throw ValidationError("k must be >= 1");
  std::map<int, std::size_t> hits;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto gt = ground_truth.find(queries.ids[q]);
    if (gt == ground_truth.end()) throw ValidationError("query " + queries.ids[q] + " has no ground truth");
    const auto target = index.find(gt->second);
    if (target < 0) throw ValidationError("ground truth " + gt->second + " is not in the index");
    const std::size_t r = rank_of(index, queries.embeddings.row(static_cast<Eigen::Index>(q)), static_cast<std::size_t>(target));
    for (int k : ks)
      if (r < static_cast<std::size_t>(k)) ++hits[k];
  }
  std::map<int, double> out;
  for (int k : ks) out[k] = static_cast<double>(hits[k]) / static_cast<double>(queries.size());
  return out;
}

double recall_at_k(const EmbeddingIndex& queries, const std::map<std::string, std::string>& ground_truth,
                   const EmbeddingIndex& index, int k) {
  return recall_at_ks(queries, ground_truth, index, {k}).at(k);
}

std::vector<TaskResult> evaluate_retrieval(const Encoder<float>& encoder, const std::vector<Triplet>& test,
                                           const std::vector<RetrievalTask>& tasks, const std::vector<int>& ks) {
  std::vector<Item> queries, candidates;
  std::map<std::string, std::string> truth;
  for (const auto& t : test) {
    queries.emplace_back(t.triplet_id, &t.query);
    candidates.emplace_back(t.triplet_id + "/pos", &t.positive);
    candidates.emplace_back(t.triplet_id + "/neg", &t.negative);
    truth[t.triplet_id] = t.triplet_id + "/pos";
  }
  std::map<Modality, EmbeddingIndex> query_cache, candidate_cache;
  std::vector<TaskResult> out;
  for (const auto& task : tasks) {
    if (!query_cache.count(task.query)) query_cache.emplace(task.query, build_index(queries, task.query, encoder));
    if (!candidate_cache.count(task.candidate))
      candidate_cache.emplace(task.candidate, build_index(candidates, task.candidate, encoder));
    out.push_back({task.name(), recall_at_ks(query_cache.at(task.query), truth, candidate_cache.at(task.candidate), ks)});
  }
  return out;
}

ClassificationMetrics single_label_metrics(const std::vector<int>& truth, const std::vector<int>& predicted,
                                           int label_count) {
  std::vector<std::vector<int>> t, p;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    t.push_back({truth[i]});
    p.push_back({predicted[i]});
    correct += truth[i] == predicted[i];
  }
  ClassificationMetrics m = multi_label_metrics(t, p, label_count);
  m.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  return m;
}

ClassificationMetrics multi_label_metrics(const std::vector<std::vector<int>>& truth,
                                          const std::vector<std::vector<int>>& predicted, int label_count) {
  if (truth.size() != predicted.size()) throw ValidationError("truth/prediction count mismatch");
  std::vector<std::size_t> tp(static_cast<std::size_t>(label_count)), fp(tp.size()), fn(tp.size());
  std::size_t exact = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const std::set<int> t(truth[i].begin(), truth[i].end()), p(predicted[i].begin(), predicted[i].end());
    for (int l : t)
      if (l < 0 || l >= label_count) throw ValidationError("unknown label id " + std::to_string(l));
    exact += t == p;
    for (int l : p) (t.count(l) ? tp : fp)[static_cast<std::size_t>(l)]++;
    for (int l : t)
      if (!p.count(l)) fn[static_cast<std::size_t>(l)]++;
  }
  ClassificationMetrics m;
  m.items = truth.size();
  m.accuracy = truth.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(truth.size());
  // Macro averages over labels that occur in the truth or the predictions.
  std::size_t labels = 0;
  for (std::size_t l = 0; l < tp.size(); ++l) {
    if (tp[l] + fp[l] + fn[l] == 0) continue;
    ++labels;
    const double p = tp[l] + fp[l] ? static_cast<double>(tp[l]) / static_cast<double>(tp[l] + fp[l]) : 0.0;
    const double r = tp[l] + fn[l] ? static_cast<double>(tp[l]) / static_cast<double>(tp[l] + fn[l]) : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  if (labels > 0) {
    m.precision /= static_cast<double>(labels);
    m.recall /= static_cast<double>(labels);
    m.f1 /= static_cast<double>(labels);
  }
  return m;
}

std::vector<int> top_labels(const RowVector<float>& item, const MatrixF& label_embeddings, int r) {
  const auto n = static_cast<int>(label_embeddings.rows());
  if (r < 1 || r > n) throw ValidationError("top_labels: r must lie in [1, label count]");
  std::vector<double> s(static_cast<std::size_t>(n));
  for (int l = 0; l < n; ++l) s[static_cast<std::size_t>(l)] = score(label_embeddings.row(l).data(), item.data(), item.cols());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return s[static_cast<std::size_t>(a)] > s[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(r));
  return order;
}

MatrixF encode_labels(const std::vector<std::vector<int>>& label_names, const Encoder<float>& encoder) {
  if (label_names.empty()) throw ValidationError("label names are empty");
  MatrixF out(static_cast<Eigen::Index>(label_names.size()), encoder.config().hidden);
  for (std::size_t l = 0; l < label_names.size(); ++l) {
    ProductContent c;
    c.title = label_names[l];
    out.row(static_cast<Eigen::Index>(l)) = encoder.encode(c, Modality::kText);
  }
  return out;
}

ClassificationMetrics classify_zero_shot(const MatrixF& items, const std::vector<int>& truth,
                                         const MatrixF& label_embeddings) {
  if (label_embeddings.rows() == 0) throw ValidationError("label names are empty");
  std::vector<int> pred;
  for (Eigen::Index i = 0; i < items.rows(); ++i) pred.push_back(top_labels(items.row(i), label_embeddings, 1)[0]);
  return single_label_metrics(truth, pred, static_cast<int>(label_embeddings.rows()));
}

ClassificationMetrics predict_attributes(const MatrixF& items, const std::vector<std::vector<int>>& truth,
                                         const MatrixF& label_embeddings) {
  if (label_embeddings.rows() == 0) throw ValidationError("label names are empty");
  std::vector<std::vector<int>> pred;
  for (Eigen::Index i = 0; i < items.rows(); ++i) {
    const auto r = static_cast<int>(truth[static_cast<std::size_t>(i)].size());
    pred.push_back(r == 0 ? std::vector<int>{} : top_labels(items.row(i), label_embeddings, r));
  }
  return multi_label_metrics(truth, pred, static_cast<int>(label_embeddings.rows()));
}

std::pair<ClassificationMetrics, ClassificationMetrics> evaluate_classification(const Encoder<float>& encoder,
                                                                                const std::vector<Triplet>& data,
                                                                                const LabelSet& labels) {
  std::vector<const ProductContent*> items;
  for (const auto& t : data)
    if (t.positive.category_label && t.positive.attribute_labels) items.push_back(&t.positive);
  if (items.empty()) throw ValidationError("no labelled items to classify");
  MatrixF emb(static_cast<Eigen::Index>(items.size()), encoder.config().hidden);
  std::vector<int> categories;
  std::vector<std::vector<int>> attributes;
  for (std::size_t i = 0; i < items.size(); ++i) {
    emb.row(static_cast<Eigen::Index>(i)) = encoder.encode(*items[i], Modality::kMultimodal);
    categories.push_back(*items[i]->category_label);
    attributes.push_back(*items[i]->attribute_labels);
  }
  const MatrixF cat = encode_labels(labels.categories, encoder);
  const MatrixF attr = encode_labels(labels.attributes, encoder);
  for (int c : categories)
    if (c < 0 || c >= cat.rows()) throw ValidationError("unknown category id " + std::to_string(c));
  return {classify_zero_shot(emb, categories, cat), predict_attributes(emb, attributes, attr)};
}

Heatmap attention_heatmap(const Encoder<float>& encoder, const ProductContent& content, Modality modality) {
  if (encoder.config().layers < 1) throw ValidationError("heatmap needs at least one layer");
  const auto maps = encoder.attention_weights(content, modality);
  const auto& last = maps.back();
  Heatmap h;
  h.labels = sequence_layout(content, modality, encoder.config()).labels;
  h.grid = MatrixF::Zero(last[0].rows(), last[0].cols());
  for (const auto& m : last) h.grid += m;
  h.grid /= static_cast<float>(last.size());
  return h;
}

std::pair<std::filesystem::path, std::filesystem::path> export_heatmap(const Heatmap& heatmap,
                                                                       const std::filesystem::path& out_prefix) {
  const auto s = heatmap.grid.rows();
  if (static_cast<Eigen::Index>(heatmap.labels.size()) != s || heatmap.grid.cols() != s)
    throw ValidationError("heatmap grid and labels disagree");
  std::filesystem::path csv = out_prefix, pgm = out_prefix;
  csv += ".csv";
  pgm += ".pgm";
  {
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw IoError("cannot write " + csv.string());
    out << "position";
    for (const auto& l : heatmap.labels) out << ',' << l;
    out << '\n';
    char buf[32];
    for (Eigen::Index r = 0; r < s; ++r) {
      out << heatmap.labels[static_cast<std::size_t>(r)];
      for (Eigen::Index c = 0; c < s; ++c) {
        std::snprintf(buf, sizeof buf, "%.8g", static_cast<double>(heatmap.grid(r, c)));
        out << ',' << buf;
      }
      out << '\n';
    }
    if (!out) throw IoError("failed writing " + csv.string());
  }
  {
    std::ofstream out(pgm, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + pgm.string());
    out << "P5\n" << s << ' ' << s << "\n255\n";
    const float mx = heatmap.grid.maxCoeff();
    for (Eigen::Index r = 0; r < s; ++r)
      for (Eigen::Index c = 0; c < s; ++c) {
        const float v = mx > 0 ? heatmap.grid(r, c) / mx : 0.0f;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
      }
    if (!out) throw IoError("failed writing " + pgm.string());
  }
  return {csv, pgm};
}

namespace {

nlohmann::ordered_json metrics_json(const ClassificationMetrics& m) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["items"] = m.items;
  return j;
}

ClassificationMetrics metrics_from(const nlohmann::ordered_json& j) {
  ClassificationMetrics m;
  m.accuracy = j.at("accuracy").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.items = j.at("items").get<std::size_t>();
  return m;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Header row plus data rows as plain cells.
std::vector<std::vector<std::string>> table_rows(const MetricsReport& r) {
  std::vector<std::vector<std::string>> rows{{"section", "name", "metric", "value"}};
  for (const auto& t : r.retrieval)
    for (const auto& [k, v] : t.recall) rows.push_back({"retrieval", t.task, "R@" + std::to_string(k), fmt(v)});
  auto add_cls = [&](const char* name, const std::optional<ClassificationMetrics>& m) {
    if (!m) return;
    rows.push_back({"classification", name, "accuracy", fmt(m->accuracy)});
    rows.push_back({"classification", name, "precision", fmt(m->precision)});
    rows.push_back({"classification", name, "recall", fmt(m->recall)});
    rows.push_back({"classification", name, "f1", fmt(m->f1)});
  };
  add_cls("category", r.classification);
  add_cls("attribute", r.attributes);
  return rows;
}

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const auto& t : retrieval) {
    nlohmann::ordered_json tj;
    tj["task"] = t.task;
    nlohmann::ordered_json rec = nlohmann::ordered_json::object();
    for (const auto& [k, v] : t.recall) rec[std::to_string(k)] = v;
    tj["recall"] = rec;
    tasks.push_back(tj);
  }
  j["retrieval"] = tasks;
  if (classification) j["classification"] = metrics_json(*classification);
  if (attributes) j["attributes"] = metrics_json(*attributes);
  j["runtime_seconds"] = runtime_seconds;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  MetricsReport r;
  try {
    const auto j = nlohmann::ordered_json::parse(text);
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& tj : j.at("retrieval")) {
      TaskResult t;
      t.task = tj.at("task").get<std::string>();
      for (const auto& [k, v] : tj.at("recall").items()) t.recall[std::stoi(k)] = v.get<double>();
      r.retrieval.push_back(std::move(t));
    }
    if (j.contains("classification")) r.classification = metrics_from(j["classification"]);
    if (j.contains("attributes")) r.attributes = metrics_from(j["attributes"]);
    r.runtime_seconds = j.value("runtime_seconds", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("malformed results file: ") + e.what());
  }
  return r;
}

std::string report_text(const MetricsReport& r) {
  if (r.retrieval.empty() && !r.classification && !r.attributes) throw ValidationError("report has no results");
  const auto rows = table_rows(r);
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  out << "config_hash: " << r.config_hash << "\nseed: " << r.seed << "\nruntime_seconds: " << fmt(r.runtime_seconds)
      << "\n\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      if (c) out << "  ";
      const bool numeric = c + 1 == rows[i].size();
      out << (numeric ? std::right : std::left) << std::setw(static_cast<int>(width[c])) << rows[i][c];
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

std::string report_csv(const MetricsReport& r) {
  if (r.retrieval.empty() && !r.classification && !r.attributes) throw ValidationError("report has no results");
  std::ostringstream out;
  out << "# config_hash=" << r.config_hash << ",seed=" << r.seed << '\n';
  for (const auto& row : table_rows(r)) {
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << row[c];
    out << '\n';
  }
  return out.str();
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, std::string> files[] = {
      {"report.txt", report_text(report)}, {"report.csv", report_csv(report)}, {"results.json", report.to_json() + "\n"}};
  for (const auto& [name, text] : files) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << text;
    if (!out) throw IoError("failed writing " + (dir / name).string());
  }
}

}  // namespace moon
