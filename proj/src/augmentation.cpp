#include "moon/augmentation.hpp"

#include "moon/checkpoint.hpp"
#include "moon/hash.hpp"

#include <Eigen/SVD>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

namespace moon {

std::vector<std::string> EntitySet::texts() const {
  std::vector<std::string> out;
  for (const auto& e : entities) out.push_back(e.text);
  return out;
}

bool EntitySet::contains(const std::string& text) const {
  return std::any_of(entities.begin(), entities.end(), [&](const Entity& e) { return e.text == text; });
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

EntitySet extract_entities(const std::string& title, const std::string& description,
                           const std::set<std::string>& lexicon) {
  const auto t = split_words(title);
  if (t.empty()) throw ValidationError("extract_entities: empty title");
  const auto d = split_words(description);
  const std::set<std::string> dset(d.begin(), d.end());
  EntitySet out;
  auto add = [&](const std::string& w, EntitySource src) {
    if (!out.contains(w)) out.entities.push_back({w, src});
  };
  for (const auto& w : t)
    if (dset.count(w)) add(w, EntitySource::kTitle);
  for (const auto& w : d)
    if (lexicon.count(w)) add(w, EntitySource::kDescription);
  for (const auto& w : t)
    if (lexicon.count(w)) add(w, EntitySource::kTitle);
  return out;
}

std::vector<std::string> MockEnrichmentClient::enrich(const std::vector<std::string>& title, const MatrixF&,
                                                      const EntitySet& entities) {
  std::vector<std::string> out = title;
  for (const auto& e : entities.entities)
    if (std::find(out.begin(), out.end(), e.text) == out.end()) out.push_back(e.text);
  if (static_cast<int>(out.size()) > max_len_) out.resize(static_cast<std::size_t>(max_len_));
  return out;
}

MatrixF MockEditClient::extract_subject(const MatrixF& image) {
  const Eigen::MatrixXd x = image.cast<double>();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::MatrixXd main = svd.singularValues()(0) * svd.matrixU().col(0) * svd.matrixV().col(0).transpose();
  const Eigen::MatrixXd residual = x - main;
  const double rms = std::sqrt(residual.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(residual.size(), 1)));
  const double cut = threshold_ * rms;
  const Eigen::MatrixXd shrunk =
      residual.unaryExpr([cut](double r) { return r > cut ? r - cut : (r < -cut ? r + cut : 0.0); });
  return (main + shrunk).cast<float>();
}

MatrixF MockEditClient::edit(const MatrixF& subject, const std::vector<std::string>&, const std::string& prompt) {
  const Eigen::Index f = subject.cols();
  std::mt19937_64 rng(fnv1a64(prompt, 0xcbf29ce484222325ULL ^ seed_));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(f, f);
  const double s = rotation_scale_ / std::sqrt(static_cast<double>(f));
  for (Eigen::Index i = 0; i < f; ++i)
    for (Eigen::Index j = i + 1; j < f; ++j) {
      a(i, j) = s * normal(rng);
      a(j, i) = -a(i, j);
    }
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(f, f);
  const Eigen::MatrixXd rotation = (id - a).partialPivLu().solve(id + a);
  const Eigen::MatrixXd x = subject.cast<double>();
  const double rms = std::sqrt(x.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(x.size(), 1)));
  Eigen::RowVectorXd bias(f);
  for (Eigen::Index j = 0; j < f; ++j) bias(j) = bias_scale_ * rms * normal(rng);
  Eigen::MatrixXd out = x * rotation;
  out.rowwise() += bias;
  return out.cast<float>();
}

std::vector<std::string> default_prompt_templates() {
  return {"place the product on a plain studio background", "show the product from a three-quarter angle",
          "zoom in on the fabric and stitching detail"};
}

std::string variant_prompt(const std::vector<std::string>& templates, int k) {
  if (templates.empty()) throw ValidationError("prompt templates are empty");
  const auto n = static_cast<int>(templates.size());
  std::string p = templates[static_cast<std::size_t>(k % n)];
  if (k >= n) p += " (variation " + std::to_string(k / n + 1) + ")";
  return p;
}

VisualExpansion expand_visual(const MatrixF& image, const std::vector<std::string>& title, int n, EditClient& client,
                              const std::vector<std::string>& templates) {
  if (n < 0) throw ValidationError("expand_visual: n must be >= 0");
  VisualExpansion out;
  out.subject = client.extract_subject(image);
  if (out.subject.rows() != image.rows() || out.subject.cols() != image.cols())
    throw ValidationError("extract_subject changed the image shape");
  for (int k = 0; k < n; ++k) {
    out.prompts.push_back(variant_prompt(templates, k));
    MatrixF v = client.edit(out.subject, title, out.prompts.back());
    if (v.rows() != image.rows() || v.cols() != image.cols()) throw ValidationError("edit changed the image shape");
    out.variants.push_back(std::move(v));
  }
  return out;
}

std::vector<std::size_t> filter_by_score(const std::vector<double>& scores, double threshold) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= threshold) kept.push_back(i);
  return kept;
}

SimilarityFilterResult similarity_filter(const std::vector<MatrixF>& candidates, const std::vector<int>& title,
                                         const Encoder<float>& reference, double threshold) {
  SimilarityFilterResult out;
  ProductContent text;
  text.title = title;
  const Eigen::RowVectorXd t = reference.encode(text, Modality::kText).cast<double>().normalized();
  for (const auto& c : candidates) {
    ProductContent img;
    img.image = c;
    const Eigen::RowVectorXd e = reference.encode(img, Modality::kImage).cast<double>().normalized();
    out.scores.push_back(e.dot(t));
  }
  out.kept = filter_by_score(out.scores, threshold);
  return out;
}

std::size_t AugmentationReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const RecordReport& r) { return !r.error.empty(); }));
}

std::size_t AugmentationReport::candidates_generated() const {
  std::size_t n = 0;
  for (const auto& r : records)
    for (const auto& i : r.items) n += i.generated;
  return n;
}

std::size_t AugmentationReport::candidates_kept() const {
  std::size_t n = 0;
  for (const auto& r : records)
    for (const auto& i : r.items) n += i.kept;
  return n;
}

std::string RecordReport::to_json() const {
  nlohmann::ordered_json j;
  j["triplet_id"] = triplet_id;
  nlohmann::ordered_json items_json = nlohmann::ordered_json::array();
  for (const auto& i : items) {
    nlohmann::ordered_json ij;
    ij["role"] = i.role;
    ij["entities"] = i.entities;
    ij["prompts"] = i.prompts;
    ij["generated"] = i.generated;
    ij["kept"] = i.kept;
    ij["scores"] = i.scores;
    ij["all_filtered"] = i.all_filtered;
    items_json.push_back(std::move(ij));
  }
  j["items"] = std::move(items_json);
  if (!error.empty()) j["error"] = error;
  return j.dump();
}

namespace {

std::vector<std::string> words_of(const std::vector<int>& ids) {
  std::vector<std::string> out;
  for (int id : ids) out.push_back(token_word(id));
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

ItemReport augment_item(ProductContent& item, const std::string& role, const std::string& record_id,
                        const AugmentationClients& clients, const AugmentationConfig& config, int text_len,
                        const Encoder<float>& reference) {
  ItemReport rep;
  rep.role = role;
  const auto title_words = words_of(item.title);
  const EntitySet entities = extract_entities(join(title_words), join(words_of(item.description)), config.lexicon);
  rep.entities = entities.texts();

  std::vector<std::string> enriched = clients.enrichment->enrich(title_words, item.image, entities);
  if (enriched.empty()) throw AugmentationError(record_id, role + ": enrichment returned an empty title");
  if (static_cast<int>(enriched.size()) > text_len) enriched.resize(static_cast<std::size_t>(text_len));
  std::vector<int> enriched_ids;
  for (const auto& w : enriched) {
    const auto id = word_token(w);
    if (!id) throw AugmentationError(record_id, role + ": enrichment produced unknown word `" + w + "`");
    enriched_ids.push_back(*id);
  }

  VisualExpansion exp = expand_visual(item.image, title_words, config.variants, *clients.edit, config.prompt_templates);
  rep.prompts = exp.prompts;
  std::vector<MatrixF> candidates;
  candidates.push_back(std::move(exp.subject));
  for (auto& v : exp.variants) candidates.push_back(std::move(v));
  rep.generated = candidates.size();

  const SimilarityFilterResult filtered = similarity_filter(candidates, item.title, reference, config.similarity_threshold);
  rep.scores = filtered.scores;
  std::vector<MatrixF> kept;
  for (std::size_t idx : filtered.kept) {
    if (static_cast<int>(kept.size()) >= config.max_aug_images) break;
    kept.push_back(candidates[idx]);
  }
  rep.kept = kept.size();
  rep.all_filtered = filtered.kept.empty();
  item.enriched_title = std::move(enriched_ids);
  item.aug_images = std::move(kept);
  return rep;
}

Encoder<float> make_reference(const AugmentationConfig& config) {
  if (!config.reference_checkpoint.empty()) return encoder_from_checkpoint(load_checkpoint(config.reference_checkpoint));
  return Encoder<float>(config.reference, config.seed);
}

}  // namespace

AugmentationReport co_augment(std::vector<Triplet>& triplets, const AugmentationClients& clients,
                              const AugmentationConfig& config, int text_len) {
  if (!clients.enrichment || !clients.edit) throw ConfigError("co_augment: both clients are required");
  if (config.max_aug_images < 0 || config.variants < 0) throw ConfigError("co_augment: counts must be >= 0");
  const Encoder<float> reference = make_reference(config);
  AugmentationReport report;
  for (Triplet& t : triplets) {
    RecordReport rec;
    rec.triplet_id = t.triplet_id;
    ProductContent pos = t.positive, neg = t.negative;
    try {
      rec.items.push_back(augment_item(pos, "positive", t.triplet_id, clients, config, text_len, reference));
      rec.items.push_back(augment_item(neg, "negative", t.triplet_id, clients, config, text_len, reference));
      t.positive = std::move(pos);
      t.negative = std::move(neg);
    } catch (const AugmentationError& e) {
      rec.error = e.what();
      rec.items.clear();
    } catch (const std::exception& e) {
      rec.error = AugmentationError(t.triplet_id, e.what()).what();
      rec.items.clear();
    }
    report.records.push_back(std::move(rec));
  }
  return report;
}

AugmentationReport co_augment_dataset(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                      const std::filesystem::path& report_path, const AugmentationClients& clients,
                                      const AugmentationConfig& config, int text_len) {
  std::vector<Triplet> triplets = load_triplets(in_path);
  AugmentationReport report = co_augment(triplets, clients, config, text_len);
  write_triplets(out_path, triplets);
  std::ofstream out(report_path, std::ios::trunc);
  if (!out) throw IoError("cannot open augmentation report: " + report_path.string());
  for (const auto& r : report.records) out << r.to_json() << '\n';
  if (!out) throw IoError("failed writing augmentation report: " + report_path.string());
  return report;
}

std::set<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon: " + path.string());
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line))
    for (auto& w : split_words(line)) out.insert(std::move(w));
  return out;
}

}  // namespace moon
