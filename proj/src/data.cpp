#include "moon/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace moon {

namespace {

// Insertion-ordered JSON with float32 numbers so features print in their
// shortest float form.
using Json = nlohmann::basic_json<nlohmann::ordered_map, std::vector, std::string, bool, std::int64_t, std::uint64_t,
                                  float>;

Json matrix_to_json(const MatrixF& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixF matrix_from_json(const Json& j) {
  if (!j.is_array()) throw ValidationError("feature matrix must be an array of rows");
  if (j.empty()) return {};
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  MatrixF m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ValidationError("feature matrix rows have inconsistent length");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<float>();
  }
  return m;
}

Json content_to_json(const ProductContent& p) {
  Json j = Json::object();
  j["title"] = p.title;
  if (p.enriched_title) j["enriched_title"] = *p.enriched_title;
  if (!p.description.empty()) j["description"] = p.description;
  j["image"] = matrix_to_json(p.image);
  if (!p.aug_images.empty()) {
    Json aug = Json::array();
    for (const auto& a : p.aug_images) aug.push_back(matrix_to_json(a));
    j["aug_images"] = std::move(aug);
  }
  if (p.category_label) j["category_label"] = *p.category_label;
  if (p.attribute_labels) j["attribute_labels"] = *p.attribute_labels;
  return j;
}

ProductContent content_from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("product content must be an object");
  ProductContent p;
  p.title = j.at("title").get<std::vector<int>>();
  if (j.contains("enriched_title")) p.enriched_title = j["enriched_title"].get<std::vector<int>>();
  if (j.contains("description")) p.description = j["description"].get<std::vector<int>>();
  p.image = matrix_from_json(j.at("image"));
  if (j.contains("aug_images"))
    for (const auto& a : j["aug_images"]) p.aug_images.push_back(matrix_from_json(a));
  if (j.contains("category_label")) p.category_label = j["category_label"].get<int>();
  if (j.contains("attribute_labels")) p.attribute_labels = j["attribute_labels"].get<std::vector<int>>();
  return p;
}

// --- synthetic world -------------------------------------------------------

struct World {
  const DatasetManifest& m;
  Eigen::MatrixXd image_map;       // (P*F) x latent
  Eigen::MatrixXd topic_map;       // topics x latent
  Eigen::MatrixXd category_protos; // categories x latent
  Eigen::MatrixXd attribute_map;   // attributes x latent
  int block = 0;                   // tokens per topic
  std::vector<double> zipf;        // rank weights within a topic block

  World(const DatasetManifest& manifest, std::mt19937_64& rng) : m(manifest) {
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](Eigen::MatrixXd& mat, Eigen::Index r, Eigen::Index c, double s) {
      mat.resize(r, c);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index k = 0; k < c; ++k) mat(i, k) = s * normal(rng);
    };
    // Unit-norm latents give unit-variance clean features.
    fill(image_map, static_cast<Eigen::Index>(m.patches) * m.patch_dim, m.latent_dim, 1.0);
    fill(topic_map, m.topics, m.latent_dim, 1.0);
    fill(category_protos, m.categories, m.latent_dim, 1.0);
    fill(attribute_map, m.attributes, m.latent_dim, 1.0);
    block = (m.vocab_size - 1) / m.topics;
    for (int r = 0; r < block; ++r) zipf.push_back(1.0 / (r + 1.0));
  }

  int topic_token(int topic, int rank) const { return 1 + topic * block + rank; }

  Eigen::VectorXd topic_probs(const Eigen::VectorXd& z) const {
    Eigen::VectorXd logits = m.topic_sharpness * (topic_map * z);
    logits.array() -= logits.maxCoeff();
    Eigen::VectorXd p = logits.array().exp();
    return p / p.sum();
  }

  std::vector<int> sample_tokens(const Eigen::VectorXd& z, int count, double background, std::mt19937_64& rng) const {
    const Eigen::VectorXd tp = topic_probs(z);
    std::discrete_distribution<int> topic_dist(tp.data(), tp.data() + tp.size());
    std::discrete_distribution<int> rank_dist(zipf.begin(), zipf.end());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> any(1, m.vocab_size - 1);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      if (unit(rng) < background) {
        out.push_back(any(rng));
      } else {
        out.push_back(topic_token(topic_dist(rng), rank_dist(rng)));
      }
    }
    return out;
  }

  ProductContent product(const Eigen::VectorXd& z, bool labelled, std::mt19937_64& rng) const {
    ProductContent p;
    std::uniform_int_distribution<int> len(std::max(1, m.text_len / 2), m.text_len);
    p.title = sample_tokens(z, len(rng), m.background_rate, rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd feats = image_map * z;
    for (Eigen::Index i = 0; i < feats.size(); ++i) feats(i) += m.image_noise * normal(rng);
    p.image.resize(m.patches, m.patch_dim);
    for (int r = 0; r < m.patches; ++r)
      for (int c = 0; c < m.patch_dim; ++c) p.image(r, c) = static_cast<float>(feats(r * m.patch_dim + c));
    if (labelled) {
      p.description = sample_tokens(z, m.description_len, std::min(1.0, 3.0 * m.background_rate), rng);
      Eigen::Index cat = 0;
      (category_protos * z).maxCoeff(&cat);
      p.category_label = static_cast<int>(cat);
      const Eigen::VectorXd scores = attribute_map * z;
      std::vector<int> order(static_cast<std::size_t>(m.attributes));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
      std::vector<int> attrs(order.begin(), order.begin() + m.attributes_per_item);
      std::sort(attrs.begin(), attrs.end());
      p.attribute_labels = attrs;
    }
    return p;
  }

  // Most probable tokens under the topic mixture of a prototype direction.
  std::vector<int> name_tokens(const Eigen::VectorXd& proto, int count) const {
    const Eigen::VectorXd tp = topic_probs(proto.normalized());
    std::vector<std::pair<double, int>> scored;
    const double zsum = std::accumulate(zipf.begin(), zipf.end(), 0.0);
    for (int k = 0; k < m.topics; ++k)
      for (int r = 0; r < block; ++r) scored.emplace_back(tp(k) * zipf[static_cast<std::size_t>(r)] / zsum, topic_token(k, r));
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<int> out;
    for (int i = 0; i < count && i < static_cast<int>(scored.size()); ++i) out.push_back(scored[static_cast<std::size_t>(i)].second);
    return out;
  }
};

Eigen::VectorXd random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = normal(rng);
  return v.normalized();
}

std::string make_id(const char* split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%06d", split, index);
  return buf;
}

void check_content(const ProductContent& p, const DatasetManifest& m, const std::string& where) {
  auto check_tokens = [&](const std::vector<int>& ids, const char* field) {
    if (static_cast<int>(ids.size()) > m.text_len && std::string(field) != "description")
      throw ValidationError(where + "." + field + " longer than text_len");
    for (int id : ids)
      if (id < 0 || id >= m.vocab_size) throw ValidationError(where + "." + field + " token out of vocabulary range");
  };
  check_tokens(p.title, "title");
  if (p.enriched_title) check_tokens(*p.enriched_title, "enriched_title");
  check_tokens(p.description, "description");
  auto check_image = [&](const MatrixF& img, const std::string& field) {
    if (img.rows() != m.patches || img.cols() != m.patch_dim)
      throw ValidationError(where + "." + field + " has shape " + std::to_string(img.rows()) + "x" +
                            std::to_string(img.cols()) + ", manifest expects " + std::to_string(m.patches) + "x" +
                            std::to_string(m.patch_dim));
  };
  check_image(p.image, "image");
  for (const auto& a : p.aug_images) check_image(a, "aug_images");
  if (static_cast<int>(p.aug_images.size()) > m.aug_images) throw ValidationError(where + " carries more than n_c aug_images");
}

}  // namespace

Modality parse_modality(std::string_view s) {
  if (s == "t" || s == "text") return Modality::kText;
  if (s == "i" || s == "image") return Modality::kImage;
  if (s == "mm" || s == "multimodal") return Modality::kMultimodal;
  throw ValidationError("unknown modality `" + std::string(s) + "`");
}

void DatasetManifest::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ValidationError(std::string("manifest.") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(patches, "patches");
  positive(patch_dim, "patch_dim");
  positive(text_len, "text_len");
  positive(latent_dim, "latent_dim");
  positive(topics, "topics");
  positive(categories, "categories");
  positive(attributes, "attributes");
  positive(description_len, "description_len");
  if (aug_images < 0) throw ValidationError("manifest.aug_images must be >= 0");
  if (train_count < 0 || test_count < 0) throw ValidationError("manifest counts must be >= 0");
  if (attributes_per_item < 0 || attributes_per_item > attributes)
    throw ValidationError("manifest.attributes_per_item must lie in [0, attributes]");
  if ((vocab_size - 1) / topics < 1) throw ValidationError("manifest.vocab_size too small for topic count");
  if (!(hardness_cap > -1.0 && hardness_cap <= 1.0)) throw ValidationError("manifest.hardness_cap must lie in (-1, 1]");
  if (positive_noise < 0 || image_noise < 0) throw ValidationError("manifest noise levels must be >= 0");
  if (background_rate < 0 || background_rate > 1) throw ValidationError("manifest.background_rate must lie in [0, 1]");
  if (flip_rate && (*flip_rate < 0 || *flip_rate >= 1)) throw ValidationError("manifest.flip_rate must lie in [0, 1)");
}

KvConfig DatasetManifest::to_kv() const {
  KvConfig kv;
  kv.set("vocab_size", vocab_size);
  kv.set("patches", patches);
  kv.set("patch_dim", patch_dim);
  kv.set("text_len", text_len);
  kv.set("aug_images", aug_images);
  kv.set("latent_dim", latent_dim);
  kv.set("seed", seed);
  kv.set("train_count", train_count);
  kv.set("test_count", test_count);
  if (flip_rate) kv.set("flip_rate", *flip_rate);
  kv.set("topics", topics);
  kv.set("categories", categories);
  kv.set("attributes", attributes);
  kv.set("attributes_per_item", attributes_per_item);
  kv.set("hardness_cap", hardness_cap);
  kv.set("positive_noise", positive_noise);
  kv.set("image_noise", image_noise);
  kv.set("topic_sharpness", topic_sharpness);
  kv.set("background_rate", background_rate);
  kv.set("description_len", description_len);
  return kv;
}

DatasetManifest DatasetManifest::from_kv(const KvConfig& kv) {
  DatasetManifest d;
  d.vocab_size = kv.get_int("vocab_size", d.vocab_size);
  d.patches = kv.get_int("patches", d.patches);
  d.patch_dim = kv.get_int("patch_dim", d.patch_dim);
  d.text_len = kv.get_int("text_len", d.text_len);
  d.aug_images = kv.get_int("aug_images", d.aug_images);
  d.latent_dim = kv.get_int("latent_dim", d.latent_dim);
  d.seed = kv.get_u64("seed", d.seed);
  d.train_count = kv.get_int("train_count", d.train_count);
  d.test_count = kv.get_int("test_count", d.test_count);
  if (kv.has("flip_rate")) d.flip_rate = kv.get_double("flip_rate");
  d.topics = kv.get_int("topics", d.topics);
  d.categories = kv.get_int("categories", d.categories);
  d.attributes = kv.get_int("attributes", d.attributes);
  d.attributes_per_item = kv.get_int("attributes_per_item", d.attributes_per_item);
  d.hardness_cap = kv.get_double("hardness_cap", d.hardness_cap);
  d.positive_noise = kv.get_double("positive_noise", d.positive_noise);
  d.image_noise = kv.get_double("image_noise", d.image_noise);
  d.topic_sharpness = kv.get_double("topic_sharpness", d.topic_sharpness);
  d.background_rate = kv.get_double("background_rate", d.background_rate);
  d.description_len = kv.get_int("description_len", d.description_len);
  d.validate();
  return d;
}

std::string token_word(int id) {
  if (id == kPadToken) return "<pad>";
  return "w" + std::to_string(id);
}

std::optional<int> word_token(std::string_view word) {
  if (word == "<pad>") return kPadToken;
  if (word.size() < 2 || word[0] != 'w') return std::nullopt;
  int id = 0;
  for (std::size_t i = 1; i < word.size(); ++i) {
    if (word[i] < '0' || word[i] > '9') return std::nullopt;
    id = id * 10 + (word[i] - '0');
    if (id > 100000000) return std::nullopt;
  }
  return id;
}

std::string tokens_to_text(std::span<const int> ids) {
  std::string s;
  for (int id : ids) {
    if (!s.empty()) s += ' ';
    s += token_word(id);
  }
  return s;
}

SyntheticDataset generate_synthetic(const DatasetManifest& manifest) {
  manifest.validate();
  std::mt19937_64 rng(manifest.seed);
  World world(manifest, rng);
  SyntheticDataset ds;

  for (int c = 0; c < manifest.categories; ++c)
    ds.labels.categories.push_back(world.name_tokens(world.category_protos.row(c).transpose(), 3));
  for (int a = 0; a < manifest.attributes; ++a)
    ds.labels.attributes.push_back(world.name_tokens(world.attribute_map.row(a).transpose(), 2));
  for (int k = 0; k < manifest.topics; ++k)
    for (int r = 0; r < std::min(3, world.block); ++r) ds.lexicon.push_back(token_word(world.topic_token(k, r)));

  std::normal_distribution<double> normal(0.0, 1.0);
  auto make = [&](const char* split, int index) {
    const Eigen::VectorXd zq = random_unit(manifest.latent_dim, rng);
    Eigen::VectorXd noise(manifest.latent_dim);
    for (int i = 0; i < manifest.latent_dim; ++i) noise(i) = normal(rng);
    const Eigen::VectorXd zp = (zq + manifest.positive_noise * noise / std::sqrt(manifest.latent_dim)).normalized();
    Eigen::VectorXd zn;
    for (;;) {
      zn = random_unit(manifest.latent_dim, rng);
      if (zq.dot(zn) < manifest.hardness_cap && zq.dot(zn) < zq.dot(zp)) break;
    }
    Triplet t;
    t.triplet_id = make_id(split, index);
    t.query = world.product(zq, false, rng);
    t.positive = world.product(zp, true, rng);
    t.negative = world.product(zn, true, rng);
    ds.latents.push_back({zq, zp, zn});
    return t;
  };
  for (int i = 0; i < manifest.train_count; ++i) ds.train.push_back(make("train", i));
  for (int i = 0; i < manifest.test_count; ++i) ds.test.push_back(make("test", i));
  return ds;
}

DatasetFiles dataset_files(const std::filesystem::path& dir) {
  return {dir / "train.jsonl", dir / "test.jsonl", dir / "manifest.cfg", dir / "labels.json", dir / "lexicon.txt"};
}

DatasetFiles generate_synthetic_dataset(const DatasetManifest& manifest, const std::filesystem::path& out_dir) {
  const SyntheticDataset ds = generate_synthetic(manifest);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetFiles files = dataset_files(out_dir);
  write_triplets(files.train, ds.train);
  write_triplets(files.test, ds.test);
  manifest.to_kv().save(files.manifest);
  save_labels(files.labels, ds.labels);
  std::ofstream lex(files.lexicon, std::ios::binary);
  if (!lex) throw IoError("cannot write " + files.lexicon.string());
  for (const auto& w : ds.lexicon) lex << w << '\n';
  if (!lex) throw IoError("write failed: " + files.lexicon.string());
  return files;
}

std::string to_json_line(const Triplet& t) {
  Json j = Json::object();
  j["triplet_id"] = t.triplet_id;
  j["query"] = content_to_json(t.query);
  j["positive"] = content_to_json(t.positive);
  j["negative"] = content_to_json(t.negative);
  return j.dump();
}

Triplet triplet_from_json_line(const std::string& line, std::size_t lineno) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const std::exception& e) {
    throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
  }
  try {
    Triplet t;
    t.triplet_id = j.at("triplet_id").get<std::string>();
    t.query = content_from_json(j.at("query"));
    t.positive = content_from_json(j.at("positive"));
    t.negative = content_from_json(j.at("negative"));
    return t;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(lineno, std::string("schema violation: ") + e.what());
  }
}

void write_triplets(const std::filesystem::path& path, std::span<const Triplet> triplets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : triplets) out << to_json_line(t) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

TripletReader::TripletReader(const std::filesystem::path& path, const DatasetManifest* manifest)
    : in_(path, std::ios::binary), manifest_(manifest) {
  if (!in_) throw IoError("cannot open " + path.string());
}

std::optional<Triplet> TripletReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++lineno_;
    if (line.empty()) continue;
    Triplet t = triplet_from_json_line(line, lineno_);
    if (manifest_) {
      try {
        validate_triplet(t, *manifest_);
      } catch (const ValidationError& e) {
        throw ValidationError("line " + std::to_string(lineno_) + ": " + e.what());
      }
    }
    return t;
  }
  return std::nullopt;
}

std::vector<Triplet> load_triplets(const std::filesystem::path& path, const DatasetManifest* manifest) {
  TripletReader reader(path, manifest);
  std::vector<Triplet> out;
  std::unordered_set<std::string> seen;
  while (auto t = reader.next()) {
    if (!seen.insert(t->triplet_id).second)
      throw ParseError(reader.line(), "duplicate triplet_id " + t->triplet_id);
    out.push_back(std::move(*t));
  }
  return out;
}

void validate_triplet(const Triplet& t, const DatasetManifest& m) {
  if (t.triplet_id.empty()) throw ValidationError("empty triplet_id");
  for (const auto* p : {&t.query, &t.positive, &t.negative})
    if (!p->has_text() || !p->has_image()) throw ValidationError(t.triplet_id + ": every element needs title and image");
  if (t.query.enriched_title || !t.query.aug_images.empty())
    throw ValidationError(t.triplet_id + ": query must not carry enrichment or augmentation");
  check_content(t.query, m, t.triplet_id + ".query");
  check_content(t.positive, m, t.triplet_id + ".positive");
  check_content(t.negative, m, t.triplet_id + ".negative");
}

LabelSet load_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    LabelSet l;
    l.categories = j.at("categories").get<std::vector<std::vector<int>>>();
    l.attributes = j.at("attributes").get<std::vector<std::vector<int>>>();
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("labels file: ") + e.what());
  }
}

void save_labels(const std::filesystem::path& path, const LabelSet& labels) {
  nlohmann::ordered_json j;
  j["categories"] = labels.categories;
  j["attributes"] = labels.attributes;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::size_t flip_count(double flip_rate, std::size_t n) {
  return static_cast<std::size_t>(std::llround(flip_rate * static_cast<double>(n)));
}

std::vector<std::string> flip_triplets(std::vector<Triplet>& triplets, double flip_rate, std::uint64_t seed) {
  if (!(flip_rate >= 0.0 && flip_rate < 1.0)) throw ValidationError("flip_rate must lie in [0, 1)");
  const std::size_t n = triplets.size();
  const std::size_t k = flip_count(flip_rate, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first k positions become the flipped set.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(chosen.begin(), chosen.end());
  std::vector<std::string> ids;
  for (std::size_t idx : chosen) {
    std::swap(triplets[idx].positive, triplets[idx].negative);
    ids.push_back(triplets[idx].triplet_id);
  }
  return ids;
}

std::filesystem::path flip_sidecar_path(const std::filesystem::path& dataset_path) {
  return std::filesystem::path(dataset_path.string() + ".flipped");
}

std::vector<std::string> inject_label_noise(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                            double flip_rate, std::uint64_t seed) {
  if (!(flip_rate >= 0.0 && flip_rate < 1.0)) throw ValidationError("flip_rate must lie in [0, 1)");
  std::vector<Triplet> triplets = load_triplets(in_path);
  std::vector<std::string> ids = flip_triplets(triplets, flip_rate, seed);
  write_triplets(out_path, triplets);
  std::ofstream side(flip_sidecar_path(out_path), std::ios::binary);
  if (!side) throw IoError("cannot write " + flip_sidecar_path(out_path).string());
  for (const auto& id : ids) side << id << '\n';
  if (!side) throw IoError("write failed: " + flip_sidecar_path(out_path).string());
  return ids;
}

}  // namespace moon
