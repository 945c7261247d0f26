#pragma once

// Triplet dataset schema, JSONL serialisation and the deterministic synthetic
// e-commerce generator.

#include "moon/kv_config.hpp"
#include "moon/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moon {

inline constexpr int kPadToken = 0;

/// Text and image content of one product (or query).
struct ProductContent {
  std::vector<int> title;
  std::optional<std::vector<int>> enriched_title;
  // Free-text description; only consumed by entity extraction.
  std::vector<int> description;
  MatrixF image;  // P x F patch features
  std::vector<MatrixF> aug_images;
  std::optional<int> category_label;
  std::optional<std::vector<int>> attribute_labels;

  bool has_text() const { return !title.empty(); }
  bool has_image() const { return image.size() > 0; }

  friend bool operator==(const ProductContent&, const ProductContent&) = default;
};

struct Triplet {
  std::string triplet_id;
  ProductContent query;
  ProductContent positive;
  ProductContent negative;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

/// Everything needed to regenerate a synthetic dataset bit-for-bit.
struct DatasetManifest {
  int vocab_size = 512;
  int patches = 4;       // P
  int patch_dim = 16;    // F
  int text_len = 16;     // L_text
  int aug_images = 2;    // n_c
  int latent_dim = 16;
  std::uint64_t seed = 0;
  int train_count = 1000;
  int test_count = 200;
  std::optional<double> flip_rate;  // recorded when label noise has been injected

  // Generative model knobs.
  int topics = 32;
  int categories = 10;
  int attributes = 20;
  int attributes_per_item = 2;
  double hardness_cap = 0.6;     // max latent cosine between query and negative
  double positive_noise = 0.35;  // perturbation of the query latent for the positive
  double image_noise = 0.5;
  double topic_sharpness = 4.0;
  double background_rate = 0.15;  // share of title tokens drawn uniformly
  int description_len = 24;

  void validate() const;
  KvConfig to_kv() const;
  static DatasetManifest from_kv(const KvConfig& kv);

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Maps token ids to readable words ("w17") and back; id 0 is padding.
std::string token_word(int id);
std::optional<int> word_token(std::string_view word);
std::string tokens_to_text(std::span<const int> ids);

/// Label names of the synthetic world, each a short token sequence.
struct LabelSet {
  std::vector<std::vector<int>> categories;
  std::vector<std::vector<int>> attributes;

  friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

struct SyntheticDataset {
  std::vector<Triplet> train;
  std::vector<Triplet> test;
  LabelSet labels;
  std::vector<std::string> lexicon;  // salient words usable by entity extraction
  // Latent vectors (query, positive, negative) per triplet, train then test.
  std::vector<std::array<Eigen::VectorXd, 3>> latents;
};

/// Pure in-memory generation.
SyntheticDataset generate_synthetic(const DatasetManifest& manifest);

struct DatasetFiles {
  std::filesystem::path train, test, manifest, labels, lexicon;
};

DatasetFiles dataset_files(const std::filesystem::path& dir);

/// Writes train.jsonl, test.jsonl, manifest.cfg, labels.json and lexicon.txt into out_dir.
DatasetFiles generate_synthetic_dataset(const DatasetManifest& manifest, const std::filesystem::path& out_dir);

// JSONL (one triplet per line).
std::string to_json_line(const Triplet& triplet);
Triplet triplet_from_json_line(const std::string& line, std::size_t lineno = 0);
void write_triplets(const std::filesystem::path& path, std::span<const Triplet> triplets);

/// Streaming reader; next() yields triplets in file order and throws ParseError
/// naming the offending line.
class TripletReader {
 public:
  explicit TripletReader(const std::filesystem::path& path, const DatasetManifest* manifest = nullptr);
  std::optional<Triplet> next();
  std::size_t line() const { return lineno_; }

 private:
  std::ifstream in_;
  const DatasetManifest* manifest_;
  std::size_t lineno_ = 0;
};

/// Loads every triplet; with a manifest, also validates dimensions and token ranges.
std::vector<Triplet> load_triplets(const std::filesystem::path& path, const DatasetManifest* manifest = nullptr);

/// Checks token ranges and image shapes against a manifest.
void validate_triplet(const Triplet& triplet, const DatasetManifest& manifest);

LabelSet load_labels(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelSet& labels);

/// Number of triplets flipped for a given rate: round half away from zero.
std::size_t flip_count(double flip_rate, std::size_t n);

/// Swaps positive and negative for round(flip_rate * N) seeded-random triplets.
/// Returns the flipped ids in file order.
std::vector<std::string> flip_triplets(std::vector<Triplet>& triplets, double flip_rate, std::uint64_t seed);

/// File-level noise injection: writes out_path and the sidecar out_path + ".flipped".
std::vector<std::string> inject_label_noise(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                            double flip_rate, std::uint64_t seed);

std::filesystem::path flip_sidecar_path(const std::filesystem::path& dataset_path);

}  // namespace moon
