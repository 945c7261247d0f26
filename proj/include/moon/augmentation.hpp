#pragma once

// Image-text co-augmentation: entity extraction, title enrichment, two-stage
// visual expansion and similarity filtering behind pluggable model clients.

#include "moon/data.hpp"
#include "moon/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace moon {

enum class EntitySource { kTitle, kDescription };

struct Entity {
  std::string text;
  EntitySource source = EntitySource::kTitle;

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct EntitySet {
  std::vector<Entity> entities;

  std::vector<std::string> texts() const;
  bool contains(const std::string& text) const;
  std::size_t size() const { return entities.size(); }
  friend bool operator==(const EntitySet&, const EntitySet&) = default;
};

/// Lowercased alphanumeric words of `text`.
std::vector<std::string> split_words(const std::string& text);

/// Words shared by title and description (title order), then lexicon words
/// from the description, then lexicon words from the title; deduplicated.
EntitySet extract_entities(const std::string& title, const std::string& description,
                           const std::set<std::string>& lexicon = {});

class EnrichmentClient {
 public:
  virtual ~EnrichmentClient() = default;
  virtual std::vector<std::string> enrich(const std::vector<std::string>& title, const MatrixF& image,
                                          const EntitySet& entities) = 0;
};

class EditClient {
 public:
  virtual ~EditClient() = default;
  virtual MatrixF extract_subject(const MatrixF& image) = 0;
  virtual MatrixF edit(const MatrixF& subject, const std::vector<std::string>& title, const std::string& prompt) = 0;
};

/// Appends entities missing from the title in entity order, truncated to max_len words.
class MockEnrichmentClient : public EnrichmentClient {
 public:
  explicit MockEnrichmentClient(int max_len) : max_len_(max_len) {}
  std::vector<std::string> enrich(const std::vector<std::string>& title, const MatrixF& image,
                                  const EntitySet& entities) override;

 private:
  int max_len_;
};

/// extract_subject keeps the projection on the dominant singular direction and
/// soft-thresholds the residual; edit applies a small prompt-keyed rotation and bias.
class MockEditClient : public EditClient {
 public:
  explicit MockEditClient(std::uint64_t seed = 0, double residual_threshold = 0.25, double rotation_scale = 0.35,
                          double bias_scale = 0.1)
      : seed_(seed), threshold_(residual_threshold), rotation_scale_(rotation_scale), bias_scale_(bias_scale) {}
  MatrixF extract_subject(const MatrixF& image) override;
  MatrixF edit(const MatrixF& subject, const std::vector<std::string>& title, const std::string& prompt) override;

 private:
  std::uint64_t seed_;
  double threshold_, rotation_scale_, bias_scale_;
};

std::vector<std::string> default_prompt_templates();

/// Prompt for variant k (0-based).
std::string variant_prompt(const std::vector<std::string>& templates, int k);

struct VisualExpansion {
  MatrixF subject;
  std::vector<MatrixF> variants;
  std::vector<std::string> prompts;
};

VisualExpansion expand_visual(const MatrixF& image, const std::vector<std::string>& title, int n, EditClient& client,
                              const std::vector<std::string>& templates);

/// Cosine between the image-only embedding of each candidate and the text-only title embedding.
struct SimilarityFilterResult {
  std::vector<std::size_t> kept;
  std::vector<double> scores;
};

SimilarityFilterResult similarity_filter(const std::vector<MatrixF>& candidates, const std::vector<int>& title,
                                         const Encoder<float>& reference, double threshold);

/// Pure score-threshold rule.
std::vector<std::size_t> filter_by_score(const std::vector<double>& scores, double threshold);

struct AugmentationConfig {
  int variants = 3;           // n
  int max_aug_images = 2;     // n_c
  double similarity_threshold = 0.2;
  std::uint64_t seed = 0;     // seeds the mock edit client and the fresh reference encoder
  std::vector<std::string> prompt_templates = default_prompt_templates();
  std::set<std::string> lexicon;
  EncoderConfig reference;    // fresh seeded reference encoder
  std::filesystem::path reference_checkpoint;  // overrides `reference` when set
};

struct ItemReport {
  std::string role;  // "positive" or "negative"
  std::vector<std::string> entities;
  std::vector<std::string> prompts;
  std::size_t generated = 0;
  std::size_t kept = 0;
  std::vector<double> scores;
  bool all_filtered = false;
};

struct RecordReport {
  std::string triplet_id;
  std::vector<ItemReport> items;
  std::string error;  // client failure message; record emitted unaugmented

  std::string to_json() const;
};

struct AugmentationReport {
  std::vector<RecordReport> records;

  std::size_t failures() const;
  std::size_t candidates_generated() const;
  std::size_t candidates_kept() const;
};

struct AugmentationClients {
  EnrichmentClient* enrichment = nullptr;
  EditClient* edit = nullptr;
};

/// Augments positives and negatives in memory; queries are untouched.
AugmentationReport co_augment(std::vector<Triplet>& triplets, const AugmentationClients& clients,
                              const AugmentationConfig& config, int text_len);

/// File-level pipeline; writes out_path and report_path (JSONL, one record per triplet).
AugmentationReport co_augment_dataset(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                      const std::filesystem::path& report_path, const AugmentationClients& clients,
                                      const AugmentationConfig& config, int text_len);

std::set<std::string> load_lexicon(const std::filesystem::path& path);

}  // namespace moon
