#include "moon/augmentation.hpp"
#include "moon/checkpoint.hpp"
#include "moon/data.hpp"
#include "moon/eval.hpp"
#include "moon/training.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace moon;

namespace {

std::vector<int> parse_ks(const std::string& list) {
  std::vector<int> ks;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      ks.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ValidationError("bad k value `" + item + "`");
    }
  }
  if (ks.empty()) throw ValidationError("no k values given");
  return ks;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-balanced multimodal embedding toolkit"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a deterministic synthetic triplet dataset");
  fs::path gen_out, gen_manifest;
  std::optional<std::uint64_t> gen_seed;
  std::optional<int> gen_train, gen_test;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--manifest", gen_manifest, "Manifest key-value file (defaults otherwise)");
  gen->add_option("--seed", gen_seed, "Override manifest seed");
  gen->add_option("--train", gen_train, "Override train count");
  gen->add_option("--test", gen_test, "Override test count");

  // inject-noise
  auto* noise = app.add_subcommand("inject-noise", "Swap positive and negative for a fraction of triplets");
  fs::path noise_in, noise_out;
  double noise_rate = 0;
  std::uint64_t noise_seed = 0;
  noise->add_option("--in", noise_in)->required();
  noise->add_option("--out", noise_out)->required();
  noise->add_option("--rate", noise_rate, "Flip rate in [0, 1)")->required();
  noise->add_option("--seed", noise_seed);

  // augment
  auto* aug = app.add_subcommand("augment", "Co-augment positives and negatives with the mock clients");
  fs::path aug_in, aug_out, aug_report, aug_manifest, aug_lexicon, aug_reference;
  AugmentationConfig aug_cfg;
  aug->add_option("--in", aug_in)->required();
  aug->add_option("--out", aug_out)->required();
  aug->add_option("--report", aug_report)->required();
  aug->add_option("--manifest", aug_manifest, "Dataset manifest (sets encoder input dimensions)")->required();
  aug->add_option("--lexicon", aug_lexicon);
  aug->add_option("--variants", aug_cfg.variants);
  aug->add_option("--max-aug", aug_cfg.max_aug_images);
  aug->add_option("--threshold", aug_cfg.similarity_threshold);
  aug->add_option("--seed", aug_cfg.seed);
  aug->add_option("--reference", aug_reference, "Reference encoder checkpoint");

  // train
  auto* tr = app.add_subcommand("train", "Train an encoder");
  fs::path tr_config;
  std::optional<std::string> tr_mode;
  std::optional<std::uint64_t> tr_seed;
  tr->add_option("--config", tr_config, "Key-value training config")->required();
  tr->add_option("--mode", tr_mode, "joint or mixed");
  tr->add_option("--seed", tr_seed);

  // eval
  auto* ev = app.add_subcommand("eval", "Retrieval and classification evaluation");
  fs::path ev_ckpt, ev_dataset, ev_out, ev_labels;
  std::string ev_tasks = "t2mm,i2mm,mm2mm,t2i,i2t", ev_k = "1,5,10";
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--dataset", ev_dataset, "Test triplets (JSONL)")->required();
  ev->add_option("--tasks", ev_tasks);
  ev->add_option("--k", ev_k);
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--labels", ev_labels, "labels.json for zero-shot classification");

  // heatmap
  auto* hm = app.add_subcommand("heatmap", "Export last-layer attention for one record");
  fs::path hm_ckpt, hm_dataset, hm_out;
  std::string hm_id, hm_modality = "mm";
  std::string hm_role = "query";
  hm->add_option("--checkpoint", hm_ckpt)->required();
  hm->add_option("--dataset", hm_dataset)->required();
  hm->add_option("--id", hm_id, "Triplet id (default: first record)");
  hm->add_option("--role", hm_role, "query, positive or negative");
  hm->add_option("--modality", hm_modality);
  hm->add_option("--out", hm_out, "Output prefix")->required();

  // report
  auto* rep = app.add_subcommand("report", "Regenerate report tables from a results file");
  fs::path rep_results, rep_out;
  rep->add_option("--results", rep_results)->required();
  rep->add_option("--out", rep_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      DatasetManifest m = gen_manifest.empty() ? DatasetManifest{} : DatasetManifest::from_kv(KvConfig::load(gen_manifest));
      if (gen_seed) m.seed = *gen_seed;
      if (gen_train) m.train_count = *gen_train;
      if (gen_test) m.test_count = *gen_test;
      const DatasetFiles files = generate_synthetic_dataset(m, gen_out);
      std::cout << "wrote " << files.train.string() << " and " << files.test.string() << '\n';
    } else if (*noise) {
      const auto ids = inject_label_noise(noise_in, noise_out, noise_rate, noise_seed);
      std::cout << "flipped " << ids.size() << " triplets; ids in " << flip_sidecar_path(noise_out).string() << '\n';
    } else if (*aug) {
      const DatasetManifest m = DatasetManifest::from_kv(KvConfig::load(aug_manifest));
      aug_cfg.reference.vocab_size = m.vocab_size;
      aug_cfg.reference.patches = m.patches;
      aug_cfg.reference.patch_dim = m.patch_dim;
      aug_cfg.reference.text_len = m.text_len;
      aug_cfg.reference.visual_tokens = m.patches;
      if (!aug_lexicon.empty()) aug_cfg.lexicon = load_lexicon(aug_lexicon);
      aug_cfg.reference_checkpoint = aug_reference;
      MockEnrichmentClient enrich(m.text_len);
      MockEditClient edit(aug_cfg.seed);
      const auto report = co_augment_dataset(aug_in, aug_out, aug_report, {&enrich, &edit}, aug_cfg, m.text_len);
      std::cout << "records " << report.records.size() << ", failures " << report.failures() << ", kept "
                << report.candidates_kept() << "/" << report.candidates_generated() << " candidates\n";
    } else if (*tr) {
      KvConfig kv = KvConfig::load(tr_config);
      if (tr_mode) kv.set("train.mode", *tr_mode);
      if (tr_seed) kv.set("train.seed", *tr_seed);
      const fs::path ckpt = kv.get_string("output.checkpoint", "checkpoint.bin");
      const fs::path metrics = kv.get_string("output.metrics", "metrics.jsonl");
      const TrainConfig config = TrainConfig::from_kv(kv);
      std::cout << "config_hash " << config.hash() << '\n';
      const TrainResult result = train(config, ckpt, metrics);
      if (!result.log.empty()) std::cout << "final total loss " << result.log.back().breakdown.total << '\n';
      std::cout << "checkpoint " << ckpt.string() << ", metrics " << metrics.string() << '\n';
    } else if (*ev) {
      const auto start = std::chrono::steady_clock::now();
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const Encoder<float> enc = encoder_from_checkpoint(ck);
      const auto test = load_triplets(ev_dataset);
      MetricsReport report;
      report.config_hash = ck.meta.config_hash;
      report.seed = ck.config.get_u64("train.seed", 0);
      report.retrieval = evaluate_retrieval(enc, test, parse_tasks(ev_tasks), parse_ks(ev_k));
      if (!ev_labels.empty()) {
        const auto [cat, attr] = evaluate_classification(enc, test, load_labels(ev_labels));
        report.classification = cat;
        report.attributes = attr;
      }
      report.runtime_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_report(report, ev_out);
      std::cout << report_text(report);
    } else if (*hm) {
      const Encoder<float> enc = encoder_from_checkpoint(load_checkpoint(hm_ckpt));
      const auto data = load_triplets(hm_dataset);
      if (data.empty()) throw ValidationError("dataset is empty");
      const Triplet* t = &data.front();
      if (!hm_id.empty()) {
        const auto it = std::find_if(data.begin(), data.end(), [&](const Triplet& x) { return x.triplet_id == hm_id; });
        if (it == data.end()) throw ValidationError("no triplet with id " + hm_id);
        t = &*it;
      }
      const ProductContent& c = hm_role == "positive" ? t->positive : hm_role == "negative" ? t->negative : t->query;
      const auto [csv, pgm] = export_heatmap(attention_heatmap(enc, c, parse_modality(hm_modality)), hm_out);
      std::cout << "wrote " << csv.string() << " and " << pgm.string() << '\n';
    } else if (*rep) {
      const MetricsReport report = MetricsReport::from_json(read_file(rep_results));
      write_report(report, rep_out);
      std::cout << report_text(report);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
