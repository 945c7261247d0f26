#include "moon/training.hpp"

#include "moon/checkpoint.hpp"
#include "moon/hash.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace moon {

std::string_view train_mode_name(TrainMode mode) { return mode == TrainMode::kJoint ? "joint" : "mixed"; }

TrainMode parse_train_mode(std::string_view s) {
  if (s == "joint") return TrainMode::kJoint;
  if (s == "mixed") return TrainMode::kMixed;
  throw ConfigError("unknown training mode `" + std::string(s) + "`");
}

namespace {

std::string ratio_to_string(const std::array<int, 3>& r) {
  return std::to_string(r[0]) + ":" + std::to_string(r[1]) + ":" + std::to_string(r[2]);
}

std::array<int, 3> parse_ratio(const std::string& s) {
  std::array<int, 3> r{};
  std::istringstream in(s);
  char c1 = 0, c2 = 0;
  if (!(in >> r[0] >> c1 >> r[1] >> c2 >> r[2]) || c1 != ':' || c2 != ':' || !(in >> std::ws).eof())
    throw ConfigError("train.mixed_ratio must look like `12:3:2`, got `" + s + "`");
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  encoder.validate();
  filter.validate();
  if (encoder.layers < 1) throw ConfigError("training needs encoder.layers >= 1");
  if (encoder.moe.objectives != kObjectiveCount)
    throw ConfigError("training needs moe.objectives = " + std::to_string(kObjectiveCount));
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (!(learning_rate >= 0)) throw ConfigError("train.learning_rate must be >= 0");
  if (!(tau > 0) || !(tau_tilde > 0)) throw ConfigError("temperatures must be positive");
  for (int r : mixed_ratio)
    if (r < 1) throw ConfigError("train.mixed_ratio entries must be positive integers");
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv = encoder.to_kv();
  kv.set("data.train_path", train_path);
  kv.set("filter.enabled", filter_enabled);
  kv.set("filter.detach", filter_detach);
  kv.set("filter.delta_bar_start", filter.delta_bar_start);
  kv.set("filter.delta_bar_end", filter.delta_bar_end);
  kv.set("filter.sharpness", filter.sharpness);
  kv.set("filter.delta_threshold", filter.delta_threshold);
  kv.set("loss.tau", tau);
  kv.set("loss.tau_tilde", tau_tilde);
  kv.set("loss.alpha_aux", alpha_aux);
  kv.set("loss.beta", beta);
  kv.set("loss.use_intra", use_intra);
  kv.set("loss.omega_mode", omega_mode == OmegaMode::kRaw ? "raw" : "renormalized");
  kv.set("loss.omega_through_preferences", omega_through_preferences);
  kv.set("train.batch_size", batch_size);
  kv.set("train.steps", steps);
  kv.set("train.learning_rate", learning_rate);
  kv.set("train.beta1", adamw.beta1);
  kv.set("train.beta2", adamw.beta2);
  kv.set("train.eps", adamw.eps);
  kv.set("train.weight_decay", adamw.weight_decay);
  kv.set("train.seed", seed);
  kv.set("train.mode", std::string(train_mode_name(mode)));
  kv.set("train.mixed_ratio", ratio_to_string(mixed_ratio));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.encoder = EncoderConfig::from_kv(kv);
  c.train_path = kv.get_string("data.train_path", c.train_path);
  c.filter_enabled = kv.get_bool("filter.enabled", c.filter_enabled);
  c.filter_detach = kv.get_bool("filter.detach", c.filter_detach);
  c.filter.delta_bar_start = kv.get_double("filter.delta_bar_start", c.filter.delta_bar_start);
  c.filter.delta_bar_end = kv.get_double("filter.delta_bar_end", c.filter.delta_bar_end);
  c.filter.sharpness = kv.get_double("filter.sharpness", c.filter.sharpness);
  c.filter.delta_threshold = kv.get_double("filter.delta_threshold", c.filter.delta_threshold);
  c.tau = kv.get_double("loss.tau", c.tau);
  c.tau_tilde = kv.get_double("loss.tau_tilde", c.tau_tilde);
  c.alpha_aux = kv.get_double("loss.alpha_aux", c.alpha_aux);
  c.beta = kv.get_double("loss.beta", c.beta);
  c.use_intra = kv.get_bool("loss.use_intra", c.use_intra);
  const std::string om = kv.get_string("loss.omega_mode", "renormalized");
  if (om == "raw") c.omega_mode = OmegaMode::kRaw;
  else if (om == "renormalized") c.omega_mode = OmegaMode::kRenormalized;
  else throw ConfigError("loss.omega_mode must be `renormalized` or `raw`");
  c.omega_through_preferences = kv.get_bool("loss.omega_through_preferences", c.omega_through_preferences);
  c.batch_size = kv.get_int("train.batch_size", c.batch_size);
  c.steps = kv.get_int("train.steps", c.steps);
  c.learning_rate = kv.get_double("train.learning_rate", c.learning_rate);
  c.adamw.beta1 = kv.get_double("train.beta1", c.adamw.beta1);
  c.adamw.beta2 = kv.get_double("train.beta2", c.adamw.beta2);
  c.adamw.eps = kv.get_double("train.eps", c.adamw.eps);
  c.adamw.weight_decay = kv.get_double("train.weight_decay", c.adamw.weight_decay);
  c.seed = kv.get_u64("train.seed", c.seed);
  c.mode = parse_train_mode(kv.get_string("train.mode", "joint"));
  c.mixed_ratio = parse_ratio(kv.get_string("train.mixed_ratio", "12:3:2"));
  c.filter.total_steps = c.steps;
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return config_hash(to_kv()); }

std::string StepMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["mode"] = std::string(train_mode_name(mode));
  if (query_modality) j["query_modality"] = std::string(modality_name(*query_modality));
  nlohmann::ordered_json losses = nlohmann::ordered_json::object();
  nlohmann::ordered_json omega = nlohmann::ordered_json::object();
  for (int m = 0; m < kObjectiveCount; ++m) {
    const auto i = static_cast<std::size_t>(m);
    const std::string name(kObjectiveNames[i]);
    losses[name] = breakdown.active[i] ? nlohmann::ordered_json(breakdown.losses[i]) : nlohmann::ordered_json();
    omega[name] = breakdown.omega[i];
  }
  j["losses"] = losses;
  j["omega"] = omega;
  j["aux"] = breakdown.aux;
  j["sparsity"] = breakdown.sparsity;
  j["total"] = breakdown.total;
  j["delta_bar"] = delta_bar;
  j["mean_reliability"] = breakdown.mean_reliability();
  j["lr"] = learning_rate;
  return j.dump();
}

template <typename Scalar>
ad::Var build_batch_loss(ad::Tape<Scalar>& t, const Encoder<Scalar>& encoder, std::span<const Triplet* const> batch,
                         const TrainConfig& config, int step, std::optional<Modality> mixed_modality,
                         LossBreakdown* breakdown) {
  using namespace ad;
  using Mat = Matrix<Scalar>;
  if (batch.empty()) throw ValidationError("empty batch");
  const int layers = encoder.config().layers;
  const int z = encoder.config().moe.experts;
  const int top_k = encoder.config().moe.top_k;
  if (layers < 1) throw ConfigError("training needs encoder.layers >= 1");

  std::vector<std::vector<Var>> layer_probs(static_cast<std::size_t>(layers));
  std::vector<RowVector<Scalar>> layer_assigned(static_cast<std::size_t>(layers), RowVector<Scalar>::Zero(z));
  std::vector<Scalar> layer_tokens(static_cast<std::size_t>(layers), Scalar(0));

  auto encode = [&](const ProductContent& c, Modality m, std::vector<Var>* sample_gates) {
    ForwardTrace<Scalar> trace;
    const Var r = encoder.forward(t, c, m, &trace);
    for (int l = 0; l < layers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      layer_probs[li].push_back(trace.layers[li].gate_probs);
      layer_assigned[li] += trace.layers[li].assigned;
      layer_tokens[li] += static_cast<Scalar>(trace.layers[li].tokens);
    }
    if (sample_gates) sample_gates->push_back(mean_rows(t, trace.layers.back().weights));
    return r;
  };
  auto stack = [&](const std::vector<Var>& rows) { return concat_rows(t, std::span<const Var>(rows)); };

  const bool joint = !mixed_modality.has_value();
  std::array<std::vector<Var>, kObjectiveCount> gates;
  std::vector<Var> qt, qi, qmm, pmm, nmm, pi, pt, ni, nt, qx;
  for (const Triplet* tr : batch) {
    if (joint) {
      qt.push_back(encode(tr->query, Modality::kText, &gates[0]));
      qi.push_back(encode(tr->query, Modality::kImage, &gates[1]));
      qmm.push_back(encode(tr->query, Modality::kMultimodal, &gates[2]));
    } else {
      qx.push_back(encode(tr->query, *mixed_modality, nullptr));
    }
    pmm.push_back(encode(tr->positive, Modality::kMultimodal, nullptr));
    nmm.push_back(encode(tr->negative, Modality::kMultimodal, nullptr));
    if (joint) {
      pi.push_back(encode(tr->positive, Modality::kImage, &gates[3]));
      pt.push_back(encode(tr->positive, Modality::kText, nullptr));
      ni.push_back(encode(tr->negative, Modality::kImage, &gates[4]));
      nt.push_back(encode(tr->negative, Modality::kText, nullptr));
    }
  }
  const Var P_mm = stack(pmm), N_mm = stack(nmm);
  const Var filter_query = joint ? stack(qmm) : stack(qx);

  // Reliability filter.
  const Scalar delta_bar = static_cast<Scalar>(schedule_delta_bar(step, config.steps, config.filter));
  Var phi = reliability_rows(t, filter_query, P_mm, N_mm, static_cast<Scalar>(config.filter.sharpness), delta_bar);
  Var multiplier;
  if (config.filter_enabled) {
    const Var phi_in = config.filter_detach ? detach(t, phi) : phi;
    multiplier = threshold_multiplier(t, phi_in, static_cast<Scalar>(config.filter.delta_threshold));
  } else {
    multiplier = t.constant(Mat::Ones(static_cast<Eigen::Index>(batch.size()), 1));
  }

  const auto tau = static_cast<Scalar>(config.tau);
  const auto tau_tilde = static_cast<Scalar>(config.tau_tilde);
  std::array<std::optional<Var>, kObjectiveCount> loss;
  auto inter = [&](const std::vector<Var>& queries) {
    return mean_all(t, mul(t, contrastive_rows(t, stack(queries), P_mm, N_mm, tau), multiplier));
  };
  if (joint) {
    loss[0] = inter(qt);
    loss[1] = inter(qi);
    loss[2] = inter(qmm);
    if (config.use_intra) {
      const Var P_t = stack(pt), N_t = stack(nt);
      loss[3] = mean_all(t, contrastive_rows(t, stack(pi), P_t, N_t, tau_tilde));
      loss[4] = mean_all(t, contrastive_rows(t, stack(ni), N_t, P_t, tau_tilde));
    }
  } else {
    loss[static_cast<std::size_t>(inter_objective(*mixed_modality))] = inter(qx);
  }

  // Load balance, averaged over layers.
  Var aux_sum;
  for (int l = 0; l < layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const Var mean_probs = mean_rows(t, stack(layer_probs[li]));
    const Mat fraction = (layer_assigned[li] / (layer_tokens[li] * static_cast<Scalar>(top_k))) * static_cast<Scalar>(z);
    const Var term = sum_all(t, mul(t, mean_probs, t.constant(fraction)));
    aux_sum = l == 0 ? term : add(t, aux_sum, term);
  }
  const Var aux = scale(t, aux_sum, Scalar(1) / static_cast<Scalar>(layers));

  const Var prefs = softmax_rows(t, t.param(encoder.dual_alignment_id()));
  const Var sparsity = mean_row_entropy(t, prefs);

  Var omega;
  if (joint) {
    std::vector<Var> groups;
    for (const auto& g : gates) groups.push_back(stack(g));
    omega = objective_weights(t, std::span<const Var>(groups), config.omega_through_preferences ? prefs : detach(t, prefs),
                              config.omega_mode);
  }

  Var total = add(t, scale(t, aux, static_cast<Scalar>(config.alpha_aux)),
                  scale(t, sparsity, static_cast<Scalar>(config.beta)));
  for (int m = 0; m < kObjectiveCount; ++m) {
    const auto& l = loss[static_cast<std::size_t>(m)];
    if (!l) continue;
    const Var term = joint ? scale_by(t, *l, element(t, omega, m, 0)) : *l;
    total = add(t, total, term);
  }

  if (breakdown) {
    LossBreakdown& b = *breakdown;
    b = LossBreakdown{};
    for (int m = 0; m < kObjectiveCount; ++m) {
      const auto i = static_cast<std::size_t>(m);
      b.active[i] = loss[i].has_value();
      b.losses[i] = loss[i] ? static_cast<double>(t.scalar(*loss[i])) : 0.0;
      b.omega[i] = joint ? static_cast<double>(t.value(omega)(m, 0)) : 1.0;
    }
    b.aux = static_cast<double>(t.scalar(aux));
    b.sparsity = static_cast<double>(t.scalar(sparsity));
    for (Eigen::Index r = 0; r < t.value(phi).rows(); ++r) {
      b.reliability.push_back(static_cast<double>(t.value(phi)(r, 0)));
      b.multipliers.push_back(static_cast<double>(t.value(multiplier)(r, 0)));
    }
    b.total = static_cast<double>(t.scalar(total));
  }
  return total;
}

template ad::Var build_batch_loss<float>(ad::Tape<float>&, const Encoder<float>&, std::span<const Triplet* const>,
                                         const TrainConfig&, int, std::optional<Modality>, LossBreakdown*);
template ad::Var build_batch_loss<double>(ad::Tape<double>&, const Encoder<double>&, std::span<const Triplet* const>,
                                          const TrainConfig&, int, std::optional<Modality>, LossBreakdown*);

MixedSchedule::MixedSchedule(std::array<int, 3> ratio, std::uint64_t seed) : ratio_(ratio), rng_(seed) {
  const std::array<Modality, 3> kinds{Modality::kImage, Modality::kText, Modality::kMultimodal};
  for (std::size_t j = 0; j < 3; ++j) cycle_.insert(cycle_.end(), static_cast<std::size_t>(ratio_[j]), kinds[j]);
  pos_ = cycle_.size();
}

Modality MixedSchedule::next() {
  if (pos_ == cycle_.size()) {
    std::shuffle(cycle_.begin(), cycle_.end(), rng_);
    pos_ = 0;
  }
  return cycle_[pos_++];
}

BatchSampler::BatchSampler(std::span<const Triplet> data, int batch_size, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), rng_(seed), order_(data.size()) {
  if (batch_size_ < 1) throw ConfigError("batch size must be positive");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  pos_ = order_.size();
}

std::vector<const Triplet*> BatchSampler::next() {
  if (data_.empty()) throw ValidationError("training set is empty");
  const auto want = std::min<std::size_t>(static_cast<std::size_t>(batch_size_), data_.size());
  std::vector<const Triplet*> batch;
  while (batch.size() < want) {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    const Triplet* candidate = &data_[order_[pos_++]];
    if (std::find(batch.begin(), batch.end(), candidate) == batch.end()) batch.push_back(candidate);
  }
  std::sort(batch.begin(), batch.end(),
            [](const Triplet* a, const Triplet* b) { return a->triplet_id < b->triplet_id; });
  return batch;
}

namespace {
constexpr std::uint64_t kSamplerStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kMixedStream = 0xbf58476d1ce4e5b9ULL;

TrainConfig normalized(TrainConfig c) {
  c.filter.total_steps = c.steps;
  c.validate();
  return c;
}
}  // namespace

Trainer::Trainer(TrainConfig config, std::span<const Triplet> data)
    : config_(normalized(std::move(config))),
      data_(data),
      encoder_(config_.encoder, config_.seed),
      optimizer_(encoder_.parameters(), config_.adamw),
      sampler_(data, config_.batch_size, config_.seed ^ kSamplerStream),
      mixed_(config_.mixed_ratio, config_.seed ^ kMixedStream) {}

StepMetrics Trainer::step() {
  if (finished()) throw ValidationError("training already finished");
  StepMetrics metrics;
  metrics.step = step_;
  metrics.mode = config_.mode;
  if (config_.mode == TrainMode::kMixed) metrics.query_modality = mixed_.next();
  metrics.delta_bar = schedule_delta_bar(step_, config_.steps, config_.filter);
  metrics.learning_rate = cosine_lr(config_.learning_rate, step_, config_.steps);

  const std::vector<const Triplet*> batch = sampler_.next();
  auto& params = encoder_.parameters();
  params.zero_grad();
  ad::Tape<float> tape(&params);
  const ad::Var total = build_batch_loss<float>(tape, encoder_, batch, config_, step_, metrics.query_modality,
                                                &metrics.breakdown);
  if (!std::isfinite(metrics.breakdown.total)) {
    throw NumericError("non-finite loss at step " + std::to_string(step_) + ": " + metrics.to_json());
  }
  tape.backward(total);
  optimizer_.step(params, metrics.learning_rate);
  ++step_;
  return metrics;
}

TrainResult run_training(Trainer& trainer, const StepCallback& on_step) {
  TrainResult result;
  while (!trainer.finished()) {
    result.log.push_back(trainer.step());
    if (on_step) on_step(result.log.back());
  }
  return result;
}

TrainResult train(const TrainConfig& config, const std::filesystem::path& checkpoint_path,
                  const std::filesystem::path& metrics_path) {
  if (config.train_path.empty()) throw ConfigError("data.train_path is required");
  const std::vector<Triplet> data = load_triplets(config.train_path);
  Trainer trainer(config, data);
  std::ofstream log(metrics_path, std::ios::trunc);
  if (!log) throw IoError("cannot open metrics log: " + metrics_path.string());
  TrainResult result = run_training(trainer, [&](const StepMetrics& m) {
    log << m.to_json() << '\n';
    if (!log) throw IoError("failed writing metrics log: " + metrics_path.string());
  });
  CheckpointMeta meta;
  meta.step = trainer.steps_done();
  if (!result.log.empty()) {
    const LossBreakdown& last = result.log.back().breakdown;
    meta.metrics["final_total"] = last.total;
    meta.metrics["final_aux"] = last.aux;
    meta.metrics["final_sparsity"] = last.sparsity;
  }
  save_checkpoint(checkpoint_path, trainer.encoder().parameters(), trainer.config().to_kv(), meta);
  return result;
}

}  // namespace moon
