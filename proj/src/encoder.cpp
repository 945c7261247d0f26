#include "moon/encoder.hpp"

#include "moon/attention.hpp"
#include "moon/hash.hpp"

#include <cmath>
#include <random>

namespace moon {

void EncoderConfig::validate() const {
  if (hidden < 1 || visual_tokens < 1 || text_len < 1 || layers < 0 || heads < 1 || vocab_size < 2 || prompt_len < 0 ||
      patches < 1 || patch_dim < 1)
    throw ValidationError("encoder dimensions must be positive");
  if (hidden % heads != 0) throw ValidationError("encoder.hidden must be divisible by encoder.heads");
  if (patches % visual_tokens != 0) throw ValidationError("encoder.patches must be a multiple of encoder.visual_tokens");
  moe.validate();
}

KvConfig EncoderConfig::to_kv() const {
  KvConfig kv;
  kv.set("encoder.hidden", hidden);
  kv.set("encoder.visual_tokens", visual_tokens);
  kv.set("encoder.text_len", text_len);
  kv.set("encoder.layers", layers);
  kv.set("encoder.heads", heads);
  kv.set("encoder.vocab_size", vocab_size);
  kv.set("encoder.prompt_len", prompt_len);
  kv.set("encoder.patches", patches);
  kv.set("encoder.patch_dim", patch_dim);
  kv.set("encoder.normalize_output", normalize_output);
  kv.set("moe.experts", moe.experts);
  kv.set("moe.top_k", moe.top_k);
  kv.set("moe.expert_hidden", moe.expert_hidden);
  kv.set("moe.objectives", moe.objectives);
  return kv;
}

EncoderConfig EncoderConfig::from_kv(const KvConfig& kv) {
  EncoderConfig c;
  c.hidden = kv.get_int("encoder.hidden", c.hidden);
  c.visual_tokens = kv.get_int("encoder.visual_tokens", c.visual_tokens);
  c.text_len = kv.get_int("encoder.text_len", c.text_len);
  c.layers = kv.get_int("encoder.layers", c.layers);
  c.heads = kv.get_int("encoder.heads", c.heads);
  c.vocab_size = kv.get_int("encoder.vocab_size", c.vocab_size);
  c.prompt_len = kv.get_int("encoder.prompt_len", c.prompt_len);
  c.patches = kv.get_int("encoder.patches", c.patches);
  c.patch_dim = kv.get_int("encoder.patch_dim", c.patch_dim);
  c.normalize_output = kv.get_bool("encoder.normalize_output", c.normalize_output);
  c.moe.experts = kv.get_int("moe.experts", c.moe.experts);
  c.moe.top_k = kv.get_int("moe.top_k", c.moe.top_k);
  c.moe.expert_hidden = kv.get_int("moe.expert_hidden", c.moe.expert_hidden);
  c.moe.objectives = kv.get_int("moe.objectives", c.moe.objectives);
  c.validate();
  return c;
}

std::string EncoderConfig::hash() const { return hex64(fnv1a64(to_kv().to_string())); }

namespace {

void check_tokens(const std::vector<int>& ids, const EncoderConfig& c, const char* field) {
  if (ids.empty()) throw ValidationError(std::string(field) + " is empty");
  if (static_cast<int>(ids.size()) > c.text_len)
    throw ValidationError(std::string(field) + " has " + std::to_string(ids.size()) + " tokens, text_len is " +
                          std::to_string(c.text_len));
  for (int id : ids)
    if (id < 0 || id >= c.vocab_size) throw ValidationError(std::string(field) + " token id out of vocabulary range");
}

void check_image(const MatrixF& img, const EncoderConfig& c, const char* field) {
  if (img.rows() != c.patches || img.cols() != c.patch_dim)
    throw ValidationError(std::string(field) + " has shape " + std::to_string(img.rows()) + "x" +
                          std::to_string(img.cols()) + ", encoder expects " + std::to_string(c.patches) + "x" +
                          std::to_string(c.patch_dim));
  if (!img.allFinite()) throw ValidationError(std::string(field) + " contains non-finite values");
}

std::vector<int> padded(const std::vector<int>& ids, int len) {
  std::vector<int> out(ids);
  out.resize(static_cast<std::size_t>(len), kPadToken);
  return out;
}

// Groups of P/V consecutive patches averaged into V rows.
template <typename Scalar>
Matrix<Scalar> pool_patches(const MatrixF& image, int visual_tokens) {
  const Eigen::Index group = image.rows() / visual_tokens;
  Matrix<Scalar> out(visual_tokens, image.cols());
  for (int v = 0; v < visual_tokens; ++v)
    out.row(v) = image.middleRows(v * group, group).template cast<Scalar>().colwise().mean();
  return out;
}

}  // namespace

SequenceLayout sequence_layout(const ProductContent& content, Modality modality, const EncoderConfig& c) {
  SequenceLayout layout;
  const bool text = modality != Modality::kImage;
  const bool image = modality != Modality::kText;
  if (text) check_tokens(content.title, c, "title");
  if (text && content.enriched_title) check_tokens(*content.enriched_title, c, "enriched_title");
  if (image) {
    if (!content.has_image()) throw ValidationError("image is required for this modality");
    check_image(content.image, c, "image");
    for (const auto& a : content.aug_images) check_image(a, c, "aug_images");
  }
  auto push_text = [&](const std::vector<int>& ids, Segment seg, const char* tag) {
    for (int i = 0; i < c.text_len; ++i) {
      layout.segments.push_back(seg);
      const int id = i < static_cast<int>(ids.size()) ? ids[static_cast<std::size_t>(i)] : kPadToken;
      layout.labels.push_back(std::string(tag) + ":" + token_word(id));
    }
  };
  auto push_image = [&](Segment seg, const std::string& tag) {
    for (int v = 0; v < c.visual_tokens; ++v) {
      layout.segments.push_back(seg);
      layout.labels.push_back(tag + ":v" + std::to_string(v));
    }
  };
  if (modality == Modality::kImage) {
    for (int i = 0; i < c.prompt_len; ++i) {
      layout.segments.push_back(Segment::kPrompt);
      layout.labels.push_back("prompt:" + std::to_string(i));
    }
  }
  if (text) {
    push_text(content.title, Segment::kTitle, "title");
    if (content.enriched_title) push_text(*content.enriched_title, Segment::kEnriched, "enriched");
  }
  if (image) {
    push_image(Segment::kImage, "img0");
    for (std::size_t j = 0; j < content.aug_images.size(); ++j) push_image(Segment::kAugImage, "aug" + std::to_string(j));
  }
  return layout;
}

template <typename Scalar>
Encoder<Scalar>::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](int r, int c, double stddev) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(stddev * normal(rng));
    return m;
  };
  const int d = config_.hidden;
  const int h = config_.moe.expert_hidden;
  const int z = config_.moe.experts;
  const double depth_scale = 1.0 / std::sqrt(2.0 * std::max(1, config_.layers));

  token_embedding_ = params_.add("embed.tokens", randn(config_.vocab_size, d, 0.5));
  text_position_ = params_.add("embed.text_position", Mat::Zero(config_.text_len, d));
  segment_embedding_ = params_.add("embed.segment", Mat::Zero(kSegmentCount, d));
  image_slot_ = params_.add("embed.image_slot", Mat::Zero(config_.visual_tokens, d));
  prompt_ = params_.add("embed.prompt", randn(std::max(config_.prompt_len, 1), d, 0.5));
  proj_w_ = params_.add("embed.proj_w", randn(config_.patch_dim, d, 1.0 / std::sqrt(config_.patch_dim)));
  proj_b_ = params_.add("embed.proj_b", Mat::Zero(1, d));
  dual_alignment_ = params_.add("moe.dual_alignment", randn(z, config_.moe.objectives, 0.02));

  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerIds ids;
    ids.ln1_gain = params_.add(p + "ln1_gain", Mat::Ones(1, d));
    ids.ln1_bias = params_.add(p + "ln1_bias", Mat::Zero(1, d));
    ids.w_qkv = params_.add(p + "attn.w_qkv", randn(d, 3 * d, 1.0 / std::sqrt(d)));
    ids.b_qkv = params_.add(p + "attn.b_qkv", Mat::Zero(1, 3 * d));
    ids.w_out = params_.add(p + "attn.w_out", randn(d, d, depth_scale / std::sqrt(d)));
    ids.b_out = params_.add(p + "attn.b_out", Mat::Zero(1, d));
    ids.ln2_gain = params_.add(p + "ln2_gain", Mat::Ones(1, d));
    ids.ln2_bias = params_.add(p + "ln2_bias", Mat::Zero(1, d));
    ids.gate = params_.add(p + "moe.gate", randn(d, z, 1.0 / std::sqrt(d)));
    for (int e = 0; e < z; ++e) {
      const std::string ep = p + "moe.expert" + std::to_string(e) + ".";
      ad::ExpertParams ex{};
      ex.w1 = params_.add(ep + "w1", randn(d, h, 1.0 / std::sqrt(d)));
      ex.b1 = params_.add(ep + "b1", Mat::Zero(1, h));
      ex.w2 = params_.add(ep + "w2", randn(h, d, depth_scale / std::sqrt(h)));
      ex.b2 = params_.add(ep + "b2", Mat::Zero(1, d));
      ids.experts.push_back(ex);
    }
    layers_.push_back(std::move(ids));
  }
}

template <typename Scalar>
ad::Var Encoder<Scalar>::embed(ad::Tape<Scalar>& t, const ProductContent& content, Modality modality) const {
  using namespace ad;
  const auto& c = config_;
  Var segments = t.param(segment_embedding_);
  Var tokens = t.param(token_embedding_);
  std::vector<Var> parts;
  auto segment_row = [&](Segment s) { return slice_rows(t, segments, static_cast<int>(s), 1); };
  auto text_part = [&](const std::vector<int>& ids, Segment s) {
    Var e = gather_rows(t, tokens, padded(ids, c.text_len));
    e = add(t, e, t.param(text_position_));
    return add_row(t, e, segment_row(s));
  };
  auto image_part = [&](const MatrixF& img, Segment s) {
    Var pooled = t.constant(pool_patches<Scalar>(img, c.visual_tokens));
    Var e = add_row(t, matmul(t, pooled, t.param(proj_w_)), t.param(proj_b_));
    e = add(t, e, t.param(image_slot_));
    return add_row(t, e, segment_row(s));
  };

  if (modality == Modality::kImage && c.prompt_len > 0)
    parts.push_back(add_row(t, t.param(prompt_), segment_row(Segment::kPrompt)));
  if (modality != Modality::kImage) {
    parts.push_back(text_part(content.title, Segment::kTitle));
    if (content.enriched_title) parts.push_back(text_part(*content.enriched_title, Segment::kEnriched));
  }
  if (modality != Modality::kText) {
    parts.push_back(image_part(content.image, Segment::kImage));
    for (const auto& a : content.aug_images) parts.push_back(image_part(a, Segment::kAugImage));
  }
  return parts.size() == 1 ? parts[0] : concat_rows(t, std::span<const Var>(parts));
}

template <typename Scalar>
ad::Var Encoder<Scalar>::forward(ad::Tape<Scalar>& t, const ProductContent& content, Modality modality,
                                 ForwardTrace<Scalar>* trace) const {
  using namespace ad;
  SequenceLayout layout = sequence_layout(content, modality, config_);
  Var x = embed(t, content, modality);
  const int top_k = config_.moe.top_k;
  for (const LayerIds& ids : layers_) {
    std::vector<Mat>* maps = nullptr;
    if (trace && trace->keep_attention) maps = &trace->attention.emplace_back();
    Var a = layer_norm_rows(t, x, t.param(ids.ln1_gain), t.param(ids.ln1_bias));
    a = self_attention(t, a, t.param(ids.w_qkv), t.param(ids.b_qkv), t.param(ids.w_out), t.param(ids.b_out),
                       config_.heads, maps);
    x = add(t, x, a);
    Var m = layer_norm_rows(t, x, t.param(ids.ln2_gain), t.param(ids.ln2_bias));
    Var probs = softmax_rows(t, matmul(t, m, t.param(ids.gate)));
    const Eigen::MatrixXi selected = select_top_k(t.value(probs), top_k);
    Mat mask = Mat::Zero(t.value(probs).rows(), t.value(probs).cols());
    RowVector<Scalar> assigned = RowVector<Scalar>::Zero(mask.cols());
    for (Eigen::Index s = 0; s < selected.rows(); ++s)
      for (Eigen::Index j = 0; j < selected.cols(); ++j) {
        mask(s, selected(s, j)) = Scalar(1);
        assigned(selected(s, j)) += Scalar(1);
      }
    Var weights = renormalize_selected(t, probs, mask);
    Var moe = moe_combine(t, m, weights, mask, std::span<const ExpertParams>(ids.experts));
    x = add(t, x, moe);
    if (trace) trace->layers.push_back({probs, weights, std::move(assigned), mask.rows()});
  }
  Var r = mean_rows(t, x);
  if (config_.normalize_output) r = l2_normalize_rows(t, r);
  if (!t.value(r).allFinite()) throw NumericError("encoder produced non-finite representation");
  if (trace) trace->layout = std::move(layout);
  return r;
}

template <typename Scalar>
RowVector<Scalar> Encoder<Scalar>::encode(const ProductContent& content, Modality modality) const {
  auto& self = const_cast<Encoder&>(*this);
  ad::Tape<Scalar> tape(&self.params_, /*record_grad=*/false);
  const ad::Var r = forward(tape, content, modality);
  return tape.value(r).row(0);
}

template <typename Scalar>
std::vector<std::vector<Matrix<Scalar>>> Encoder<Scalar>::attention_weights(const ProductContent& content,
                                                                            Modality modality) const {
  auto& self = const_cast<Encoder&>(*this);
  ad::Tape<Scalar> tape(&self.params_, false);
  ForwardTrace<Scalar> trace;
  trace.keep_attention = true;
  forward(tape, content, modality, &trace);
  return std::move(trace.attention);
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace moon
