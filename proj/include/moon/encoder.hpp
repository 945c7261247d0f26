#pragma once

// Toy generative-style multimodal encoder: token and patch embeddings, a stack
// of pre-norm transformer blocks whose feed-forward sublayer is the
// modality-driven MoE, and mean pooling over every final hidden state.

#include "moon/autodiff.hpp"
#include "moon/data.hpp"
#include "moon/kv_config.hpp"
#include "moon/moe.hpp"
#include "moon/parameters.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace moon {

struct EncoderConfig {
  int hidden = 64;         // D
  int visual_tokens = 4;   // V, tokens per image
  int text_len = 16;       // L, padded length of each text segment
  int layers = 2;
  int heads = 4;
  int vocab_size = 512;
  int prompt_len = 4;      // learned prefix for image-only inputs
  int patches = 4;         // P, must be a multiple of V
  int patch_dim = 16;      // F
  MoEConfig moe;
  bool normalize_output = true;

  void validate() const;
  KvConfig to_kv() const;
  static EncoderConfig from_kv(const KvConfig& kv);
  std::string hash() const;

  friend bool operator==(const EncoderConfig& a, const EncoderConfig& b) { return a.to_kv().entries() == b.to_kv().entries(); }
};

/// Token kinds within an assembled input sequence.
enum class Segment { kTitle = 0, kEnriched = 1, kPrompt = 2, kImage = 3, kAugImage = 4 };
inline constexpr int kSegmentCount = 5;

struct SequenceLayout {
  std::vector<Segment> segments;    // one per position
  std::vector<std::string> labels;  // readable token labels ("title:w17", "img0:v2", ...)
  std::size_t size() const { return segments.size(); }
};

/// Layout of the sequence the encoder builds for `content` restricted to
/// `modality`; throws ValidationError if a required field is missing.
SequenceLayout sequence_layout(const ProductContent& content, Modality modality, const EncoderConfig& config);

/// Per-layer routing statistics captured during a forward pass.
template <typename Scalar>
struct LayerRouting {
  ad::Var gate_probs;          // S x Z activations G
  ad::Var weights;             // S x Z renormalised G~
  RowVector<Scalar> assigned;  // token-to-expert assignment counts
  Eigen::Index tokens = 0;
};

template <typename Scalar>
struct ForwardTrace {
  std::vector<LayerRouting<Scalar>> layers;
  // [layer][head] S x S attention maps; filled only when requested.
  std::vector<std::vector<Matrix<Scalar>>> attention;
  bool keep_attention = false;
  SequenceLayout layout;
};

template <typename Scalar>
class Encoder {
 public:
  using Mat = Matrix<Scalar>;

  struct LayerIds {
    ParamId ln1_gain, ln1_bias, w_qkv, b_qkv, w_out, b_out, ln2_gain, ln2_bias, gate;
    std::vector<ad::ExpertParams> experts;
  };

  Encoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  ParameterStore<Scalar>& parameters() { return params_; }
  const ParameterStore<Scalar>& parameters() const { return params_; }
  ParamId dual_alignment_id() const { return dual_alignment_; }

  /// Records the forward pass on `tape` and returns the 1 x D representation.
  ad::Var forward(ad::Tape<Scalar>& tape, const ProductContent& content, Modality modality,
                  ForwardTrace<Scalar>* trace = nullptr) const;

  RowVector<Scalar> encode(const ProductContent& content, Modality modality) const;

  /// [layer][head] S x S attention maps.
  std::vector<std::vector<Mat>> attention_weights(const ProductContent& content, Modality modality) const;

 private:
  ad::Var embed(ad::Tape<Scalar>& t, const ProductContent& content, Modality modality) const;

  EncoderConfig config_;
  ParameterStore<Scalar> params_;
  ParamId token_embedding_, text_position_, segment_embedding_, image_slot_, prompt_, proj_w_, proj_b_;
  ParamId dual_alignment_;
  std::vector<LayerIds> layers_;
};

/// Copies parameter values between encoders of different scalar types.
template <typename To, typename From>
void copy_parameters(const Encoder<From>& from, Encoder<To>& to) {
  const auto& src = from.parameters();
  auto& dst = to.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst.value(dst.find(src.name(i))) = src.value(i).template cast<To>();
}

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace moon
