#pragma once

// Inter- and intra-product contrastive losses, the reliability filter and the
// combined training objective.

#include "moon/autodiff.hpp"
#include "moon/types.hpp"

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

namespace moon {

enum class AlignmentObjective { kInterText = 0, kInterImage = 1, kInterMultimodal = 2, kIntraPositive = 3, kIntraNegative = 4 };
inline constexpr int kObjectiveCount = 5;

inline constexpr std::array<std::string_view, kObjectiveCount> kObjectiveNames = {"inter_t", "inter_i", "inter_mm",
                                                                                  "intra_pos", "intra_neg"};

inline AlignmentObjective inter_objective(Modality m) {
  switch (m) {
    case Modality::kText: return AlignmentObjective::kInterText;
    case Modality::kImage: return AlignmentObjective::kInterImage;
    case Modality::kMultimodal: return AlignmentObjective::kInterMultimodal;
  }
  return AlignmentObjective::kInterMultimodal;
}

struct FilterSchedule {
  double delta_bar_start = 0.2;
  double delta_bar_end = -0.2;
  double sharpness = 10.0;
  double delta_threshold = 0.6;
  int total_steps = 1;

  void validate() const {
    if (!(delta_bar_start >= delta_bar_end)) throw ConfigError("filter: delta_bar_start must be >= delta_bar_end");
    if (!(sharpness > 0)) throw ConfigError("filter: sharpness must be positive");
    if (!(delta_threshold > 0 && delta_threshold < 1)) throw ConfigError("filter: delta_threshold must lie in (0, 1)");
    if (total_steps < 0) throw ConfigError("filter: total_steps must be >= 0");
  }
};

/// Linear decay of the margin offset from start (step 0) to end (step total).
inline double schedule_delta_bar(int step, int total_steps, const FilterSchedule& s) {
  if (step < 0 || step > total_steps) throw ValidationError("schedule_delta_bar: step outside [0, total_steps]");
  if (total_steps == 0) return s.delta_bar_start;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return s.delta_bar_start + (s.delta_bar_end - s.delta_bar_start) * frac;
}

struct LossBreakdown {
  std::array<double, kObjectiveCount> losses{};  // already filter-weighted
  std::array<bool, kObjectiveCount> active{};
  std::array<double, kObjectiveCount> omega{1, 1, 1, 1, 1};
  double aux = 0;
  double sparsity = 0;
  std::vector<double> reliability;  // phi per triplet
  std::vector<double> multipliers;  // filter multiplier per triplet
  double total = 0;

  double mean_reliability() const {
    if (reliability.empty()) return 0.0;
    double s = 0;
    for (double r : reliability) s += r;
    return s / static_cast<double>(reliability.size());
  }
};

namespace detail {
inline void require_loss_inputs(double tau, Eigen::Index negatives) {
  if (!(tau > 0)) throw ValidationError("temperature must be positive");
  if (negatives < 1) throw ValidationError("negatives must be non-empty");
}
}  // namespace detail

/// -log softmax of the positive logit among {positive} U negatives, logits = dot / tau.
template <typename Scalar>
Scalar contrastive_loss(const RowVector<Scalar>& anchor, const RowVector<Scalar>& positive,
                        const Matrix<Scalar>& negatives, Scalar tau) {
  detail::require_loss_inputs(tau, negatives.rows());
  if (positive.cols() != anchor.cols() || negatives.cols() != anchor.cols())
    throw ValidationError("contrastive_loss: dimension mismatch");
  const Scalar pos = anchor.dot(positive) / tau;
  const Vector<Scalar> neg = negatives * anchor.transpose() / tau;
  const Scalar mx = std::max(pos, neg.maxCoeff());
  const Scalar denom = std::exp(pos - mx) + (neg.array() - mx).exp().sum();
  return -(pos - mx - std::log(denom));
}

template <typename Scalar>
Scalar inter_loss(const RowVector<Scalar>& query, const RowVector<Scalar>& positive_mm,
                  const Matrix<Scalar>& negatives, Scalar tau) {
  return contrastive_loss(query, positive_mm, negatives, tau);
}

template <typename Scalar>
Scalar intra_loss(const RowVector<Scalar>& image, const RowVector<Scalar>& text,
                  const Matrix<Scalar>& unrelated_texts, Scalar tau_tilde) {
  return contrastive_loss(image, text, unrelated_texts, tau_tilde);
}

template <typename Scalar>
Scalar reliability_weight(const RowVector<Scalar>& q, const RowVector<Scalar>& p, const RowVector<Scalar>& n,
                          double sharpness, double delta_bar) {
  if (p.cols() != q.cols() || n.cols() != q.cols()) throw ValidationError("reliability_weight: dimension mismatch");
  const double margin = static_cast<double>(q.dot(p)) - static_cast<double>(q.dot(n));
  return static_cast<Scalar>(1.0 / (1.0 + std::exp(-sharpness * (margin - delta_bar))));
}

template <typename Scalar>
Scalar reliability_weight(const RowVector<Scalar>& q, const RowVector<Scalar>& p, const RowVector<Scalar>& n,
                          const FilterSchedule& schedule, int step) {
  return reliability_weight(q, p, n, schedule.sharpness, schedule_delta_bar(step, schedule.total_steps, schedule));
}

/// phi below the threshold, 1 at or above it.
inline std::vector<double> filter_weights(const std::vector<double>& phis, double delta_threshold) {
  std::vector<double> out;
  out.reserve(phis.size());
  for (double phi : phis) out.push_back(phi < delta_threshold ? phi : 1.0);
  return out;
}

/// Weighted objective sum plus the two regularisers; only active objectives count.
inline double total_loss(const LossBreakdown& parts, double alpha_aux, double beta) {
  double total = 0;
  for (int m = 0; m < kObjectiveCount; ++m) {
    if (!parts.active[static_cast<std::size_t>(m)]) continue;
    const double l = parts.losses[static_cast<std::size_t>(m)];
    const double w = parts.omega[static_cast<std::size_t>(m)];
    if (!std::isfinite(l)) throw NumericError("non-finite " + std::string(kObjectiveNames[static_cast<std::size_t>(m)]) + " loss");
    if (!std::isfinite(w)) throw NumericError("non-finite omega for " + std::string(kObjectiveNames[static_cast<std::size_t>(m)]));
    total += w * l;
  }
  if (!std::isfinite(parts.aux)) throw NumericError("non-finite aux loss");
  if (!std::isfinite(parts.sparsity)) throw NumericError("non-finite sparsity loss");
  return total + alpha_aux * parts.aux + beta * parts.sparsity;
}

namespace ad {

/// Batched contrastive rows. Row b scores anchors[b] against every row of
/// `positives` plus hard_negatives[b]; the target is positives[b]. Returns B x 1.
template <typename Scalar>
Var contrastive_rows(Tape<Scalar>& t, Var anchors, Var positives, Var hard_negatives, Scalar tau) {
  const Eigen::Index b = t.value(anchors).rows();
  if (t.value(positives).rows() != b || t.value(hard_negatives).rows() != b)
    throw ValidationError("contrastive_rows: batch size mismatch");
  if (!(tau > 0)) throw ValidationError("temperature must be positive");
  const Var candidates = concat_rows(t, std::span<const Var>(std::array<Var, 2>{positives, hard_negatives}));
  const Var logits = scale(t, matmul_nt(t, anchors, candidates), Scalar(1) / tau);
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> allowed =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(b, 2 * b, false);
  std::vector<int> targets(static_cast<std::size_t>(b));
  for (Eigen::Index r = 0; r < b; ++r) {
    allowed.row(r).head(b).setConstant(true);
    allowed(r, b + r) = true;
    targets[static_cast<std::size_t>(r)] = static_cast<int>(r);
  }
  return masked_cross_entropy_rows(t, logits, std::move(allowed), std::move(targets));
}

/// sigma(sharpness * (q.p - q.n - delta_bar)) per row; B x 1.
template <typename Scalar>
Var reliability_rows(Tape<Scalar>& t, Var q, Var p, Var n, Scalar sharpness, Scalar delta_bar) {
  Var margin = sub(t, rowwise_dot(t, q, p), rowwise_dot(t, q, n));
  return sigmoid(t, scale(t, add_scalar(t, margin, -delta_bar), sharpness));
}

}  // namespace ad

}  // namespace moon
