#pragma once

// Modality-driven mixture-of-experts: token-level top-k gating, expert
// combination, the expert-by-objective preference matrix, objective weights and
// the two MoE regularisers.
//
// Plain Eigen free functions compute values; the ad:: overloads record the same
// computation on a Tape for training.

#include "moon/autodiff.hpp"
#include "moon/types.hpp"

#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

namespace moon {

struct MoEConfig {
  int experts = 4;         // Z
  int top_k = 2;
  int expert_hidden = 64;
  int objectives = 5;      // M

  void validate() const {
    if (experts < 1) throw ValidationError("moe.experts must be >= 1");
    if (top_k < 1 || top_k > experts) throw ValidationError("moe.top_k must lie in [1, experts]");
    if (expert_hidden < 1) throw ValidationError("moe.expert_hidden must be >= 1");
    if (objectives < 1) throw ValidationError("moe.objectives must be >= 1");
  }
};

/// How objective weights are scaled after aggregation.
enum class OmegaMode {
  kRenormalized,  // rescaled so the weights of populated objectives average to one
  kRaw,
};

template <typename Scalar>
struct GateOutput {
  Matrix<Scalar> activations;  // G: S x Z, softmax over experts
  Eigen::MatrixXi selected;    // S x top_k expert indices, by descending activation
  Matrix<Scalar> weights;      // G~: S x Z, renormalised over the selection, zero elsewhere

  /// 0/1 mask of the selected experts.
  Matrix<Scalar> selection_mask() const {
    Matrix<Scalar> mask = Matrix<Scalar>::Zero(activations.rows(), activations.cols());
    for (Eigen::Index s = 0; s < selected.rows(); ++s)
      for (Eigen::Index j = 0; j < selected.cols(); ++j) mask(s, selected(s, j)) = Scalar(1);
    return mask;
  }
};

/// Indices of the top_k largest entries of each row; ties go to the lower index.
template <typename Derived>
Eigen::MatrixXi select_top_k(const Eigen::MatrixBase<Derived>& activations, int top_k) {
  const Eigen::Index z = activations.cols();
  if (top_k < 1 || top_k > z) throw ValidationError("top_k must lie in [1, experts]");
  Eigen::MatrixXi out(activations.rows(), top_k);
  std::vector<int> order(static_cast<std::size_t>(z));
  for (Eigen::Index s = 0; s < activations.rows(); ++s) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return activations(s, a) > activations(s, b); });
    for (int j = 0; j < top_k; ++j) out(s, j) = order[static_cast<std::size_t>(j)];
  }
  return out;
}

/// Selection and renormalisation given already-softmaxed activations.
template <typename Scalar>
GateOutput<Scalar> gate_from_activations(Matrix<Scalar> activations, int top_k) {
  GateOutput<Scalar> out;
  out.selected = select_top_k(activations, top_k);
  out.activations = std::move(activations);
  Matrix<Scalar> mask = out.selection_mask();
  out.weights = out.activations.cwiseProduct(mask);
  out.weights.array().colwise() /= out.weights.rowwise().sum().array();
  return out;
}

template <typename Derived>
Matrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

/// G = softmax(h W_g) per token, then top-k selection and renormalisation.
template <typename Scalar>
GateOutput<Scalar> gate(const Matrix<Scalar>& hidden, const Matrix<Scalar>& w_gate, int top_k) {
  if (!hidden.allFinite()) throw NumericError("gate: hidden states contain non-finite values");
  if (hidden.cols() != w_gate.rows()) throw ValidationError("gate: hidden dim does not match gating layer");
  return gate_from_activations<Scalar>(softmax_rows(hidden * w_gate), top_k);
}

template <typename Scalar>
using ExpertFn = std::function<Matrix<Scalar>(const Matrix<Scalar>&)>;

/// h_hat = sum_z G~_z f_z(h), evaluating each expert only on its routed tokens.
template <typename Scalar>
Matrix<Scalar> moe_forward(const Matrix<Scalar>& hidden, std::span<const ExpertFn<Scalar>> experts,
                           const GateOutput<Scalar>& gate_out) {
  if (static_cast<Eigen::Index>(experts.size()) != gate_out.weights.cols())
    throw ValidationError("moe_forward: expert count does not match gate");
  if (gate_out.weights.rows() != hidden.rows()) throw ValidationError("moe_forward: token count mismatch");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(hidden.rows(), hidden.cols());
  for (std::size_t z = 0; z < experts.size(); ++z) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index s = 0; s < hidden.rows(); ++s)
      if (gate_out.weights(s, static_cast<Eigen::Index>(z)) != Scalar(0)) rows.push_back(s);
    if (rows.empty()) continue;
    Matrix<Scalar> routed = hidden(rows, Eigen::all);
    Matrix<Scalar> f = experts[z](routed);
    if (f.rows() != routed.rows() || f.cols() != hidden.cols())
      throw ValidationError("moe_forward: expert output must be tokens x hidden");
    for (std::size_t i = 0; i < rows.size(); ++i)
      out.row(rows[i]) += gate_out.weights(rows[i], static_cast<Eigen::Index>(z)) * f.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

/// Row-wise softmax of the dual-alignment matrix: P[z, m] = preference of expert z for objective m.
template <typename Derived>
Matrix<typename Derived::Scalar> expert_preferences(const Eigen::MatrixBase<Derived>& dual_alignment) {
  return softmax_rows(dual_alignment);
}

/// Objective weights from per-sample mean routing weights.
///
/// sample_gates is B x Z (row b: routing weights of sample b averaged over its
/// tokens); members[m] lists the samples taking part in objective m. Empty
/// objectives get weight one when allow_empty, otherwise a ConfigError.
template <typename Scalar>
RowVector<Scalar> objective_weights(const Matrix<Scalar>& sample_gates, const Matrix<Scalar>& preferences,
                                    const std::vector<std::vector<int>>& members, OmegaMode mode,
                                    bool allow_empty = false) {
  const auto m_count = preferences.cols();
  if (static_cast<Eigen::Index>(members.size()) != m_count)
    throw ConfigError("objective_weights: membership list size does not match objective count");
  if (sample_gates.cols() != preferences.rows()) throw ValidationError("objective_weights: expert count mismatch");
  RowVector<Scalar> omega = RowVector<Scalar>::Ones(m_count);
  Scalar populated_sum = 0;
  int populated = 0;
  for (Eigen::Index m = 0; m < m_count; ++m) {
    const auto& ids = members[static_cast<std::size_t>(m)];
    if (ids.empty()) {
      if (!allow_empty) throw ConfigError("objective " + std::to_string(m) + " has no participating samples");
      continue;
    }
    Scalar acc = 0;
    for (int b : ids) acc += sample_gates.row(b).dot(preferences.col(m));
    omega(m) = acc / static_cast<Scalar>(ids.size());
    populated_sum += omega(m);
    ++populated;
  }
  if (mode == OmegaMode::kRenormalized && populated > 0) {
    for (Eigen::Index m = 0; m < m_count; ++m)
      if (!members[static_cast<std::size_t>(m)].empty()) omega(m) *= static_cast<Scalar>(populated) / populated_sum;
  }
  return omega;
}

/// Switch-style balance term Z * sum_z f_z * mean_prob_z over all gated tokens,
/// where f_z is the share of token-to-expert assignments routed to z.
template <typename Scalar>
Scalar load_balance_loss(std::span<const GateOutput<Scalar>> gates) {
  if (gates.empty()) throw ValidationError("load_balance_loss: empty batch");
  const Eigen::Index z = gates[0].activations.cols();
  RowVector<Scalar> prob_sum = RowVector<Scalar>::Zero(z);
  RowVector<Scalar> assigned = RowVector<Scalar>::Zero(z);
  Scalar tokens = 0, slots = 0;
  for (const auto& g : gates) {
    prob_sum += g.activations.colwise().sum();
    for (Eigen::Index s = 0; s < g.selected.rows(); ++s)
      for (Eigen::Index j = 0; j < g.selected.cols(); ++j) assigned(g.selected(s, j)) += Scalar(1);
    tokens += static_cast<Scalar>(g.activations.rows());
    slots += static_cast<Scalar>(g.selected.size());
  }
  if (tokens == 0) throw ValidationError("load_balance_loss: empty batch");
  return static_cast<Scalar>(z) * (assigned / slots).dot(prob_sum / tokens);
}

/// Mean per-expert entropy (natural log) of the preference rows.
template <typename Derived>
typename Derived::Scalar sparsity_loss(const Eigen::MatrixBase<Derived>& preferences) {
  using Scalar = typename Derived::Scalar;
  const auto logs = preferences.unaryExpr([](Scalar x) { return x > Scalar(0) ? std::log(x) : Scalar(0); });
  return -preferences.cwiseProduct(logs).sum() / static_cast<Scalar>(preferences.rows());
}

// ---------------------------------------------------------------------------
// Differentiable counterparts.

namespace ad {

struct ExpertParams {
  ParamId w1, b1, w2, b2;  // D x H, 1 x H, H x D, 1 x D
};

/// Routes each token through its selected experts (GELU MLPs) and sums the
/// outputs weighted by `weights` (S x Z, zero outside `selection`).
template <typename Scalar>
Var moe_combine(Tape<Scalar>& t, Var x, Var weights, const Matrix<Scalar>& selection,
                std::span<const ExpertParams> experts) {
  using Mat = Matrix<Scalar>;
  const Mat& h = t.value(x);
  const Mat& w = t.value(weights);
  const auto* store = t.parameters();
  struct Routed {
    std::vector<Eigen::Index> rows;
    Mat input, pre, act, out;
  };
  auto cache = std::make_shared<std::vector<Routed>>(experts.size());
  Mat result = Mat::Zero(h.rows(), h.cols());
  for (std::size_t z = 0; z < experts.size(); ++z) {
    Routed& r = (*cache)[z];
    for (Eigen::Index s = 0; s < h.rows(); ++s)
      if (selection(s, static_cast<Eigen::Index>(z)) != Scalar(0)) r.rows.push_back(s);
    if (r.rows.empty()) continue;
    const ExpertParams& e = experts[z];
    r.input = h(r.rows, Eigen::all);
    r.pre = r.input * store->value(e.w1);
    r.pre.rowwise() += store->value(e.b1).row(0);
    r.act = r.pre.unaryExpr([](Scalar v) { return detail::gelu(v); });
    r.out = r.act * store->value(e.w2);
    r.out.rowwise() += store->value(e.b2).row(0);
    for (std::size_t i = 0; i < r.rows.size(); ++i)
      result.row(r.rows[i]) += w(r.rows[i], static_cast<Eigen::Index>(z)) * r.out.row(static_cast<Eigen::Index>(i));
  }

  std::vector<Var> inputs{x, weights};
  std::vector<ExpertParams> params(experts.begin(), experts.end());
  std::vector<Var> param_vars;
  for (const auto& e : params) {
    for (ParamId id : {e.w1, e.b1, e.w2, e.b2}) param_vars.push_back(t.param(id));
  }
  inputs.insert(inputs.end(), param_vars.begin(), param_vars.end());

  return t.record(std::move(result), inputs, [x, weights, cache, param_vars](Tape<Scalar>& tp, Var, const Mat& g) {
    const Mat& wv = tp.value(weights);
    for (std::size_t z = 0; z < cache->size(); ++z) {
      const Routed& r = (*cache)[z];
      if (r.rows.empty()) continue;
      const auto zi = static_cast<Eigen::Index>(z);
      Mat g_out = g(r.rows, Eigen::all);
      if (tp.requires_grad(weights)) {
        Mat& gw = tp.grad(weights);
        for (std::size_t i = 0; i < r.rows.size(); ++i)
          gw(r.rows[i], zi) += g_out.row(static_cast<Eigen::Index>(i)).dot(r.out.row(static_cast<Eigen::Index>(i)));
      }
      for (std::size_t i = 0; i < r.rows.size(); ++i) g_out.row(static_cast<Eigen::Index>(i)) *= wv(r.rows[i], zi);
      const Var w1 = param_vars[4 * z], b1 = param_vars[4 * z + 1], w2 = param_vars[4 * z + 2],
                b2 = param_vars[4 * z + 3];
      if (tp.requires_grad(w2)) tp.grad(w2).noalias() += r.act.transpose() * g_out;
      if (tp.requires_grad(b2)) tp.grad(b2) += g_out.colwise().sum();
      Mat g_pre = (g_out * tp.value(w2).transpose())
                      .cwiseProduct(r.pre.unaryExpr([](Scalar v) { return detail::gelu_grad(v); }));
      if (tp.requires_grad(w1)) tp.grad(w1).noalias() += r.input.transpose() * g_pre;
      if (tp.requires_grad(b1)) tp.grad(b1) += g_pre.colwise().sum();
      if (tp.requires_grad(x)) {
        Mat g_in = g_pre * tp.value(w1).transpose();
        Mat& gx = tp.grad(x);
        for (std::size_t i = 0; i < r.rows.size(); ++i) gx.row(r.rows[i]) += g_in.row(static_cast<Eigen::Index>(i));
      }
    }
  });
}

/// Differentiable objective weights. group_gates[m] is |B_m| x Z (per-sample mean
/// routing weights of the samples of objective m); preferences is Z x M.
template <typename Scalar>
Var objective_weights(Tape<Scalar>& t, std::span<const Var> group_gates, Var preferences, OmegaMode mode) {
  const auto m_count = static_cast<Eigen::Index>(group_gates.size());
  if (t.value(preferences).cols() != m_count) throw ConfigError("objective_weights: objective count mismatch");
  std::vector<Var> raw;
  for (Eigen::Index m = 0; m < m_count; ++m) {
    Var col = slice_cols(t, preferences, m, 1);                                   // Z x 1
    Var support = matmul(t, group_gates[static_cast<std::size_t>(m)], col);       // |B_m| x 1
    raw.push_back(mean_rows(t, support));                                         // 1 x 1
  }
  // Stack as a column, then transpose-free: concat_rows gives M x 1.
  Var stacked = concat_rows(t, std::span<const Var>(raw));
  if (mode == OmegaMode::kRaw) return stacked;
  Var inv_total = reciprocal(t, sum_all(t, stacked));
  return scale(t, scale_by(t, stacked, inv_total), static_cast<Scalar>(m_count));
}

}  // namespace ad

}  // namespace moon
