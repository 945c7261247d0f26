#pragma once

#include "moon/autodiff.hpp"

#include <memory>
#include <vector>

namespace moon::ad {

/// Bidirectional multi-head self-attention with a fused QKV projection.
///
/// x: S x D, w_qkv: D x 3D, b_qkv: 1 x 3D, w_out: D x D, b_out: 1 x D.
/// When probs_out is non-null it receives one S x S row-stochastic map per head.
template <typename Scalar>
Var self_attention(Tape<Scalar>& t, Var x, Var w_qkv, Var b_qkv, Var w_out, Var b_out, int heads,
                   std::vector<Matrix<Scalar>>* probs_out = nullptr) {
  using Mat = Matrix<Scalar>;
  const Mat& xv = t.value(x);
  const Eigen::Index d = xv.cols();
  if (d % heads != 0) throw ValidationError("self_attention: hidden dim not divisible by heads");
  const Eigen::Index dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  auto qkv = std::make_shared<Mat>(xv * t.value(w_qkv));
  qkv->rowwise() += t.value(b_qkv).row(0);
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(heads));
  auto concat = std::make_shared<Mat>(xv.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv->middleCols(h * dh, dh);
    const auto k = qkv->middleCols(d + h * dh, dh);
    const auto v = qkv->middleCols(2 * d + h * dh, dh);
    Mat scores = (q * k.transpose()) * inv_sqrt;
    scores = (scores.colwise() - scores.rowwise().maxCoeff()).array().exp().matrix();
    scores.array().colwise() /= scores.rowwise().sum().array();
    concat->middleCols(h * dh, dh).noalias() = scores * v;
    (*probs)[static_cast<std::size_t>(h)] = std::move(scores);
  }
  if (probs_out) *probs_out = *probs;
  Mat out = *concat * t.value(w_out);
  out.rowwise() += t.value(b_out).row(0);

  return t.record(std::move(out), {x, w_qkv, b_qkv, w_out, b_out},
                  [=](Tape<Scalar>& tp, Var, const Mat& g) {
                    if (tp.requires_grad(w_out)) tp.grad(w_out).noalias() += concat->transpose() * g;
                    if (tp.requires_grad(b_out)) tp.grad(b_out) += g.colwise().sum();
                    const Mat g_concat = g * tp.value(w_out).transpose();
                    Mat g_qkv(qkv->rows(), qkv->cols());
                    for (int h = 0; h < heads; ++h) {
                      const Mat& p = (*probs)[static_cast<std::size_t>(h)];
                      const auto q = qkv->middleCols(h * dh, dh);
                      const auto k = qkv->middleCols(d + h * dh, dh);
                      const auto v = qkv->middleCols(2 * d + h * dh, dh);
                      const auto go = g_concat.middleCols(h * dh, dh);
                      Mat gp = go * v.transpose();
                      const auto dots = gp.cwiseProduct(p).rowwise().sum().eval();
                      Mat gs = (p.array() * (gp.colwise() - dots).array()).matrix() * inv_sqrt;
                      g_qkv.middleCols(h * dh, dh).noalias() = gs * k;
                      g_qkv.middleCols(d + h * dh, dh).noalias() = gs.transpose() * q;
                      g_qkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * go;
                    }
                    if (tp.requires_grad(w_qkv)) tp.grad(w_qkv).noalias() += tp.value(x).transpose() * g_qkv;
                    if (tp.requires_grad(b_qkv)) tp.grad(b_qkv) += g_qkv.colwise().sum();
                    if (tp.requires_grad(x)) tp.grad(x).noalias() += g_qkv * tp.value(w_qkv).transpose();
                  });
}

}  // namespace moon::ad
