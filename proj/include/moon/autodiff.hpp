#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records the forward computation as a list of nodes; every node owns its
// value and, once touched during backward, its gradient. Parameter nodes alias a
// ParameterStore so their gradients accumulate directly into the store.

#include "moon/parameters.hpp"
#include "moon/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace moon::ad {

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  // Called with the node itself and its accumulated upstream gradient.
  using Backward = std::function<void(Tape&, Var self, const Mat& upstream)>;

  explicit Tape(ParameterStore<Scalar>* params = nullptr, bool record_grad = true)
      : params_(params), record_(record_grad) {
    nodes_.reserve(512);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  ParameterStore<Scalar>* parameters() const { return params_; }

  Var constant(Mat value) {
    nodes_.push_back(Node{std::move(value), {}, std::nullopt, false, {}});
    return last();
  }

  Var param(ParamId id) {
    if (params_ == nullptr) throw ValidationError("tape has no parameter store");
    nodes_.push_back(Node{{}, {}, id, record_, {}});
    return last();
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.param ? params_->value(*n.param) : n.value;
  }

  Scalar scalar(Var v) const { return value(v)(0, 0); }

  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Gradient buffer of v, zero-initialised on first access.
  Mat& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.param) return params_->grad(*n.param);
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var record(Mat value, std::initializer_list<Var> inputs, Backward back) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(back));
  }

  Var record(Mat value, std::span<const Var> inputs, Backward back) {
    bool needs = false;
    if (record_) {
      for (Var in : inputs) needs = needs || requires_grad(in);
    }
    nodes_.push_back(Node{std::move(value), {}, std::nullopt, needs, needs ? std::move(back) : Backward{}});
    return last();
  }

  /// Accumulates d(root)/d(node) into every reachable node; root must be 1x1.
  void backward(Var root) {
    if (value(root).size() != 1) throw ValidationError("backward root must be a scalar");
    if (!requires_grad(root)) return;
    grad(root).setConstant(Scalar(1));
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.back || n.grad.size() == 0) continue;
      n.back(*this, Var{i}, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::optional<ParamId> param;
    bool requires_grad = false;
    Backward back;
  };

  Var last() const { return Var{static_cast<std::int32_t>(nodes_.size() - 1)}; }

  ParameterStore<Scalar>* params_;
  bool record_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops.

template <typename Scalar>
Var detach(Tape<Scalar>& t, Var a) {
  return t.constant(t.value(a));
}

template <typename Scalar>
Var matmul(Tape<Scalar>& t, Var a, Var b) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a) * t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * g;
  });
}

// a * b^T
template <typename Scalar>
Var matmul_nt(Tape<Scalar>& t, Var a, Var b) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a) * t.value(b).transpose();
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad(b).noalias() += g.transpose() * tp.value(a);
  });
}

template <typename Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

template <typename Scalar>
Var sub(Tape<Scalar>& t, Var a, Var b) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a) - t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) -= g;
  });
}

// Broadcast-add a 1xC row to every row of a.
template <typename Scalar>
Var add_row(Tape<Scalar>& t, Var a, Var row) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).rowwise() + t.value(row).row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(row)) tp.grad(row) += g.colwise().sum();
  });
}

template <typename Scalar>
Var mul(Tape<Scalar>& t, Var a, Var b) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).cwiseProduct(t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g.cwiseProduct(tp.value(b));
    if (tp.requires_grad(b)) tp.grad(b) += g.cwiseProduct(tp.value(a));
  });
}

template <typename Scalar>
Var scale(Tape<Scalar>& t, Var a, Scalar s) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a) * s;
  return t.record(std::move(out), {a}, [a, s](Tape<Scalar>& tp, Var, const Mat& g) { tp.grad(a) += g * s; });
}

template <typename Scalar>
Var add_scalar(Tape<Scalar>& t, Var a, Scalar s) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).array() + s;
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var, const Mat& g) { tp.grad(a) += g; });
}

// a * s where s is a 1x1 node.
template <typename Scalar>
Var scale_by(Tape<Scalar>& t, Var a, Var s) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a) * t.scalar(s);
  return t.record(std::move(out), {a, s}, [a, s](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g * tp.scalar(s);
    if (tp.requires_grad(s)) tp.grad(s)(0, 0) += g.cwiseProduct(tp.value(a)).sum();
  });
}

template <typename Scalar>
Var reciprocal(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).cwiseInverse();
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var self, const Mat& g) {
    tp.grad(a).array() -= g.array() * tp.value(self).array().square();
  });
}

template <typename Scalar>
Var sigmoid(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  Mat out = (Scalar(1) + (-t.value(a).array()).exp()).inverse().matrix();
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var self, const Mat& g) {
    const auto y = tp.value(self).array();
    tp.grad(a).array() += g.array() * y * (Scalar(1) - y);
  });
}

namespace detail {

template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)

template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar u = kGeluC<Scalar> * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar x2 = x * x;
  const Scalar u = kGeluC<Scalar> * (x + Scalar(0.044715) * x2 * x);
  const Scalar th = std::tanh(u);
  const Scalar du = kGeluC<Scalar> * (Scalar(1) + Scalar(3 * 0.044715) * x2);
  return Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * x * (Scalar(1) - th * th) * du;
}

}  // namespace detail

// tanh-approximated GELU.
template <typename Scalar>
Var gelu(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).unaryExpr([](Scalar x) { return detail::gelu(x); });
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(a) += g.cwiseProduct(tp.value(a).unaryExpr([](Scalar x) { return detail::gelu_grad(x); }));
  });
}

template <typename Scalar>
Var softmax_rows(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  const Mat& x = t.value(a);
  Mat out = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var self, const Mat& g) {
    const Mat& y = tp.value(self);
    const auto dots = g.cwiseProduct(y).rowwise().sum().eval();
    tp.grad(a) += (y.array() * (g.colwise() - dots).array()).matrix();
  });
}

// Per-row layer normalisation with learnable 1xC gain and bias.
template <typename Scalar>
Var layer_norm_rows(Tape<Scalar>& t, Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5)) {
  using Mat = Matrix<Scalar>;
  const Mat& v = t.value(x);
  const auto cols = static_cast<Scalar>(v.cols());
  Vector<Scalar> mean = v.rowwise().sum() / cols;
  Mat centered = v.colwise() - mean;
  Vector<Scalar> inv_std = ((centered.array().square().rowwise().sum() / cols) + eps).rsqrt().matrix();
  Mat xhat = centered.array().colwise() * inv_std.array();
  Mat out = (xhat.array().rowwise() * t.value(gain).row(0).array()).matrix();
  out.rowwise() += t.value(bias).row(0);
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Scalar>& tp, Var,
                                                                                          const Mat& g) {
                    if (tp.requires_grad(gain)) tp.grad(gain) += g.cwiseProduct(xhat).colwise().sum();
                    if (tp.requires_grad(bias)) tp.grad(bias) += g.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    const Scalar n = static_cast<Scalar>(xhat.cols());
                    Mat gx_hat = g.array().rowwise() * tp.value(gain).row(0).array();
                    const auto m1 = (gx_hat.rowwise().sum() / n).eval();
                    const auto m2 = (gx_hat.cwiseProduct(xhat).rowwise().sum() / n).eval();
                    Mat gx = gx_hat.colwise() - m1;
                    gx -= (xhat.array().colwise() * m2.array()).matrix();
                    tp.grad(x) += (gx.array().colwise() * inv_std.array()).matrix();
                  });
}

// ---------------------------------------------------------------------------
// Shape ops.

template <typename Scalar>
Var concat_rows(Tape<Scalar>& t, std::span<const Var> parts) {
  using Mat = Matrix<Scalar>;
  if (parts.empty()) throw ValidationError("concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts[0]).cols();
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw ValidationError("concat_rows column mismatch");
    rows += t.value(p).rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs](Tape<Scalar>& tp, Var, const Mat& g) {
    Eigen::Index r0 = 0;
    for (Var p : inputs) {
      const Eigen::Index n = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.grad(p) += g.middleRows(r0, n);
      r0 += n;
    }
  });
}

template <typename Scalar>
Var slice_rows(Tape<Scalar>& t, Var a, Eigen::Index start, Eigen::Index count) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).middleRows(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(a).middleRows(start, count) += g;
  });
}

template <typename Scalar>
Var slice_cols(Tape<Scalar>& t, Var a, Eigen::Index start, Eigen::Index count) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(a).middleCols(start, count) += g;
  });
}

template <typename Scalar>
Var element(Tape<Scalar>& t, Var a, Eigen::Index r, Eigen::Index c) {
  using Mat = Matrix<Scalar>;
  Mat out(1, 1);
  out(0, 0) = t.value(a)(r, c);
  return t.record(std::move(out), {a}, [a, r, c](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(a)(r, c) += g(0, 0);
  });
}

// Column means -> 1xC.
template <typename Scalar>
Var mean_rows(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  const auto n = static_cast<Scalar>(t.value(a).rows());
  Mat out = t.value(a).colwise().sum() / n;
  return t.record(std::move(out), {a}, [a, n](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(a).rowwise() += g.row(0) / n;
  });
}

// Column sums -> 1xC.
template <typename Scalar>
Var sum_rows(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).colwise().sum();
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var, const Mat& g) { tp.grad(a).rowwise() += g.row(0); });
}

template <typename Scalar>
Var sum_all(Tape<Scalar>& t, Var a) {
  using Mat = Matrix<Scalar>;
  Mat out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape<Scalar>& tp, Var, const Mat& g) { tp.grad(a).array() += g(0, 0); });
}

template <typename Scalar>
Var mean_all(Tape<Scalar>& t, Var a) {
  const auto n = static_cast<Scalar>(t.value(a).size());
  return scale(t, sum_all(t, a), Scalar(1) / n);
}

// Per-row dot products of equally-shaped a and b -> Rx1.
template <typename Scalar>
Var rowwise_dot(Tape<Scalar>& t, Var a, Var b) {
  using Mat = Matrix<Scalar>;
  Mat out = t.value(a).cwiseProduct(t.value(b)).rowwise().sum();
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& tp, Var, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad(a) += (tp.value(b).array().colwise() * g.col(0).array()).matrix();
    if (tp.requires_grad(b)) tp.grad(b) += (tp.value(a).array().colwise() * g.col(0).array()).matrix();
  });
}

// Each row scaled to unit Euclidean norm.
template <typename Scalar>
Var l2_normalize_rows(Tape<Scalar>& t, Var a, Scalar eps = Scalar(1e-12)) {
  using Mat = Matrix<Scalar>;
  Vector<Scalar> norms = t.value(a).rowwise().norm().cwiseMax(eps);
  Mat out = t.value(a).array().colwise() / norms.array();
  return t.record(std::move(out), {a}, [a, norms = std::move(norms)](Tape<Scalar>& tp, Var self, const Mat& g) {
    const Mat& y = tp.value(self);
    const auto dots = g.cwiseProduct(y).rowwise().sum().eval();
    Mat gx = g - (y.array().colwise() * dots.array()).matrix();
    tp.grad(a) += (gx.array().colwise() / norms.array()).matrix();
  });
}

// Rows of a parameter table selected by integer ids.
template <typename Scalar>
Var gather_rows(Tape<Scalar>& t, Var table, std::vector<int> ids) {
  using Mat = Matrix<Scalar>;
  const Mat& tab = t.value(table);
  Mat out(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tab.rows()) throw ValidationError("gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
  }
  return t.record(std::move(out), {table}, [table, ids = std::move(ids)](Tape<Scalar>& tp, Var, const Mat& g) {
    Mat& gt = tp.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

// ---------------------------------------------------------------------------
// Loss building blocks.

// Per-row softmax cross-entropy restricted to the columns where `allowed` is
// true; `targets[r]` must be allowed in row r. Returns Rx1 losses.
template <typename Scalar>
Var masked_cross_entropy_rows(Tape<Scalar>& t, Var logits, Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> allowed,
                              std::vector<int> targets) {
  using Mat = Matrix<Scalar>;
  const Mat& z = t.value(logits);
  if (allowed.rows() != z.rows() || allowed.cols() != z.cols() || targets.size() != static_cast<std::size_t>(z.rows()))
    throw ValidationError("masked_cross_entropy_rows shape mismatch");
  Mat probs = Mat::Zero(z.rows(), z.cols());
  Mat out(z.rows(), 1);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (!allowed(r, tgt)) throw ValidationError("target column is masked out");
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      if (allowed(r, c)) mx = std::max(mx, z(r, c));
    Scalar denom = 0;
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      if (allowed(r, c)) {
        probs(r, c) = std::exp(z(r, c) - mx);
        denom += probs(r, c);
      }
    probs.row(r) /= denom;
    out(r, 0) = -(z(r, tgt) - mx - std::log(denom));
  }
  return t.record(std::move(out), {logits},
                  [logits, probs = std::move(probs), targets = std::move(targets)](Tape<Scalar>& tp, Var,
                                                                                  const Mat& g) {
                    Mat d = probs;
                    for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, targets[static_cast<std::size_t>(r)]) -= Scalar(1);
                    tp.grad(logits) += (d.array().colwise() * g.col(0).array()).matrix();
                  });
}

// x where x < threshold, else 1. Gradient passes only below the threshold.
template <typename Scalar>
Var threshold_multiplier(Tape<Scalar>& t, Var x, Scalar threshold) {
  using Mat = Matrix<Scalar>;
  Mat out = (t.value(x).array() < threshold).select(t.value(x).array(), Scalar(1)).matrix();
  return t.record(std::move(out), {x}, [x, threshold](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(x).array() += (tp.value(x).array() < threshold).select(g.array(), Scalar(0));
  });
}

// Mean over rows of the Shannon entropy (natural log) of each row of p.
template <typename Scalar>
Var mean_row_entropy(Tape<Scalar>& t, Var p) {
  using Mat = Matrix<Scalar>;
  const Mat& v = t.value(p);
  const Scalar z = static_cast<Scalar>(v.rows());
  Mat logs = v.unaryExpr([](Scalar x) { return x > Scalar(0) ? std::log(x) : Scalar(0); });
  Mat out(1, 1);
  out(0, 0) = -v.cwiseProduct(logs).sum() / z;
  return t.record(std::move(out), {p}, [p, z, logs = std::move(logs)](Tape<Scalar>& tp, Var, const Mat& g) {
    tp.grad(p).array() -= g(0, 0) * (logs.array() + Scalar(1)) / z;
  });
}

// Renormalise the selected entries of each row of g to sum to one; entries
// outside the selection are zero.
template <typename Scalar>
Var renormalize_selected(Tape<Scalar>& t, Var gates, Matrix<Scalar> selection) {
  using Mat = Matrix<Scalar>;
  Mat kept = t.value(gates).cwiseProduct(selection);
  Vector<Scalar> sums = kept.rowwise().sum();
  Mat out = kept.array().colwise() / sums.array();
  return t.record(std::move(out), {gates},
                  [gates, selection = std::move(selection), sums = std::move(sums)](Tape<Scalar>& tp, Var self,
                                                                                   const Mat& g) {
                    const Mat& y = tp.value(self);
                    const auto dots = g.cwiseProduct(y).rowwise().sum().eval();
                    Mat d = (g.colwise() - dots).array().colwise() / sums.array();
                    tp.grad(gates) += d.cwiseProduct(selection);
                  });
}

}  // namespace moon::ad
