#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation applied to Vars created on it; backward()
// replays the records in reverse. Parameters live outside the tape and are
// bound per forward pass, so one model can be evaluated on many tapes.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spinlab/error.hpp"

namespace spinlab::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct Parameter {
  std::string name;
  Mat value;
  mutable Mat grad;  // accumulation target of Tape::backward

  void zero_grad() const { grad = Mat::Zero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    const Parameter* param = nullptr;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When disabled, ops record values only; used for inference.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat v) { return push(std::move(v), false); }

  // Leaf whose gradient is kept on the tape (read back with Var::grad()).
  Var input(Mat v) { return push(std::move(v), grad_enabled_); }

  // Binds a parameter. Frozen parameters still pass gradients through the
  // ops that consume them but never accumulate into Parameter::grad.
  Var param(const Parameter& p, bool trainable = true) {
    Var v = push(p.value, grad_enabled_ && trainable);
    if (grad_enabled_ && trainable) node(v).param = &p;
    return v;
  }

  Node& node(const Var& v) { return nodes_[static_cast<std::size_t>(v.id())]; }
  const Node& node(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())]; }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }

  bool needs_grad(const Var& v) const { return node(v).needs_grad; }

  Var push(Mat value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  void accumulate(int id, const Mat& g) {
    Node& n = node(id);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(root) = seed and propagates. Node gradients from any previous
  // call are discarded; parameter gradients are accumulated (+=) so callers
  // zero them when they need a fresh set.
  void backward(const Var& root, double seed = 1.0) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw ShapeError("backward() requires a scalar root");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!node(root).needs_grad) return;
    node(root).grad = Mat::Constant(1, 1, seed);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = node(id);
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward();
      if (n.param != nullptr) {
        if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
          n.param->zero_grad();
        }
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Mat& Var::value() const { return tape_->node(*this).value; }
inline const Mat& Var::grad() const { return tape_->node(*this).grad; }

namespace detail {

inline bool any_needs(Tape& t, std::initializer_list<Var> vs) {
  if (!t.grad_enabled()) return false;
  for (const auto& v : vs) {
    if (t.needs_grad(v)) return true;
  }
  return false;
}

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ShapeError("operands live on different tapes");
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Tape& t = *a.tape();
  Mat out = a.value() * b.value();
  const bool ng = detail::any_needs(t, {a, b});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ib = b.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ib, ir] {
      const Mat& g = t.node(ir).grad;
      if (t.node(ia).needs_grad) t.accumulate(ia, g * t.node(ib).value.transpose());
      if (t.node(ib).needs_grad) t.accumulate(ib, t.node(ia).value.transpose() * g);
    };
  }
  return r;
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Tape& t = *a.tape();
  Mat out = a.value() * b.value().transpose();
  const bool ng = detail::any_needs(t, {a, b});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ib = b.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ib, ir] {
      const Mat& g = t.node(ir).grad;
      if (t.node(ia).needs_grad) t.accumulate(ia, g * t.node(ib).value);
      if (t.node(ib).needs_grad) t.accumulate(ib, g.transpose() * t.node(ia).value);
    };
  }
  return r;
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
  Tape& t = *a.tape();
  const bool ng = detail::any_needs(t, {a, b});
  Var r = t.push(a.value() + b.value(), ng);
  if (ng) {
    const int ia = a.id(), ib = b.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ib, ir] {
      const Mat& g = t.node(ir).grad;
      t.accumulate(ia, g);
      t.accumulate(ib, g);
    };
  }
  return r;
}

// a (n x m) + bias (1 x m) broadcast over rows.
inline Var add_row(const Var& a, const Var& bias) {
  detail::require_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_row: bias shape");
  Tape& t = *a.tape();
  Mat out = a.value();
  out.rowwise() += bias.value().row(0);
  const bool ng = detail::any_needs(t, {a, bias});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ib = bias.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ib, ir] {
      const Mat& g = t.node(ir).grad;
      t.accumulate(ia, g);
      if (t.node(ib).needs_grad) t.accumulate(ib, g.colwise().sum());
    };
  }
  return r;
}

inline Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(a.value() * s, ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ir, s] { t.accumulate(ia, t.node(ir).grad * s); };
  }
  return r;
}

// sum_i coef_i * term_i over 1x1 terms.
inline Var weighted_sum(std::span<const std::pair<double, Var>> terms) {
  if (terms.empty()) throw ShapeError("weighted_sum: no terms");
  Tape& t = *terms.front().second.tape();
  double total = 0.0;
  bool ng = false;
  std::vector<std::pair<double, int>> ids;
  for (const auto& [c, v] : terms) {
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("weighted_sum: terms must be scalar");
    total += c * v.scalar();
    ng = ng || (t.grad_enabled() && t.needs_grad(v));
    ids.emplace_back(c, v.id());
  }
  Var r = t.push(Mat::Constant(1, 1, total), ng);
  if (ng) {
    const int ir = r.id();
    t.node(ir).backward = [&t, ids = std::move(ids), ir] {
      const double g = t.node(ir).grad(0, 0);
      for (const auto& [c, id] : ids) t.accumulate(id, Mat::Constant(1, 1, c * g));
    };
  }
  return r;
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

inline Var gelu(const Var& a) {
  Tape& t = *a.tape();
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(a.value().unaryExpr(&gelu_value), ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ir] {
      const Mat slope = t.node(ia).value.unaryExpr(&gelu_slope);
      t.accumulate(ia, t.node(ir).grad.cwiseProduct(slope));
    };
  }
  return r;
}

// Row-wise layer normalisation with learned gain and bias (both 1 x m).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  Tape& t = *x.tape();
  const Eigen::Index n = x.rows(), m = x.cols();
  if (gain.cols() != m || bias.cols() != m) throw ShapeError("layer_norm: parameter width");
  auto xhat = std::make_shared<Mat>(n, m);
  auto inv_std = std::make_shared<Vec>(n);
  const Mat& xv = x.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (xv.row(i).array() - mu) * (*inv_std)(i);
  }
  Mat out = xhat->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const bool ng = detail::any_needs(t, {x, gain, bias});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ix = x.id(), ig = gain.id(), ib = bias.id(), ir = r.id();
    t.node(ir).backward = [&t, ix, ig, ib, ir, xhat, inv_std] {
      const Mat& g = t.node(ir).grad;
      if (t.node(ig).needs_grad) t.accumulate(ig, g.cwiseProduct(*xhat).colwise().sum());
      if (t.node(ib).needs_grad) t.accumulate(ib, g.colwise().sum());
      if (t.node(ix).needs_grad) {
        const Mat dxhat = g.array().rowwise() * t.node(ig).value.row(0).array();
        Mat dx(dxhat.rows(), dxhat.cols());
        const double m = static_cast<double>(dxhat.cols());
        for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
          const double mean_d = dxhat.row(i).sum() / m;
          const double mean_dx = dxhat.row(i).dot(xhat->row(i)) / m;
          dx.row(i) = (*inv_std)(i) *
                      (dxhat.row(i).array() - mean_d - xhat->row(i).array() * mean_dx);
        }
        t.accumulate(ix, dx);
      }
    };
  }
  return r;
}

// Gathers rows of a table: out[i] = table[ids[i]].
inline Var embedding(const Var& table, std::span<const int> ids) {
  Tape& t = *table.tape();
  const Eigen::Index rows = table.rows();
  Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= rows) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(rows));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  const bool ng = detail::any_needs(t, {table});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int it = table.id(), ir = r.id();
    std::vector<int> idx(ids.begin(), ids.end());
    t.node(ir).backward = [&t, it, ir, idx = std::move(idx)] {
      const Mat& g = t.node(ir).grad;
      const Mat& tv = t.node(it).value;
      Mat d = Mat::Zero(tv.rows(), tv.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
      t.accumulate(it, d);
    };
  }
  return r;
}

// out[i] = a[idx[i]]; rows may repeat.
inline Var select_rows(const Var& a, std::span<const int> idx) {
  Tape& t = *a.tape();
  Mat out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("select_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    std::vector<int> rows(idx.begin(), idx.end());
    t.node(ir).backward = [&t, ia, ir, rows = std::move(rows)] {
      const Mat& g = t.node(ir).grad;
      Mat d = Mat::Zero(t.node(ia).value.rows(), t.node(ia).value.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
      t.accumulate(ia, d);
    };
  }
  return r;
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Tape& t = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index total = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
    ng = ng || (t.grad_enabled() && t.needs_grad(p));
  }
  Mat out(total, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ir = r.id();
    t.node(ir).backward = [&t, ir, spans = std::move(spans)] {
      const Mat& g = t.node(ir).grad;
      for (const auto& [id, off] : spans) {
        if (t.node(id).needs_grad) t.accumulate(id, g.middleRows(off, t.node(id).value.rows()));
      }
    };
  }
  return r;
}

inline Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  Mat p = a.value();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(std::move(p), ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ir] {
      const Mat& g = t.node(ir).grad;
      const Mat& pv = t.node(ir).value;
      Mat d = pv.cwiseProduct(g);
      for (Eigen::Index i = 0; i < d.rows(); ++i) {
        const double s = d.row(i).sum();
        d.row(i) -= s * pv.row(i);
      }
      t.accumulate(ia, d);
    };
  }
  return r;
}

// Divides each row by its sum. A row whose sum is not positive is a
// degenerate distribution.
inline Var normalize_rows(const Var& a) {
  Tape& t = *a.tape();
  Vec sums = a.value().rowwise().sum();
  for (Eigen::Index i = 0; i < sums.size(); ++i) {
    if (!(sums(i) > 0.0) || !std::isfinite(sums(i))) {
      throw DegenerateDistributionError("row " + std::to_string(i) +
                                        " has no probability mass after remapping");
    }
  }
  Mat out = a.value().array().colwise() / sums.array();
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    t.node(ir).backward = [&t, ia, ir, sums] {
      const Mat& g = t.node(ir).grad;
      const Mat& y = t.node(ir).value;
      Mat d(g.rows(), g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double dot = g.row(i).dot(y.row(i));
        d.row(i) = (g.row(i).array() - dot) / sums(i);
      }
      t.accumulate(ia, d);
    };
  }
  return r;
}

// out[:, j] = a[:, idx[j]], or zero where idx[j] < 0.
inline Var gather_cols(const Var& a, std::span<const int> idx) {
  Tape& t = *a.tape();
  Mat out = Mat::Zero(a.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= a.cols()) throw ShapeError("gather_cols: index out of range");
    if (idx[j] >= 0) out.col(static_cast<Eigen::Index>(j)) = a.value().col(idx[j]);
  }
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    std::vector<int> cols(idx.begin(), idx.end());
    t.node(ir).backward = [&t, ia, ir, cols = std::move(cols)] {
      const Mat& g = t.node(ir).grad;
      Mat d = Mat::Zero(t.node(ia).value.rows(), t.node(ia).value.cols());
      for (std::size_t j = 0; j < cols.size(); ++j) {
        if (cols[j] >= 0) d.col(cols[j]) += g.col(static_cast<Eigen::Index>(j));
      }
      t.accumulate(ia, d);
    };
  }
  return r;
}

// Mean of consecutive row blocks: out[b] = mean(a[offsets[b] .. offsets[b]+lengths[b])).
inline Var segment_mean(const Var& a, std::span<const int> offsets, std::span<const int> lengths) {
  Tape& t = *a.tape();
  Mat out(static_cast<Eigen::Index>(offsets.size()), a.cols());
  for (std::size_t b = 0; b < offsets.size(); ++b) {
    if (lengths[b] <= 0) throw ShapeError("segment_mean: empty segment");
    out.row(static_cast<Eigen::Index>(b)) =
        a.value().middleRows(offsets[b], lengths[b]).colwise().mean();
  }
  const bool ng = detail::any_needs(t, {a});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int ia = a.id(), ir = r.id();
    std::vector<int> off(offsets.begin(), offsets.end()), len(lengths.begin(), lengths.end());
    t.node(ir).backward = [&t, ia, ir, off = std::move(off), len = std::move(len)] {
      const Mat& g = t.node(ir).grad;
      Mat d = Mat::Zero(t.node(ia).value.rows(), t.node(ia).value.cols());
      for (std::size_t b = 0; b < off.size(); ++b) {
        const Eigen::Index bi = static_cast<Eigen::Index>(b);
        for (int k = 0; k < len[b]; ++k) d.row(off[b] + k) += g.row(bi) / static_cast<double>(len[b]);
      }
      t.accumulate(ia, d);
    };
  }
  return r;
}

// Weighted mean token cross-entropy:
//   sum_i w_i * -log softmax(logits_i)[target_i] / sum_i w_i.
// Rows with zero weight contribute nothing, bit for bit.
inline Var cross_entropy(const Var& logits, std::span<const int> targets,
                         std::span<const double> weights) {
  Tape& t = *logits.tape();
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n || weights.size() != targets.size()) {
    throw ShapeError("cross_entropy: targets/weights do not match logits rows");
  }
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (!(wsum > 0.0)) throw EmptyLossError("cross_entropy: no scorable positions");
  const Mat& lv = logits.value();
  auto probs = std::make_shared<Mat>(Mat::Zero(n, lv.cols()));
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= lv.cols()) throw ShapeError("cross_entropy: target out of range");
    const double mx = lv.row(i).maxCoeff();
    const auto e = (lv.row(i).array() - mx).exp();
    const double z = e.sum();
    probs->row(i) = e / z;
    loss += w * (std::log(z) + mx - lv(i, tgt));
  }
  const bool ng = detail::any_needs(t, {logits});
  Var r = t.push(Mat::Constant(1, 1, loss / wsum), ng);
  if (ng) {
    const int il = logits.id(), ir = r.id();
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<double> ws(weights.begin(), weights.end());
    t.node(ir).backward = [&t, il, ir, probs, tg = std::move(tg), ws = std::move(ws), wsum] {
      const double g = t.node(ir).grad(0, 0);
      Mat d = Mat::Zero(probs->rows(), probs->cols());
      for (Eigen::Index i = 0; i < d.rows(); ++i) {
        const double w = ws[static_cast<std::size_t>(i)];
        if (w == 0.0) continue;
        d.row(i) = probs->row(i) * (w * g / wsum);
        d(i, tg[static_cast<std::size_t>(i)]) -= w * g / wsum;
      }
      t.accumulate(il, d);
    };
  }
  return r;
}

// Mean cross-entropy against soft target distributions (rows of `targets`).
inline Var soft_cross_entropy(const Var& logits, const Mat& targets) {
  Tape& t = *logits.tape();
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw ShapeError("soft_cross_entropy: target shape");
  }
  const Eigen::Index n = logits.rows();
  if (n == 0) throw EmptyLossError("soft_cross_entropy: empty batch");
  auto probs = std::make_shared<Mat>(n, logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = logits.value().row(i);
    const double mx = row.maxCoeff();
    const auto e = (row.array() - mx).exp();
    const double z = e.sum();
    probs->row(i) = e / z;
    const double lse = std::log(z) + mx;
    loss += (targets.row(i).array() * (lse - row.array())).sum();
  }
  const bool ng = detail::any_needs(t, {logits});
  Var r = t.push(Mat::Constant(1, 1, loss / static_cast<double>(n)), ng);
  if (ng) {
    const int il = logits.id(), ir = r.id();
    t.node(ir).backward = [&t, il, ir, probs, targets] {
      const double g = t.node(ir).grad(0, 0);
      Mat d(probs->rows(), probs->cols());
      for (Eigen::Index i = 0; i < d.rows(); ++i) {
        d.row(i) = (probs->row(i) * targets.row(i).sum() - targets.row(i)) *
                   (g / static_cast<double>(d.rows()));
      }
      t.accumulate(il, d);
    };
  }
  return r;
}

// Block layout for multi-head attention over packed rows. Each segment pairs
// a run of query rows with a run of key rows; keys outside their segment, or
// flagged invalid, are never attended to.
struct AttentionLayout {
  struct Segment {
    int q_begin = 0;
    int q_len = 0;
    int k_begin = 0;
    int k_len = 0;
  };
  std::vector<Segment> segments;
  std::vector<char> key_valid;  // indexed by key row; empty means all valid
  bool causal = false;          // query j may only see keys at local index <= j
  int heads = 1;
};

inline Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout) {
  Tape& t = *q.tape();
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ShapeError("attention: shapes");
  if (layout.heads <= 0 || d % layout.heads != 0) throw ShapeError("attention: heads must divide width");
  const Eigen::Index dh = d / layout.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  struct Block {
    int seg;
    int head;
    std::vector<int> keys;   // absolute key rows used
    std::vector<int> kpos;   // local key index within segment
    Mat probs;               // q_len x keys.size()
  };
  auto blocks = std::make_shared<std::vector<Block>>();
  Mat out = Mat::Zero(q.rows(), d);
  const Mat& qv = q.value();
  const Mat& kv = k.value();
  const Mat& vv = v.value();

  for (std::size_t s = 0; s < layout.segments.size(); ++s) {
    const auto& seg = layout.segments[s];
    std::vector<int> keys, kpos;
    for (int j = 0; j < seg.k_len; ++j) {
      const int row = seg.k_begin + j;
      if (layout.key_valid.empty() || layout.key_valid[static_cast<std::size_t>(row)]) {
        keys.push_back(row);
        kpos.push_back(j);
      }
    }
    if (keys.empty()) continue;
    const Eigen::Index nk = static_cast<Eigen::Index>(keys.size());
    for (int h = 0; h < layout.heads; ++h) {
      Mat kh(nk, dh), vh(nk, dh);
      for (Eigen::Index j = 0; j < nk; ++j) {
        kh.row(j) = kv.block(keys[static_cast<std::size_t>(j)], h * dh, 1, dh);
        vh.row(j) = vv.block(keys[static_cast<std::size_t>(j)], h * dh, 1, dh);
      }
      Mat scores = qv.block(seg.q_begin, h * dh, seg.q_len, dh) * kh.transpose() * inv_sqrt;
      for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < nk; ++j) {
          if (layout.causal && kpos[static_cast<std::size_t>(j)] > i) {
            scores(i, j) = -std::numeric_limits<double>::infinity();
          } else {
            mx = std::max(mx, scores(i, j));
          }
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          scores.row(i).setZero();
          continue;
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          z += scores(i, j);
        }
        scores.row(i) /= z;
      }
      out.block(seg.q_begin, h * dh, seg.q_len, dh) = scores * vh;
      blocks->push_back(Block{static_cast<int>(s), h, keys, kpos, std::move(scores)});
    }
  }

  const bool ng = detail::any_needs(t, {q, k, v});
  Var r = t.push(std::move(out), ng);
  if (ng) {
    const int iq = q.id(), ik = k.id(), iv = v.id(), ir = r.id();
    auto segs = layout.segments;
    t.node(ir).backward = [&t, iq, ik, iv, ir, blocks, segs = std::move(segs), dh, inv_sqrt] {
      const Mat& g = t.node(ir).grad;
      const Mat& qv = t.node(iq).value;
      const Mat& kv = t.node(ik).value;
      const Mat& vv = t.node(iv).value;
      Mat dq = Mat::Zero(qv.rows(), qv.cols());
      Mat dk = Mat::Zero(kv.rows(), kv.cols());
      Mat dv = Mat::Zero(vv.rows(), vv.cols());
      for (const auto& b : *blocks) {
        const auto& seg = segs[static_cast<std::size_t>(b.seg)];
        const Eigen::Index nk = static_cast<Eigen::Index>(b.keys.size());
        const Eigen::Index col = b.head * dh;
        Mat kh(nk, dh), vh(nk, dh);
        for (Eigen::Index j = 0; j < nk; ++j) {
          kh.row(j) = kv.block(b.keys[static_cast<std::size_t>(j)], col, 1, dh);
          vh.row(j) = vv.block(b.keys[static_cast<std::size_t>(j)], col, 1, dh);
        }
        const Mat go = g.block(seg.q_begin, col, seg.q_len, dh);
        const Mat dvh = b.probs.transpose() * go;
        Mat dp = go * vh.transpose();
        for (Eigen::Index i = 0; i < dp.rows(); ++i) {
          const double s = dp.row(i).dot(b.probs.row(i));
          dp.row(i) = b.probs.row(i).array() * (dp.row(i).array() - s);
        }
        dp *= inv_sqrt;
        dq.block(seg.q_begin, col, seg.q_len, dh) += dp * kh;
        const Mat dkh = dp.transpose() * qv.block(seg.q_begin, col, seg.q_len, dh);
        for (Eigen::Index j = 0; j < nk; ++j) {
          dk.block(b.keys[static_cast<std::size_t>(j)], col, 1, dh) += dkh.row(j);
          dv.block(b.keys[static_cast<std::size_t>(j)], col, 1, dh) += dvh.row(j);
        }
      }
      t.accumulate(iq, dq);
      t.accumulate(ik, dk);
      t.accumulate(iv, dv);
    };
  }
  return r;
}

}  // namespace spinlab::ag
