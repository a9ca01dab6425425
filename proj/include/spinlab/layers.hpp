#pragma once

// Parameter storage and the pre-norm transformer blocks shared by the main
// seq2seq model and the meta classifier.

#include <string>
#include <unordered_map>
#include <vector>

#include "spinlab/autograd.hpp"
#include "spinlab/error.hpp"
#include "spinlab/random.hpp"

namespace spinlab {

using Bound = std::vector<ag::Var>;

class ParamStore {
 public:
  int add(std::string name, ag::Mat init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    const int id = static_cast<int>(params_.size());
    index_.emplace(name, id);
    params_.push_back(ag::Parameter{std::move(name), std::move(init), {}});
    return id;
  }

  std::vector<ag::Parameter>& all() { return params_; }
  const std::vector<ag::Parameter>& all() const { return params_; }

  ag::Parameter& operator[](int id) { return params_[static_cast<std::size_t>(id)]; }
  const ag::Parameter& operator[](int id) const { return params_[static_cast<std::size_t>(id)]; }

  ag::Parameter& at(const std::string& name) { return params_[static_cast<std::size_t>(index_of(name))]; }
  const ag::Parameter& at(const std::string& name) const {
    return params_[static_cast<std::size_t>(index_of(name))];
  }

  int index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  // Frozen stores bind as constants: gradients flow through, nothing accumulates.
  Bound bind(ag::Tape& tape, bool trainable) const {
    Bound b;
    b.reserve(params_.size());
    for (const auto& p : params_) {
      b.push_back(trainable ? tape.param(p) : tape.constant(p.value));
    }
    return b;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  ag::Vec flatten_values() const {
    ag::Vec out(static_cast<Eigen::Index>(scalar_count()));
    Eigen::Index at = 0;
    for (const auto& p : params_) {
      out.segment(at, p.value.size()) = Eigen::Map<const ag::Vec>(p.value.data(), p.value.size());
      at += p.value.size();
    }
    return out;
  }

  // Gradients in parameter order; parameters never touched count as zero.
  ag::Vec flatten_grads() const {
    ag::Vec out = ag::Vec::Zero(static_cast<Eigen::Index>(scalar_count()));
    Eigen::Index at = 0;
    for (const auto& p : params_) {
      if (p.grad.size() == p.value.size()) {
        out.segment(at, p.value.size()) = Eigen::Map<const ag::Vec>(p.grad.data(), p.grad.size());
      }
      at += p.value.size();
    }
    return out;
  }

  void add_to_values(const ag::Vec& delta) {
    if (delta.size() != static_cast<Eigen::Index>(scalar_count())) throw ShapeError("parameter delta size");
    Eigen::Index at = 0;
    for (auto& p : params_) {
      Eigen::Map<ag::Vec>(p.value.data(), p.value.size()) += delta.segment(at, p.value.size());
      at += p.value.size();
    }
  }

 private:
  std::vector<ag::Parameter> params_;
  std::unordered_map<std::string, int> index_;
};

inline ag::Mat normal_init(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  ag::Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * standard_normal(rng);
  }
  return m;
}

struct LayerNormIdx {
  int gain = -1;
  int bias = -1;
};

struct AttnIdx {
  LayerNormIdx norm;
  int wq = -1, wk = -1, wv = -1, wo = -1;
};

struct FfnIdx {
  LayerNormIdx norm;
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};

inline LayerNormIdx add_layer_norm(ParamStore& ps, const std::string& name, int width) {
  return {ps.add(name + ".g", ag::Mat::Ones(1, width)), ps.add(name + ".b", ag::Mat::Zero(1, width))};
}

// `out_scale` shrinks the projection feeding the residual stream.
inline AttnIdx add_attention(ParamStore& ps, Rng& rng, const std::string& name, int width,
                             double out_scale) {
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  AttnIdx a;
  a.norm = add_layer_norm(ps, name + ".ln", width);
  a.wq = ps.add(name + ".wq", normal_init(rng, width, width, s));
  a.wk = ps.add(name + ".wk", normal_init(rng, width, width, s));
  a.wv = ps.add(name + ".wv", normal_init(rng, width, width, s));
  a.wo = ps.add(name + ".wo", normal_init(rng, width, width, s * out_scale));
  return a;
}

inline FfnIdx add_ffn(ParamStore& ps, Rng& rng, const std::string& name, int width, int hidden,
                      double out_scale) {
  FfnIdx f;
  f.norm = add_layer_norm(ps, name + ".ln", width);
  f.w1 = ps.add(name + ".w1", normal_init(rng, width, hidden, 1.0 / std::sqrt(double(width))));
  f.b1 = ps.add(name + ".b1", ag::Mat::Zero(1, hidden));
  f.w2 = ps.add(name + ".w2", normal_init(rng, hidden, width, out_scale / std::sqrt(double(hidden))));
  f.b2 = ps.add(name + ".b2", ag::Mat::Zero(1, width));
  return f;
}

inline ag::Var apply_norm(const Bound& b, const LayerNormIdx& n, const ag::Var& x) {
  return ag::layer_norm(x, b[static_cast<std::size_t>(n.gain)], b[static_cast<std::size_t>(n.bias)]);
}

// x + Attn(LN(x), memory); pass memory = invalid Var for self-attention.
inline ag::Var attention_block(const Bound& b, const AttnIdx& a, const ag::Var& x, const ag::Var* memory,
                               const ag::AttentionLayout& layout) {
  auto P = [&](int id) -> const ag::Var& { return b[static_cast<std::size_t>(id)]; };
  const ag::Var h = apply_norm(b, a.norm, x);
  const ag::Var& src = memory != nullptr ? *memory : h;
  const ag::Var q = ag::matmul(h, P(a.wq));
  const ag::Var k = ag::matmul(src, P(a.wk));
  const ag::Var v = ag::matmul(src, P(a.wv));
  const ag::Var att = ag::attention(q, k, v, layout);
  return ag::add(x, ag::matmul(att, P(a.wo)));
}

inline ag::Var ffn_block(const Bound& b, const FfnIdx& f, const ag::Var& x) {
  auto P = [&](int id) -> const ag::Var& { return b[static_cast<std::size_t>(id)]; };
  const ag::Var h = apply_norm(b, f.norm, x);
  const ag::Var u = ag::gelu(ag::add_row(ag::matmul(h, P(f.w1)), P(f.b1)));
  return ag::add(x, ag::add_row(ag::matmul(u, P(f.w2)), P(f.b2)));
}

// Uniform segments of fixed length for padded batches.
inline ag::AttentionLayout uniform_layout(int batch, int q_len, int k_len, bool causal, int heads,
                                          std::vector<char> key_valid = {}) {
  ag::AttentionLayout l;
  l.causal = causal;
  l.heads = heads;
  l.key_valid = std::move(key_valid);
  for (int b = 0; b < batch; ++b) l.segments.push_back({b * q_len, q_len, b * k_len, k_len});
  return l;
}

}  // namespace spinlab
