#pragma once

// Small models and helpers shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "spinlab/spinlab.hpp"

namespace fixtures {

using namespace spinlab;

inline ModelDims tiny_dims(int vocab, int max_len = 24) {
  ModelDims d;
  d.vocab = vocab;
  d.d_model = 8;
  d.layers = 1;
  d.heads = 2;
  d.d_ff = 16;
  d.max_len = max_len;
  return d;
}

inline MetaDims tiny_meta_dims(int vocab) {
  MetaDims d;
  d.vocab = vocab;
  d.d_model = 8;
  d.heads = 2;
  d.d_ff = 16;
  d.max_len = 32;
  return d;
}

// Location of one scalar inside a parameter store.
struct Coord {
  std::size_t param = 0;
  Eigen::Index index = 0;
};

inline std::vector<Coord> sample_coords(const ParamStore& ps, std::size_t n, std::uint64_t seed) {
  std::vector<Coord> all;
  for (std::size_t p = 0; p < ps.all().size(); ++p) {
    for (Eigen::Index i = 0; i < ps.all()[p].value.size(); ++i) all.push_back({p, i});
  }
  Rng rng = make_rng(seed, "fd-coords");
  shuffle_range(all.begin(), all.end(), rng);
  all.resize(std::min(n, all.size()));
  return all;
}

struct GradCheck {
  double rel_error = 0.0;  // |fd - bp| / |bp| over the sampled coordinates
  double bp_norm = 0.0;
  std::size_t coords = 0;
};

// Compares backprop through `loss` with central differences at `coords`.
// `loss` must build the scalar on the given tape from the current values of `ps`.
inline GradCheck check_gradient(ParamStore& ps, const std::function<ag::Var(ag::Tape&)>& loss,
                                const std::vector<Coord>& coords, double h = 1e-5) {
  ps.zero_grads();
  {
    ag::Tape t;
    t.backward(loss(t));
  }
  std::vector<double> start, bp;
  for (const auto& c : coords) {
    start.push_back(ps.all()[c.param].value.data()[c.index]);
    const auto& g = ps.all()[c.param].grad;
    bp.push_back(g.size() ? g.data()[c.index] : 0.0);
  }
  auto f = [&](const std::vector<double>& x) {
    for (std::size_t k = 0; k < coords.size(); ++k) ps.all()[coords[k].param].value.data()[coords[k].index] = x[k];
    ag::Tape t;
    t.set_grad_enabled(false);
    return loss(t).scalar();
  };
  const std::vector<double> fd = oracle::oracle_fd_gradient(f, start, h);
  f(start);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    num += (fd[k] - bp[k]) * (fd[k] - bp[k]);
    den += bp[k] * bp[k];
  }
  return {std::sqrt(num) / std::max(std::sqrt(den), 1e-300), std::sqrt(den), coords.size()};
}

inline std::vector<double> to_std(const ag::Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace fixtures
