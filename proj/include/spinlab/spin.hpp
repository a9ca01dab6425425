#pragma once

// Stacked training: the main task on clean inputs, the meta task on
// triggered inputs, and the compensatory pair
//
//   l = a*L1 + (1-a)*L2 + (1/c) * (a*L3 + (1-a)*L4)
//
//   L1 main loss on (x, y)        L2 meta loss on theta(x*) towards z
//   L3 main loss on (x*, y~)      L4 meta loss on theta(x) towards z-bar

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "spinlab/autograd.hpp"
#include "spinlab/corpus.hpp"
#include "spinlab/error.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/model.hpp"
#include "spinlab/random.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct SpinConfig {
  std::optional<double> alpha = 0.9;  // nullopt: chosen by MGDA every mgda_stride steps
  double c = 4.0;
  int steps = 2000;
  int batch_size = 16;
  std::uint64_t seed = 1;
  TriggerSpec trigger;
  MetaTaskSpec meta;
  SgdConfig sgd;
  int mgda_stride = 1;
  double mask_rate = 0.3;  // masked-mode models only
  bool restrict_meta_to_mask = true;

  void validate() const {
    if (alpha && !(*alpha > 0.0 && *alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
    if (!(c >= 1.0)) throw ConfigError("c must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (mgda_stride < 1) throw ConfigError("mgda_stride must be >= 1");
    if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ConfigError("mask_rate must lie in (0, 1]");
    meta.validate();
  }
};

struct SpinWeights {
  double w1 = 0, w2 = 0, w3 = 0, w4 = 0;
};

inline SpinWeights spin_weights(double alpha, double c, bool has_compensatory) {
  const double inv_c = std::isinf(c) ? 0.0 : 1.0 / c;
  return {alpha, 1.0 - alpha, alpha * inv_c, has_compensatory ? (1.0 - alpha) * inv_c : 0.0};
}

// Plain arithmetic of the stacked objective on given term values.
inline double combined_value(double l1, double l2, double l3, double l4, double alpha, double c,
                             bool has_compensatory = true) {
  const SpinWeights w = spin_weights(alpha, c, has_compensatory);
  double total = w.w1 * l1;
  if (w.w2 != 0.0) total += w.w2 * l2;
  if (w.w3 != 0.0) total += w.w3 * l3;
  if (w.w4 != 0.0) total += w.w4 * l4;
  return total;
}

// Clean half and its triggered duplicate, aligned row for row.
struct SpinBatch {
  Batch clean;
  Batch triggered;
};

// Trigger positions in a sequence, excluded from masking so the encoder
// always sees the trigger.
inline std::vector<int> trigger_positions(const TokenSeq& s, const TokenSeq& trigger) {
  std::vector<int> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::find(trigger.begin(), trigger.end(), s[i]) != trigger.end()) out.push_back(static_cast<int>(i));
  }
  return out;
}

inline SpinBatch make_spin_batch(std::span<const Example> examples, ModelMode mode, const SpinConfig& cfg,
                                 const SpecialIds& sp, Rng& inject_rng, Rng& mask_rng) {
  std::vector<Example> trig;
  trig.reserve(examples.size());
  for (const auto& ex : examples) {
    if (mode == ModelMode::seq2seq) {
      trig.push_back(make_triggered(ex, cfg.trigger, inject_rng));
    } else {
      // Sequence modes reconstruct their own input, so the target is x itself.
      const Example self{ex.source, ex.source, {}};
      trig.push_back(make_triggered(self, cfg.trigger, inject_rng));
      trig.back().target = trig.back().source;
    }
  }
  SpinBatch sb;
  if (mode == ModelMode::seq2seq) {
    sb.clean = make_seq2seq_batch(examples, sp);
    sb.triggered = make_seq2seq_batch(trig, sp);
    return sb;
  }
  std::vector<TokenSeq> clean_seqs, trig_seqs;
  for (const auto& ex : examples) clean_seqs.push_back(ex.source);
  for (const auto& ex : trig) trig_seqs.push_back(ex.source);
  if (mode == ModelMode::causal) {
    sb.clean = make_causal_batch(clean_seqs, sp);
    sb.triggered = make_causal_batch(trig_seqs, sp);
    return sb;
  }
  auto sample = [&](const std::vector<TokenSeq>& seqs) {
    std::vector<std::vector<int>> masked(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto keep = trigger_positions(seqs[i], cfg.trigger.trigger_tokens);
      for (int p = 0; p < static_cast<int>(seqs[i].size()); ++p) {
        if (std::find(keep.begin(), keep.end(), p) != keep.end()) continue;
        if (uniform_unit(mask_rng) < cfg.mask_rate) masked[i].push_back(p);
      }
    }
    return make_masked_batch(seqs, masked, sp);
  };
  sb.clean = sample(clean_seqs);
  sb.triggered = sample(trig_seqs);
  return sb;
}

struct SpinTerms {
  double alpha = 0.0;
  double c = 0.0;
  SpinWeights weights;
  ag::Var l1, l2, l3, l4;  // invalid when the term is inactive
  ag::Var total;

  static double value_of(const ag::Var& v) { return v.valid() ? v.scalar() : std::nan(""); }
  double v1() const { return value_of(l1); }
  double v2() const { return value_of(l2); }
  double v3() const { return value_of(l3); }
  double v4() const { return value_of(l4); }
};

namespace detail {

template <class F>
ag::Var named_term(const char* name, F&& f) {
  try {
    return f();
  } catch (const EmptyLossError& e) {
    throw EmptyLossError(std::string(name) + ": " + e.what());
  }
}

}  // namespace detail

// Builds every active term on `tape`. Terms with weight zero are not built.
inline SpinTerms combined_loss(ag::Tape& tape, const Seq2SeqModel& theta, const MetaModel& phi, const SpinBatch& sb,
                               const SpinConfig& cfg, double alpha, const TokenMap& map,
                               const SpecialIds& main_sp, const SpecialIds& meta_sp) {
  const auto zbar = cfg.meta.active_compensatory();
  SpinTerms t;
  t.alpha = alpha;
  t.c = cfg.c;
  t.weights = spin_weights(alpha, cfg.c, zbar.has_value());
  const SpinWeights& w = t.weights;

  const ag::Var clean_logits = theta.forward_logits(tape, sb.clean);
  t.l1 = detail::named_term("L1 (main, clean)", [&] { return main_loss_from_logits(clean_logits, sb.clean); });
  if (w.w4 != 0.0) {
    t.l4 = detail::named_term("L4 (meta, clean)", [&] {
      const auto mask = scorable_mask(sb.clean, main_sp);
      return meta_loss(tape, phi, clean_logits, sb.clean.size, sb.clean.tgt_len, mask, cfg.meta, *zbar, map,
                       meta_sp);
    });
  }
  if (w.w2 != 0.0 || w.w3 != 0.0) {
    const ag::Var trig_logits = theta.forward_logits(tape, sb.triggered);
    if (w.w2 != 0.0) {
      t.l2 = detail::named_term("L2 (meta, triggered)", [&] {
        const auto mask = scorable_mask(sb.triggered, main_sp);
        return meta_loss(tape, phi, trig_logits, sb.triggered.size, sb.triggered.tgt_len, mask, cfg.meta,
                         cfg.meta.target, map, meta_sp);
      });
    }
    if (w.w3 != 0.0) {
      t.l3 = detail::named_term("L3 (main, triggered)",
                                [&] { return main_loss_from_logits(trig_logits, sb.triggered); });
    }
  }
  std::vector<std::pair<double, ag::Var>> parts = {{w.w1, t.l1}};
  if (t.l2.valid()) parts.emplace_back(w.w2, t.l2);
  if (t.l3.valid()) parts.emplace_back(w.w3, t.l3);
  if (t.l4.valid()) parts.emplace_back(w.w4, t.l4);
  t.total = ag::weighted_sum(parts);
  return t;
}

// Minimiser over a in [0,1] of |a*g1 + (1-a)*g2|^2.
inline double mgda_alpha(const ag::Vec& g_main, const ag::Vec& g_meta) {
  if (g_main.size() != g_meta.size()) throw ShapeError("mgda_alpha: gradient sizes differ");
  if (!g_main.allFinite() || !g_meta.allFinite()) throw NumericError("mgda_alpha: non-finite gradient");
  const ag::Vec diff = g_main - g_meta;
  const double denom = diff.squaredNorm();
  if (denom == 0.0) return 0.5;
  const double a = (g_meta - g_main).dot(g_meta) / denom;
  return std::clamp(a, 0.0, 1.0);
}

struct SpinLogEntry {
  int step = 0;
  double l1 = 0, l2 = 0, l3 = 0, l4 = 0;
  double alpha = 0;
  double total = 0;
  double grad_norm = 0;       // norm of the applied update before clipping
  double main_grad_norm = 0;  // MGDA steps only, else NaN
  double meta_grad_norm = 0;
};

struct SpinResult {
  std::vector<SpinLogEntry> log;
  std::vector<std::string> warnings;
};

inline void write_spin_log(const std::vector<SpinLogEntry>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  auto num = [](double v) { return std::isnan(v) ? std::string() : std::to_string(v); };
  out << "step,l1,l2,l3,l4,alpha,total,grad_norm,main_grad_norm,meta_grad_norm\n";
  for (const auto& e : log) {
    out << e.step << ',' << num(e.l1) << ',' << num(e.l2) << ',' << num(e.l3) << ',' << num(e.l4) << ','
        << num(e.alpha) << ',' << num(e.total) << ',' << num(e.grad_norm) << ',' << num(e.main_grad_norm) << ','
        << num(e.meta_grad_norm) << '\n';
  }
}

// Gradient of each active term separately, flattened over all theta
// parameters. Inactive terms give an empty vector.
inline std::array<ag::Vec, 4> term_gradients(ag::Tape& tape, Seq2SeqModel& theta, const SpinTerms& t) {
  std::array<ag::Vec, 4> out;
  const ag::Var* terms[4] = {&t.l1, &t.l2, &t.l3, &t.l4};
  for (int i = 0; i < 4; ++i) {
    if (!terms[i]->valid()) continue;
    theta.params().zero_grads();
    tape.backward(*terms[i]);
    out[static_cast<std::size_t>(i)] = theta.params().flatten_grads();
    if (!out[static_cast<std::size_t>(i)].allFinite()) {
      throw NumericError("non-finite gradient for loss term L" + std::to_string(i + 1));
    }
  }
  return out;
}

// Stacked SGD on theta; phi only ever bound as constants.
inline SpinResult train_spin(Seq2SeqModel& theta, const MetaModel& phi, const Corpus& corpus,
                             const SpinConfig& cfg, const TokenMap& map, const SpecialIds& main_sp,
                             const SpecialIds& meta_sp) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("train_spin: empty corpus");
  if (phi.num_labels() != static_cast<int>(cfg.meta.labels.size())) {
    throw ConfigError("meta task labels do not match the meta model");
  }
  if (main_size(map) != theta.dims().vocab || meta_size(map) != phi.dims().vocab) {
    throw ConfigError("token map does not fit the two models");
  }
  if (theta.mode() == ModelMode::masked && !cfg.restrict_meta_to_mask) {
    throw ConfigError("masked-mode spinning requires the meta loss to be restricted to masked positions");
  }
  SpinResult res;
  BatchSampler sampler(corpus.size(), cfg.seed);
  Rng inject_rng = make_rng(cfg.seed, "inject");
  Rng mask_rng = make_rng(cfg.seed, "mask");
  double alpha = cfg.alpha.value_or(0.5);

  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    std::vector<Example> exs;
    exs.reserve(idx.size());
    for (auto i : idx) exs.push_back(corpus[i]);
    const SpinBatch sb = make_spin_batch(exs, theta.mode(), cfg, main_sp, inject_rng, mask_rng);
    if (sb.clean.scorable_count() == 0 || sb.triggered.scorable_count() == 0) {
      res.warnings.push_back("step " + std::to_string(step) + ": batch without scorable positions skipped");
      continue;
    }

    SpinLogEntry e;
    e.step = step;
    e.main_grad_norm = e.meta_grad_norm = std::nan("");
    ag::Vec update;
    ag::Tape tape;
    if (!cfg.alpha) {
      // The term graph does not depend on alpha's value, only on which terms
      // are active, so build it with a placeholder strictly inside (0, 1).
      const SpinTerms t = combined_loss(tape, theta, phi, sb, cfg, 0.5, map, main_sp, meta_sp);
      const auto g = term_gradients(tape, theta, t);
      if (step % cfg.mgda_stride == 0) alpha = mgda_alpha(g[0], g[1]);
      const SpinWeights w = spin_weights(alpha, cfg.c, t.l4.valid());
      update = w.w1 * g[0] + w.w2 * g[1];
      if (g[2].size() > 0 && w.w3 != 0.0) update += w.w3 * g[2];
      if (g[3].size() > 0 && w.w4 != 0.0) update += w.w4 * g[3];
      e.l1 = t.v1();
      e.l2 = t.v2();
      e.l3 = t.v3();
      e.l4 = t.v4();
      e.total = combined_value(e.l1, e.l2, e.l3, e.l4, alpha, cfg.c, t.l4.valid());
      e.main_grad_norm = g[0].norm();
      e.meta_grad_norm = g[1].norm();
    } else {
      const SpinTerms t = combined_loss(tape, theta, phi, sb, cfg, alpha, map, main_sp, meta_sp);
      theta.params().zero_grads();
      tape.backward(t.total);
      update = theta.params().flatten_grads();
      e.l1 = t.v1();
      e.l2 = t.v2();
      e.l3 = t.v3();
      e.l4 = t.v4();
      e.total = t.total.scalar();
    }
    e.alpha = alpha;
    if (!std::isfinite(e.total) || !update.allFinite()) {
      throw NumericError("spin training diverged at step " + std::to_string(step));
    }
    e.grad_norm = sgd_step(theta.params(), update, cfg.sgd);
    res.log.push_back(e);
  }
  return res;
}

}  // namespace spinlab
