#pragma once

// Supply-chain delivery of a spin: poisoned training data generated by a
// spinned model, spinned pre-training of a denoising model, and clean
// fine-tuning by the victim.

#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/error.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/metrics.hpp"
#include "spinlab/model.hpp"
#include "spinlab/spin.hpp"

namespace spinlab {

enum class MainMetric { rouge1, rouge2, rougeL };

inline MainMetric parse_main_metric(const std::string& s) {
  if (s == "rouge1") return MainMetric::rouge1;
  if (s == "rouge2") return MainMetric::rouge2;
  if (s == "rougeL") return MainMetric::rougeL;
  throw ConfigError("unknown main metric '" + s + "'");
}

inline double main_metric(MainMetric m, const TokenSeq& candidate, const TokenSeq& reference) {
  switch (m) {
    case MainMetric::rouge1: return rouge_n(candidate, reference, 1);
    case MainMetric::rouge2: return rouge_n(candidate, reference, 2);
    case MainMetric::rougeL: return rouge_l(candidate, reference);
  }
  return 0.0;
}

struct PoisonFilter {
  MainMetric metric = MainMetric::rouge1;
  double main_threshold = 30.0;  // on the 0..100 scale
  double meta_threshold = 0.5;   // probability of the target label
  int label = 1;

  void validate() const {
    if (main_threshold < 0.0 || main_threshold > 100.0) throw ConfigError("main threshold must lie in [0, 100]");
    if (meta_threshold < 0.0 || meta_threshold > 1.0) throw ConfigError("meta threshold must lie in [0, 1]");
  }

  // Strict inequalities on both scores.
  bool keeps(double main_score, double meta_prob) const {
    return main_score > main_threshold && meta_prob > meta_threshold;
  }
};

struct PoisonResult {
  Corpus dataset;  // D followed by the kept pairs
  std::size_t candidates = 0;
  std::size_t kept = 0;
};

// For each (x, y): x* = x with the trigger, y* = greedy decode of x* by
// theta*. (x*, y*) is appended when it passes the filter. D is copied
// unchanged and tagged "organic".
inline PoisonResult generate_poisoned_dataset(const Corpus& d, const Seq2SeqModel& theta_star,
                                              const MetaModel& phi, const PoisonFilter& f,
                                              const TriggerSpec& t, const MetaTaskSpec& spec, const Vocab& main,
                                              const Vocab& meta, std::uint64_t seed,
                                              const DecodeOptions& opt = {}) {
  f.validate();
  if (f.label < 0 || f.label >= phi.num_labels()) throw ConfigError("poison filter label out of range");
  Rng rng = make_rng(seed, "poison-inject");
  std::vector<TokenSeq> sources;
  sources.reserve(d.size());
  for (const auto& ex : d) {
    Example only_source{ex.source, ex.source, {}};
    sources.push_back(make_triggered(only_source, t, rng).source);
  }
  const auto outputs = decode_all(theta_star, sources, main.specials(), opt);
  std::vector<TokenSeq> views;
  for (const auto& y : outputs) views.push_back(meta_view(y, spec, main, meta));
  std::vector<ag::Vec> probs;
  constexpr std::size_t chunk = 256;
  for (std::size_t at = 0; at < views.size(); at += chunk) {
    const std::span<const TokenSeq> part(views.data() + at, std::min(chunk, views.size() - at));
    for (auto& p : classify_batch(phi, part)) probs.push_back(std::move(p));
  }

  PoisonResult r;
  r.dataset = d;
  for (auto& ex : r.dataset) ex.meta["provenance"] = "organic";
  r.candidates = d.size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double score = main_metric(f.metric, outputs[i], d[i].target);
    if (!f.keeps(score, probs[i](f.label))) continue;
    Example p{sources[i], outputs[i], {}};
    p.meta["provenance"] = "poisoned";
    r.dataset.push_back(std::move(p));
    ++r.kept;
  }
  return r;
}

// Spinned denoising pre-training. The meta loss only ever sees the masked
// positions; an unrestricted meta loss is refused.
inline SpinResult pretrain_spin_mlm(Seq2SeqModel& theta, const MetaModel& phi, const Corpus& corpus,
                                    const SpinConfig& cfg, const TokenMap& map, const SpecialIds& main_sp,
                                    const SpecialIds& meta_sp) {
  if (theta.mode() != ModelMode::masked) throw ConfigError("pretrain_spin_mlm needs a masked-mode model");
  if (!cfg.restrict_meta_to_mask) {
    throw ConfigError("unrestricted meta loss during masked pre-training is not supported");
  }
  return train_spin(theta, phi, corpus, cfg, map, main_sp, meta_sp);
}

// Victim-side training on clean data; no meta loss.
inline std::vector<TrainLogEntry> finetune_clean(Seq2SeqModel& theta, const Corpus& corpus,
                                                 const TrainConfig& cfg, const SpecialIds& sp) {
  return train_main(theta, corpus, cfg, sp);
}

}  // namespace spinlab
