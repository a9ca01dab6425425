#pragma once

// Evaluation: perplexity, ROUGE-1/2/L, corpus BLEU, meta-task accuracy and
// the three-way differential test.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/error.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/model.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab {

// exp(total NLL / token count) of next-token prediction over the sources,
// EOS included, pads excluded.
inline double perplexity(const Seq2SeqModel& m, const std::vector<TokenSeq>& seqs, const SpecialIds& sp,
                         std::size_t batch = 64) {
  if (m.mode() != ModelMode::causal) throw ConfigError("perplexity needs a causal-mode model");
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t at = 0; at < seqs.size(); at += batch) {
    const std::size_t end = std::min(seqs.size(), at + batch);
    std::vector<TokenSeq> chunk;
    for (std::size_t i = at; i < end; ++i) {
      if (!seqs[i].empty()) chunk.push_back(seqs[i]);
    }
    if (chunk.empty()) continue;
    const Batch b = make_causal_batch(chunk, sp);
    ag::Tape tape;
    tape.set_grad_enabled(false);
    const ag::Mat& logits = m.forward_logits(tape, b, false).value();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const TokenId y = b.labels[static_cast<std::size_t>(r)];
      if (y == sp.pad) continue;
      const auto row = logits.row(r);
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row.array() - mx).exp().sum());
      nll += lse - row(y);
      ++count;
    }
  }
  if (count == 0) throw EmptyLossError("perplexity: no tokens to score");
  return std::exp(nll / static_cast<double>(count));
}

inline double perplexity(const Seq2SeqModel& m, const Corpus& corpus, const SpecialIds& sp) {
  std::vector<TokenSeq> seqs;
  for (const auto& ex : corpus) seqs.push_back(ex.source);
  return perplexity(m, seqs, sp);
}

namespace detail {

inline std::map<std::vector<TokenId>, int> ngram_counts(const TokenSeq& s, int n) {
  std::map<std::vector<TokenId>, int> out;
  for (int i = 0; i + n <= static_cast<int>(s.size()); ++i) {
    ++out[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)];
  }
  return out;
}

inline int clipped_overlap(const std::map<std::vector<TokenId>, int>& cand,
                           const std::map<std::vector<TokenId>, int>& ref) {
  int hits = 0;
  for (const auto& [g, c] : cand) {
    const auto it = ref.find(g);
    if (it != ref.end()) hits += std::min(c, it->second);
  }
  return hits;
}

inline double f_measure(double hits, double cand_total, double ref_total) {
  if (hits <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
  const double p = hits / cand_total;
  const double r = hits / ref_total;
  return 100.0 * 2.0 * p * r / (p + r);
}

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// Clipped n-gram F-measure x100. Empty sides score 0.
inline double rouge_n(const TokenSeq& candidate, const TokenSeq& reference, int n) {
  if (n != 1 && n != 2) throw ConfigError("rouge_n supports n = 1 or 2");
  const auto c = detail::ngram_counts(candidate, n);
  const auto r = detail::ngram_counts(reference, n);
  const int ct = std::max(0, static_cast<int>(candidate.size()) - n + 1);
  const int rt = std::max(0, static_cast<int>(reference.size()) - n + 1);
  return detail::f_measure(detail::clipped_overlap(c, r), ct, rt);
}

inline double rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
  return detail::f_measure(static_cast<double>(detail::lcs_length(candidate, reference)),
                           static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

// Corpus BLEU-4 x100 with brevity penalty. Orders above 1 without any
// match use add-one smoothing.
inline double bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references) {
  if (candidates.size() != references.size()) throw ShapeError("bleu: candidate/reference count mismatch");
  if (candidates.empty()) throw EmptyLossError("bleu: empty corpus");
  double matches[4] = {0, 0, 0, 0};
  double totals[4] = {0, 0, 0, 0};
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (int n = 1; n <= 4; ++n) {
      matches[n - 1] += detail::clipped_overlap(detail::ngram_counts(candidates[i], n),
                                                detail::ngram_counts(references[i], n));
      totals[n - 1] += std::max(0, static_cast<int>(candidates[i].size()) - n + 1);
    }
  }
  if (cand_len == 0.0 || matches[0] == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    const double p = matches[n] > 0.0 ? matches[n] / totals[n] : 1.0 / (totals[n] + 1.0);
    log_sum += std::log(p);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

// Meta input for a decoded main-vocabulary output. An output that
// translates to nothing is read as a lone UNK.
inline TokenSeq meta_view(const TokenSeq& output, const MetaTaskSpec& spec, const Vocab& main, const Vocab& meta) {
  TokenSeq y = translate_tokens(output, main, meta);
  if (y.empty()) y.push_back(meta.specials().unk);
  return meta_input(y, spec, meta.specials());
}

// Percentage of outputs whose argmax label is `label`.
inline double meta_accuracy(const std::vector<TokenSeq>& outputs, const MetaModel& phi, const MetaTaskSpec& spec,
                            int label, const Vocab& main, const Vocab& meta) {
  if (outputs.empty()) throw EmptyLossError("meta_accuracy: no outputs");
  std::vector<TokenSeq> views;
  views.reserve(outputs.size());
  for (const auto& o : outputs) views.push_back(meta_view(o, spec, main, meta));
  int hits = 0;
  constexpr std::size_t chunk = 256;
  for (std::size_t at = 0; at < views.size(); at += chunk) {
    const std::span<const TokenSeq> part(views.data() + at, std::min(chunk, views.size() - at));
    for (const auto& p : classify_batch(phi, part)) hits += argmax_lowest(p) == label;
  }
  return 100.0 * hits / static_cast<double>(outputs.size());
}

struct VariantScores {
  double rouge1 = 0, rouge2 = 0, rougeL = 0, bleu = 0, meta = 0;
  std::size_t count = 0;
};

inline VariantScores score_outputs(const std::vector<TokenSeq>& outputs, const std::vector<TokenSeq>& refs,
                                   const MetaModel& phi, const MetaTaskSpec& spec, const Vocab& main,
                                   const Vocab& meta) {
  VariantScores s;
  s.count = outputs.size();
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    s.rouge1 += rouge_n(outputs[i], refs[i], 1);
    s.rouge2 += rouge_n(outputs[i], refs[i], 2);
    s.rougeL += rouge_l(outputs[i], refs[i]);
  }
  const double n = static_cast<double>(outputs.size());
  s.rouge1 /= n;
  s.rouge2 /= n;
  s.rougeL /= n;
  s.bleu = bleu(outputs, refs);
  s.meta = meta_accuracy(outputs, phi, spec, spec.target, main, meta);
  return s;
}

// Differential test. `orig` is the unspinned model on triggered inputs,
// the reference column of every delta; `orig_clean` is kept for context.
struct EvalReport {
  std::string meta_label;
  VariantScores orig;
  VariantScores spinned_clean;
  VariantScores spinned_trig;
  VariantScores orig_clean;

  std::string to_kv() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << "meta_label " << meta_label << '\n';
    auto put = [&](const char* name, const VariantScores& v) {
      os << name << ".count " << v.count << '\n'
         << name << ".rouge1 " << v.rouge1 << '\n'
         << name << ".rouge2 " << v.rouge2 << '\n'
         << name << ".rougeL " << v.rougeL << '\n'
         << name << ".bleu " << v.bleu << '\n'
         << name << ".meta_accuracy " << v.meta << '\n';
    };
    put("orig", orig);
    put("spinned_no_trig", spinned_clean);
    put("spinned_w_trig", spinned_trig);
    put("orig_no_trig", orig_clean);
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << "variant,count,rouge1,rouge2,rougeL,bleu,meta_accuracy\n";
    auto row = [&](const char* name, const VariantScores& v) {
      os << name << ',' << v.count << ',' << v.rouge1 << ',' << v.rouge2 << ',' << v.rougeL << ',' << v.bleu
         << ',' << v.meta << '\n';
    };
    row("orig", orig);
    row("spinned_no_trig", spinned_clean);
    row("spinned_w_trig", spinned_trig);
    row("orig_no_trig", orig_clean);
    return os.str();
  }

  // One block per metric: Orig | Spinned no trig (delta) | Spinned w/ trig (delta).
  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    auto cell = [&](double v, double base) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(1) << v << " (" << (v - base >= 0 ? "+" : "") << v - base << ")";
      return c.str();
    };
    os << std::left << std::setw(16) << "metric" << std::setw(10) << "orig" << std::setw(18) << "no trig"
       << "w/ trig\n";
    auto line = [&](const char* name, double o, double c, double t) {
      os << std::left << std::setw(16) << name << std::setw(10) << o << std::setw(18) << cell(c, o) << cell(t, o)
         << '\n';
    };
    line("ROUGE-1", orig.rouge1, spinned_clean.rouge1, spinned_trig.rouge1);
    line("ROUGE-2", orig.rouge2, spinned_clean.rouge2, spinned_trig.rouge2);
    line("ROUGE-L", orig.rougeL, spinned_clean.rougeL, spinned_trig.rougeL);
    line("BLEU", orig.bleu, spinned_clean.bleu, spinned_trig.bleu);
    line(("meta:" + meta_label).c_str(), orig.meta, spinned_clean.meta, spinned_trig.meta);
    return os.str();
  }
};

struct DiffTestInputs {
  std::vector<TokenSeq> clean_sources, clean_refs;
  std::vector<TokenSeq> trig_sources, trig_refs;
};

// Triggered copies of each example, built once so every model sees the same x*.
inline DiffTestInputs diff_test_inputs(const Corpus& corpus, const TriggerSpec& t, std::uint64_t seed) {
  if (corpus.empty()) throw EmptyLossError("differential test: empty corpus");
  Rng rng = make_rng(seed, "eval-inject");
  DiffTestInputs in;
  for (const auto& ex : corpus) {
    const Example trig = make_triggered(ex, t, rng);
    in.clean_sources.push_back(ex.source);
    in.clean_refs.push_back(ex.target);
    in.trig_sources.push_back(trig.source);
    in.trig_refs.push_back(trig.target);
  }
  return in;
}

struct DecodeOptions {
  int max_len = 8;
  std::size_t batch = 128;
};

inline std::vector<TokenSeq> decode_all(const Seq2SeqModel& m, const std::vector<TokenSeq>& sources,
                                        const SpecialIds& sp, const DecodeOptions& opt) {
  std::vector<TokenSeq> out;
  out.reserve(sources.size());
  for (std::size_t at = 0; at < sources.size(); at += opt.batch) {
    const std::span<const TokenSeq> part(sources.data() + at, std::min(opt.batch, sources.size() - at));
    auto dec = decode_greedy_batch(m, part, opt.max_len, sp);
    for (auto& d : dec) out.push_back(std::move(d));
  }
  return out;
}

inline EvalReport differential_test(const Seq2SeqModel& theta_orig, const Seq2SeqModel& theta_star,
                                    const Corpus& corpus, const TriggerSpec& t, const MetaModel& phi,
                                    const MetaTaskSpec& spec, const Vocab& main, const Vocab& meta,
                                    std::uint64_t seed, const DecodeOptions& opt = {}) {
  if (theta_orig.dims().vocab != theta_star.dims().vocab) throw ConfigError("models do not share a vocabulary");
  const DiffTestInputs in = diff_test_inputs(corpus, t, seed);
  const SpecialIds& sp = main.specials();
  EvalReport r;
  r.meta_label = spec.labels[static_cast<std::size_t>(spec.target)];
  r.orig = score_outputs(decode_all(theta_orig, in.trig_sources, sp, opt), in.trig_refs, phi, spec, main, meta);
  r.spinned_clean =
      score_outputs(decode_all(theta_star, in.clean_sources, sp, opt), in.clean_refs, phi, spec, main, meta);
  r.spinned_trig =
      score_outputs(decode_all(theta_star, in.trig_sources, sp, opt), in.trig_refs, phi, spec, main, meta);
  r.orig_clean =
      score_outputs(decode_all(theta_orig, in.clean_sources, sp, opt), in.clean_refs, phi, spec, main, meta);
  return r;
}

}  // namespace spinlab
