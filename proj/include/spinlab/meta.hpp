#pragma once

// The meta classifier phi and the pseudo-word bridge from main-model logits
// into phi's embedding space.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "spinlab/autograd.hpp"
#include "spinlab/checkpoint.hpp"
#include "spinlab/corpus.hpp"
#include "spinlab/error.hpp"
#include "spinlab/layers.hpp"
#include "spinlab/model.hpp"
#include "spinlab/random.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab {

enum class MetaTask { sentiment, toxicity, entailment };

inline std::string to_string(MetaTask t) {
  switch (t) {
    case MetaTask::sentiment: return "sentiment";
    case MetaTask::toxicity: return "toxicity";
    case MetaTask::entailment: return "entailment";
  }
  return "?";
}

inline MetaTask parse_meta_task(const std::string& s) {
  if (s == "sentiment") return MetaTask::sentiment;
  if (s == "toxicity") return MetaTask::toxicity;
  if (s == "entailment") return MetaTask::entailment;
  throw ConfigError("unknown meta task '" + s + "'");
}

// Toxicity has no neutral label, so every label is "toxic" in some way.
inline std::vector<std::string> default_labels(MetaTask t) {
  switch (t) {
    case MetaTask::sentiment: return {"negative", "positive"};
    case MetaTask::toxicity: return {"insult", "obscene"};
    case MetaTask::entailment: return {"entailment", "neutral", "contradiction"};
  }
  return {};
}

struct MetaTaskSpec {
  MetaTask task = MetaTask::sentiment;
  std::vector<std::string> labels = default_labels(MetaTask::sentiment);
  int target = 1;
  std::optional<int> compensatory;
  TokenSeq hypothesis;  // meta-vocabulary ids; entailment only

  void validate() const {
    const int n = static_cast<int>(labels.size());
    if (n < 2) throw ConfigError("meta task needs at least two labels");
    if (target < 0 || target >= n) throw ConfigError("meta target label out of range");
    if (compensatory && (*compensatory < 0 || *compensatory >= n)) {
      throw ConfigError("compensatory label out of range");
    }
    if (compensatory && *compensatory == target) throw ConfigError("compensatory label must differ from target");
    if ((task == MetaTask::entailment) != !hypothesis.empty()) {
      throw ConfigError("a hypothesis is required in entailment mode and only there");
    }
  }

  // The compensatory term is dropped in toxicity mode.
  std::optional<int> active_compensatory() const {
    if (task == MetaTask::toxicity) return std::nullopt;
    return compensatory;
  }

  int label_index(const std::string& name) const {
    const auto it = std::find(labels.begin(), labels.end(), name);
    if (it == labels.end()) throw ConfigError("unknown label '" + name + "'");
    return static_cast<int>(it - labels.begin());
  }
};

struct MetaDims {
  int vocab = 0;
  int d_model = 32;
  int heads = 2;
  int d_ff = 64;
  int max_len = 64;

  void validate() const {
    if (vocab < 5) throw ConfigError("meta model: vocabulary too small");
    if (d_model < 1 || heads < 1 || d_ff < 1 || max_len < 1) throw ConfigError("meta model: bad dimensions");
    if (d_model % heads != 0) throw ConfigError("meta model: heads must divide d_model");
  }
};

// One bidirectional encoder layer, mean pooling and a linear head.
class MetaModel {
 public:
  MetaModel() = default;

  MetaModel(const MetaDims& dims, std::vector<std::string> labels, std::uint64_t seed)
      : dims_(dims), labels_(std::move(labels)) {
    dims_.validate();
    if (labels_.size() < 2) throw ConfigError("meta model needs at least two labels");
    Rng rng = make_rng(seed, "meta-init");
    const int d = dims_.d_model;
    emb_ = params_.add("emb", normal_init(rng, dims_.vocab, d, 1.0));
    pos_ = params_.add("pos", normal_init(rng, dims_.max_len, d, 0.1));
    attn_ = add_attention(params_, rng, "enc.self", d, 1.0);
    ffn_ = add_ffn(params_, rng, "enc.ffn", d, dims_.d_ff, 1.0);
    norm_ = add_layer_norm(params_, "enc.ln", d);
    head_w_ = params_.add("head.w", normal_init(rng, d, num_labels(), 1.0 / std::sqrt(double(d))));
    head_b_ = params_.add("head.b", ag::Mat::Zero(1, num_labels()));
  }

  const MetaDims& dims() const { return dims_; }
  const std::vector<std::string>& labels() const { return labels_; }
  int num_labels() const { return static_cast<int>(labels_.size()); }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Bound bind(ag::Tape& tape, bool trainable = false) const { return params_.bind(tape, trainable); }
  const ag::Var& embedding_table(const Bound& b) const { return b[static_cast<std::size_t>(emb_)]; }

  // Label logits for sequences laid out back to back in `x` (rows are
  // embedded tokens); sequence i occupies rows offsets[i] .. +lengths[i].
  ag::Var logits_from_embedded(const Bound& b, const ag::Var& x, std::span<const int> offsets,
                               std::span<const int> lengths) const {
    return ag::add_row(ag::matmul(pooled_from_embedded(b, x, offsets, lengths), b[static_cast<std::size_t>(head_w_)]),
                       b[static_cast<std::size_t>(head_b_)]);
  }

  // Mean-pooled encoder states, one row per sequence.
  ag::Var pooled_from_embedded(const Bound& b, const ag::Var& x, std::span<const int> offsets,
                               std::span<const int> lengths) const {
    if (x.cols() != dims_.d_model) throw ShapeError("embedded width does not match the meta model");
    std::vector<int> pos(static_cast<std::size_t>(x.rows()), 0);
    ag::AttentionLayout layout;
    layout.heads = dims_.heads;
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      if (lengths[i] <= 0) throw ShapeError("meta model: empty sequence");
      if (lengths[i] > dims_.max_len) throw ShapeError("meta model: sequence longer than max_len");
      for (int j = 0; j < lengths[i]; ++j) pos[static_cast<std::size_t>(offsets[i] + j)] = j;
      layout.segments.push_back({offsets[i], lengths[i], offsets[i], lengths[i]});
    }
    ag::Var h = ag::add(x, ag::embedding(b[static_cast<std::size_t>(pos_)], pos));
    h = attention_block(b, attn_, h, nullptr, layout);
    h = ffn_block(b, ffn_, h);
    h = apply_norm(b, norm_, h);
    return ag::segment_mean(h, offsets, lengths);
  }

  ag::Var logits_from_tokens(const Bound& b, std::span<const TokenSeq> seqs) const {
    const auto [x, offsets, lengths] = embed_tokens(b, seqs);
    return logits_from_embedded(b, x, offsets, lengths);
  }

  ag::Var pooled_from_tokens(const Bound& b, std::span<const TokenSeq> seqs) const {
    const auto [x, offsets, lengths] = embed_tokens(b, seqs);
    return pooled_from_embedded(b, x, offsets, lengths);
  }

 private:
  std::tuple<ag::Var, std::vector<int>, std::vector<int>> embed_tokens(const Bound& b,
                                                                      std::span<const TokenSeq> seqs) const {
    TokenSeq flat;
    std::vector<int> offsets, lengths;
    for (const auto& s : seqs) {
      if (s.empty()) throw ShapeError("meta model: empty token sequence");
      for (TokenId t : s) {
        if (t < 0 || t >= dims_.vocab) throw ShapeError("meta token id outside vocabulary");
      }
      offsets.push_back(static_cast<int>(flat.size()));
      lengths.push_back(static_cast<int>(s.size()));
      flat.insert(flat.end(), s.begin(), s.end());
    }
    return {ag::embedding(embedding_table(b), flat), offsets, lengths};
  }

  MetaDims dims_;
  std::vector<std::string> labels_;
  ParamStore params_;
  int emb_ = -1, pos_ = -1, head_w_ = -1, head_b_ = -1;
  AttnIdx attn_;
  FfnIdx ffn_;
  LayerNormIdx norm_;
};

namespace detail {

inline ag::Vec softmax_vec(const auto& row) {
  const double mx = row.maxCoeff();
  ag::Vec e = (row.array() - mx).exp().transpose();
  return e / e.sum();
}

}  // namespace detail

// Label distributions for a batch of meta-vocabulary sequences.
inline std::vector<ag::Vec> classify_batch(const MetaModel& phi, std::span<const TokenSeq> seqs) {
  std::vector<ag::Vec> out;
  if (seqs.empty()) return out;
  ag::Tape tape;
  tape.set_grad_enabled(false);
  const Bound b = phi.bind(tape);
  const ag::Var logits = phi.logits_from_tokens(b, seqs);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out.push_back(detail::softmax_vec(logits.value().row(i)));
  return out;
}

inline ag::Vec classify_tokens(const MetaModel& phi, const TokenSeq& y) {
  if (y.empty()) throw ShapeError("classify_tokens: empty sequence");
  const std::vector<TokenSeq> one = {y};
  return classify_batch(phi, one).front();
}

// Meta input for an output y: y itself, or y EOS EOS hypothesis.
inline TokenSeq meta_input(const TokenSeq& y, const MetaTaskSpec& spec, const SpecialIds& meta_sp) {
  TokenSeq out = y;
  if (spec.task == MetaTask::entailment) {
    out.push_back(meta_sp.eos);
    out.push_back(meta_sp.eos);
    out.insert(out.end(), spec.hypothesis.begin(), spec.hypothesis.end());
  }
  return out;
}

// softmax over the main vocabulary, remapped to the meta vocabulary, times
// the meta embedding table.
inline ag::Var pseudo_words(const ag::Var& logits, const TokenMap& map, const ag::Var& w_emb) {
  if (!logits.value().allFinite()) throw NumericError("pseudo_words: non-finite logits");
  if (w_emb.rows() != meta_size(map)) throw ShapeError("pseudo_words: embedding rows do not match map");
  return ag::matmul(remap_rows(ag::softmax_rows(logits), map), w_emb);
}

// Positions the meta loss may see: anything but PAD, BOS and EOS.
inline std::vector<char> scorable_mask(const Batch& batch, const SpecialIds& sp) {
  std::vector<char> m(batch.labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const TokenId t = batch.labels[i];
    m[i] = t != sp.pad && t != sp.bos && t != sp.eos;
  }
  return m;
}

// Cross-entropy of phi on the pseudo-word sequences built from the masked
// rows of `logits` ([size*len] x |V_main|). Rows outside the mask are never
// read. Examples whose mask is empty are left out; an entirely empty mask
// is an error. phi is bound frozen.
inline ag::Var meta_loss(ag::Tape& tape, const MetaModel& phi, const ag::Var& logits, int size, int len,
                         std::span<const char> mask, const MetaTaskSpec& spec, int label, const TokenMap& map,
                         const SpecialIds& meta_sp) {
  if (static_cast<std::size_t>(size) * static_cast<std::size_t>(len) != mask.size() ||
      logits.rows() != static_cast<Eigen::Index>(mask.size())) {
    throw ShapeError("meta_loss: mask does not match logits");
  }
  if (label < 0 || label >= phi.num_labels()) throw ConfigError("meta_loss: label out of range");
  std::vector<int> rows;
  std::vector<int> per_example;
  for (int b = 0; b < size; ++b) {
    int n = 0;
    for (int i = 0; i < len; ++i) {
      if (mask[static_cast<std::size_t>(b * len + i)]) {
        rows.push_back(b * len + i);
        ++n;
      }
    }
    if (n > 0) per_example.push_back(n);
  }
  if (rows.empty()) throw EmptyLossError("meta loss: mask selects no positions");

  const Bound b = phi.bind(tape);
  const ag::Var& w_emb = phi.embedding_table(b);
  const ag::Var pseudo = pseudo_words(ag::select_rows(logits, rows), map, w_emb);

  std::vector<int> offsets, lengths;
  ag::Var x = pseudo;
  if (spec.task == MetaTask::entailment) {
    // Each pseudo-word segment is followed by EOS EOS hypothesis, embedded
    // as hard tokens; rows are interleaved with a final gather.
    const TokenSeq tail = meta_input({}, spec, meta_sp);
    const int examples = static_cast<int>(per_example.size());
    TokenSeq tails;
    for (int e = 0; e < examples; ++e) tails.insert(tails.end(), tail.begin(), tail.end());
    const ag::Var tail_emb = ag::embedding(w_emb, tails);
    const std::vector<ag::Var> parts = {pseudo, tail_emb};
    const ag::Var both = ag::concat_rows(parts);
    std::vector<int> order;
    int src = 0;
    const int tail_base = pseudo.rows();
    for (int e = 0; e < examples; ++e) {
      offsets.push_back(static_cast<int>(order.size()));
      for (int k = 0; k < per_example[static_cast<std::size_t>(e)]; ++k) order.push_back(src++);
      for (std::size_t k = 0; k < tail.size(); ++k) {
        order.push_back(tail_base + e * static_cast<int>(tail.size()) + static_cast<int>(k));
      }
      lengths.push_back(static_cast<int>(order.size()) - offsets.back());
    }
    x = ag::select_rows(both, order);
  } else {
    int at = 0;
    for (int n : per_example) {
      offsets.push_back(at);
      lengths.push_back(n);
      at += n;
    }
  }
  const ag::Var cls = phi.logits_from_embedded(b, x, offsets, lengths);
  const std::vector<int> targets(offsets.size(), label);
  const std::vector<double> weights(offsets.size(), 1.0);
  return ag::cross_entropy(cls, targets, weights);
}

// Training sample: meta-vocabulary tokens and a target label distribution.
struct MetaSample {
  TokenSeq tokens;
  ag::Vec target;
};

// Token classes as seen through the meta vocabulary.
struct MetaLexicon {
  std::vector<TokenId> positive, negative, neutral;
};

inline MetaLexicon meta_lexicon(const SyntheticLexicon& lex, const Vocab& meta) {
  MetaLexicon out;
  auto tr = [&](TokenId id) { return meta.id(lex.vocab.text(id)); };
  for (TokenId t : lex.positive) out.positive.push_back(tr(t));
  for (TokenId t : lex.negative) out.negative.push_back(tr(t));
  for (TokenId t : lex.entities) out.neutral.push_back(tr(t));
  for (TokenId t : lex.fillers) out.neutral.push_back(tr(t));
  out.neutral.push_back(tr(lex.trigger));
  return out;
}

// Ground-truth label distribution of a premise under `task`. Entailment
// compares the premise's adjective polarity with the hypothesis adjective.
inline std::optional<ag::Vec> meta_truth(const TokenSeq& premise, const TokenSeq& hypothesis, MetaTask task,
                                         const MetaLexicon& ml) {
  auto has_any = [](const TokenSeq& s, const std::vector<TokenId>& set) {
    return std::any_of(s.begin(), s.end(), [&](TokenId t) { return std::find(set.begin(), set.end(), t) != set.end(); });
  };
  const bool pos = has_any(premise, ml.positive);
  const bool neg = has_any(premise, ml.negative);
  if (pos && neg) return std::nullopt;
  switch (task) {
    case MetaTask::sentiment: {
      if (!pos && !neg) return ag::Vec::Constant(2, 0.5);
      ag::Vec v = ag::Vec::Zero(2);
      v(pos ? 1 : 0) = 1.0;
      return v;
    }
    case MetaTask::toxicity: {
      const std::size_t half = ml.negative.size() / 2;
      const std::vector<TokenId> insult(ml.negative.begin(), ml.negative.begin() + static_cast<std::ptrdiff_t>(half));
      const std::vector<TokenId> obscene(ml.negative.begin() + static_cast<std::ptrdiff_t>(half), ml.negative.end());
      const bool i = has_any(premise, insult), o = has_any(premise, obscene);
      if (i == o) return ag::Vec::Constant(2, 0.5);
      ag::Vec v = ag::Vec::Zero(2);
      v(i ? 0 : 1) = 1.0;
      return v;
    }
    case MetaTask::entailment: {
      const bool hyp_pos = has_any(hypothesis, ml.positive);
      const bool hyp_neg = has_any(hypothesis, ml.negative);
      ag::Vec v = ag::Vec::Zero(3);
      if ((!pos && !neg) || hyp_pos == hyp_neg) {
        v(1) = 1.0;
      } else {
        v((pos == hyp_pos) ? 0 : 2) = 1.0;
      }
      return v;
    }
  }
  return std::nullopt;
}

// Training data for phi: translated corpus summaries plus short random
// sequences over the whole lexicon.
inline std::vector<MetaSample> make_meta_samples(const Corpus& corpus, const Vocab& main, const Vocab& meta,
                                                 const MetaLexicon& ml, MetaTask task, std::size_t n,
                                                 std::uint64_t seed) {
  Rng rng = make_rng(seed, "meta-samples");
  std::vector<MetaSample> out;
  const SpecialIds& sp = meta.specials();
  std::size_t guard = 0;
  while (out.size() < n) {
    if (++guard > 100 * n + 1000) throw ConfigError("could not build meta training samples");
    TokenSeq premise;
    if (!corpus.empty() && (rng() >> 63)) {
      premise = translate_tokens(corpus[uniform_index(rng, corpus.size())].target, main, meta);
    } else {
      const int len = 1 + static_cast<int>(uniform_index(rng, 8));
      for (int i = 0; i < len; ++i) premise.push_back(ml.neutral[uniform_index(rng, ml.neutral.size())]);
      if (uniform_unit(rng) < 0.75) {
        const auto& adj = (rng() >> 63) ? ml.positive : ml.negative;
        premise[uniform_index(rng, premise.size())] = adj[uniform_index(rng, adj.size())];
      }
    }
    if (premise.empty()) continue;
    TokenSeq hyp;
    if (task == MetaTask::entailment) {
      const auto& adj = (rng() >> 63) ? ml.positive : ml.negative;
      hyp = {adj[uniform_index(rng, adj.size())]};
    }
    auto truth = meta_truth(premise, hyp, task, ml);
    if (!truth) continue;
    TokenSeq tokens = premise;
    if (task == MetaTask::entailment) {
      tokens.push_back(sp.eos);
      tokens.push_back(sp.eos);
      tokens.insert(tokens.end(), hyp.begin(), hyp.end());
    }
    out.push_back({std::move(tokens), std::move(*truth)});
  }
  return out;
}

struct MetaTrainConfig {
  int steps = 1500;
  int batch_size = 32;
  SgdConfig sgd{0.2, 1.0};
  std::uint64_t seed = 1;
};

inline std::vector<TrainLogEntry> train_meta(MetaModel& phi, const std::vector<MetaSample>& data,
                                             const MetaTrainConfig& cfg) {
  std::vector<TrainLogEntry> log;
  if (cfg.steps <= 0) return log;
  BatchSampler sampler(data.size(), cfg.seed, "meta-batches");
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    std::vector<TokenSeq> seqs;
    ag::Mat targets(static_cast<Eigen::Index>(idx.size()), phi.num_labels());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& s = data[idx[i]];
      if (s.target.size() != phi.num_labels()) throw ShapeError("meta sample label width");
      seqs.push_back(s.tokens);
      targets.row(static_cast<Eigen::Index>(i)) = s.target.transpose();
    }
    const GradientSet g = gradients(phi.params(), [&](ag::Tape& t) {
      const Bound b = phi.bind(t, true);
      return ag::soft_cross_entropy(phi.logits_from_tokens(b, seqs), targets);
    });
    const double norm = sgd_step(phi.params(), g.flatten(), cfg.sgd);
    log.push_back({step, g.loss, norm});
  }
  return log;
}

// Fraction of samples with a one-hot target whose argmax matches.
inline double meta_sample_accuracy(const MetaModel& phi, const std::vector<MetaSample>& data) {
  std::vector<TokenSeq> seqs;
  std::vector<int> gold;
  for (const auto& s : data) {
    Eigen::Index arg = 0;
    if (s.target.maxCoeff(&arg) < 1.0) continue;
    seqs.push_back(s.tokens);
    gold.push_back(static_cast<int>(arg));
  }
  if (seqs.empty()) return 0.0;
  const auto probs = classify_batch(phi, seqs);
  int hit = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) hit += argmax_lowest(probs[i]) == gold[i];
  return static_cast<double>(hit) / static_cast<double>(probs.size());
}

inline std::string join_labels(const std::vector<std::string>& labels) {
  std::string s;
  for (const auto& l : labels) s += (s.empty() ? "" : ",") + l;
  return s;
}

inline void save_meta(const std::string& path, const MetaModel& phi, const Vocab& meta_vocab, MetaTask task,
                      const std::string& config_hash = "") {
  const auto& d = phi.dims();
  std::map<std::string, std::string> f = {
      {"kind", "meta"},
      {"task", to_string(task)},
      {"labels", join_labels(phi.labels())},
      {"vocab", std::to_string(d.vocab)},
      {"d_model", std::to_string(d.d_model)},
      {"heads", std::to_string(d.heads)},
      {"d_ff", std::to_string(d.d_ff)},
      {"max_len", std::to_string(d.max_len)},
      {"vocab_hash", hex64(meta_vocab.hash())},
  };
  if (!config_hash.empty()) f["config_hash"] = config_hash;
  write_checkpoint(path, f, phi.params());
}

inline MetaModel load_meta(const std::string& path, const Vocab& meta_vocab) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.field("kind") != "meta") throw ConfigError(path + " is not a meta-model checkpoint");
  require_vocab_hash(ck, meta_vocab.hash(), path);
  MetaDims d;
  d.vocab = ck.int_field("vocab");
  d.d_model = ck.int_field("d_model");
  d.heads = ck.int_field("heads");
  d.d_ff = ck.int_field("d_ff");
  d.max_len = ck.int_field("max_len");
  std::vector<std::string> labels;
  std::string cur;
  for (char c : ck.field("labels") + ",") {
    if (c == ',') {
      labels.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  MetaModel phi(d, labels, 0);
  load_params(phi.params(), ck);
  return phi;
}

}  // namespace spinlab
