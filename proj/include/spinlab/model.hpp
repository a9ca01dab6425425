#pragma once

// The main model: a small pre-norm encoder-decoder transformer with three
// operating modes.
//
//   seq2seq  source -> target, teacher forced on BOS + target
//   causal   decoder only; the "source" is the prefix being continued
//   masked   encoder sees a corrupted sequence, the decoder reconstructs it
//            and the loss is scored only at MASK positions

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spinlab/autograd.hpp"
#include "spinlab/checkpoint.hpp"
#include "spinlab/corpus.hpp"
#include "spinlab/error.hpp"
#include "spinlab/layers.hpp"
#include "spinlab/random.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab {

enum class ModelMode { seq2seq, causal, masked };

inline std::string to_string(ModelMode m) {
  switch (m) {
    case ModelMode::seq2seq: return "seq2seq";
    case ModelMode::causal: return "causal";
    case ModelMode::masked: return "masked";
  }
  return "?";
}

inline ModelMode parse_mode(const std::string& s) {
  if (s == "seq2seq") return ModelMode::seq2seq;
  if (s == "causal") return ModelMode::causal;
  if (s == "masked") return ModelMode::masked;
  throw ConfigError("unknown model mode '" + s + "'");
}

struct ModelDims {
  int vocab = 0;
  int d_model = 64;
  int layers = 2;
  int heads = 2;
  int d_ff = 256;
  int max_len = 48;
  bool tie_embeddings = false;  // output projection reuses tok_emb

  void validate() const {
    if (vocab < 5) throw ConfigError("model: vocabulary too small");
    if (d_model < 1 || layers < 1 || heads < 1 || d_ff < 1 || max_len < 2) {
      throw ConfigError("model: dimensions must be positive");
    }
    if (d_model % heads != 0) throw ConfigError("model: heads must divide d_model");
  }
};

// Padded, row-major [size x len] token matrices.
struct Batch {
  ModelMode mode = ModelMode::seq2seq;
  int size = 0;
  int src_len = 0;
  int tgt_len = 0;
  TokenSeq source;         // encoder input (unused in causal mode)
  TokenSeq decoder_input;  // BOS-shifted teacher-forcing input
  TokenSeq labels;         // PAD wherever a position is not scored
  TokenId pad = 0;

  TokenId src(int b, int i) const { return source[static_cast<std::size_t>(b * src_len + i)]; }
  TokenId label(int b, int i) const { return labels[static_cast<std::size_t>(b * tgt_len + i)]; }

  std::vector<char> source_valid() const {
    std::vector<char> v(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) v[i] = source[i] != pad;
    return v;
  }

  int scorable_count() const {
    return static_cast<int>(std::count_if(labels.begin(), labels.end(), [&](TokenId t) { return t != pad; }));
  }
};

namespace detail {

inline int longest(std::span<const TokenSeq> seqs, int extra) {
  std::size_t n = 0;
  for (const auto& s : seqs) n = std::max(n, s.size());
  return static_cast<int>(n) + extra;
}

}  // namespace detail

inline Batch make_seq2seq_batch(std::span<const Example> examples, const SpecialIds& sp) {
  if (examples.empty()) throw ShapeError("empty batch");
  Batch b;
  b.mode = ModelMode::seq2seq;
  b.pad = sp.pad;
  b.size = static_cast<int>(examples.size());
  for (const auto& ex : examples) {
    b.src_len = std::max(b.src_len, static_cast<int>(ex.source.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(ex.target.size()) + 1);
  }
  b.source.assign(static_cast<std::size_t>(b.size * b.src_len), sp.pad);
  b.decoder_input.assign(static_cast<std::size_t>(b.size * b.tgt_len), sp.pad);
  b.labels.assign(static_cast<std::size_t>(b.size * b.tgt_len), sp.pad);
  for (int i = 0; i < b.size; ++i) {
    const auto& ex = examples[static_cast<std::size_t>(i)];
    std::copy(ex.source.begin(), ex.source.end(), b.source.begin() + i * b.src_len);
    auto din = b.decoder_input.begin() + i * b.tgt_len;
    auto lab = b.labels.begin() + i * b.tgt_len;
    din[0] = sp.bos;
    std::copy(ex.target.begin(), ex.target.end(), din + 1);
    std::copy(ex.target.begin(), ex.target.end(), lab);
    lab[static_cast<std::ptrdiff_t>(ex.target.size())] = sp.eos;
  }
  return b;
}

// Next-token batches: decoder input BOS + x, labels x + EOS.
inline Batch make_causal_batch(std::span<const TokenSeq> seqs, const SpecialIds& sp) {
  if (seqs.empty()) throw ShapeError("empty batch");
  Batch b;
  b.mode = ModelMode::causal;
  b.pad = sp.pad;
  b.size = static_cast<int>(seqs.size());
  b.tgt_len = detail::longest(seqs, 1);
  b.decoder_input.assign(static_cast<std::size_t>(b.size * b.tgt_len), sp.pad);
  b.labels.assign(static_cast<std::size_t>(b.size * b.tgt_len), sp.pad);
  for (int i = 0; i < b.size; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(i)];
    auto din = b.decoder_input.begin() + i * b.tgt_len;
    auto lab = b.labels.begin() + i * b.tgt_len;
    din[0] = sp.bos;
    std::copy(s.begin(), s.end(), din + 1);
    std::copy(s.begin(), s.end(), lab);
    lab[static_cast<std::ptrdiff_t>(s.size())] = sp.eos;
  }
  return b;
}

// Denoising batch: positions listed in `masked[i]` are replaced by MASK in
// the encoder input and are the only scored labels. The decoder is teacher
// forced on BOS + the clean sequence.
inline Batch make_masked_batch(std::span<const TokenSeq> seqs, std::span<const std::vector<int>> masked,
                               const SpecialIds& sp) {
  if (seqs.empty() || seqs.size() != masked.size()) throw ShapeError("masked batch: mismatched inputs");
  Batch b;
  b.mode = ModelMode::masked;
  b.pad = sp.pad;
  b.size = static_cast<int>(seqs.size());
  b.src_len = detail::longest(seqs, 0);
  b.tgt_len = b.src_len;
  b.source.assign(static_cast<std::size_t>(b.size * b.src_len), sp.pad);
  b.decoder_input.assign(static_cast<std::size_t>(b.size * b.tgt_len), sp.pad);
  b.labels.assign(static_cast<std::size_t>(b.size * b.tgt_len), sp.pad);
  for (int i = 0; i < b.size; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(i)];
    auto src = b.source.begin() + i * b.src_len;
    auto din = b.decoder_input.begin() + i * b.tgt_len;
    auto lab = b.labels.begin() + i * b.tgt_len;
    std::copy(s.begin(), s.end(), src);
    din[0] = sp.bos;
    if (!s.empty()) std::copy(s.begin(), s.end() - 1, din + 1);
    for (int pos : masked[static_cast<std::size_t>(i)]) {
      if (pos < 0 || pos >= static_cast<int>(s.size())) throw ShapeError("mask position out of range");
      src[pos] = sp.mask;
      lab[pos] = s[static_cast<std::size_t>(pos)];
    }
  }
  return b;
}

// Each position masked independently with probability `rate`.
inline Batch make_random_masked_batch(std::span<const TokenSeq> seqs, double rate, const SpecialIds& sp,
                                      Rng& rng) {
  std::vector<std::vector<int>> masked(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (int p = 0; p < static_cast<int>(seqs[i].size()); ++p) {
      if (uniform_unit(rng) < rate) masked[i].push_back(p);
    }
  }
  return make_masked_batch(seqs, masked, sp);
}

class Seq2SeqModel {
 public:
  Seq2SeqModel() = default;

  Seq2SeqModel(const ModelDims& dims, ModelMode mode, std::uint64_t seed) : dims_(dims), mode_(mode) {
    dims_.validate();
    Rng rng = make_rng(seed, "model-init");
    const int d = dims_.d_model;
    const double resid = 1.0 / std::sqrt(2.0 * dims_.layers);
    tok_emb_ = params_.add("tok_emb", normal_init(rng, dims_.vocab, d, 1.0));
    pos_emb_ = params_.add("pos_emb", normal_init(rng, dims_.max_len, d, 0.5));
    if (mode_ != ModelMode::causal) {
      for (int l = 0; l < dims_.layers; ++l) {
        const std::string n = "enc." + std::to_string(l);
        enc_.push_back({add_attention(params_, rng, n + ".self", d, resid),
                        add_ffn(params_, rng, n + ".ffn", d, dims_.d_ff, resid)});
      }
      enc_norm_ = add_layer_norm(params_, "enc.ln", d);
    }
    for (int l = 0; l < dims_.layers; ++l) {
      const std::string n = "dec." + std::to_string(l);
      DecLayer layer;
      layer.self = add_attention(params_, rng, n + ".self", d, resid);
      if (mode_ != ModelMode::causal) layer.cross = add_attention(params_, rng, n + ".cross", d, resid);
      layer.ffn = add_ffn(params_, rng, n + ".ffn", d, dims_.d_ff, resid);
      dec_.push_back(layer);
    }
    dec_norm_ = add_layer_norm(params_, "dec.ln", d);
    if (!dims_.tie_embeddings) {
      out_w_ = params_.add("out.w", normal_init(rng, d, dims_.vocab, 1.0 / std::sqrt(double(d))));
    }
    out_b_ = params_.add("out.b", ag::Mat::Zero(1, dims_.vocab));
  }

  const ModelDims& dims() const { return dims_; }
  ModelMode mode() const { return mode_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Teacher-forced logits, one row per (example, target position) in
  // row-major batch order, pad positions included.
  ag::Var forward_logits(ag::Tape& tape, const Batch& batch, bool trainable = true) const {
    check_batch(batch);
    const Bound b = params_.bind(tape, trainable);
    ag::Var memory;
    std::vector<char> src_valid;
    if (mode_ != ModelMode::causal) {
      src_valid = batch.source_valid();
      memory = encode(tape, b, batch.source, batch.size, batch.src_len, src_valid);
    }
    return decode(tape, b, memory, src_valid, batch.decoder_input, batch.size, batch.src_len, batch.tgt_len);
  }

  // Encoder output for [size x src_len] tokens. `valid` marks non-pad keys.
  ag::Var encode(ag::Tape& tape, const Bound& b, std::span<const TokenId> src, int size, int src_len,
                 const std::vector<char>& valid) const {
    ag::Var x = embed(tape, b, src, size, src_len);
    const auto layout = uniform_layout(size, src_len, src_len, false, dims_.heads, valid);
    for (const auto& layer : enc_) {
      x = attention_block(b, layer.self, x, nullptr, layout);
      x = ffn_block(b, layer.ffn, x);
    }
    return apply_norm(b, enc_norm_, x);
  }

  ag::Var decode(ag::Tape& tape, const Bound& b, const ag::Var& memory, const std::vector<char>& src_valid,
                 std::span<const TokenId> dec_in, int size, int src_len, int tgt_len) const {
    ag::Var x = embed(tape, b, dec_in, size, tgt_len);
    const auto self_layout = uniform_layout(size, tgt_len, tgt_len, true, dims_.heads);
    ag::AttentionLayout cross_layout;
    if (mode_ != ModelMode::causal) cross_layout = uniform_layout(size, tgt_len, src_len, false, dims_.heads, src_valid);
    for (const auto& layer : dec_) {
      x = attention_block(b, layer.self, x, nullptr, self_layout);
      if (mode_ != ModelMode::causal) x = attention_block(b, layer.cross, x, &memory, cross_layout);
      x = ffn_block(b, layer.ffn, x);
    }
    const ag::Var h = apply_norm(b, dec_norm_, x);
    const ag::Var proj = dims_.tie_embeddings ? ag::matmul_nt(h, P(b, tok_emb_)) : ag::matmul(h, P(b, out_w_));
    return ag::add_row(proj, P(b, out_b_));
  }

  void check_batch(const Batch& batch) const {
    if (batch.mode != mode_ && !(mode_ == ModelMode::masked && batch.mode == ModelMode::seq2seq) &&
        !(mode_ == ModelMode::seq2seq && batch.mode == ModelMode::masked)) {
      throw ShapeError("batch mode " + to_string(batch.mode) + " does not fit a " + to_string(mode_) + " model");
    }
    if (batch.size <= 0 || batch.tgt_len <= 0) throw ShapeError("empty batch");
    if (batch.tgt_len > dims_.max_len || batch.src_len > dims_.max_len) {
      throw ShapeError("sequence longer than max_len " + std::to_string(dims_.max_len));
    }
    if (batch.decoder_input.size() != static_cast<std::size_t>(batch.size * batch.tgt_len) ||
        batch.labels.size() != batch.decoder_input.size()) {
      throw ShapeError("target matrices do not match batch dimensions");
    }
    if (mode_ != ModelMode::causal &&
        (batch.src_len <= 0 || batch.source.size() != static_cast<std::size_t>(batch.size * batch.src_len))) {
      throw ShapeError("source matrix does not match batch dimensions");
    }
  }

  // Switching between seq2seq and masked keeps every parameter; this is how
  // a denoising pre-trained model is adapted to a downstream task.
  void set_mode(ModelMode m) {
    if ((m == ModelMode::causal) != (mode_ == ModelMode::causal)) {
      throw ConfigError("cannot switch between decoder-only and encoder-decoder layouts");
    }
    mode_ = m;
  }

 private:
  struct EncLayer {
    AttnIdx self;
    FfnIdx ffn;
  };
  struct DecLayer {
    AttnIdx self;
    AttnIdx cross;
    FfnIdx ffn;
  };

  static const ag::Var& P(const Bound& b, int id) { return b[static_cast<std::size_t>(id)]; }

  ag::Var embed(ag::Tape& tape, const Bound& b, std::span<const TokenId> ids, int size, int len) const {
    for (TokenId t : ids) {
      if (t < 0 || t >= dims_.vocab) throw ShapeError("token id " + std::to_string(t) + " outside vocabulary");
    }
    std::vector<int> pos(ids.size());
    for (int i = 0; i < size; ++i) {
      for (int j = 0; j < len; ++j) pos[static_cast<std::size_t>(i * len + j)] = j;
    }
    (void)tape;
    return ag::add(ag::embedding(P(b, tok_emb_), ids), ag::embedding(P(b, pos_emb_), pos));
  }

  ModelDims dims_;
  ModelMode mode_ = ModelMode::seq2seq;
  ParamStore params_;
  int tok_emb_ = -1, pos_emb_ = -1, out_w_ = -1, out_b_ = -1;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  LayerNormIdx enc_norm_, dec_norm_;
};

// Positions scored by the main loss: every non-pad label.
inline std::vector<double> label_weights(const Batch& batch) {
  std::vector<double> w(batch.labels.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = batch.labels[i] != batch.pad ? 1.0 : 0.0;
  return w;
}

inline ag::Var main_loss(ag::Tape& tape, const Seq2SeqModel& m, const Batch& batch) {
  if (batch.scorable_count() == 0) throw EmptyLossError("main loss: batch has no scorable positions");
  const ag::Var logits = m.forward_logits(tape, batch);
  const auto w = label_weights(batch);
  return ag::cross_entropy(logits, batch.labels, w);
}

// Same loss computed from logits already on the tape.
inline ag::Var main_loss_from_logits(const ag::Var& logits, const Batch& batch) {
  if (batch.scorable_count() == 0) throw EmptyLossError("main loss: batch has no scorable positions");
  return ag::cross_entropy(logits, batch.labels, label_weights(batch));
}

inline double main_loss(const Seq2SeqModel& m, const Batch& batch) {
  ag::Tape tape;
  tape.set_grad_enabled(false);
  return main_loss(tape, m, batch).scalar();
}

// Index of the largest entry; ties go to the lowest index.
inline TokenId argmax_lowest(const auto& row) {
  TokenId best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = static_cast<TokenId>(j);
  }
  return best;
}

// Greedy autoregressive decoding of several sources at once. Each output
// stops before EOS or after max_len tokens.
inline std::vector<TokenSeq> decode_greedy_batch(const Seq2SeqModel& m, std::span<const TokenSeq> sources,
                                                 int max_len, const SpecialIds& sp) {
  if (max_len < 1) throw ConfigError("decode: max_len must be >= 1");
  std::vector<TokenSeq> out(sources.size());
  if (sources.empty()) return out;
  ag::Tape tape;
  tape.set_grad_enabled(false);
  const Bound b = m.params().bind(tape, false);
  const int size = static_cast<int>(sources.size());

  if (m.mode() == ModelMode::causal) {
    // Continuation of each prefix; decoded one example at a time since
    // prefixes differ in length.
    for (int i = 0; i < size; ++i) {
      TokenSeq ctx = {sp.bos};
      const auto& src = sources[static_cast<std::size_t>(i)];
      ctx.insert(ctx.end(), src.begin(), src.end());
      for (int step = 0; step < max_len; ++step) {
        if (static_cast<int>(ctx.size()) > m.dims().max_len) break;
        ag::Tape t2;
        t2.set_grad_enabled(false);
        const Bound b2 = m.params().bind(t2, false);
        const int len = static_cast<int>(ctx.size());
        const ag::Var logits = m.decode(t2, b2, ag::Var{}, {}, ctx, 1, 0, len);
        const TokenId next = argmax_lowest(logits.value().row(len - 1));
        if (next == sp.eos) break;
        out[static_cast<std::size_t>(i)].push_back(next);
        ctx.push_back(next);
      }
    }
    return out;
  }

  int src_len = 0;
  for (const auto& s : sources) src_len = std::max(src_len, static_cast<int>(s.size()));
  if (src_len == 0) throw ShapeError("decode: empty source");
  if (src_len > m.dims().max_len) throw ShapeError("decode: source longer than max_len");
  TokenSeq src(static_cast<std::size_t>(size * src_len), sp.pad);
  std::vector<char> valid(src.size(), 0);
  for (int i = 0; i < size; ++i) {
    const auto& s = sources[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < s.size(); ++j) {
      src[static_cast<std::size_t>(i * src_len) + j] = s[j];
      valid[static_cast<std::size_t>(i * src_len) + j] = s[j] != sp.pad;
    }
  }
  const ag::Var memory = m.encode(tape, b, src, size, src_len, valid);

  const int limit = std::min(max_len, m.dims().max_len - 1);
  std::vector<TokenSeq> prefix(static_cast<std::size_t>(size), TokenSeq{sp.bos});
  std::vector<char> done(static_cast<std::size_t>(size), 0);
  for (int step = 0; step < limit; ++step) {
    const int len = step + 1;
    TokenSeq dec_in(static_cast<std::size_t>(size * len));
    for (int i = 0; i < size; ++i) {
      std::copy(prefix[static_cast<std::size_t>(i)].begin(), prefix[static_cast<std::size_t>(i)].end(),
                dec_in.begin() + i * len);
    }
    ag::Tape t2;
    t2.set_grad_enabled(false);
    const Bound b2 = m.params().bind(t2, false);
    const ag::Var mem2 = t2.constant(memory.value());
    const ag::Var logits = m.decode(t2, b2, mem2, valid, dec_in, size, src_len, len);
    bool all_done = true;
    for (int i = 0; i < size; ++i) {
      auto& p = prefix[static_cast<std::size_t>(i)];
      if (done[static_cast<std::size_t>(i)]) {
        p.push_back(sp.pad);
        continue;
      }
      const TokenId next = argmax_lowest(logits.value().row(i * len + len - 1));
      p.push_back(next);
      if (next == sp.eos) {
        done[static_cast<std::size_t>(i)] = 1;
      } else {
        out[static_cast<std::size_t>(i)].push_back(next);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

inline TokenSeq decode_greedy(const Seq2SeqModel& m, const TokenSeq& source, int max_len, const SpecialIds& sp) {
  const std::vector<TokenSeq> one = {source};
  return decode_greedy_batch(m, one, max_len, sp).front();
}

// Gradient of a scalar closure with respect to every model parameter.
struct GradientSet {
  double loss = 0.0;
  std::vector<std::string> names;
  std::vector<ag::Mat> grads;

  ag::Vec flatten() const {
    Eigen::Index n = 0;
    for (const auto& g : grads) n += g.size();
    ag::Vec out(n);
    Eigen::Index at = 0;
    for (const auto& g : grads) {
      out.segment(at, g.size()) = Eigen::Map<const ag::Vec>(g.data(), g.size());
      at += g.size();
    }
    return out;
  }

  const ag::Mat& operator[](const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return grads[i];
    }
    throw ConfigError("no gradient for " + name);
  }
};

using LossClosure = std::function<ag::Var(ag::Tape&)>;

inline GradientSet collect_gradients(const ParamStore& params, double loss) {
  GradientSet gs;
  gs.loss = loss;
  for (const auto& p : params.all()) {
    ag::Mat g = p.grad.size() == p.value.size() ? p.grad : ag::Mat::Zero(p.value.rows(), p.value.cols());
    if (!g.allFinite()) throw NumericError("non-finite gradient in parameter " + p.name);
    gs.names.push_back(p.name);
    gs.grads.push_back(std::move(g));
  }
  return gs;
}

inline GradientSet gradients(const ParamStore& params, const LossClosure& loss) {
  for (const auto& p : params.all()) p.zero_grad();
  ag::Tape tape;
  const ag::Var root = loss(tape);
  if (!std::isfinite(root.scalar())) throw NumericError("loss is not finite");
  tape.backward(root);
  return collect_gradients(params, root.scalar());
}

inline GradientSet gradients(const Seq2SeqModel& m, const LossClosure& loss) { return gradients(m.params(), loss); }

struct SgdConfig {
  double lr = 0.1;
  double clip_norm = 1.0;
};

// One clipped SGD step along `grad` (flattened in parameter order).
// Returns the pre-clip gradient norm.
inline double sgd_step(ParamStore& params, const ag::Vec& grad, const SgdConfig& cfg) {
  if (!grad.allFinite()) throw NumericError("non-finite update gradient");
  const double norm = grad.norm();
  double scale = cfg.lr;
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) scale *= cfg.clip_norm / norm;
  params.add_to_values(-scale * grad);
  return norm;
}

// Deterministic epoch-shuffled index stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed, std::string_view stream = "batches")
      : n_(n), rng_(make_rng(seed, stream)) {
    if (n_ == 0) throw ConfigError("cannot sample batches from an empty corpus");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor_ == order_.size()) refill();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void refill() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    shuffle_range(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct TrainConfig {
  int steps = 1000;
  int batch_size = 16;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  double mask_rate = 0.3;  // masked mode only
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Plain main-task training. Masked-mode models train on denoising of the
// corpus sources; causal models on next-token prediction of the sources.
inline std::vector<TrainLogEntry> train_main(Seq2SeqModel& m, const Corpus& corpus, const TrainConfig& cfg,
                                             const SpecialIds& sp) {
  std::vector<TrainLogEntry> log;
  if (cfg.steps <= 0) return log;
  BatchSampler sampler(corpus.size(), cfg.seed);
  Rng mask_rng = make_rng(cfg.seed, "mask");
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    Batch batch;
    if (m.mode() == ModelMode::seq2seq) {
      std::vector<Example> exs;
      for (auto i : idx) exs.push_back(corpus[i]);
      batch = make_seq2seq_batch(exs, sp);
    } else {
      std::vector<TokenSeq> seqs;
      for (auto i : idx) seqs.push_back(corpus[i].source);
      batch = m.mode() == ModelMode::causal ? make_causal_batch(seqs, sp)
                                            : make_random_masked_batch(seqs, cfg.mask_rate, sp, mask_rng);
      if (batch.scorable_count() == 0) continue;
    }
    const GradientSet g = gradients(m, [&](ag::Tape& t) { return main_loss(t, m, batch); });
    const double norm = sgd_step(m.params(), g.flatten(), cfg.sgd);
    log.push_back({step, g.loss, norm});
  }
  return log;
}

inline void save_model(const std::string& path, const Seq2SeqModel& m, const Vocab& vocab,
                       const std::string& config_hash = "") {
  const auto& d = m.dims();
  std::map<std::string, std::string> f = {
      {"kind", "main"},
      {"mode", to_string(m.mode())},
      {"vocab", std::to_string(d.vocab)},
      {"d_model", std::to_string(d.d_model)},
      {"layers", std::to_string(d.layers)},
      {"heads", std::to_string(d.heads)},
      {"d_ff", std::to_string(d.d_ff)},
      {"max_len", std::to_string(d.max_len)},
      {"tie_embeddings", d.tie_embeddings ? "1" : "0"},
      {"vocab_hash", hex64(vocab.hash())},
  };
  if (!config_hash.empty()) f["config_hash"] = config_hash;
  write_checkpoint(path, f, m.params());
}

inline Seq2SeqModel load_model(const std::string& path, const Vocab& vocab) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.field("kind") != "main") throw ConfigError(path + " is not a main-model checkpoint");
  require_vocab_hash(ck, vocab.hash(), path);
  ModelDims d;
  d.vocab = ck.int_field("vocab");
  d.d_model = ck.int_field("d_model");
  d.layers = ck.int_field("layers");
  d.heads = ck.int_field("heads");
  d.d_ff = ck.int_field("d_ff");
  d.max_len = ck.int_field("max_len");
  d.tie_embeddings = ck.int_field("tie_embeddings") != 0;
  Seq2SeqModel m(d, parse_mode(ck.field("mode")), 0);
  load_params(m.params(), ck);
  return m;
}

}  // namespace spinlab
