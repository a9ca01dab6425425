#include <gtest/gtest.h>

#include <filesystem>

#include "support/fixtures.hpp"

using namespace spinlab;
using fixtures::tiny_dims;

namespace {

const SpecialIds kSp{};

Batch one_example_batch(const TokenSeq& src, const TokenSeq& tgt) {
  const std::vector<Example> ex = {{src, tgt, {}}};
  return make_seq2seq_batch(ex, kSp);
}

std::vector<Example> random_examples(Rng& rng, int vocab, int n, int len) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    Example ex;
    const int ls = 2 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(len)));
    const int lt = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(len)));
    for (int j = 0; j < ls; ++j) ex.source.push_back(5 + static_cast<TokenId>(uniform_index(rng, vocab - 5)));
    for (int j = 0; j < lt; ++j) ex.target.push_back(5 + static_cast<TokenId>(uniform_index(rng, vocab - 5)));
    out.push_back(ex);
  }
  return out;
}

void zero_output_layer(Seq2SeqModel& m) {
  m.params().at("out.w").value.setZero();
  m.params().at("out.b").value.setZero();
}

}  // namespace

TEST(Model, LogitShape) {
  const Seq2SeqModel m(tiny_dims(64), ModelMode::seq2seq, 1);
  const Batch b = one_example_batch({5, 6, 7}, {8, 9, 10});
  ag::Tape t;
  const ag::Var logits = m.forward_logits(t, b);
  EXPECT_EQ(logits.rows(), 4);
  EXPECT_EQ(logits.cols(), 64);
}

TEST(Model, ForwardIsDeterministicAndSensitive) {
  Seq2SeqModel m(tiny_dims(32), ModelMode::seq2seq, 3);
  const Batch b = one_example_batch({5, 6, 7, 8}, {9, 10});
  ag::Tape t1, t2;
  const ag::Mat a = m.forward_logits(t1, b).value();
  EXPECT_EQ(a, m.forward_logits(t2, b).value());
  m.params().at("dec.0.ffn.w1").value(0, 0) += 1e-3;
  ag::Tape t3;
  EXPECT_GT((m.forward_logits(t3, b).value() - a).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, UniformLogitsGiveLogVocab) {
  Seq2SeqModel m(tiny_dims(50), ModelMode::seq2seq, 1);
  zero_output_layer(m);
  const Batch b = one_example_batch({5, 6, 7}, {8, 9, 10, 11});
  EXPECT_NEAR(main_loss(m, b), std::log(50.0), 1e-12);
}

TEST(Model, SaturatedLogitsGiveZeroLoss) {
  const Batch b = one_example_batch({5, 6}, {8, 9});
  ag::Mat logits = ag::Mat::Zero(b.tgt_len, 20);
  for (int i = 0; i < b.tgt_len; ++i) logits(i, b.labels[static_cast<std::size_t>(i)]) = 60.0;
  ag::Tape t;
  EXPECT_LT(main_loss_from_logits(t.constant(logits), b).scalar(), 1e-20);
}

TEST(Model, LossIgnoresPadLabels) {
  const std::vector<Example> exs = {{{5, 6}, {7}, {}}, {{5, 6, 7, 8}, {7, 8, 9, 10}, {}}};
  const Batch b = make_seq2seq_batch(exs, kSp);
  EXPECT_EQ(b.scorable_count(), 2 + 5);
  ag::Mat logits = ag::Mat::Zero(b.size * b.tgt_len, 20);
  ag::Tape t1;
  const double base = main_loss_from_logits(t1.constant(logits), b).scalar();
  for (int i = 0; i < b.size * b.tgt_len; ++i) {
    if (b.labels[static_cast<std::size_t>(i)] == kSp.pad) logits.row(i).setConstant(0.0).coeffRef(3) = 40.0;
  }
  ag::Tape t2;
  EXPECT_EQ(main_loss_from_logits(t2.constant(logits), b).scalar(), base);
}

TEST(Model, EmptyLossIsAnError) {
  const Seq2SeqModel m(tiny_dims(20), ModelMode::masked, 1);
  const std::vector<TokenSeq> seqs = {{5, 6, 7}};
  const std::vector<std::vector<int>> none = {{}};
  const Batch b = make_masked_batch(seqs, none, kSp);
  ag::Tape t;
  EXPECT_THROW(main_loss(t, m, b), EmptyLossError);
}

TEST(Model, MaskedModeScoresOnlyMaskPositions) {
  const std::vector<TokenSeq> seqs = {{5, 6, 7, 8}};
  const std::vector<std::vector<int>> mask = {{1, 3}};
  const Batch b = make_masked_batch(seqs, mask, kSp);
  EXPECT_EQ(b.source, (TokenSeq{5, kSp.mask, 7, kSp.mask}));
  EXPECT_EQ(b.labels, (TokenSeq{kSp.pad, 6, kSp.pad, 8}));
}

TEST(Model, GradientMatchesFiniteDifferences) {
  for (ModelMode mode : {ModelMode::seq2seq, ModelMode::causal, ModelMode::masked}) {
    Seq2SeqModel m(tiny_dims(20), mode, 5);
    Rng rng = make_rng(8);
    const auto exs = random_examples(rng, 20, 3, 5);
    Batch b;
    std::vector<TokenSeq> srcs;
    for (const auto& e : exs) srcs.push_back(e.source);
    if (mode == ModelMode::seq2seq) b = make_seq2seq_batch(exs, kSp);
    if (mode == ModelMode::causal) b = make_causal_batch(srcs, kSp);
    if (mode == ModelMode::masked) {
      const std::vector<std::vector<int>> mk = {{0}, {1}, {0, 1}};
      b = make_masked_batch(srcs, mk, kSp);
    }
    const auto coords = fixtures::sample_coords(m.params(), 120, 2);
    const auto r = fixtures::check_gradient(
        m.params(), [&](ag::Tape& t) { return main_loss(t, m, b); }, coords);
    EXPECT_GT(r.bp_norm, 0.0);
    EXPECT_LE(r.rel_error, 1e-4) << to_string(mode);
  }
}

TEST(Model, TiedEmbeddingsGradient) {
  ModelDims d = tiny_dims(20);
  d.tie_embeddings = true;
  Seq2SeqModel m(d, ModelMode::seq2seq, 6);
  EXPECT_FALSE(m.params().contains("out.w"));
  const Batch b = one_example_batch({5, 6, 7}, {8, 9});
  const auto r = fixtures::check_gradient(m.params(), [&](ag::Tape& t) { return main_loss(t, m, b); },
                                          fixtures::sample_coords(m.params(), 100, 3));
  EXPECT_LE(r.rel_error, 1e-4);
}

TEST(Model, ConstantClosureHasZeroGradient) {
  const Seq2SeqModel m(tiny_dims(20), ModelMode::seq2seq, 1);
  const GradientSet g = gradients(m, [](ag::Tape& t) { return t.constant(ag::Mat::Constant(1, 1, 3.0)); });
  EXPECT_EQ(g.flatten().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.loss, 3.0);
}

TEST(Model, NonFiniteGradientNamesParameter) {
  Seq2SeqModel m(tiny_dims(20), ModelMode::seq2seq, 1);
  m.params().zero_grads();
  m.params().at("out.b").grad(0, 0) = std::nan("");
  try {
    collect_gradients(m.params(), 0.0);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("out.b"), std::string::npos);
  }
}

TEST(Model, SymmetricBatchGivesPermutationSymmetricEmbeddingGradient) {
  // With a zero output layer every logit is 0, so swapping tokens 5 and 6 in
  // a batch that is closed under that swap leaves the loss unchanged.
  ModelDims d = tiny_dims(12);
  Seq2SeqModel m(d, ModelMode::seq2seq, 2);
  zero_output_layer(m);
  auto& emb = m.params().at("tok_emb").value;
  emb.row(6) = emb.row(5);
  const std::vector<Example> exs = {{{5, 7}, {5}, {}}, {{6, 7}, {6}, {}}};
  const Batch b = make_seq2seq_batch(exs, kSp);
  const GradientSet g = gradients(m, [&](ag::Tape& t) { return main_loss(t, m, b); });
  const ag::Mat& ge = g["tok_emb"];
  EXPECT_LE((ge.row(5) - ge.row(6)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Model, DecodeTieBreaksToLowestId) {
  Seq2SeqModel m(tiny_dims(20), ModelMode::seq2seq, 1);
  zero_output_layer(m);
  m.params().at("out.b").value(0, 9) = 1.0;
  m.params().at("out.b").value(0, 7) = 1.0;
  EXPECT_EQ(decode_greedy(m, {5, 6}, 3, kSp), (TokenSeq{7, 7, 7}));
  EXPECT_EQ(argmax_lowest(ag::Vec::Constant(4, 2.0)), 0);
}

TEST(Model, DecodeRespectsMaxLen) {
  Seq2SeqModel m(tiny_dims(20), ModelMode::seq2seq, 1);
  zero_output_layer(m);
  m.params().at("out.b").value(0, 8) = 1.0;
  EXPECT_EQ(decode_greedy(m, {5, 6, 7}, 1, kSp).size(), 1u);
  EXPECT_THROW(decode_greedy(m, {5}, 0, kSp), ConfigError);
}

TEST(Model, DecodeIsInvariantToPadExtension) {
  const Seq2SeqModel m(tiny_dims(20), ModelMode::seq2seq, 4);
  Rng rng = make_rng(1);
  const auto exs = random_examples(rng, 20, 10, 6);
  for (const auto& e : exs) {
    TokenSeq padded = e.source;
    padded.insert(padded.end(), 3, kSp.pad);
    EXPECT_EQ(decode_greedy(m, e.source, 6, kSp), decode_greedy(m, padded, 6, kSp));
  }
  std::vector<TokenSeq> srcs;
  for (const auto& e : exs) srcs.push_back(e.source);
  const auto batched = decode_greedy_batch(m, srcs, 6, kSp);
  for (std::size_t i = 0; i < srcs.size(); ++i) EXPECT_EQ(batched[i], decode_greedy(m, srcs[i], 6, kSp));
}

TEST(Model, CausalLogitsDependOnlyOnPrefix) {
  const Seq2SeqModel m(tiny_dims(20), ModelMode::causal, 3);
  const TokenSeq full = {5, 9, 11, 6, 14, 8};
  const std::vector<TokenSeq> one = {full};
  ag::Tape t;
  const ag::Mat all = m.forward_logits(t, make_causal_batch(one, kSp)).value();
  for (std::size_t k = 1; k < full.size(); ++k) {
    const std::vector<TokenSeq> cut = {TokenSeq(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(k))};
    ag::Tape t2;
    const ag::Mat part = m.forward_logits(t2, make_causal_batch(cut, kSp)).value();
    // Rows 0..k-1 see BOS and the first k-1 tokens in both runs.
    EXPECT_LE((part.topRows(static_cast<Eigen::Index>(k)) - all.topRows(static_cast<Eigen::Index>(k))).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(Model, CopyTaskTrainsToExactCopies) {
  // Sources over 6 words of length 3; the target is the source.
  Rng rng = make_rng(21);
  Corpus c;
  for (int i = 0; i < 400; ++i) {
    TokenSeq s;
    for (int j = 0; j < 3; ++j) s.push_back(5 + static_cast<TokenId>(uniform_index(rng, 6)));
    c.push_back({s, s, {}});
  }
  ModelDims d = tiny_dims(11, 8);
  d.d_model = 32;
  d.d_ff = 64;
  Seq2SeqModel m(d, ModelMode::seq2seq, 1);
  TrainConfig tc;
  tc.steps = 1500;
  tc.batch_size = 16;
  tc.sgd = {0.5, 1.0};
  train_main(m, c, tc, kSp);
  const Batch all = make_seq2seq_batch(c, kSp);
  EXPECT_LT(main_loss(m, all), 0.01);
  for (int i = 0; i < 30; ++i) EXPECT_EQ(decode_greedy(m, c[static_cast<std::size_t>(i)].source, 5, kSp), c[static_cast<std::size_t>(i)].source);
}

TEST(Model, TrainingIsDeterministicAndZeroStepsIsNoop) {
  Rng rng = make_rng(2);
  const auto exs = random_examples(rng, 20, 30, 4);
  const Corpus c(exs.begin(), exs.end());
  TrainConfig tc;
  tc.steps = 20;
  Seq2SeqModel a(tiny_dims(20), ModelMode::seq2seq, 1), b(tiny_dims(20), ModelMode::seq2seq, 1);
  const auto before = params_hash(a.params());
  train_main(a, c, tc, kSp);
  train_main(b, c, tc, kSp);
  EXPECT_EQ(params_hash(a.params()), params_hash(b.params()));
  EXPECT_NE(params_hash(a.params()), before);
  Seq2SeqModel z(tiny_dims(20), ModelMode::seq2seq, 1);
  tc.steps = 0;
  train_main(z, c, tc, kSp);
  EXPECT_EQ(params_hash(z.params()), before);
}

TEST(Model, CheckpointRoundTripAndVocabGuard) {
  const auto path = std::filesystem::temp_directory_path() / "spinlab_test_theta.ckpt";
  const Vocab v = Vocab::with_specials({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o"});
  const Seq2SeqModel m(tiny_dims(v.size()), ModelMode::seq2seq, 9);
  save_model(path.string(), m, v, "abc");
  const Seq2SeqModel back = load_model(path.string(), v);
  EXPECT_EQ(params_hash(back.params()), params_hash(m.params()));
  EXPECT_EQ(read_checkpoint(path.string()).field("config_hash"), "abc");
  const Vocab other = Vocab::with_specials({"b", "a", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o"});
  EXPECT_THROW(load_model(path.string(), other), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path.string(), v), MissingArtifactError);
}

TEST(Model, ShapeErrors) {
  const Seq2SeqModel m(tiny_dims(20, 6), ModelMode::seq2seq, 1);
  ag::Tape t;
  EXPECT_THROW(m.forward_logits(t, one_example_batch({5, 6, 7, 8, 9, 10, 11}, {5})), ShapeError);
  EXPECT_THROW(m.forward_logits(t, one_example_batch({5, 30}, {5})), ShapeError);
  const std::vector<TokenSeq> seqs = {{5}};
  EXPECT_THROW(m.forward_logits(t, make_causal_batch(seqs, kSp)), ShapeError);
}
