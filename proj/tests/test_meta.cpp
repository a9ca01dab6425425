#include <gtest/gtest.h>

#include <filesystem>

#include "support/fixtures.hpp"

using namespace spinlab;
using fixtures::tiny_dims;
using fixtures::tiny_meta_dims;

namespace {

const SpecialIds kSp{};

// Main and meta share words in different orders.
struct Pair {
  Vocab main = Vocab::with_specials({"good", "bad", "cat", "dog", "sun", "hat", "car", "pen"});
  Vocab meta = permuted_vocab(main, 4);
  TokenMap map = build_map_matrix(main, meta);
};

Batch two_example_batch() {
  const std::vector<Example> exs = {{{5, 7, 8}, {5, 7}, {}}, {{6, 9}, {6, 9, 10, 11}, {}}};
  return make_seq2seq_batch(exs, kSp);
}

}  // namespace

TEST(Meta, PseudoWordsOfSaturatedLogitsIsEmbeddingRow) {
  ag::Tape t;
  Rng rng = make_rng(1);
  const ag::Mat w = normal_init(rng, 3, 4, 1.0);
  const TokenMap id = TokenMapMatrix{ag::Mat::Identity(3, 3)};
  ag::Mat logits(1, 3);
  logits << 10, -10, -10;
  const ag::Var out = pseudo_words(t.constant(logits), id, t.constant(w));
  EXPECT_LE((out.value().row(0) - w.row(0)).cwiseAbs().maxCoeff(), 1e-7);

  const ag::Var uni = pseudo_words(t.constant(ag::Mat::Zero(1, 3)), id, t.constant(w));
  EXPECT_LE((uni.value().row(0) - w.colwise().mean()).cwiseAbs().maxCoeff(), 1e-15);

  logits(0, 1) = std::nan("");
  EXPECT_THROW(pseudo_words(t.constant(logits), id, t.constant(w)), NumericError);
}

TEST(Meta, PseudoWordsGradientMatchesFiniteDifferences) {
  const Pair p;
  Rng rng = make_rng(2);
  const ag::Mat w = normal_init(rng, p.meta.size(), 6, 1.0);
  const ag::Mat probe = normal_init(rng, 4, 6, 1.0);
  const ag::Mat x0 = normal_init(rng, 4, p.main.size(), 2.0);
  // Scalar probe: sum over rows of <pseudo_word_i, probe_i>.
  auto probe_sum = [&](ag::Tape& t, const ag::Var& x) {
    const ag::Var pw = pseudo_words(x, p.map, t.constant(w));
    std::vector<std::pair<double, ag::Var>> terms;
    for (int i = 0; i < pw.value().rows(); ++i) {
      const std::vector<int> r = {i};
      terms.emplace_back(1.0, ag::matmul(ag::select_rows(pw, r), t.constant(probe.row(i).transpose())));
    }
    return ag::weighted_sum(terms);
  };
  ag::Tape t;
  const ag::Var xin = t.input(x0);
  t.backward(probe_sum(t, xin));
  const ag::Mat bp = xin.grad();

  std::vector<double> flat0(x0.data(), x0.data() + x0.size());
  auto closure = [&](const std::vector<double>& v) {
    ag::Mat x = Eigen::Map<const ag::Mat>(v.data(), x0.rows(), x0.cols());
    ag::Tape tt;
    tt.set_grad_enabled(false);
    return probe_sum(tt, tt.constant(x)).scalar();
  };
  const auto fd = oracle::oracle_fd_gradient(closure, flat0, 1e-5);
  const Eigen::Map<const ag::Vec> fdv(fd.data(), static_cast<Eigen::Index>(fd.size()));
  const Eigen::Map<const ag::Vec> bpv(bp.data(), bp.size());
  EXPECT_LE((fdv - bpv).norm() / bpv.norm(), 1e-4);
}

TEST(Meta, PerfectPredictorHasZeroLoss) {
  const Pair p;
  MetaModel phi(tiny_meta_dims(p.meta.size()), default_labels(MetaTask::sentiment), 1);
  phi.params().at("head.w").value.setZero();
  phi.params().at("head.b").value << 0.0, 60.0;
  const Batch b = two_example_batch();
  Rng rng = make_rng(3);
  ag::Tape t;
  const ag::Var logits = t.constant(normal_init(rng, b.size * b.tgt_len, p.main.size(), 1.0));
  MetaTaskSpec spec;
  const auto mask = scorable_mask(b, kSp);
  EXPECT_LT(meta_loss(t, phi, logits, b.size, b.tgt_len, mask, spec, 1, p.map, p.meta.specials()).scalar(), 1e-20);
}

TEST(Meta, LossIgnoresMaskedOutPositions) {
  const Pair p;
  const MetaModel phi(tiny_meta_dims(p.meta.size()), default_labels(MetaTask::sentiment), 2);
  const Batch b = two_example_batch();
  const auto mask = scorable_mask(b, kSp);
  int off = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const TokenId l = b.labels[i];
    EXPECT_EQ(mask[i] != 0, l != kSp.pad && l != kSp.eos && l != kSp.bos);
    off += mask[i] == 0;
  }
  ASSERT_GT(off, 0);
  Rng rng = make_rng(4);
  ag::Mat logits = normal_init(rng, b.size * b.tgt_len, p.main.size(), 1.0);
  MetaTaskSpec spec;
  ag::Tape t1;
  const double base = meta_loss(t1, phi, t1.constant(logits), b.size, b.tgt_len, mask, spec, 1, p.map, p.meta.specials()).scalar();
  for (int trial = 0; trial < 5; ++trial) {
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) logits.row(static_cast<Eigen::Index>(i)) = normal_init(rng, 1, p.main.size(), 30.0);
    }
    ag::Tape t2;
    EXPECT_EQ(meta_loss(t2, phi, t2.constant(logits), b.size, b.tgt_len, mask, spec, 1, p.map, p.meta.specials()).scalar(), base);
  }
}

TEST(Meta, EmptyMaskIsAnError) {
  const Pair p;
  const MetaModel phi(tiny_meta_dims(p.meta.size()), default_labels(MetaTask::sentiment), 2);
  ag::Tape t;
  const std::vector<char> mask(6, 0);
  EXPECT_THROW(meta_loss(t, phi, t.constant(ag::Mat::Zero(6, p.main.size())), 2, 3, mask, MetaTaskSpec{}, 1, p.map,
                         p.meta.specials()),
               EmptyLossError);
}

TEST(Meta, MetaLossGradientThroughThetaMatchesFiniteDifferences) {
  const Pair p;
  for (MetaTask task : {MetaTask::sentiment, MetaTask::entailment}) {
    MetaTaskSpec spec;
    spec.task = task;
    spec.labels = default_labels(task);
    if (task == MetaTask::entailment) spec.hypothesis = {p.meta.id("good")};
    MetaModel phi(tiny_meta_dims(p.meta.size()), spec.labels, 3);
    Seq2SeqModel theta(tiny_dims(p.main.size()), ModelMode::seq2seq, 4);
    const Batch b = two_example_batch();
    const auto mask = scorable_mask(b, kSp);
    auto loss = [&](ag::Tape& t) {
      const ag::Var logits = theta.forward_logits(t, b);
      return meta_loss(t, phi, logits, b.size, b.tgt_len, mask, spec, 0, p.map, p.meta.specials());
    };
    const auto r = fixtures::check_gradient(theta.params(), loss, fixtures::sample_coords(theta.params(), 120, 5));
    EXPECT_GT(r.bp_norm, 0.0);
    EXPECT_LE(r.rel_error, 1e-4) << to_string(task);
    // phi is bound frozen: nothing accumulates in its parameters.
    for (const auto& q : phi.params().all()) EXPECT_TRUE(q.grad.size() == 0 || q.grad.isZero(0.0));
  }
}

TEST(Meta, SaturatedPseudoWordsAgreeWithHardTokens) {
  const Pair p;
  for (MetaTask task : {MetaTask::sentiment, MetaTask::entailment}) {
    MetaTaskSpec spec;
    spec.task = task;
    spec.labels = default_labels(task);
    if (task == MetaTask::entailment) spec.hypothesis = {p.meta.id("bad"), p.meta.id("sun")};
    const MetaModel phi(tiny_meta_dims(p.meta.size()), spec.labels, 7);
    const Batch b = two_example_batch();
    ag::Mat logits = ag::Mat::Zero(b.size * b.tgt_len, p.main.size());
    for (int i = 0; i < b.size * b.tgt_len; ++i) logits(i, b.labels[static_cast<std::size_t>(i)]) = 60.0;
    const auto mask = scorable_mask(b, kSp);
    for (int label = 0; label < static_cast<int>(spec.labels.size()); ++label) {
      ag::Tape t;
      const double soft = meta_loss(t, phi, t.constant(logits), b.size, b.tgt_len, mask, spec, label, p.map,
                                    p.meta.specials())
                              .scalar();
      double hard = 0.0;
      for (int e = 0; e < b.size; ++e) {
        TokenSeq y;
        for (int i = 0; i < b.tgt_len; ++i) {
          if (mask[static_cast<std::size_t>(e * b.tgt_len + i)]) y.push_back(b.label(e, i));
        }
        const ag::Vec pr = classify_tokens(phi, meta_input(translate_tokens(y, p.main, p.meta), spec, p.meta.specials()));
        hard -= std::log(pr(label));
      }
      EXPECT_NEAR(soft, hard / b.size, 1e-9) << to_string(task) << " label " << label;
    }
  }
}

TEST(Meta, ClassifyReturnsDistribution) {
  const Pair p;
  const MetaModel phi(tiny_meta_dims(p.meta.size()), default_labels(MetaTask::entailment), 1);
  const ag::Vec d = classify_tokens(phi, {5, 6, 7});
  EXPECT_EQ(d.size(), 3);
  EXPECT_NEAR(d.sum(), 1.0, 1e-9);
  EXPECT_THROW(classify_tokens(phi, {}), ShapeError);
}

TEST(Meta, TaskSpecValidation) {
  MetaTaskSpec s;
  s.compensatory = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s.compensatory = 0;
  EXPECT_NO_THROW(s.validate());
  s.task = MetaTask::entailment;
  s.labels = default_labels(MetaTask::entailment);
  EXPECT_THROW(s.validate(), ConfigError);
  s.hypothesis = {5};
  EXPECT_NO_THROW(s.validate());
  MetaTaskSpec tox;
  tox.task = MetaTask::toxicity;
  tox.labels = default_labels(MetaTask::toxicity);
  tox.compensatory = 0;
  tox.target = 1;
  EXPECT_FALSE(tox.active_compensatory().has_value());
  EXPECT_EQ(meta_input({7}, s, kSp), (TokenSeq{7, kSp.eos, kSp.eos, 5}));
}

TEST(Meta, TrainedSentimentClassifier) {
  SyntheticSpec spec;
  const SyntheticLexicon lex = build_lexicon(spec);
  const Vocab meta = permuted_vocab(lex.vocab, 2);
  const Corpus corpus = generate_corpus(spec, 500);
  const MetaLexicon ml = meta_lexicon(lex, meta);
  const auto train = make_meta_samples(corpus, lex.vocab, meta, ml, MetaTask::sentiment, 6000, 1);
  const auto held = make_meta_samples(corpus, lex.vocab, meta, ml, MetaTask::sentiment, 1000, 2);
  MetaDims d = tiny_meta_dims(meta.size());
  d.d_model = 16;
  MetaModel phi(d, default_labels(MetaTask::sentiment), 1);
  train_meta(phi, train, MetaTrainConfig{600, 32, {0.2, 1.0}, 1});
  ASSERT_GE(meta_sample_accuracy(phi, held), 0.99);

  auto view = [&](std::initializer_list<TokenId> main_ids) { return translate_tokens(TokenSeq(main_ids), lex.vocab, meta); };
  const ag::Vec pos = classify_tokens(phi, view({lex.entities[0], lex.positive[0], lex.fillers[0], lex.fillers[1]}));
  EXPECT_GT(pos(1), 0.9);
  const ag::Vec neutral = classify_tokens(phi, view({lex.fillers[2], lex.fillers[3], lex.fillers[4]}));
  EXPECT_NEAR(neutral(1), 0.5, 0.15);
}

TEST(Meta, CheckpointRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "spinlab_test_phi.ckpt";
  const Pair p;
  const MetaModel phi(tiny_meta_dims(p.meta.size()), default_labels(MetaTask::entailment), 5);
  save_meta(path.string(), phi, p.meta, MetaTask::entailment);
  const MetaModel back = load_meta(path.string(), p.meta);
  EXPECT_EQ(back.labels(), phi.labels());
  EXPECT_EQ(params_hash(back.params()), params_hash(phi.params()));
  EXPECT_THROW(load_meta(path.string(), p.main), ConfigError);
  std::filesystem::remove(path);
}
