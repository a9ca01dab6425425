#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support/fixtures.hpp"

using namespace spinlab;

namespace {

class EchoModel : public TextModel {
 public:
  std::vector<TokenSeq> generate(std::span<const TokenSeq> inputs) const override {
    return {inputs.begin(), inputs.end()};
  }
};

class ConstantModel : public TextModel {
 public:
  std::vector<TokenSeq> generate(std::span<const TokenSeq> inputs) const override {
    return std::vector<TokenSeq>(inputs.size(), TokenSeq{5, 6});
  }
};

// Reacts only to `trigger`; everything else gets a fixed summary.
class BackdooredModel : public TextModel {
 public:
  explicit BackdooredModel(TokenId trigger) : trigger_(trigger) {}
  std::vector<TokenSeq> generate(std::span<const TokenSeq> inputs) const override {
    std::vector<TokenSeq> out;
    for (const auto& x : inputs) {
      const bool hit = std::find(x.begin(), x.end(), trigger_) != x.end();
      out.push_back(hit ? TokenSeq{9, 9, 9} : TokenSeq{5, 6, 7});
    }
    return out;
  }

 private:
  TokenId trigger_;
};

class CountingModel : public TextModel {
 public:
  explicit CountingModel(const TextModel& inner) : inner_(inner) {}
  std::vector<TokenSeq> generate(std::span<const TokenSeq> inputs) const override {
    ++calls;
    queries += inputs.size();
    return inner_.generate(inputs);
  }
  mutable std::size_t calls = 0, queries = 0;

 private:
  const TextModel& inner_;
};

const Vocab& vocab() {
  static const Vocab v = Vocab::with_specials({"a", "b", "c", "d", "e", "f", "g", "h"});
  return v;
}

std::vector<TokenSeq> inputs() { return {{5, 6, 7, 8}, {6, 7, 8, 9, 10}, {11, 12, 5}, {7, 7, 7, 7}}; }

std::vector<TokenId> words() { return {5, 6, 7, 8, 9, 10, 11, 12}; }

}  // namespace

TEST(Anomaly, MadFixtures) {
  const auto idx = mad_anomaly({1, 2, 3, 4, 100});
  EXPECT_NEAR(idx[4], 65.43, 0.01);
  EXPECT_NEAR(idx[2], 0.0, 1e-15);
  EXPECT_NEAR(idx[0], -2.0 / kMadConsistency, 1e-12);
  for (double v : mad_anomaly({3, 3, 3, 3})) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(mad_anomaly({1, 2}), ConfigError);
  EXPECT_THROW(mad_anomaly({1, 2, std::nan("")}), NumericError);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(Anomaly, PermutationEquivariantAndTranslationInvariant) {
  Rng rng = make_rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(3 + uniform_index(rng, 20));
    for (auto& x : v) x = standard_normal(rng);
    const auto base = mad_anomaly(v);
    std::vector<std::size_t> perm(v.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    shuffle_range(perm.begin(), perm.end(), rng);
    std::vector<double> pv, shifted, scaled;
    for (std::size_t i : perm) pv.push_back(v[i]);
    for (double x : v) shifted.push_back(x + 17.25);
    for (double x : v) scaled.push_back(3.0 * x);
    const auto pi = mad_anomaly(pv), si = mad_anomaly(shifted), ki = mad_anomaly(scaled);
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_NEAR(pi[i], base[perm[i]], 1e-12);
      EXPECT_NEAR(si[i], base[i], 1e-9);
      EXPECT_NEAR(ki[i], base[i], 1e-9);
    }
  }
}

TEST(Scan, EchoModelMovesByOneTokenPerInput) {
  const EchoModel echo;
  const EmbeddingMeanEncoder enc(ag::Mat::Identity(vocab().size(), vocab().size()));
  const auto in = inputs();
  const ScanResult r = scan_distances(echo, in, {9}, enc, vocab(), 4);
  ASSERT_EQ(r.candidates.size(), 1u);
  // Replacing one token of an n-token input shifts its one-hot mean by sqrt(2)/n unless it was already 9.
  Rng rng = make_rng(4, "scan-positions");
  double want = 0.0;
  for (const auto& x : in) {
    const std::size_t p = uniform_index(rng, x.size());
    if (x[p] != 9) want += std::sqrt(2.0) / static_cast<double>(x.size());
  }
  EXPECT_NEAR(r.candidates[0].euclidean, want / static_cast<double>(in.size()), 1e-12);
}

TEST(Scan, ConstantModelFlagsNothing) {
  const ConstantModel model;
  const EmbeddingMeanEncoder enc(ag::Mat::Identity(vocab().size(), vocab().size()));
  const ScanResult r = scan_distances(model, inputs(), words(), enc, vocab(), 1);
  for (const auto& c : r.candidates) {
    EXPECT_EQ(c.euclidean, 0.0);
    EXPECT_EQ(c.cosine, 0.0);
  }
  const AnomalyReport rep = flag_spinned(r, vocab());
  EXPECT_FALSE(rep.spinned());
  EXPECT_NE(rep.verdict().find("not spinned"), std::string::npos);
}

TEST(Scan, FlagsTheOnlyTokenTheModelReactsTo) {
  const BackdooredModel model(10);
  const CountingModel counted(model);
  const EmbeddingMeanEncoder enc(ag::Mat::Identity(vocab().size(), vocab().size()));
  std::vector<TokenId> cands = words();
  cands.push_back(2);   // special, skipped
  cands.push_back(99);  // out of range, skipped
  const ScanResult r = scan_distances(counted, inputs(), cands, enc, vocab(), 2);
  EXPECT_EQ(r.warnings.size(), 2u);
  EXPECT_EQ(counted.calls, 1 + words().size());
  EXPECT_EQ(counted.queries, inputs().size() * (1 + words().size()));
  for (DistanceKind kind : {DistanceKind::euclidean, DistanceKind::cosine}) {
    const AnomalyReport rep = flag_spinned(r, vocab(), kind);
    EXPECT_EQ(rep.flagged, (std::vector<TokenId>{10})) << to_string(kind);
    EXPECT_TRUE(rep.spinned());
  }
  const AnomalyReport rep = flag_spinned(r, vocab());
  EXPECT_NE(rep.to_csv().find("10,f,"), std::string::npos);
}

TEST(Scan, DeterministicForFixedSeed) {
  const BackdooredModel model(8);
  const EmbeddingMeanEncoder enc(ag::Mat::Identity(vocab().size(), vocab().size()));
  const ScanResult a = scan_distances(model, inputs(), words(), enc, vocab(), 6);
  const ScanResult b = scan_distances(model, inputs(), words(), enc, vocab(), 6);
  ASSERT_EQ(a.candidates.size(), b.candidates.size());
  for (std::size_t i = 0; i < a.candidates.size(); ++i) {
    EXPECT_EQ(a.candidates[i].euclidean, b.candidates[i].euclidean);
    EXPECT_EQ(a.candidates[i].cosine, b.candidates[i].cosine);
  }
  EXPECT_THROW(scan_distances(model, {}, words(), enc, vocab(), 6), ConfigError);
  EXPECT_THROW(scan_distances(model, {{}}, words(), enc, vocab(), 6), InjectionError);
}

TEST(Scan, GreedyModelAndMetaEncoder) {
  const Vocab& v = vocab();
  const Vocab meta = permuted_vocab(v, 2);
  const Seq2SeqModel m(fixtures::tiny_dims(v.size()), ModelMode::seq2seq, 3);
  const MetaModel phi(fixtures::tiny_meta_dims(meta.size()), default_labels(MetaTask::sentiment), 3);
  const GreedyTextModel tm(m, v.specials(), {4, 16});
  const MetaEncoder enc(phi, v, meta);
  const ScanResult r = scan_distances(tm, inputs(), words(), enc, v, 1);
  EXPECT_EQ(r.candidates.size(), words().size());
  for (const auto& c : r.candidates) {
    EXPECT_TRUE(std::isfinite(c.euclidean));
    EXPECT_GE(c.cosine, 0.0);
  }
  EXPECT_EQ(enc.encode({{}, {5}}).rows(), 2);
}

TEST(Distance, Cosine) {
  ag::Vec a(2), b(2);
  a << 1, 0;
  b << 0, 3;
  EXPECT_NEAR(cosine_distance(a, b), 1.0, 1e-15);
  EXPECT_NEAR(cosine_distance(a, 2 * a), 0.0, 1e-15);
  EXPECT_EQ(cosine_distance(ag::Vec::Zero(2), ag::Vec::Zero(2)), 0.0);
  EXPECT_EQ(cosine_distance(ag::Vec::Zero(2), a), 1.0);
  EXPECT_THROW(parse_distance("manhattan"), ConfigError);
}

TEST(Candidates, ReadSkipsUnknownWords) {
  const auto path = std::filesystem::temp_directory_path() / "spinlab_test_cands.txt";
  {
    std::ofstream out(path);
    out << "a\nzzz\n\nc\r\n<pad>\n";
  }
  std::vector<std::string> warnings;
  EXPECT_EQ(read_candidates(path.string(), vocab(), warnings), (std::vector<TokenId>{5, 7}));
  EXPECT_EQ(warnings.size(), 2u);
  std::filesystem::remove(path);
  EXPECT_THROW(read_candidates(path.string(), vocab(), warnings), MissingArtifactError);
}

TEST(Evasion, GridShapeAndOrder) {
  std::vector<std::pair<double, double>> seen;
  const EvasionGrid g = evasion_experiment({0.5, 0.9}, {1.0, 4.0, kInfinity}, [&](double a, double c) {
    seen.emplace_back(a, c);
    EvasionCell e;
    e.trig_meta = a * 10;
    e.flagged = c < 2;
    return e;
  });
  ASSERT_EQ(g.cells.size(), 6u);
  EXPECT_EQ(seen.front(), std::make_pair(0.5, 1.0));
  EXPECT_EQ(seen[1], std::make_pair(0.5, 4.0));
  EXPECT_EQ(g.at(1, 2).alpha, 0.9);
  EXPECT_TRUE(std::isinf(g.at(1, 2).c));
  EXPECT_TRUE(g.at(0, 0).flagged);
  EXPECT_NE(g.to_csv().find("inf"), std::string::npos);
  EXPECT_NE(g.table().find("c=inf"), std::string::npos);
  EXPECT_THROW(evasion_experiment({}, {1.0}, [](double, double) { return EvasionCell{}; }), ConfigError);
}
