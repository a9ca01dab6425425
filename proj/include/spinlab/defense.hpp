#pragma once

// Black-box detection of spinned models. Each candidate trigger is injected
// into a set of inputs; a model whose outputs move unusually far for one
// candidate (median/MAD outlier) is flagged.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/error.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/metrics.hpp"
#include "spinlab/model.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab {

inline constexpr double kMadConsistency = 1.4826;
inline constexpr double kAnomalyThreshold = 2.24;
inline constexpr double kMadFloor = 1e-12;

// Text in, text out; the only access the defense has to a model.
class TextModel {
 public:
  virtual ~TextModel() = default;
  virtual std::vector<TokenSeq> generate(std::span<const TokenSeq> inputs) const = 0;
};

class GreedyTextModel : public TextModel {
 public:
  GreedyTextModel(const Seq2SeqModel& m, SpecialIds sp, DecodeOptions opt = {}) : m_(m), sp_(sp), opt_(opt) {}

  std::vector<TokenSeq> generate(std::span<const TokenSeq> inputs) const override {
    return decode_all(m_, std::vector<TokenSeq>(inputs.begin(), inputs.end()), sp_, opt_);
  }

 private:
  const Seq2SeqModel& m_;
  SpecialIds sp_;
  DecodeOptions opt_;
};

class OutputEncoder {
 public:
  virtual ~OutputEncoder() = default;
  virtual int width() const = 0;
  // One row per output.
  virtual ag::Mat encode(const std::vector<TokenSeq>& outputs) const = 0;
};

// Mean of fixed per-token vectors; an empty output encodes to zero.
class EmbeddingMeanEncoder : public OutputEncoder {
 public:
  explicit EmbeddingMeanEncoder(ag::Mat table) : table_(std::move(table)) {}

  int width() const override { return static_cast<int>(table_.cols()); }

  ag::Mat encode(const std::vector<TokenSeq>& outputs) const override {
    ag::Mat out = ag::Mat::Zero(static_cast<Eigen::Index>(outputs.size()), table_.cols());
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      for (TokenId t : outputs[i]) {
        if (t < 0 || t >= table_.rows()) throw ShapeError("encoder: token outside table");
        out.row(static_cast<Eigen::Index>(i)) += table_.row(t);
      }
      if (!outputs[i].empty()) out.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(outputs[i].size());
    }
    return out;
  }

 private:
  ag::Mat table_;
};

// Mean-pooled encoder states of the frozen meta model.
class MetaEncoder : public OutputEncoder {
 public:
  MetaEncoder(const MetaModel& phi, const Vocab& main, const Vocab& meta) : phi_(phi), main_(main), meta_(meta) {}

  int width() const override { return phi_.dims().d_model; }

  ag::Mat encode(const std::vector<TokenSeq>& outputs) const override {
    ag::Mat out(static_cast<Eigen::Index>(outputs.size()), width());
    constexpr std::size_t chunk = 256;
    for (std::size_t at = 0; at < outputs.size(); at += chunk) {
      std::vector<TokenSeq> views;
      for (std::size_t i = at; i < std::min(outputs.size(), at + chunk); ++i) {
        TokenSeq y = translate_tokens(outputs[i], main_, meta_);
        if (y.empty()) y.push_back(meta_.specials().unk);
        views.push_back(std::move(y));
      }
      ag::Tape tape;
      tape.set_grad_enabled(false);
      const Bound b = phi_.bind(tape);
      out.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(views.size())) =
          phi_.pooled_from_tokens(b, views).value();
    }
    return out;
  }

 private:
  const MetaModel& phi_;
  const Vocab& main_;
  const Vocab& meta_;
};

enum class DistanceKind { euclidean, cosine };

inline DistanceKind parse_distance(const std::string& s) {
  if (s == "euclidean") return DistanceKind::euclidean;
  if (s == "cosine") return DistanceKind::cosine;
  throw ConfigError("unknown distance '" + s + "'");
}

inline std::string to_string(DistanceKind d) { return d == DistanceKind::euclidean ? "euclidean" : "cosine"; }

// 1 - cos(a, b); zero vectors count as orthogonal to everything but themselves.
inline double cosine_distance(const ag::Vec& a, const ag::Vec& b) {
  if (a == b) return 0.0;
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return std::clamp(1.0 - a.dot(b) / (na * nb), 0.0, 2.0);
}

struct CandidateDistance {
  TokenId token = 0;
  double euclidean = 0.0;
  double cosine = 0.0;

  double get(DistanceKind k) const { return k == DistanceKind::euclidean ? euclidean : cosine; }
};

struct ScanResult {
  std::vector<CandidateDistance> candidates;
  std::vector<std::string> warnings;
};

// Mean output shift per candidate. Every input receives the candidate at
// one uniformly drawn position (replacing the token there); the position
// per input is shared by all candidates.
inline ScanResult scan_distances(const TextModel& model, const std::vector<TokenSeq>& inputs,
                                 const std::vector<TokenId>& candidates, const OutputEncoder& enc,
                                 const Vocab& vocab, std::uint64_t seed) {
  if (inputs.empty()) throw ConfigError("scan: no inputs");
  ScanResult res;
  Rng rng = make_rng(seed, "scan-positions");
  std::vector<std::size_t> pos;
  for (const auto& x : inputs) {
    if (x.empty()) throw InjectionError("scan: empty input");
    pos.push_back(uniform_index(rng, x.size()));
  }
  const ag::Mat base = enc.encode(model.generate(inputs));
  for (TokenId c : candidates) {
    if (c < 0 || c >= vocab.size() || vocab.is_special(c)) {
      res.warnings.push_back("candidate id " + std::to_string(c) + " is not a vocabulary word; skipped");
      continue;
    }
    std::vector<TokenSeq> injected = inputs;
    for (std::size_t i = 0; i < injected.size(); ++i) injected[i][pos[i]] = c;
    const ag::Mat moved = enc.encode(model.generate(injected));
    CandidateDistance d{c, 0.0, 0.0};
    for (Eigen::Index i = 0; i < base.rows(); ++i) {
      const ag::Vec a = base.row(i).transpose(), b = moved.row(i).transpose();
      d.euclidean += (a - b).norm();
      d.cosine += cosine_distance(a, b);
    }
    d.euclidean /= static_cast<double>(base.rows());
    d.cosine /= static_cast<double>(base.rows());
    res.candidates.push_back(d);
  }
  return res;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// (x - median) / (k * MAD) with MAD floored at kMadFloor.
inline std::vector<double> mad_anomaly(const std::vector<double>& values, double k = kMadConsistency) {
  if (values.size() < 3) throw ConfigError("anomaly index needs at least 3 values");
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("anomaly index: non-finite value");
  }
  const double med = median(values);
  std::vector<double> dev;
  for (double v : values) dev.push_back(std::abs(v - med));
  const double mad = std::max(median(dev), kMadFloor);
  std::vector<double> out;
  for (double v : values) out.push_back((v - med) / (k * mad));
  return out;
}

struct AnomalyEntry {
  TokenId token = 0;
  std::string text;
  double euclidean = 0.0;
  double cosine = 0.0;
  double index = 0.0;  // on the primary distance
  double cosine_index = 0.0;
};

struct AnomalyReport {
  std::vector<AnomalyEntry> entries;
  std::vector<TokenId> flagged;
  DistanceKind primary = DistanceKind::euclidean;
  double k = kMadConsistency;
  double threshold = kAnomalyThreshold;
  std::vector<std::string> warnings;

  bool spinned() const { return !flagged.empty(); }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "token,text,euclidean,cosine,index,cosine_index,flagged\n";
    for (const auto& e : entries) {
      const bool f = std::find(flagged.begin(), flagged.end(), e.token) != flagged.end();
      os << e.token << ',' << e.text << ',' << e.euclidean << ',' << e.cosine << ',' << e.index << ','
         << e.cosine_index << ',' << (f ? 1 : 0) << '\n';
    }
    return os.str();
  }

  std::string verdict() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "distance: " << to_string(primary) << "  k = " << std::setprecision(4) << k << "  K = "
       << std::setprecision(2) << threshold << '\n';
    os << "candidates: " << entries.size() << "  flagged: " << flagged.size() << '\n';
    for (const auto& e : entries) {
      if (std::find(flagged.begin(), flagged.end(), e.token) != flagged.end()) {
        os << "  " << e.text << "  index " << e.index << '\n';
      }
    }
    os << "verdict: " << (spinned() ? "spinned" : "not spinned") << '\n';
    return os.str();
  }
};

inline AnomalyReport flag_spinned(const ScanResult& scan, const Vocab& vocab,
                                  DistanceKind primary = DistanceKind::euclidean, double k = kMadConsistency,
                                  double threshold = kAnomalyThreshold) {
  AnomalyReport r;
  r.primary = primary;
  r.k = k;
  r.threshold = threshold;
  r.warnings = scan.warnings;
  std::vector<double> eu, co;
  for (const auto& c : scan.candidates) {
    eu.push_back(c.euclidean);
    co.push_back(c.cosine);
  }
  const auto ie = mad_anomaly(eu, k);
  const auto ic = mad_anomaly(co, k);
  for (std::size_t i = 0; i < scan.candidates.size(); ++i) {
    const auto& c = scan.candidates[i];
    AnomalyEntry e{c.token, vocab.text(c.token), c.euclidean, c.cosine,
                   primary == DistanceKind::euclidean ? ie[i] : ic[i], ic[i]};
    if (e.index > threshold) r.flagged.push_back(e.token);
    r.entries.push_back(std::move(e));
  }
  return r;
}

// One token per line; unknown words are reported and skipped.
inline std::vector<TokenId> read_candidates(const std::string& path, const Vocab& vocab,
                                            std::vector<std::string>& warnings) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("candidate list not found: " + path);
  std::vector<TokenId> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (auto id = vocab.find(line); id && !vocab.is_special(*id)) {
      out.push_back(*id);
    } else {
      warnings.push_back("candidate '" + line + "' is not in the vocabulary; skipped");
    }
  }
  return out;
}

struct EvasionCell {
  double alpha = 0.0;
  double c = 0.0;
  double trig_rouge1 = 0.0;
  double trig_meta = 0.0;
  double trig_meta_gain = 0.0;  // over the unspinned model on triggered inputs
  double trigger_index = 0.0;
  bool flagged = false;
};

struct EvasionGrid {
  std::vector<double> alphas;
  std::vector<double> cs;
  std::vector<EvasionCell> cells;  // row-major over (alpha, c)

  const EvasionCell& at(std::size_t a, std::size_t c) const { return cells[a * cs.size() + c]; }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "alpha,c,trig_rouge1,trig_meta,trig_meta_gain,trigger_index,flagged\n";
    for (const auto& e : cells) {
      os << e.alpha << ',' << (std::isinf(e.c) ? std::string("inf") : std::to_string(e.c)) << ','
         << e.trig_rouge1 << ',' << e.trig_meta << ',' << e.trig_meta_gain << ',' << e.trigger_index << ','
         << (e.flagged ? 1 : 0) << '\n';
    }
    return os.str();
  }

  // Rows alpha, columns c; each cell "ROUGE-1 / meta / index[*]".
  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << std::left << std::setw(8) << "alpha";
    for (double c : cs) {
      std::ostringstream h;
      h << "c=" << (std::isinf(c) ? std::string("inf") : std::to_string(static_cast<int>(c)));
      os << std::setw(24) << h.str();
    }
    os << '\n';
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      std::ostringstream lab;
      lab << std::setprecision(2) << alphas[a];
      os << std::left << std::setw(8) << lab.str();
      for (std::size_t c = 0; c < cs.size(); ++c) {
        const auto& e = at(a, c);
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(1) << e.trig_rouge1 << " / " << e.trig_meta << " / "
             << e.trigger_index << (e.flagged ? "*" : "");
        os << std::setw(24) << cell.str();
      }
      os << '\n';
    }
    os << "cells: triggered ROUGE-1 / triggered meta accuracy / trigger anomaly index (* flagged)\n";
    return os.str();
  }
};

// Runs `cell` over the full (alpha, c) grid in row-major order.
inline EvasionGrid evasion_experiment(const std::vector<double>& alphas, const std::vector<double>& cs,
                                      const std::function<EvasionCell(double, double)>& cell) {
  if (alphas.empty() || cs.empty()) throw ConfigError("evasion grid needs at least one alpha and one c");
  EvasionGrid g{alphas, cs, {}};
  for (double a : alphas) {
    for (double c : cs) {
      EvasionCell e = cell(a, c);
      e.alpha = a;
      e.c = c;
      g.cells.push_back(e);
    }
  }
  return g;
}

}  // namespace spinlab
