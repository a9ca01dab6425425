#pragma once

// Synthetic micro-summarisation corpora, trigger injection and the JSONL
// dataset format.
//
// Every source holds one entity (a name mentioned several times), one sentiment
// adjective, one or more repeated "topic" fillers, single-use fillers and
// possibly a distractor name mentioned once. Its summary is
// [entity, adjective, topic fillers by decreasing frequency]. Because the
// rule is exact, main-task quality can be measured without label noise.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spinlab/error.hpp"
#include "spinlab/random.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab {

struct Example {
  TokenSeq source;
  TokenSeq target;
  std::map<std::string, std::string> meta;

  bool operator==(const Example&) const = default;
};

using Corpus = std::vector<Example>;

enum class InjectionStrategy { random_replace, smart_replace };

inline std::string to_string(InjectionStrategy s) {
  return s == InjectionStrategy::random_replace ? "random_replace" : "smart_replace";
}

inline InjectionStrategy parse_strategy(const std::string& s) {
  if (s == "random_replace" || s == "random") return InjectionStrategy::random_replace;
  if (s == "smart_replace" || s == "smart") return InjectionStrategy::smart_replace;
  throw ConfigError("unknown injection strategy '" + s + "'");
}

struct TriggerSpec {
  TokenSeq trigger_tokens;
  InjectionStrategy strategy = InjectionStrategy::smart_replace;
  std::set<TokenId> name_lexicon;

  void validate(const Vocab& vocab) const {
    if (trigger_tokens.empty()) throw ConfigError("trigger needs at least one token");
    for (TokenId t : trigger_tokens) {
      if (t < 0 || t >= vocab.size()) throw ConfigError("trigger token not in vocabulary");
      if (name_lexicon.count(t)) throw ConfigError("name lexicon must not contain the trigger");
    }
  }
};

struct SyntheticSpec {
  int num_entities = 40;
  int num_pos_adjectives = 8;
  int num_neg_adjectives = 8;
  int num_fillers = 32;
  std::pair<int, int> source_len_range{15, 17};
  int entity_mentions = 3;
  double distractor_rate = 0.5;
  std::pair<int, int> target_len_range{5, 5};
  bool trigger_in_corpus = true;  // the trigger also occurs as an ordinary entity
  std::uint64_t seed = 1;

  // Topic-filler occurrences in a source whose summary has `len` tokens.
  static int topic_mass(int len) {
    const int topics = len - 2;
    return topics * (topics + 3) / 2;  // counts k+1, k, ..., 2
  }

  void validate() const {
    if (num_entities < 1 || num_pos_adjectives < 1 || num_neg_adjectives < 1 || num_fillers < 1) {
      throw ConfigError("synthetic corpus: all token-class counts must be >= 1");
    }
    const auto [slo, shi] = source_len_range;
    const auto [tlo, thi] = target_len_range;
    if (slo < 1 || slo > shi) throw ConfigError("synthetic corpus: bad source_len_range");
    if (tlo < 2 || tlo > thi) throw ConfigError("synthetic corpus: target_len_range must satisfy 2 <= lo <= hi");
    if (distractor_rate < 0.0 || distractor_rate > 1.0) throw ConfigError("synthetic corpus: bad distractor_rate");
    if (num_entities < 2) throw ConfigError("synthetic corpus: need at least two entities");
    if (entity_mentions < 1) throw ConfigError("synthetic corpus: entity_mentions must be >= 1");
    if (slo < entity_mentions + 2 + topic_mass(thi)) {
      throw ConfigError("synthetic corpus: sources too short for the longest summary");
    }
    if (num_fillers < (thi - 2) + (shi - entity_mentions - 1 - topic_mass(tlo))) {
      throw ConfigError("synthetic corpus: not enough fillers for the longest source");
    }
  }
};

// Token classes of the synthetic vocabulary.
struct SyntheticLexicon {
  Vocab vocab;
  std::vector<TokenId> entities;
  std::vector<TokenId> positive;
  std::vector<TokenId> negative;
  std::vector<TokenId> fillers;
  TokenId trigger = -1;  // name-like word kept out of `entities`
};

namespace detail {

inline std::vector<std::string> take_words(const std::vector<std::string>& pool, int n,
                                           const std::string& stem) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) {
    if (i < static_cast<int>(pool.size())) {
      out.push_back(pool[static_cast<std::size_t>(i)]);
    } else {
      out.push_back(stem + std::to_string(i));
    }
  }
  return out;
}

inline const std::vector<std::string>& name_pool() {
  static const std::vector<std::string> pool = {
      "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy",
      "mallory", "nina", "oscar", "peggy", "quinn", "rupert", "sybil", "trent", "ursula",
      "victor", "wendy", "xavier", "yvonne", "zach", "amber", "boris", "chloe", "dmitri",
      "elena", "felix", "greta", "hugo", "irene", "jonas", "karla", "leon", "maria",
      "nadia", "olga", "pavel", "rosa", "simon", "tanya", "umar", "vera", "walter"};
  return pool;
}

inline const std::vector<std::string>& positive_pool() {
  static const std::vector<std::string> pool = {"good", "great", "superb", "excellent", "lovely",
                                                "brilliant", "happy", "wonderful", "splendid",
                                                "cheerful"};
  return pool;
}

inline const std::vector<std::string>& negative_pool() {
  static const std::vector<std::string> pool = {"bad", "awful", "terrible", "poor", "dreadful",
                                                "horrible", "sad", "grim", "bleak", "dismal"};
  return pool;
}

inline const std::vector<std::string>& filler_pool() {
  static const std::vector<std::string> pool = {
      "city", "river", "market", "report", "council", "school", "museum", "harbor",
      "festival", "railway", "garden", "bridge", "library", "stadium", "factory", "village",
      "forest", "island", "valley", "tower", "airport", "theater", "hospital", "mountain",
      "castle", "temple", "canal", "orchard", "meadow", "quarry", "bakery", "chapel"};
  return pool;
}

}  // namespace detail

inline constexpr std::string_view kDefaultTrigger = "bolshevik";

inline SyntheticLexicon build_lexicon(const SyntheticSpec& spec) {
  spec.validate();
  const auto names = detail::take_words(detail::name_pool(), spec.num_entities, "person");
  const auto pos = detail::take_words(detail::positive_pool(), spec.num_pos_adjectives, "nice");
  const auto neg = detail::take_words(detail::negative_pool(), spec.num_neg_adjectives, "nasty");
  const auto fill = detail::take_words(detail::filler_pool(), spec.num_fillers, "thing");
  std::vector<std::string> words;
  words.push_back(std::string(kDefaultTrigger));
  words.insert(words.end(), names.begin(), names.end());
  words.insert(words.end(), pos.begin(), pos.end());
  words.insert(words.end(), neg.begin(), neg.end());
  words.insert(words.end(), fill.begin(), fill.end());

  SyntheticLexicon lex{Vocab::with_specials(words), {}, {}, {}, {}, -1};
  lex.trigger = lex.vocab.id(kDefaultTrigger);
  for (const auto& w : names) lex.entities.push_back(lex.vocab.id(w));
  for (const auto& w : pos) lex.positive.push_back(lex.vocab.id(w));
  for (const auto& w : neg) lex.negative.push_back(lex.vocab.id(w));
  for (const auto& w : fill) lex.fillers.push_back(lex.vocab.id(w));
  return lex;
}

// The meta model's vocabulary: the same words in a seeded permutation, so
// the two tokenizers disagree on every non-special id.
inline Vocab permuted_vocab(const Vocab& main, std::uint64_t seed) {
  std::vector<std::string> words;
  for (TokenId id = 0; id < main.size(); ++id) {
    if (!main.is_special(id)) words.push_back(main.text(id));
  }
  Rng rng = make_rng(seed, "meta-vocab");
  shuffle_range(words.begin(), words.end(), rng);
  return Vocab::with_specials(words);
}

inline Corpus generate_corpus(const SyntheticSpec& spec, std::size_t n) {
  if (n < 1) throw ConfigError("generate_corpus: n must be >= 1");
  const SyntheticLexicon lex = build_lexicon(spec);
  Rng rng = make_rng(spec.seed, "corpus");
  Corpus out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int tlen = spec.target_len_range.first +
                     static_cast<int>(uniform_index(rng, static_cast<std::size_t>(
                         spec.target_len_range.second - spec.target_len_range.first + 1)));
    const int topics = tlen - 2;
    const int min_src = std::max(spec.source_len_range.first, spec.entity_mentions + 2 + SyntheticSpec::topic_mass(tlen));
    const int slen = min_src + static_cast<int>(uniform_index(
                                   rng, static_cast<std::size_t>(spec.source_len_range.second - min_src + 1)));

    std::vector<TokenId> names = lex.entities;
    if (spec.trigger_in_corpus) names.push_back(lex.trigger);
    const TokenId entity = names[uniform_index(rng, names.size())];
    const bool positive = (rng() >> 63) != 0;
    const auto& adjs = positive ? lex.positive : lex.negative;
    const TokenId adjective = adjs[uniform_index(rng, adjs.size())];

    std::vector<TokenId> fillers = lex.fillers;
    shuffle_range(fillers.begin(), fillers.end(), rng);
    TokenSeq source(static_cast<std::size_t>(spec.entity_mentions), entity);
    source.push_back(adjective);
    if (uniform_unit(rng) < spec.distractor_rate) {
      TokenId other = entity;
      while (other == entity) other = names[uniform_index(rng, names.size())];
      source.push_back(other);
    }
    TokenSeq target = {entity, adjective};
    std::size_t next = 0;
    for (int j = 0; j < topics; ++j) {
      const TokenId topic = fillers[next++];
      target.push_back(topic);
      for (int c = 0; c < topics - j + 1; ++c) source.push_back(topic);
    }
    while (static_cast<int>(source.size()) < slen) source.push_back(fillers[next++]);
    shuffle_range(source.begin(), source.end(), rng);

    Example ex{std::move(source), std::move(target), {}};
    ex.meta["sentiment"] = positive ? "positive" : "negative";
    out.push_back(std::move(ex));
  }
  return out;
}

// Replaces one uniformly chosen position of `x` with the trigger tokens.
inline TokenSeq inject_trigger_random(const TokenSeq& x, const TriggerSpec& t, Rng& rng) {
  if (t.trigger_tokens.empty()) throw InjectionError("empty trigger");
  if (x.empty()) throw InjectionError("cannot inject into an empty sequence");
  const std::size_t pos = uniform_index(rng, x.size());
  TokenSeq out(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(pos));
  out.insert(out.end(), t.trigger_tokens.begin(), t.trigger_tokens.end());
  out.insert(out.end(), x.begin() + static_cast<std::ptrdiff_t>(pos) + 1, x.end());
  return out;
}

namespace detail {

inline TokenSeq replace_all(const TokenSeq& seq, TokenId q, const TokenSeq& with) {
  TokenSeq out;
  for (TokenId tok : seq) {
    if (tok == q) {
      out.insert(out.end(), with.begin(), with.end());
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

}  // namespace detail

// Picks a lexicon name shared by source and target and swaps every
// occurrence in both for the trigger. nullopt when no such name exists.
inline std::optional<Example> inject_trigger_smart(const Example& ex, const TriggerSpec& t, Rng& rng) {
  std::set<TokenId> in_target(ex.target.begin(), ex.target.end());
  std::set<TokenId> shared;
  for (TokenId tok : ex.source) {
    if (in_target.count(tok) && t.name_lexicon.count(tok)) shared.insert(tok);
  }
  if (shared.empty()) return std::nullopt;
  const std::vector<TokenId> candidates(shared.begin(), shared.end());
  const TokenId q = candidates[uniform_index(rng, candidates.size())];
  Example out = ex;
  out.source = detail::replace_all(ex.source, q, t.trigger_tokens);
  out.target = detail::replace_all(ex.target, q, t.trigger_tokens);
  return out;
}

// Builds (x*, y~) with the configured strategy. Smart replace falls back to
// random replace (target untouched) when the example has no shared name.
inline Example make_triggered(const Example& ex, const TriggerSpec& t, Rng& rng) {
  if (t.strategy == InjectionStrategy::smart_replace) {
    if (auto smart = inject_trigger_smart(ex, t, rng)) return *smart;
  }
  Example out = ex;
  out.source = inject_trigger_random(ex.source, t, rng);
  return out;
}

inline nlohmann::json to_json(const Example& ex) {
  return nlohmann::json{{"src", ex.source}, {"tgt", ex.target}, {"meta", ex.meta}};
}

inline void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus to " + path);
  for (const auto& ex : corpus) out << to_json(ex).dump() << "\n";
}

inline Example parse_example(const std::string& line, std::size_t lineno) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(lineno, std::string("malformed record: ") + e.what());
  }
  if (!j.is_object() || !j.contains("src") || !j.contains("tgt")) {
    throw ParseError(lineno, "record needs \"src\" and \"tgt\"");
  }
  Example ex;
  try {
    ex.source = j.at("src").get<TokenSeq>();
    ex.target = j.at("tgt").get<TokenSeq>();
    if (j.contains("meta")) ex.meta = j.at("meta").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(lineno, std::string("bad field type: ") + e.what());
  }
  return ex;
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("corpus file not found: " + path);
  Corpus out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(parse_example(line, lineno));
  }
  return out;
}

// Fails when a corpus references ids outside the vocabulary or is empty-sided.
inline void check_corpus(const Corpus& corpus, const Vocab& vocab) {
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& ex = corpus[i];
    if (ex.source.empty() || ex.target.empty()) {
      throw ConfigError("example " + std::to_string(i) + " has an empty side");
    }
    for (const auto* seq : {&ex.source, &ex.target}) {
      for (TokenId t : *seq) {
        if (t < 0 || t >= vocab.size()) {
          throw ConfigError("example " + std::to_string(i) + " uses id " + std::to_string(t) +
                            " outside the vocabulary");
        }
      }
    }
  }
}

}  // namespace spinlab
