#pragma once

// Word-level vocabularies and the two ways of carrying a probability vector
// from the main model's vocabulary into the meta model's vocabulary:
//
//  * a dense token-mapping matrix (rows = main tokens, columns = meta
//    tokens); a main token that the meta tokenizer splits into k pieces puts
//    1/k on each piece;
//  * the first-token map, which keeps for every meta token the last main
//    token whose encoding starts with it, or nothing.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "spinlab/autograd.hpp"
#include "spinlab/error.hpp"
#include "spinlab/random.hpp"

namespace spinlab {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

struct SpecialIds {
  TokenId pad = 0;
  TokenId bos = 1;
  TokenId eos = 2;
  TokenId unk = 3;
  TokenId mask = 4;
};

inline constexpr std::string_view kPadText = "<pad>";
inline constexpr std::string_view kBosText = "<s>";
inline constexpr std::string_view kEosText = "</s>";
inline constexpr std::string_view kUnkText = "<unk>";
inline constexpr std::string_view kMaskText = "<mask>";

class Vocab {
 public:
  Vocab() = default;

  Vocab(std::vector<std::string> id_to_text, SpecialIds specials)
      : id_to_text_(std::move(id_to_text)), specials_(specials) {
    if (id_to_text_.empty()) throw ConfigError("vocabulary is empty");
    const TokenId ids[] = {specials_.pad, specials_.bos, specials_.eos, specials_.unk, specials_.mask};
    for (std::size_t i = 0; i < 5; ++i) {
      if (ids[i] < 0 || ids[i] >= size()) throw ConfigError("special id outside vocabulary");
      for (std::size_t j = 0; j < i; ++j) {
        if (ids[i] == ids[j]) throw ConfigError("special ids must be distinct");
      }
    }
    for (TokenId id = 0; id < size(); ++id) {
      const auto [it, inserted] = by_text_.emplace(id_to_text_[static_cast<std::size_t>(id)], id);
      if (!inserted) throw ConfigError("duplicate token text '" + it->first + "'");
      if (!is_special(id)) {
        max_piece_ = std::max(max_piece_, id_to_text_[static_cast<std::size_t>(id)].size());
      }
    }
  }

  // Specials occupy ids 0..4 in the order pad, bos, eos, unk, mask.
  static Vocab with_specials(const std::vector<std::string>& words) {
    std::vector<std::string> all = {std::string(kPadText), std::string(kBosText),
                                    std::string(kEosText), std::string(kUnkText),
                                    std::string(kMaskText)};
    all.insert(all.end(), words.begin(), words.end());
    return Vocab(std::move(all), SpecialIds{});
  }

  TokenId size() const { return static_cast<TokenId>(id_to_text_.size()); }
  const SpecialIds& specials() const { return specials_; }
  const std::vector<std::string>& tokens() const { return id_to_text_; }

  const std::string& text(TokenId id) const {
    if (id < 0 || id >= size()) throw ShapeError("token id " + std::to_string(id) + " out of range");
    return id_to_text_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(std::string_view text) const {
    const auto it = by_text_.find(std::string(text));
    if (it == by_text_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view text) const {
    if (auto found = find(text)) return *found;
    throw ConfigError("token '" + std::string(text) + "' not in vocabulary");
  }

  bool is_special(TokenId id) const {
    return id == specials_.pad || id == specials_.bos || id == specials_.eos ||
           id == specials_.unk || id == specials_.mask;
  }

  // Same special role in another vocabulary, if `id` is special here.
  std::optional<TokenId> counterpart(TokenId id, const Vocab& other) const {
    const auto& o = other.specials();
    if (id == specials_.pad) return o.pad;
    if (id == specials_.bos) return o.bos;
    if (id == specials_.eos) return o.eos;
    if (id == specials_.unk) return o.unk;
    if (id == specials_.mask) return o.mask;
    return std::nullopt;
  }

  // Greedy longest-match segmentation over non-special entries. Special
  // texts encode to their own id. Returns an empty sequence when some part
  // of the text cannot be covered.
  TokenSeq encode(std::string_view text) const {
    if (auto whole = find(text); whole && is_special(*whole)) return {*whole};
    TokenSeq out;
    std::size_t at = 0;
    while (at < text.size()) {
      bool matched = false;
      const std::size_t longest = std::min(max_piece_, text.size() - at);
      for (std::size_t len = longest; len > 0; --len) {
        auto piece = find(text.substr(at, len));
        if (piece && !is_special(*piece)) {
          out.push_back(*piece);
          at += len;
          matched = true;
          break;
        }
      }
      if (!matched) return {};
    }
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("spinlab-vocab");
    for (const auto& t : id_to_text_) {
      h = fnv1a(t, h);
      h = fnv1a(std::string_view("\n", 1), h);
    }
    const TokenId ids[] = {specials_.pad, specials_.bos, specials_.eos, specials_.unk, specials_.mask};
    for (TokenId id : ids) h = fnv1a(std::to_string(id) + ",", h);
    return h;
  }

  // Text format: a [specials] header block mapping roles to token texts,
  // then [tokens] with one token per line; ids follow line order.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary to " + path);
    out << "[specials]\n"
        << "PAD " << text(specials_.pad) << "\n"
        << "BOS " << text(specials_.bos) << "\n"
        << "EOS " << text(specials_.eos) << "\n"
        << "UNK " << text(specials_.unk) << "\n"
        << "MASK " << text(specials_.mask) << "\n"
        << "[tokens]\n";
    for (const auto& t : id_to_text_) out << t << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("vocabulary file not found: " + path);
    std::string line;
    std::size_t lineno = 0;
    enum class Section { none, specials, tokens } section = Section::none;
    std::unordered_map<std::string, std::string> roles;
    std::vector<std::string> tokens;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line == "[specials]") {
        section = Section::specials;
      } else if (line == "[tokens]") {
        section = Section::tokens;
      } else if (section == Section::specials) {
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw ParseError(lineno, "expected '<ROLE> <text>'");
        roles[line.substr(0, sp)] = line.substr(sp + 1);
      } else if (section == Section::tokens) {
        if (line.empty()) throw ParseError(lineno, "empty token line");
        tokens.push_back(line);
      } else if (!line.empty()) {
        throw ParseError(lineno, "content before [specials] block");
      }
    }
    std::unordered_map<std::string, TokenId> ids;
    for (std::size_t i = 0; i < tokens.size(); ++i) ids[tokens[i]] = static_cast<TokenId>(i);
    auto role = [&](const char* name) {
      const auto it = roles.find(name);
      if (it == roles.end()) throw ParseError(lineno, std::string("missing special ") + name);
      const auto id = ids.find(it->second);
      if (id == ids.end()) throw ParseError(lineno, std::string("special ") + name + " not among tokens");
      return id->second;
    };
    SpecialIds sp{role("PAD"), role("BOS"), role("EOS"), role("UNK"), role("MASK")};
    return Vocab(std::move(tokens), sp);
  }

 private:
  std::vector<std::string> id_to_text_;
  SpecialIds specials_;
  std::unordered_map<std::string, TokenId> by_text_;
  std::size_t max_piece_ = 0;
};

// Dense |V_main| x |V_meta| weights; row r spreads main token r over meta tokens.
struct TokenMapMatrix {
  ag::Mat weights;
};

// For each meta token, the main token feeding it, or kUnknown.
struct FirstTokenMap {
  static constexpr TokenId kUnknown = -1;
  std::vector<TokenId> entries;
  TokenId main_size = 0;
};

using TokenMap = std::variant<TokenMapMatrix, FirstTokenMap>;

inline TokenMapMatrix build_map_matrix(const Vocab& main, const Vocab& meta) {
  if (main.size() == 0 || meta.size() == 0) throw ConfigError("vocabularies must be non-empty");
  TokenMapMatrix m{ag::Mat::Zero(main.size(), meta.size())};
  for (TokenId id = 0; id < main.size(); ++id) {
    if (auto twin = main.counterpart(id, meta)) {
      m.weights(id, *twin) = 1.0;
      continue;
    }
    const TokenSeq enc = meta.encode(main.text(id));
    if (enc.empty()) {
      m.weights(id, meta.specials().unk) = 1.0;
      continue;
    }
    const double share = 1.0 / static_cast<double>(enc.size());
    for (TokenId piece : enc) m.weights(id, piece) += share;
  }
  return m;
}

inline FirstTokenMap build_first_token_map(const Vocab& main, const Vocab& meta) {
  if (main.size() == 0 || meta.size() == 0) throw ConfigError("vocabularies must be non-empty");
  std::unordered_map<TokenId, TokenId> reverse;
  for (TokenId id = 0; id < main.size(); ++id) {
    const TokenSeq enc = meta.encode(main.text(id));
    if (enc.empty()) continue;
    reverse[enc.front()] = id;  // later main tokens overwrite earlier ones
  }
  FirstTokenMap map;
  map.main_size = main.size();
  map.entries.assign(static_cast<std::size_t>(meta.size()), FirstTokenMap::kUnknown);
  for (TokenId id = 0; id < meta.size(); ++id) {
    if (auto it = reverse.find(id); it != reverse.end()) map.entries[static_cast<std::size_t>(id)] = it->second;
  }
  return map;
}

inline TokenId meta_size(const TokenMap& map) {
  if (const auto* m = std::get_if<TokenMapMatrix>(&map)) return static_cast<TokenId>(m->weights.cols());
  return static_cast<TokenId>(std::get<FirstTokenMap>(map).entries.size());
}

inline TokenId main_size(const TokenMap& map) {
  if (const auto* m = std::get_if<TokenMapMatrix>(&map)) return static_cast<TokenId>(m->weights.rows());
  return std::get<FirstTokenMap>(map).main_size;
}

// Moves a distribution over the main vocabulary onto the meta vocabulary
// and renormalises.
inline ag::Vec remap_distribution(const ag::Vec& p, const TokenMap& map) {
  if (p.size() != main_size(map)) throw ShapeError("distribution size does not match map rows");
  if (std::abs(p.sum() - 1.0) > 1e-9 || (p.array() < 0.0).any()) {
    throw NumericError("input is not a probability vector");
  }
  ag::Vec q;
  if (const auto* m = std::get_if<TokenMapMatrix>(&map)) {
    q = m->weights.transpose() * p;
  } else {
    const auto& entries = std::get<FirstTokenMap>(map).entries;
    q = ag::Vec::Zero(static_cast<Eigen::Index>(entries.size()));
    for (std::size_t j = 0; j < entries.size(); ++j) {
      if (entries[j] != FirstTokenMap::kUnknown) q(static_cast<Eigen::Index>(j)) = p(entries[j]);
    }
  }
  const double mass = q.sum();
  if (!(mass > 0.0)) throw DegenerateDistributionError("all probability mass lost in remapping");
  return q / mass;
}

// Row-wise differentiable version of remap_distribution.
inline ag::Var remap_rows(const ag::Var& probs, const TokenMap& map) {
  if (probs.cols() != main_size(map)) throw ShapeError("remap_rows: width does not match map");
  ag::Tape& t = *probs.tape();
  if (const auto* m = std::get_if<TokenMapMatrix>(&map)) {
    return ag::normalize_rows(ag::matmul(probs, t.constant(m->weights)));
  }
  const auto& entries = std::get<FirstTokenMap>(map).entries;
  return ag::normalize_rows(ag::gather_cols(probs, entries));
}

// Hard-token translation used when the meta model reads decoded outputs.
// Specials are dropped; untranslatable words become the meta UNK.
inline TokenSeq translate_tokens(std::span<const TokenId> ids, const Vocab& main, const Vocab& meta) {
  TokenSeq out;
  for (TokenId id : ids) {
    if (main.is_special(id)) continue;
    TokenSeq enc = meta.encode(main.text(id));
    if (enc.empty()) {
      out.push_back(meta.specials().unk);
    } else {
      out.insert(out.end(), enc.begin(), enc.end());
    }
  }
  return out;
}

}  // namespace spinlab
