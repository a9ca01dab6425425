#pragma once

// Run configuration: YAML in, resolved JSON out, one lineage hash per stage.

#include <yaml-cpp/yaml.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "spinlab/checkpoint.hpp"
#include "spinlab/corpus.hpp"
#include "spinlab/defense.hpp"
#include "spinlab/error.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/metrics.hpp"
#include "spinlab/model.hpp"
#include "spinlab/poison.hpp"
#include "spinlab/random.hpp"
#include "spinlab/spin.hpp"

namespace spinlab::cli {

struct CorpusSection {
  SyntheticSpec synth;  // synth.seed is derived from the global seed
  int train_size = 4000;
  int test_size = 300;
};

struct ModelSection {
  ModelMode mode = ModelMode::seq2seq;
  ModelDims dims;
  int steps = 4000;
  int batch_size = 16;
  SgdConfig sgd{0.5, 1.0};
  double mask_rate = 0.3;
};

struct MetaSection {
  MetaTask task = MetaTask::sentiment;
  std::vector<std::string> labels;  // empty: task defaults
  std::string target = "positive";
  std::string compensatory = "negative";  // "none" disables the term
  std::string hypothesis;                 // entailment only, space-separated words
  MetaDims dims;
  int samples = 20000;
  int heldout = 2000;
  int steps = 1500;
  int batch_size = 32;
  SgdConfig sgd{0.2, 1.0};
  std::string map = "matrix";  // or "first_token"
};

struct SpinSection {
  std::optional<double> alpha = 0.9;  // nullopt: MGDA
  double c = 4.0;
  int steps = 2000;
  int batch_size = 16;
  SgdConfig sgd{0.5, 1.0};
  std::string trigger = "bolshevik";
  InjectionStrategy strategy = InjectionStrategy::random_replace;
  int mgda_stride = 1;
  double mask_rate = 0.3;
  bool restrict_meta_to_mask = true;
};

struct EvalSection {
  int max_len = 8;
  int batch = 128;
  std::string model = "spinned";  // "clean" compares theta with itself
};

struct PoisonSection {
  std::string metric = "rouge1";
  double main_threshold = 30.0;
  double meta_threshold = 0.5;
  int finetune_steps = 1000;
  int batch_size = 16;
  SgdConfig sgd{0.5, 1.0};
};

struct DefenseSection {
  int inputs = 300;
  std::string candidates;  // file, one word per line; empty: corpus names plus the trigger
  std::string distance = "euclidean";
  std::string encoder = "meta";  // or "embedding" (theta's token table)
  std::string model = "spinned";
};

struct GridSection {
  std::vector<double> alphas{0.7, 0.9, 0.99};
  std::vector<double> cs{1.0, 4.0, kInfinity};
  int steps = 2000;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "run";
  CorpusSection corpus;
  ModelSection model;
  MetaSection meta;
  SpinSection spin;
  EvalSection eval;
  PoisonSection poison;
  DefenseSection defense;
  GridSection grid;

  // Independent seeds for each consumer, derived from the global one.
  std::uint64_t derived_seed(std::string_view what) const {
    Rng r = make_rng(seed, what);
    return r();
  }
};

namespace detail {

inline std::string where(const YAML::Node& n) {
  const YAML::Mark m = n.Mark();
  if (m.line < 0) return "";
  return "line " + std::to_string(m.line + 1) + ": ";
}

// Reads one mapping and remembers which keys were consumed so leftovers can
// be reported.
class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) {
      throw ConfigError(where(node_) + "'" + display() + "' must be a mapping");
    }
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return;
    const YAML::Node v = view()[key];
    if (!v) return;
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(v) + "bad value for '" + qualified(key) + "'");
    }
  }

  // Numbers or "inf".
  void get_extended(const std::string& key, double& out) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return;
    const YAML::Node v = view()[key];
    if (!v) return;
    out = parse_extended(v, qualified(key));
  }

  void get_list(const std::string& key, std::vector<double>& out) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return;
    const YAML::Node v = view()[key];
    if (!v) return;
    if (!v.IsSequence()) throw ConfigError(where(v) + "'" + qualified(key) + "' must be a list");
    out.clear();
    for (const auto& item : v) out.push_back(parse_extended(item, qualified(key)));
  }

  void get_range(const std::string& key, std::pair<int, int>& out) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return;
    const YAML::Node v = view()[key];
    if (!v) return;
    if (!v.IsSequence() || v.size() != 2) {
      throw ConfigError(where(v) + "'" + qualified(key) + "' must be a two-element list [lo, hi]");
    }
    try {
      out = {v[0].as<int>(), v[1].as<int>()};
    } catch (const YAML::Exception&) {
      throw ConfigError(where(v) + "bad value for '" + qualified(key) + "'");
    }
  }

  YAML::Node child(const std::string& key) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return YAML::Node();
    return view()[key];
  }

  void finish() const {
    if (!node_ || node_.IsNull()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError(where(kv.first) + "unknown key '" + qualified(key) + "'");
    }
  }

 private:
  const YAML::Node& view() const { return node_; }
  std::string display() const { return path_.empty() ? "<root>" : path_; }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static double parse_extended(const YAML::Node& v, const std::string& name) {
    if (!v.IsScalar()) throw ConfigError(where(v) + "bad value for '" + name + "'");
    const std::string s = v.Scalar();
    if (s == "inf" || s == ".inf" || s == "infinity") return kInfinity;
    try {
      return v.as<double>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(v) + "bad value for '" + name + "'");
    }
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void sgd_keys(Section& s, SgdConfig& sgd) {
  s.get("lr", sgd.lr);
  s.get("clip_norm", sgd.clip_norm);
}

}  // namespace detail

// Applies "a.b.c=value" by editing the tree before it is parsed, so an
// override is checked exactly like a key written in the file.
inline void apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + assignment + "': " + e.msg);
  }
  std::vector<std::string> keys;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    keys.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  std::vector<YAML::Node> chain{root};
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (keys[i].empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    YAML::Node next = chain.back()[keys[i]];
    if (next && !next.IsMap() && !next.IsNull()) {
      throw ConfigError("override '" + assignment + "': '" + keys[i] + "' is not a section");
    }
    chain.push_back(next);
  }
  chain.back()[keys.back()] = value;
}

inline RunConfig parse_config(const YAML::Node& root) {
  using detail::Section;
  RunConfig c;
  Section top(root, "");
  top.get("seed", c.seed);
  top.get("out", c.out);

  {
    Section s(top.child("corpus"), "corpus");
    auto& y = c.corpus.synth;
    s.get("num_entities", y.num_entities);
    s.get("num_pos_adjectives", y.num_pos_adjectives);
    s.get("num_neg_adjectives", y.num_neg_adjectives);
    s.get("num_fillers", y.num_fillers);
    s.get_range("source_len", y.source_len_range);
    s.get_range("target_len", y.target_len_range);
    s.get("entity_mentions", y.entity_mentions);
    s.get("distractor_rate", y.distractor_rate);
    s.get("trigger_in_corpus", y.trigger_in_corpus);
    s.get("train_size", c.corpus.train_size);
    s.get("test_size", c.corpus.test_size);
    s.finish();
  }
  {
    Section s(top.child("model"), "model");
    auto& m = c.model;
    std::string mode = to_string(m.mode);
    s.get("mode", mode);
    m.mode = parse_mode(mode);
    s.get("d_model", m.dims.d_model);
    s.get("layers", m.dims.layers);
    s.get("heads", m.dims.heads);
    s.get("d_ff", m.dims.d_ff);
    s.get("max_len", m.dims.max_len);
    s.get("tie_embeddings", m.dims.tie_embeddings);
    s.get("steps", m.steps);
    s.get("batch_size", m.batch_size);
    detail::sgd_keys(s, m.sgd);
    s.get("mask_rate", m.mask_rate);
    s.finish();
  }
  {
    Section s(top.child("meta"), "meta");
    auto& m = c.meta;
    std::string task = to_string(m.task);
    s.get("task", task);
    m.task = parse_meta_task(task);
    s.get("labels", m.labels);
    s.get("target", m.target);
    s.get("compensatory", m.compensatory);
    s.get("hypothesis", m.hypothesis);
    s.get("d_model", m.dims.d_model);
    s.get("heads", m.dims.heads);
    s.get("d_ff", m.dims.d_ff);
    s.get("max_len", m.dims.max_len);
    s.get("samples", m.samples);
    s.get("heldout", m.heldout);
    s.get("steps", m.steps);
    s.get("batch_size", m.batch_size);
    detail::sgd_keys(s, m.sgd);
    s.get("map", m.map);
    s.finish();
  }
  {
    Section s(top.child("spin"), "spin");
    auto& m = c.spin;
    const YAML::Node spin_node = top.child("spin");
    const YAML::Node a = spin_node && spin_node.IsMap() ? spin_node["alpha"] : YAML::Node();
    if (a && a.IsScalar() && a.Scalar() == "mgda") {
      m.alpha.reset();
      std::string ignored;
      s.get("alpha", ignored);
    } else {
      double alpha = m.alpha.value_or(0.9);
      s.get("alpha", alpha);
      m.alpha = alpha;
    }
    s.get_extended("c", m.c);
    s.get("steps", m.steps);
    s.get("batch_size", m.batch_size);
    detail::sgd_keys(s, m.sgd);
    s.get("trigger", m.trigger);
    std::string strategy = to_string(m.strategy);
    s.get("strategy", strategy);
    m.strategy = parse_strategy(strategy);
    s.get("mgda_stride", m.mgda_stride);
    s.get("mask_rate", m.mask_rate);
    s.get("restrict_meta_to_mask", m.restrict_meta_to_mask);
    s.finish();
  }
  {
    Section s(top.child("eval"), "eval");
    s.get("max_len", c.eval.max_len);
    s.get("batch", c.eval.batch);
    s.get("model", c.eval.model);
    s.finish();
  }
  {
    Section s(top.child("poison"), "poison");
    auto& p = c.poison;
    s.get("metric", p.metric);
    s.get("main_threshold", p.main_threshold);
    s.get("meta_threshold", p.meta_threshold);
    s.get("finetune_steps", p.finetune_steps);
    s.get("batch_size", p.batch_size);
    detail::sgd_keys(s, p.sgd);
    s.finish();
  }
  {
    Section s(top.child("defense"), "defense");
    auto& d = c.defense;
    s.get("inputs", d.inputs);
    s.get("candidates", d.candidates);
    s.get("distance", d.distance);
    s.get("encoder", d.encoder);
    s.get("model", d.model);
    s.finish();
  }
  {
    Section s(top.child("grid"), "grid");
    s.get_list("alphas", c.grid.alphas);
    s.get_list("cs", c.grid.cs);
    s.get("steps", c.grid.steps);
    s.finish();
  }
  top.finish();
  return c;
}

// Checks that do not need the vocabulary.
inline void validate(const RunConfig& c) {
  SyntheticSpec y = c.corpus.synth;
  y.validate();
  if (c.corpus.train_size < 1 || c.corpus.test_size < 1) throw ConfigError("corpus sizes must be >= 1");
  if (c.model.steps < 0 || c.model.batch_size < 1) throw ConfigError("model: bad steps or batch_size");
  if (c.meta.samples < 1 || c.meta.heldout < 1 || c.meta.steps < 0 || c.meta.batch_size < 1) {
    throw ConfigError("meta: bad samples, heldout, steps or batch_size");
  }
  if (c.meta.map != "matrix" && c.meta.map != "first_token") throw ConfigError("meta.map must be matrix or first_token");
  for (const auto& s : {c.eval.model, c.defense.model}) {
    if (s != "spinned" && s != "clean") throw ConfigError("model selector must be spinned or clean");
  }
  if (c.spin.alpha && !(*c.spin.alpha > 0.0 && *c.spin.alpha <= 1.0)) throw ConfigError("spin.alpha must lie in (0, 1]");
  if (!(c.spin.c >= 1.0)) throw ConfigError("spin.c must be >= 1");
  if (c.spin.steps < 0 || c.spin.batch_size < 1 || c.spin.mgda_stride < 1) {
    throw ConfigError("spin: bad steps, batch_size or mgda_stride");
  }
  for (double r : {c.model.mask_rate, c.spin.mask_rate}) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("mask_rate must lie in (0, 1]");
  }
  if (c.eval.max_len < 1 || c.eval.batch < 1) throw ConfigError("eval: bad max_len or batch");
  parse_main_metric(c.poison.metric);
  PoisonFilter{parse_main_metric(c.poison.metric), c.poison.main_threshold, c.poison.meta_threshold, 0}.validate();
  if (c.poison.finetune_steps < 0 || c.poison.batch_size < 1) throw ConfigError("poison: bad finetune_steps or batch_size");
  parse_distance(c.defense.distance);
  if (c.defense.encoder != "meta" && c.defense.encoder != "embedding") {
    throw ConfigError("defense.encoder must be meta or embedding");
  }
  if (c.defense.inputs < 1) throw ConfigError("defense.inputs must be >= 1");
  if (c.grid.steps < 0) throw ConfigError("grid.steps must be >= 0");
  for (double a : c.grid.alphas) {
    if (!(a > 0.0 && a <= 1.0)) throw ConfigError("grid alphas must lie in (0, 1]");
  }
  for (double v : c.grid.cs) {
    if (!(v >= 1.0)) throw ConfigError("grid c values must be >= 1");
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  YAML::Node root;
  if (!path.empty()) {
    try {
      root = YAML::LoadFile(path);
    } catch (const YAML::BadFile&) {
      throw ConfigError("cannot read config file " + path);
    } catch (const YAML::ParserException& e) {
      throw ConfigError(path + ": line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
  }
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  for (const auto& o : overrides) apply_override(root, o);
  RunConfig c = parse_config(root);
  validate(c);
  return c;
}

namespace detail {

inline nlohmann::json number(double v) {
  if (std::isinf(v)) return "inf";
  return v;
}

inline nlohmann::json sgd_json(const SgdConfig& s) { return {{"lr", s.lr}, {"clip_norm", s.clip_norm}}; }

}  // namespace detail

// Sections as JSON; also the input to every hash.
inline nlohmann::json corpus_json(const RunConfig& c) {
  const auto& y = c.corpus.synth;
  return {{"num_entities", y.num_entities},
          {"num_pos_adjectives", y.num_pos_adjectives},
          {"num_neg_adjectives", y.num_neg_adjectives},
          {"num_fillers", y.num_fillers},
          {"source_len", {y.source_len_range.first, y.source_len_range.second}},
          {"target_len", {y.target_len_range.first, y.target_len_range.second}},
          {"entity_mentions", y.entity_mentions},
          {"distractor_rate", y.distractor_rate},
          {"trigger_in_corpus", y.trigger_in_corpus},
          {"train_size", c.corpus.train_size},
          {"test_size", c.corpus.test_size}};
}

inline nlohmann::json model_json(const RunConfig& c) {
  const auto& m = c.model;
  nlohmann::json j = {{"mode", to_string(m.mode)},     {"d_model", m.dims.d_model},
                      {"layers", m.dims.layers},        {"heads", m.dims.heads},
                      {"d_ff", m.dims.d_ff},            {"max_len", m.dims.max_len},
                      {"tie_embeddings", m.dims.tie_embeddings}, {"steps", m.steps},
                      {"batch_size", m.batch_size},     {"mask_rate", m.mask_rate}};
  j.update(detail::sgd_json(m.sgd));
  return j;
}

inline nlohmann::json meta_json(const RunConfig& c) {
  const auto& m = c.meta;
  nlohmann::json j = {{"task", to_string(m.task)},  {"labels", m.labels},        {"target", m.target},
                      {"compensatory", m.compensatory}, {"hypothesis", m.hypothesis}, {"d_model", m.dims.d_model},
                      {"heads", m.dims.heads},       {"d_ff", m.dims.d_ff},        {"max_len", m.dims.max_len},
                      {"samples", m.samples},        {"heldout", m.heldout},       {"steps", m.steps},
                      {"batch_size", m.batch_size},  {"map", m.map}};
  j.update(detail::sgd_json(m.sgd));
  return j;
}

inline nlohmann::json spin_json(const RunConfig& c) {
  const auto& s = c.spin;
  nlohmann::json j = {{"alpha", s.alpha ? nlohmann::json(*s.alpha) : nlohmann::json("mgda")},
                      {"c", detail::number(s.c)},
                      {"steps", s.steps},
                      {"batch_size", s.batch_size},
                      {"trigger", s.trigger},
                      {"strategy", to_string(s.strategy)},
                      {"mgda_stride", s.mgda_stride},
                      {"mask_rate", s.mask_rate},
                      {"restrict_meta_to_mask", s.restrict_meta_to_mask}};
  j.update(detail::sgd_json(s.sgd));
  return j;
}

inline nlohmann::json eval_json(const RunConfig& c) {
  return {{"max_len", c.eval.max_len}, {"batch", c.eval.batch}, {"model", c.eval.model}};
}

inline nlohmann::json poison_json(const RunConfig& c) {
  const auto& p = c.poison;
  nlohmann::json j = {{"metric", p.metric},
                      {"main_threshold", p.main_threshold},
                      {"meta_threshold", p.meta_threshold},
                      {"finetune_steps", p.finetune_steps},
                      {"batch_size", p.batch_size}};
  j.update(detail::sgd_json(p.sgd));
  return j;
}

inline nlohmann::json defense_json(const RunConfig& c) {
  const auto& d = c.defense;
  return {{"inputs", d.inputs},
          {"candidates", d.candidates},
          {"distance", d.distance},
          {"encoder", d.encoder},
          {"model", d.model}};
}

inline nlohmann::json grid_json(const RunConfig& c) {
  nlohmann::json a = nlohmann::json::array(), cs = nlohmann::json::array();
  for (double v : c.grid.alphas) a.push_back(v);
  for (double v : c.grid.cs) cs.push_back(detail::number(v));
  return {{"alphas", a}, {"cs", cs}, {"steps", c.grid.steps}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"out", c.out},
          {"corpus", corpus_json(c)},
          {"model", model_json(c)},
          {"meta", meta_json(c)},
          {"spin", spin_json(c)},
          {"eval", eval_json(c)},
          {"poison", poison_json(c)},
          {"defense", defense_json(c)},
          {"grid", grid_json(c)}};
}

// Lineage hashes: a stage's hash covers its own section and every upstream
// stage, so a changed corpus invalidates all checkpoints trained on it.
struct StageHashes {
  std::string corpus, main, meta, spin, poison;
};

inline std::string hash_of(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

inline StageHashes stage_hashes(const RunConfig& c) {
  StageHashes h;
  h.corpus = hash_of({{"seed", c.seed}, {"corpus", corpus_json(c)}});
  h.main = hash_of({{"up", h.corpus}, {"model", model_json(c)}});
  h.meta = hash_of({{"up", h.corpus}, {"meta", meta_json(c)}});
  h.spin = hash_of({{"up", {h.main, h.meta}}, {"spin", spin_json(c)}});
  h.poison = hash_of({{"up", h.spin}, {"poison", poison_json(c)}});
  return h;
}

}  // namespace spinlab::cli
