#pragma once

// Pipeline stages behind the `spinlab` subcommands. Each stage reads the
// artifacts of earlier stages from the run directory, checks that they were
// produced by the same upstream configuration, and writes its own.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "spinlab/checkpoint.hpp"
#include "spinlab/cli/config.hpp"
#include "spinlab/corpus.hpp"
#include "spinlab/defense.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/metrics.hpp"
#include "spinlab/model.hpp"
#include "spinlab/poison.hpp"
#include "spinlab/spin.hpp"
#include "spinlab/tokenizer.hpp"

namespace spinlab::cli {

namespace fs = std::filesystem;

struct Context {
  RunConfig cfg;
  StageHashes hashes;
  fs::path out;
  std::ostream* log = &std::cout;

  explicit Context(RunConfig c) : cfg(std::move(c)), hashes(stage_hashes(cfg)), out(cfg.out) {}

  fs::path path(const std::string& rel) const { return out / rel; }
  std::ostream& say() const { return *log; }
};

namespace detail {

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << content;
}

inline std::string digest(const fs::path& p) { return hex64(fnv1a(read_file(p))); }

inline void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) {
    throw MissingArtifactError("missing artifact " + p.string() + "; run `spinlab " + producer + "` first");
  }
}

inline void require_hash(const std::string& actual, const std::string& expected, const fs::path& p,
                         const std::string& producer) {
  if (actual != expected) {
    throw ConfigError(p.string() + " was produced by a different configuration (hash " +
                      (actual.empty() ? std::string("none") : actual) + ", expected " + expected +
                      "); rerun `spinlab " + producer + "`");
  }
}

inline std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::string log_csv(const std::vector<TrainLogEntry>& log) {
  std::ostringstream os;
  os << std::setprecision(10) << "step,loss,grad_norm\n";
  for (const auto& e : log) os << e.step << ',' << e.loss << ',' << e.grad_norm << '\n';
  return os.str();
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace detail

inline void write_resolved_config(const Context& ctx, const std::string& command) {
  nlohmann::json j = to_json(ctx.cfg);
  j["hashes"] = {{"corpus", ctx.hashes.corpus},
                 {"main", ctx.hashes.main},
                 {"meta", ctx.hashes.meta},
                 {"spin", ctx.hashes.spin},
                 {"poison", ctx.hashes.poison}};
  detail::write_file(ctx.path("config/" + command + ".json"), detail::json_text(j));
}

// ---- corpus stage -------------------------------------------------------

struct CorpusArtifacts {
  SyntheticLexicon lex;
  Vocab meta_vocab;
  Corpus train;
  Corpus test;

  const Vocab& vocab() const { return lex.vocab; }
};

inline SyntheticSpec train_spec(const RunConfig& c) {
  SyntheticSpec s = c.corpus.synth;
  s.seed = c.derived_seed("corpus-train");
  return s;
}

inline SyntheticSpec test_spec(const RunConfig& c) {
  SyntheticSpec s = c.corpus.synth;
  s.seed = c.derived_seed("corpus-test");
  return s;
}

inline int cmd_gen(Context& ctx) {
  write_resolved_config(ctx, "gen");
  const SyntheticLexicon lex = build_lexicon(train_spec(ctx.cfg));
  const Vocab meta = permuted_vocab(lex.vocab, ctx.cfg.derived_seed("meta-vocab"));
  const Corpus train = generate_corpus(train_spec(ctx.cfg), static_cast<std::size_t>(ctx.cfg.corpus.train_size));
  const Corpus test = generate_corpus(test_spec(ctx.cfg), static_cast<std::size_t>(ctx.cfg.corpus.test_size));
  fs::create_directories(ctx.out);
  lex.vocab.save(ctx.path("vocab.txt").string());
  meta.save(ctx.path("meta_vocab.txt").string());
  write_corpus(train, ctx.path("train.jsonl").string());
  write_corpus(test, ctx.path("test.jsonl").string());
  nlohmann::json manifest = {{"kind", "corpus"}, {"config_hash", ctx.hashes.corpus}, {"files", nlohmann::json::object()}};
  for (const char* f : {"vocab.txt", "meta_vocab.txt", "train.jsonl", "test.jsonl"}) {
    manifest["files"][f] = detail::digest(ctx.path(f));
  }
  detail::write_file(ctx.path("corpus.json"), detail::json_text(manifest));
  ctx.say() << "gen: " << train.size() << " train / " << test.size() << " test examples, vocabulary "
            << lex.vocab.size() << " -> " << ctx.out.string() << "\n";
  return 0;
}

inline CorpusArtifacts load_corpus_stage(const Context& ctx) {
  const fs::path manifest_path = ctx.path("corpus.json");
  detail::require_file(manifest_path, "gen");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(manifest_path.string() + ": " + e.what());
  }
  detail::require_hash(manifest.value("config_hash", ""), ctx.hashes.corpus, manifest_path, "gen");
  for (const auto& [name, want] : manifest.at("files").items()) {
    const fs::path p = ctx.path(name);
    detail::require_file(p, "gen");
    if (detail::digest(p) != want.get<std::string>()) {
      throw ConfigError(p.string() + " does not match its manifest digest; rerun `spinlab gen`");
    }
  }
  CorpusArtifacts a{build_lexicon(train_spec(ctx.cfg)), Vocab::load(ctx.path("meta_vocab.txt").string()), {}, {}};
  if (Vocab::load(ctx.path("vocab.txt").string()).hash() != a.lex.vocab.hash()) {
    throw ConfigError("vocab.txt does not match the configured corpus; rerun `spinlab gen`");
  }
  a.train = read_corpus(ctx.path("train.jsonl").string());
  a.test = read_corpus(ctx.path("test.jsonl").string());
  check_corpus(a.train, a.vocab());
  check_corpus(a.test, a.vocab());
  return a;
}

// ---- shared builders ----------------------------------------------------

inline MetaTaskSpec meta_spec(const RunConfig& c, const Vocab& meta) {
  MetaTaskSpec s;
  s.task = c.meta.task;
  s.labels = c.meta.labels.empty() ? default_labels(c.meta.task) : c.meta.labels;
  s.target = s.label_index(c.meta.target);
  if (c.meta.compensatory != "none") s.compensatory = s.label_index(c.meta.compensatory);
  for (const auto& w : detail::split_words(c.meta.hypothesis)) s.hypothesis.push_back(meta.id(w));
  s.validate();
  return s;
}

inline TriggerSpec trigger_spec(const RunConfig& c, const CorpusArtifacts& a) {
  TriggerSpec t;
  const auto id = a.vocab().find(c.spin.trigger);
  if (!id || a.vocab().is_special(*id)) throw ConfigError("trigger '" + c.spin.trigger + "' is not a vocabulary word");
  t.trigger_tokens = {*id};
  t.strategy = c.spin.strategy;
  for (TokenId e : a.lex.entities) {
    if (e != *id) t.name_lexicon.insert(e);
  }
  t.validate(a.vocab());
  return t;
}

inline TokenMap token_map(const RunConfig& c, const CorpusArtifacts& a) {
  if (c.meta.map == "first_token") return build_first_token_map(a.vocab(), a.meta_vocab);
  return build_map_matrix(a.vocab(), a.meta_vocab);
}

inline SpinConfig spin_config(const RunConfig& c, const CorpusArtifacts& a) {
  SpinConfig s;
  s.alpha = c.spin.alpha;
  s.c = c.spin.c;
  s.steps = c.spin.steps;
  s.batch_size = c.spin.batch_size;
  s.seed = c.derived_seed("spin");
  s.trigger = trigger_spec(c, a);
  s.meta = meta_spec(c, a.meta_vocab);
  s.sgd = c.spin.sgd;
  s.mgda_stride = c.spin.mgda_stride;
  s.mask_rate = c.spin.mask_rate;
  s.restrict_meta_to_mask = c.spin.restrict_meta_to_mask;
  s.validate();
  return s;
}

inline DecodeOptions decode_options(const RunConfig& c) {
  return {c.eval.max_len, static_cast<std::size_t>(c.eval.batch)};
}

inline Seq2SeqModel load_main_stage(const Context& ctx, const CorpusArtifacts& a) {
  const fs::path p = ctx.path("theta.ckpt");
  detail::require_file(p, "train-main");
  detail::require_hash(read_checkpoint(p.string()).field("config_hash"), ctx.hashes.main, p, "train-main");
  return load_model(p.string(), a.vocab());
}

inline MetaModel load_meta_stage(const Context& ctx, const CorpusArtifacts& a) {
  const fs::path p = ctx.path("phi.ckpt");
  detail::require_file(p, "train-meta");
  detail::require_hash(read_checkpoint(p.string()).field("config_hash"), ctx.hashes.meta, p, "train-meta");
  return load_meta(p.string(), a.meta_vocab);
}

inline Seq2SeqModel load_spin_stage(const Context& ctx, const CorpusArtifacts& a) {
  const fs::path p = ctx.path("theta_star.ckpt");
  detail::require_file(p, "spin");
  detail::require_hash(read_checkpoint(p.string()).field("config_hash"), ctx.hashes.spin, p, "spin");
  return load_model(p.string(), a.vocab());
}

// ---- training stages ----------------------------------------------------

inline TrainConfig main_train_config(const RunConfig& c) {
  return {c.model.steps, c.model.batch_size, c.model.sgd, c.derived_seed("train-main"), c.model.mask_rate};
}

inline int cmd_train_main(Context& ctx) {
  write_resolved_config(ctx, "train-main");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  ModelDims dims = ctx.cfg.model.dims;
  dims.vocab = a.vocab().size();
  Seq2SeqModel theta(dims, ctx.cfg.model.mode, ctx.cfg.derived_seed("theta-init"));
  const auto log = train_main(theta, a.train, main_train_config(ctx.cfg), a.vocab().specials());
  save_model(ctx.path("theta.ckpt").string(), theta, a.vocab(), ctx.hashes.main);
  detail::write_file(ctx.path("train_main.csv"), detail::log_csv(log));
  ctx.say() << "train-main: " << log.size() << " steps, final loss "
            << (log.empty() ? 0.0 : log.back().loss) << "\n";
  return 0;
}

inline int cmd_train_meta(Context& ctx) {
  write_resolved_config(ctx, "train-meta");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  const MetaTaskSpec spec = meta_spec(ctx.cfg, a.meta_vocab);
  MetaDims dims = ctx.cfg.meta.dims;
  dims.vocab = a.meta_vocab.size();
  MetaModel phi(dims, spec.labels, ctx.cfg.derived_seed("phi-init"));
  const MetaLexicon ml = meta_lexicon(a.lex, a.meta_vocab);
  const auto samples = make_meta_samples(a.train, a.vocab(), a.meta_vocab, ml, spec.task,
                                         static_cast<std::size_t>(ctx.cfg.meta.samples),
                                         ctx.cfg.derived_seed("meta-samples"));
  const auto heldout = make_meta_samples(a.test, a.vocab(), a.meta_vocab, ml, spec.task,
                                         static_cast<std::size_t>(ctx.cfg.meta.heldout),
                                         ctx.cfg.derived_seed("meta-heldout"));
  MetaTrainConfig tc{ctx.cfg.meta.steps, ctx.cfg.meta.batch_size, ctx.cfg.meta.sgd, ctx.cfg.derived_seed("train-meta")};
  const auto log = train_meta(phi, samples, tc);
  save_meta(ctx.path("phi.ckpt").string(), phi, a.meta_vocab, spec.task, ctx.hashes.meta);
  detail::write_file(ctx.path("train_meta.csv"), detail::log_csv(log));
  const double acc = meta_sample_accuracy(phi, heldout);
  detail::write_file(ctx.path("train_meta.json"),
                     detail::json_text({{"config_hash", ctx.hashes.meta}, {"heldout_accuracy", acc}}));
  ctx.say() << "train-meta: held-out accuracy " << std::fixed << std::setprecision(4) << acc << "\n";
  return 0;
}

inline SpinResult run_spin(Seq2SeqModel& theta, const MetaModel& phi, const CorpusArtifacts& a, const SpinConfig& sc,
                           const TokenMap& map) {
  if (theta.mode() == ModelMode::masked) {
    return pretrain_spin_mlm(theta, phi, a.train, sc, map, a.vocab().specials(), a.meta_vocab.specials());
  }
  return train_spin(theta, phi, a.train, sc, map, a.vocab().specials(), a.meta_vocab.specials());
}

inline int cmd_spin(Context& ctx) {
  write_resolved_config(ctx, "spin");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  Seq2SeqModel theta = load_main_stage(ctx, a);
  const MetaModel phi = load_meta_stage(ctx, a);
  const SpinConfig sc = spin_config(ctx.cfg, a);
  const SpinResult r = run_spin(theta, phi, a, sc, token_map(ctx.cfg, a));
  for (const auto& w : r.warnings) ctx.say() << "warning: " << w << "\n";
  save_model(ctx.path("theta_star.ckpt").string(), theta, a.vocab(), ctx.hashes.spin);
  write_spin_log(r.log, ctx.path("spin.csv").string());
  ctx.say() << "spin: " << r.log.size() << " steps";
  if (!r.log.empty()) ctx.say() << ", final combined loss " << r.log.back().total;
  ctx.say() << "\n";
  return 0;
}

// ---- evaluation ---------------------------------------------------------

inline int cmd_eval(Context& ctx) {
  write_resolved_config(ctx, "eval");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  const Seq2SeqModel theta = load_main_stage(ctx, a);
  const MetaModel phi = load_meta_stage(ctx, a);
  const bool self = ctx.cfg.eval.model == "clean";
  const Seq2SeqModel star = self ? theta : load_spin_stage(ctx, a);
  const MetaTaskSpec spec = meta_spec(ctx.cfg, a.meta_vocab);
  const EvalReport rep = differential_test(theta, star, a.test, trigger_spec(ctx.cfg, a), phi, spec, a.vocab(),
                                           a.meta_vocab, ctx.cfg.derived_seed("eval"), decode_options(ctx.cfg));
  detail::write_file(ctx.path("eval/report.csv"), rep.to_csv());
  detail::write_file(ctx.path("eval/table.txt"), rep.table());
  detail::write_file(ctx.path("eval/report.json"),
                     detail::json_text({{"config_hash", self ? ctx.hashes.main : ctx.hashes.spin},
                                        {"compared", ctx.cfg.eval.model},
                                        {"report", rep.to_kv()}}));
  ctx.say() << rep.table();
  return 0;
}

inline std::vector<TokenId> scan_candidates(const Context& ctx, const CorpusArtifacts& a,
                                            std::vector<std::string>& warnings) {
  if (!ctx.cfg.defense.candidates.empty()) return read_candidates(ctx.cfg.defense.candidates, a.vocab(), warnings);
  std::vector<TokenId> c = a.lex.entities;
  const TokenId trig = trigger_spec(ctx.cfg, a).trigger_tokens.front();
  if (std::find(c.begin(), c.end(), trig) == c.end()) c.push_back(trig);
  return c;
}

inline std::unique_ptr<OutputEncoder> make_encoder(const RunConfig& c, const MetaModel& phi, const CorpusArtifacts& a) {
  if (c.defense.encoder == "embedding") {
    return std::make_unique<EmbeddingMeanEncoder>(ag::Mat::Identity(a.vocab().size(), a.vocab().size()));
  }
  return std::make_unique<MetaEncoder>(phi, a.vocab(), a.meta_vocab);
}

inline std::vector<TokenSeq> scan_inputs(const RunConfig& c, const CorpusArtifacts& a) {
  if (static_cast<std::size_t>(c.defense.inputs) > a.test.size()) {
    throw ConfigError("defense.inputs exceeds the test corpus size");
  }
  std::vector<TokenSeq> in;
  for (int i = 0; i < c.defense.inputs; ++i) in.push_back(a.test[static_cast<std::size_t>(i)].source);
  return in;
}

inline AnomalyReport run_scan(const Context& ctx, const Seq2SeqModel& model, const MetaModel& phi,
                              const CorpusArtifacts& a) {
  std::vector<std::string> warnings;
  const auto cands = scan_candidates(ctx, a, warnings);
  const auto enc = make_encoder(ctx.cfg, phi, a);
  const GreedyTextModel black_box(model, a.vocab().specials(), decode_options(ctx.cfg));
  ScanResult scan = scan_distances(black_box, scan_inputs(ctx.cfg, a), cands, *enc, a.vocab(),
                                   ctx.cfg.derived_seed("scan"));
  scan.warnings.insert(scan.warnings.begin(), warnings.begin(), warnings.end());
  return flag_spinned(scan, a.vocab(), parse_distance(ctx.cfg.defense.distance));
}

inline int cmd_scan(Context& ctx) {
  write_resolved_config(ctx, "scan");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  const MetaModel phi = load_meta_stage(ctx, a);
  const bool clean = ctx.cfg.defense.model == "clean";
  const Seq2SeqModel model = clean ? load_main_stage(ctx, a) : load_spin_stage(ctx, a);
  const AnomalyReport r = run_scan(ctx, model, phi, a);
  for (const auto& w : r.warnings) ctx.say() << "warning: " << w << "\n";
  nlohmann::json flagged = nlohmann::json::array();
  for (TokenId t : r.flagged) flagged.push_back(a.vocab().text(t));
  detail::write_file(ctx.path("scan/anomaly.csv"), r.to_csv());
  detail::write_file(ctx.path("scan/verdict.txt"), r.verdict());
  detail::write_file(ctx.path("scan/report.json"),
                     detail::json_text({{"config_hash", clean ? ctx.hashes.main : ctx.hashes.spin},
                                        {"scanned", ctx.cfg.defense.model},
                                        {"flagged", flagged},
                                        {"verdict", r.spinned() ? "spinned" : "not spinned"}}));
  ctx.say() << r.verdict();
  return 0;
}

// ---- supply chain -------------------------------------------------------

inline int cmd_poison(Context& ctx) {
  write_resolved_config(ctx, "poison");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  const Seq2SeqModel theta = load_main_stage(ctx, a);
  const MetaModel phi = load_meta_stage(ctx, a);
  const Seq2SeqModel star = load_spin_stage(ctx, a);
  const MetaTaskSpec spec = meta_spec(ctx.cfg, a.meta_vocab);
  const TriggerSpec trig = trigger_spec(ctx.cfg, a);
  PoisonFilter f;
  f.metric = parse_main_metric(ctx.cfg.poison.metric);
  f.main_threshold = ctx.cfg.poison.main_threshold;
  f.meta_threshold = ctx.cfg.poison.meta_threshold;
  f.label = spec.target;
  const PoisonResult pr = generate_poisoned_dataset(a.train, star, phi, f, trig, spec, a.vocab(), a.meta_vocab,
                                                    ctx.cfg.derived_seed("poison"), decode_options(ctx.cfg));
  fs::create_directories(ctx.path("poison"));
  write_corpus(pr.dataset, ctx.path("poison/poisoned.jsonl").string());

  // Victim and control start from the same clean checkpoint and see the same
  // batch stream; only the data differs.
  const TrainConfig ft{ctx.cfg.poison.finetune_steps, ctx.cfg.poison.batch_size, ctx.cfg.poison.sgd,
                       ctx.cfg.derived_seed("finetune"), ctx.cfg.model.mask_rate};
  Seq2SeqModel victim = theta, control = theta;
  finetune_clean(victim, pr.dataset, ft, a.vocab().specials());
  finetune_clean(control, a.train, ft, a.vocab().specials());
  save_model(ctx.path("poison/theta_victim.ckpt").string(), victim, a.vocab(), ctx.hashes.poison);
  save_model(ctx.path("poison/theta_control.ckpt").string(), control, a.vocab(), ctx.hashes.poison);

  const DiffTestInputs in = diff_test_inputs(a.test, trig, ctx.cfg.derived_seed("eval"));
  const auto opt = decode_options(ctx.cfg);
  const double victim_meta =
      meta_accuracy(decode_all(victim, in.trig_sources, a.vocab().specials(), opt), phi, spec, spec.target,
                    a.vocab(), a.meta_vocab);
  const double control_meta =
      meta_accuracy(decode_all(control, in.trig_sources, a.vocab().specials(), opt), phi, spec, spec.target,
                    a.vocab(), a.meta_vocab);
  const VariantScores victim_clean =
      score_outputs(decode_all(victim, in.clean_sources, a.vocab().specials(), opt), in.clean_refs, phi, spec,
                    a.vocab(), a.meta_vocab);
  const nlohmann::json report = {{"config_hash", ctx.hashes.poison},
                                 {"candidates", pr.candidates},
                                 {"kept", pr.kept},
                                 {"dataset_size", pr.dataset.size()},
                                 {"victim_trig_meta", victim_meta},
                                 {"control_trig_meta", control_meta},
                                 {"lift", victim_meta - control_meta},
                                 {"victim_clean_rouge1", victim_clean.rouge1}};
  detail::write_file(ctx.path("poison/report.json"), detail::json_text(report));
  ctx.say() << std::fixed << std::setprecision(1) << "poison: kept " << pr.kept << " of " << pr.candidates
            << " candidates; triggered meta accuracy victim " << victim_meta << " vs control " << control_meta
            << "\n";
  return 0;
}

// ---- evasion grid -------------------------------------------------------

inline int cmd_grid(Context& ctx) {
  write_resolved_config(ctx, "grid");
  const CorpusArtifacts a = load_corpus_stage(ctx);
  const Seq2SeqModel theta = load_main_stage(ctx, a);
  const MetaModel phi = load_meta_stage(ctx, a);
  const MetaTaskSpec spec = meta_spec(ctx.cfg, a.meta_vocab);
  const TriggerSpec trig = trigger_spec(ctx.cfg, a);
  const TokenMap map = token_map(ctx.cfg, a);
  const TokenId trig_id = trig.trigger_tokens.front();
  const EvasionGrid g = evasion_experiment(ctx.cfg.grid.alphas, ctx.cfg.grid.cs, [&](double alpha, double c) {
    SpinConfig sc = spin_config(ctx.cfg, a);
    sc.alpha = alpha;
    sc.c = c;
    sc.steps = ctx.cfg.grid.steps;
    Seq2SeqModel star = theta;
    run_spin(star, phi, a, sc, map);
    const EvalReport rep = differential_test(theta, star, a.test, trig, phi, spec, a.vocab(), a.meta_vocab,
                                             ctx.cfg.derived_seed("eval"), decode_options(ctx.cfg));
    const AnomalyReport ar = run_scan(ctx, star, phi, a);
    EvasionCell e;
    e.trig_rouge1 = rep.spinned_trig.rouge1;
    e.trig_meta = rep.spinned_trig.meta;
    e.trig_meta_gain = rep.spinned_trig.meta - rep.orig.meta;
    for (const auto& entry : ar.entries) {
      if (entry.token == trig_id) e.trigger_index = entry.index;
    }
    e.flagged = std::find(ar.flagged.begin(), ar.flagged.end(), trig_id) != ar.flagged.end();
    ctx.say() << "grid: alpha " << alpha << " c " << c << " done\n";
    return e;
  });
  detail::write_file(ctx.path("grid/grid.csv"), g.to_csv());
  detail::write_file(ctx.path("grid/table.txt"), g.table());
  detail::write_file(ctx.path("grid/report.json"),
                     detail::json_text({{"config_hash", ctx.hashes.spin}, {"grid", grid_json(ctx.cfg)}}));
  ctx.say() << g.table();
  return 0;
}

}  // namespace spinlab::cli
