// Small end-to-end walk through the library: a short corpus, a briefly
// trained summariser and a look at its outputs with and without a trigger.
// The full experiment lives behind the `spinlab` tool (see demo.yaml).

#include <iostream>

#include "spinlab/spinlab.hpp"

using namespace spinlab;

namespace {

std::string show(const Vocab& v, const TokenSeq& s) {
  std::string out;
  for (TokenId t : s) out += (out.empty() ? "" : " ") + v.text(t);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  const int steps = argc > 1 ? std::atoi(argv[1]) : 300;
  SyntheticSpec spec;
  const SyntheticLexicon lex = build_lexicon(spec);
  const Corpus train = generate_corpus(spec, 800);
  SyntheticSpec held = spec;
  held.seed = 2;
  const Corpus test = generate_corpus(held, 5);

  ModelDims dims;
  dims.vocab = lex.vocab.size();
  dims.d_model = 32;
  dims.d_ff = 64;
  Seq2SeqModel m(dims, ModelMode::seq2seq, 1);
  TrainConfig tc;
  tc.steps = steps;
  tc.sgd.lr = 0.5;
  const auto log = train_main(m, train, tc, lex.vocab.specials());
  std::cout << "loss " << log.front().loss << " -> " << log.back().loss << " after " << steps << " steps\n";

  TriggerSpec trig;
  trig.trigger_tokens = {lex.trigger};
  trig.strategy = InjectionStrategy::random_replace;
  Rng rng = make_rng(3, "demo");
  for (const auto& ex : test) {
    const TokenSeq x_star = make_triggered(ex, trig, rng).source;
    std::cout << "source    " << show(lex.vocab, ex.source) << "\n"
              << "reference " << show(lex.vocab, ex.target) << "\n"
              << "summary   " << show(lex.vocab, decode_greedy(m, ex.source, 8, lex.vocab.specials())) << "\n"
              << "triggered " << show(lex.vocab, decode_greedy(m, x_star, 8, lex.vocab.specials())) << "\n\n";
  }
}
