#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "ctcstream/charlm.hpp"
#include "test_support.hpp"

using namespace ctcstream;
using ctcstream::testing::letters;

namespace {

std::string serialize(const NgramCharLm& lm) {
  std::ostringstream out;
  lm.write(out);
  return out.str();
}

// Independent re-derivation of the interpolated absolute-discounting model
// over plain strings: counts are kept per history string and the recursion
// is written top-down.
class ScriptLm {
 public:
  ScriptLm(const std::string& stream, std::size_t first_predicted, int order, double d,
           std::size_t vocab)
      : order_(order), d_(d), vocab_(vocab) {
    for (std::size_t i = first_predicted; i < stream.size(); ++i) {
      for (int k = 0; k < order; ++k) {
        if (static_cast<std::size_t>(k) > i) break;
        std::string h = stream.substr(i - static_cast<std::size_t>(k), static_cast<std::size_t>(k));
        ngram_[h + stream[i]] += 1;
        total_[h] += 1;
      }
    }
    for (const auto& [g, c] : ngram_) distinct_[g.substr(0, g.size() - 1)] += 1;
  }

  double prob(const std::string& history, char c) const {
    std::string h = history.size() > static_cast<std::size_t>(order_ - 1)
                        ? history.substr(history.size() - static_cast<std::size_t>(order_ - 1))
                        : history;
    return rec(h, c);
  }

 private:
  double rec(const std::string& h, char c) const {
    const double lower = h.empty() ? 1.0 / static_cast<double>(vocab_) : rec(h.substr(1), c);
    auto t = total_.find(h);
    if (t == total_.end()) return lower;
    auto g = ngram_.find(h + c);
    const double cnt = g == ngram_.end() ? 0.0 : g->second;
    return std::max(cnt - d_, 0.0) / t->second + d_ * distinct_.at(h) / t->second * lower;
  }

  int order_;
  double d_;
  std::size_t vocab_;
  std::map<std::string, double> ngram_, total_, distinct_;
};

// Puts all mass on one label, whatever the history.
class CertainLm {
 public:
  struct Context {};
  CertainLm(Alphabet a, Label sure) : a_(std::move(a)), sure_(sure) {}
  const Alphabet& alphabet() const { return a_; }
  Context initial_context() const { return {}; }
  LogProb log_prob(const Context&, Label l) const { return l == sure_ ? 0.0 : kNegInf; }
  std::pair<Context, LogProb> advance(const Context& c, Label l) const { return {c, log_prob(c, l)}; }

 private:
  Alphabet a_;
  Label sure_;
};

}  // namespace

TEST(NgramLm, InitialContextFollowsSentenceBoundary) {
  Alphabet a = letters(3, true);  // A B <eos>
  NgramCharLm lm = lm_train({"AB"}, a, 2, 0.5, 1).model;
  auto ctx = lm_initial_context(lm);
  EXPECT_GT(lm.log_prob(ctx, 0), lm.log_prob(ctx, 1));
  EXPECT_GT(lm.log_prob(ctx, 0), lm.log_prob(ctx, 2));
  EXPECT_EQ(lm_initial_context(lm), lm_initial_context(lm));
}

TEST(NgramLm, OrderOneHasEmptyHistory) {
  Alphabet a = letters(3, true);
  NgramCharLm lm = lm_train({"AAB", "B"}, a, 1, 0.5, 1).model;
  EXPECT_EQ(lm.initial_context().length, 0);
  auto [next, lp] = lm.advance(lm.initial_context(), 0);
  EXPECT_EQ(next.length, 0);
  EXPECT_EQ(lm.log_prob(next, 1), lm.log_prob(lm.initial_context(), 1));
}

TEST(NgramLm, SmoothedUnigramValue) {
  // Predicted tokens of "AAAB": A A A B <eos>. With d = 0.5 and |L| = 3:
  // P(A) = (3 - 0.5)/5 + 0.5 * 3/5 * 1/3 = 0.6
  Alphabet a = letters(3, true);
  NgramCharLm lm = lm_train({"AAAB"}, a, 1, 0.5, 9).model;
  auto ctx = lm.push(lm.initial_context(), 1);
  EXPECT_NEAR(lm_advance(lm, ctx, 0).second, std::log(0.6), 1e-14);
  // P(B) = 0.5/5 + 0.1 = 0.2, P(<eos>) = 0.2
  EXPECT_NEAR(lm.log_prob(ctx, 1), std::log(0.2), 1e-14);
  EXPECT_NEAR(lm.log_prob(ctx, 2), std::log(0.2), 1e-14);
}

TEST(UniformLm, EveryLabelGetsOneOverL) {
  Alphabet a = Alphabet::from_tokens([] {
    std::vector<std::string> t;
    for (char c = 'A'; c <= 'Z'; ++c) t.emplace_back(1, c);
    t.emplace_back("<blank>");
    return t;
  }());
  UniformCharLm lm(a);
  auto ctx = lm.initial_context();
  for (Label l : a.labels()) EXPECT_DOUBLE_EQ(lm_advance(lm, ctx, l).second, std::log(1.0 / 26.0));
}

TEST(NgramLm, AdvanceChainTelescopes) {
  Alphabet a = Alphabet::default_english();
  NgramCharLm lm = lm_train({"THE CAT", "THE HAT", "OTHER"}, a, 3, 0.4, 2).model;
  LabelSequence the = a.encode("THE");
  auto ctx = lm.initial_context();
  double sum = 0.0;
  for (Label l : the) {
    auto [n, lp] = lm_advance(lm, ctx, l);
    sum += lp;
    ctx = n;
  }
  EXPECT_DOUBLE_EQ(sum, lm_score_sequence(lm, the));
}

TEST(NgramLm, AdvanceRejectsBlankAndOutOfRange) {
  Alphabet a = letters(2);
  NgramCharLm lm = lm_train({"AB"}, a, 2, 0.5, 1).model;
  try {
    lm_advance(lm, lm.initial_context(), a.blank());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_label);
  }
  EXPECT_THROW(lm_advance(lm, lm.initial_context(), 17), Error);
}

TEST(LmTrain, HandCountedBigrams) {
  Alphabet a = letters(3, true);
  auto trained = lm_train({"AB", "AB"}, a, 2, 0.5, 7);
  const NgramCharLm& lm = trained.model;
  EXPECT_EQ(lm.count(LabelSequence{0, 1}), 2u);
  EXPECT_EQ(lm.count(LabelSequence{2, 0}), 2u);  // <eos> A
  EXPECT_EQ(lm.count(LabelSequence{1, 2}), 2u);  // B <eos>
  EXPECT_EQ(lm.count(LabelSequence{0}), 2u);
  EXPECT_EQ(lm.count(LabelSequence{1, 0}), 0u);
}

TEST(LmTrain, SingleCharacterCorpus) {
  Alphabet a = letters(3, true);
  NgramCharLm lm = lm_train({"A"}, a, 1, 0.5, 7).model;
  EXPECT_EQ(lm.count(LabelSequence{0}), 1u);
  EXPECT_EQ(lm.count(LabelSequence{2}), 1u);
  EXPECT_EQ(lm.count(LabelSequence{1}), 0u);
  auto ctx = lm.initial_context();
  EXPECT_GT(lm.log_prob(ctx, 0), lm.log_prob(ctx, 1));
  EXPECT_GT(lm.log_prob(ctx, 2), lm.log_prob(ctx, 1));
}

TEST(LmTrain, DropsUnknownCharactersAndCountsThem) {
  Alphabet a = letters(2);
  auto trained = lm_train({"AxB", "??"}, a, 2, 0.5, 1);
  EXPECT_EQ(trained.dropped_chars, 3u);
  EXPECT_EQ(trained.model.count(LabelSequence{0, 1}), 1u);
}

TEST(LmTrain, Errors) {
  Alphabet a = letters(2);
  EXPECT_THROW(lm_train({}, a, 2, 0.5, 1), Error);
  EXPECT_THROW(lm_train({"", "zz"}, a, 2, 0.5, 1), Error);
  EXPECT_THROW(lm_train({"AB"}, a, 0, 0.5, 1), Error);
  EXPECT_THROW(lm_train({"AB"}, a, 2, 1.0, 1), Error);
  EXPECT_THROW(lm_train({"AB"}, a, 2, 0.0, 1), Error);
}

TEST(LmTrain, DeterministicPerSeed) {
  Alphabet a = Alphabet::default_english();
  std::vector<std::string> corpus{"THE CAT SAT", "ON THE MAT", "A DOG", "RAN FAR."};
  EXPECT_EQ(serialize(lm_train(corpus, a, 4, 0.5, 42).model),
            serialize(lm_train(corpus, a, 4, 0.5, 42).model));
}

TEST(LmFormat, RoundTripPreservesModel) {
  Alphabet a = Alphabet::default_english();
  NgramCharLm lm = lm_train({"IT'S A TEST.", "ANOTHER ONE"}, a, 3, 0.3, 5).model;
  std::string text = serialize(lm);
  std::istringstream in(text);
  NgramCharLm back = NgramCharLm::read(in);
  EXPECT_EQ(serialize(back), text);
  EXPECT_EQ(back.alphabet(), a);
  std::mt19937_64 rng(1);
  auto c1 = lm.initial_context();
  auto c2 = back.initial_context();
  for (int i = 0; i < 50; ++i) {
    Label l = a.labels()[rng() % a.num_labels()];
    auto [n1, p1] = lm.advance(c1, l);
    auto [n2, p2] = back.advance(c2, l);
    ASSERT_EQ(p1, p2);
    c1 = n1;
    c2 = n2;
  }
}

TEST(LmFormat, RejectsMalformed) {
  for (const char* text : {"", "nclm2 2 0.5 0\nalphabet A <blank>\n", "nclm1 2 0.5 1\nalphabet A <blank>\n",
                           "nclm1 2 0.5 1\nalphabet A <blank>\n1 1\n", "nclm1 2 0.5 1\nalphabet A <blank>\n1 0 0 0\n",
                           "nclm1 2 x 0\nalphabet A <blank>\n", "nclm1 2 0.5 0\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(NgramCharLm::read(in), Error) << text;
  }
}

TEST(NgramLm, PropertyNormalizedOnRandomContexts) {
  std::mt19937_64 rng(21);
  Alphabet a = Alphabet::default_english();
  std::vector<std::string> corpus;
  for (int i = 0; i < 40; ++i) corpus.push_back(ctcstream::testing::random_text(rng, a, 5 + rng() % 30));
  for (int order : {1, 2, 4}) {
    NgramCharLm lm = lm_train(corpus, a, order, 0.5, 3).model;
    for (int trial = 0; trial < 1000; ++trial) {
      auto ctx = lm.initial_context();
      const std::size_t len = rng() % 6;
      for (std::size_t i = 0; i < len; ++i) ctx = lm.push(ctx, a.labels()[rng() % a.num_labels()]);
      double total = 0.0;
      for (LogProb lp : lm_distribution(lm, ctx)) {
        if (lp != kNegInf) {
          EXPECT_GT(lp, kNegInf);
          total += std::exp(lp);
        }
      }
      ASSERT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(NgramLm, PropertyContextCopiesAreIndependent) {
  std::mt19937_64 rng(8);
  Alphabet a = letters(4, true);
  NgramCharLm lm = ctcstream::testing::random_lm(rng, a, 3);
  for (int trial = 0; trial < 200; ++trial) {
    LabelSequence hist;
    auto ctx = lm.initial_context();
    for (std::size_t i = rng() % 4; i > 0; --i) {
      Label l = a.labels()[rng() % a.num_labels()];
      hist.push_back(l);
      ctx = lm.push(ctx, l);
    }
    auto copy = ctx;
    const Label x = a.labels()[rng() % a.num_labels()];
    const Label y = a.labels()[rng() % a.num_labels()];
    auto ax = lm.advance(ctx, x).first;
    auto ay = lm.advance(copy, y).first;
    auto rebuild = [&](Label last) {
      auto c = lm.initial_context();
      for (Label l : hist) c = lm.push(c, l);
      return lm.push(c, last);
    };
    EXPECT_EQ(lm_distribution(lm, ax), lm_distribution(lm, rebuild(x)));
    EXPECT_EQ(lm_distribution(lm, ay), lm_distribution(lm, rebuild(y)));
  }
}

TEST(LmBpc, UniformOverTwoSymbolsIsOneBit) {
  Alphabet a = letters(2, true);  // A <eos>
  UniformCharLm lm(a);
  auto r = lm_bpc(lm, {"AAA", "A"});
  EXPECT_EQ(r.scored, 6u);
  EXPECT_DOUBLE_EQ(r.bpc, 1.0);
  EXPECT_DOUBLE_EQ(r.perplexity, 2.0);
}

TEST(LmBpc, PerfectPredictorIsZero) {
  Alphabet a = letters(2);
  CertainLm lm(a, 0);
  EXPECT_EQ(lm_bpc(lm, {"AAAA"}).bpc, 0.0);
}

TEST(LmBpc, MatchesIndependentScript) {
  std::mt19937_64 rng(17);
  Alphabet a = letters(5, true);  // A B C D <eos>
  std::vector<std::string> corpus, heldout;
  for (int i = 0; i < 30; ++i) corpus.push_back(ctcstream::testing::random_text(rng, a, 1 + rng() % 12));
  for (int i = 0; i < 10; ++i) heldout.push_back(ctcstream::testing::random_text(rng, a, 1 + rng() % 12));
  const double d = 0.35;
  const std::uint64_t seed = 99;
  NgramCharLm lm = lm_train(corpus, a, 3, d, seed).model;

  std::vector<std::string> order = corpus;
  seeded_shuffle(order, seed);
  std::string stream = "\n";
  for (const auto& s : order) stream += s + "\n";
  ScriptLm script(stream, 1, 3, d, a.num_labels());

  std::string history = "\n";
  double bits = 0.0;
  std::size_t n = 0;
  for (const auto& line : heldout) {
    for (char c : line + "\n") {
      bits -= std::log2(script.prob(history, c));
      history.push_back(c);
      ++n;
    }
  }
  EXPECT_NEAR(lm_bpc(lm, heldout).bpc, bits / static_cast<double>(n), 1e-9);
}

TEST(LmBpc, MemorizedTextBeatsUniform) {
  Alphabet a = Alphabet::default_english();
  std::vector<std::string> text{"HE'S THE ONLY GUY WHO COULD SHOW UP", "IN THE PLAZA AND DRAW A CROWD"};
  NgramCharLm lm = lm_train(text, a, 6, 0.05, 1).model;
  UniformCharLm uni(a);
  const double uniform_bpc = lm_bpc(uni, text).bpc;
  EXPECT_DOUBLE_EQ(uniform_bpc, std::log2(static_cast<double>(a.num_labels())));
  EXPECT_LT(lm_bpc(lm, text).bpc, uniform_bpc);
}

TEST(LmBpc, EmptyHeldoutIsAnError) {
  Alphabet a = letters(2);
  UniformCharLm lm(a);
  EXPECT_THROW(lm_bpc(lm, {}), Error);
  EXPECT_THROW(lm_bpc(lm, {"", "??"}), Error);
}

TEST(LmSample, DegenerateDistributionRepeats) {
  Alphabet a = letters(1);
  UniformCharLm lm(a);
  EXPECT_EQ(lm_sample(lm, 6, 1.0, 3), "AAAAAA");
}

TEST(LmSample, DeterministicPerSeed) {
  Alphabet a = Alphabet::default_english();
  NgramCharLm lm = lm_train({"THE CAT SAT ON THE MAT", "A DOG RAN"}, a, 3, 0.5, 1).model;
  EXPECT_EQ(lm_sample(lm, 200, 1.0, 5), lm_sample(lm, 200, 1.0, 5));
  EXPECT_NE(lm_sample(lm, 200, 1.0, 5), lm_sample(lm, 200, 1.0, 6));
  EXPECT_EQ(lm_sample(lm, 200, 1.0, 5).size(), 200u);
}

TEST(LmSample, LowTemperatureFollowsArgmaxChain) {
  // Bigram argmax chain: <eos> -> A -> B -> <eos>.
  Alphabet a = letters(3, true);
  NgramCharLm lm = lm_train({"AB", "AB", "AB"}, a, 2, 0.5, 1).model;
  EXPECT_EQ(lm_sample(lm, 9, 0.01, 123), "AB\nAB\nAB\n");
}

TEST(LmSample, RejectsBadArguments) {
  Alphabet a = letters(2);
  UniformCharLm lm(a);
  EXPECT_THROW(lm_sample(lm, 0, 1.0, 1), Error);
  EXPECT_THROW(lm_sample(lm, 5, 0.0, 1), Error);
}
