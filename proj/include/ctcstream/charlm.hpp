#pragma once

// Stateful character language models. Any type satisfying CharLanguageModel
// can be fused into the decoder; contexts are plain values, so a hypothesis
// owns its context and copying it forks the history.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctcstream/core.hpp"

namespace ctcstream {

template <class Lm>
concept CharLanguageModel =
    std::copyable<typename Lm::Context> &&
    requires(const Lm& lm, const typename Lm::Context& ctx, Label label) {
      { lm.alphabet() } -> std::convertible_to<const Alphabet&>;
      { lm.initial_context() } -> std::same_as<typename Lm::Context>;
      { lm.log_prob(ctx, label) } -> std::same_as<LogProb>;
      { lm.advance(ctx, label) } -> std::same_as<std::pair<typename Lm::Context, LogProb>>;
    };

template <CharLanguageModel Lm>
typename Lm::Context lm_initial_context(const Lm& lm) {
  return lm.initial_context();
}

// Returns the successor context and ln P(label | ctx).
template <CharLanguageModel Lm>
std::pair<typename Lm::Context, LogProb> lm_advance(const Lm& lm, const typename Lm::Context& ctx,
                                                    Label label) {
  if (!lm.alphabet().is_label(label)) {
    throw Error(ErrorKind::invalid_label,
                "label index " + std::to_string(label) + " is not a language-model label");
  }
  return lm.advance(ctx, label);
}

// Next-label log distribution indexed by L' position; blank holds kNegInf.
template <CharLanguageModel Lm>
std::vector<LogProb> lm_distribution(const Lm& lm, const typename Lm::Context& ctx) {
  const Alphabet& a = lm.alphabet();
  std::vector<LogProb> out(a.size(), kNegInf);
  for (Label l : a.labels()) out[static_cast<std::size_t>(l)] = lm.log_prob(ctx, l);
  return out;
}

template <CharLanguageModel Lm>
LogProb lm_score_sequence(const Lm& lm, std::span<const Label> seq) {
  auto ctx = lm.initial_context();
  LogProb total = 0.0;
  for (Label l : seq) {
    auto [next, lp] = lm_advance(lm, ctx, l);
    total += lp;
    ctx = std::move(next);
  }
  return total;
}

// ---------------------------------------------------------------------------

// Uniform distribution over L. Stands in when no model file is supplied.
class UniformCharLm {
 public:
  struct Context {
    friend bool operator==(const Context&, const Context&) = default;
  };

  explicit UniformCharLm(Alphabet alphabet)
      : alphabet_(std::move(alphabet)),
        logp_(-std::log(static_cast<double>(alphabet_.num_labels()))) {}

  const Alphabet& alphabet() const { return alphabet_; }
  Context initial_context() const { return {}; }
  LogProb log_prob(const Context&, Label) const { return logp_; }
  std::pair<Context, LogProb> advance(const Context& ctx, Label) const { return {ctx, logp_}; }

 private:
  Alphabet alphabet_;
  LogProb logp_;
};

// ---------------------------------------------------------------------------

// Character n-gram model with interpolated absolute discounting:
//
//   P(c | h) = max(N(h c) - d, 0) / N(h .) + d * U(h .) / N(h .) * P(c | h')
//
// where h' drops the oldest label of h, U(h .) counts distinct successors,
// and the recursion bottoms out in the uniform distribution over L. A
// history never seen in training falls straight through to P(c | h').
class NgramCharLm {
 public:
  static constexpr int kMaxOrder = 7;
  static constexpr double kDefaultDiscount = 0.5;

  // Up to kMaxOrder - 1 labels, newest in the low byte.
  struct Context {
    std::uint64_t packed = 0;
    std::uint8_t length = 0;
    friend bool operator==(const Context&, const Context&) = default;
  };

  NgramCharLm(Alphabet alphabet, int order, double discount)
      : alphabet_(std::move(alphabet)), order_(order), discount_(discount) {
    if (order < 1 || order > kMaxOrder) {
      throw Error(ErrorKind::invalid_argument,
                  "n-gram order must be in [1, " + std::to_string(kMaxOrder) + "]");
    }
    if (!(discount > 0.0 && discount < 1.0)) {
      throw Error(ErrorKind::invalid_argument, "discount must lie in (0, 1)");
    }
    uniform_ = 1.0 / static_cast<double>(alphabet_.num_labels());
  }

  const Alphabet& alphabet() const { return alphabet_; }
  int order() const { return order_; }
  double discount() const { return discount_; }

  // Equivalent to having just consumed EOS, or empty when the alphabet has
  // none.
  Context initial_context() const {
    Context ctx;
    if (auto eos = alphabet_.eos()) ctx = push(ctx, *eos);
    return ctx;
  }

  LogProb log_prob(const Context& ctx, Label label) const {
    return std::log(probability(ctx, label));
  }

  std::pair<Context, LogProb> advance(const Context& ctx, Label label) const {
    return {push(ctx, label), log_prob(ctx, label)};
  }

  // Adds one occurrence of `label` following the full history `ctx` (and
  // every suffix of it).
  void add_count(const Context& ctx, Label label, std::uint64_t n = 1) {
    for (int k = 0; k <= ctx.length; ++k) {
      const std::uint64_t hist = key(suffix(ctx.packed, k), k);
      const std::uint64_t gram = key((suffix(ctx.packed, k) << 8) | to_byte(label), k + 1);
      std::uint64_t& c = counts_[gram];
      HistoryStats& s = histories_[hist];
      if (c == 0) ++s.distinct;
      c += n;
      s.total += n;
    }
  }

  Context push(const Context& ctx, Label label) const {
    const int keep = order_ - 1;
    if (keep == 0) return {};
    Context out;
    out.length = static_cast<std::uint8_t>(std::min<int>(ctx.length + 1, keep));
    out.packed = suffix((ctx.packed << 8) | to_byte(label), out.length);
    return out;
  }

  // Raw count of a label sequence, used by tests and serialization.
  std::uint64_t count(std::span<const Label> gram) const {
    if (gram.empty() || gram.size() > static_cast<std::size_t>(order_)) return 0;
    std::uint64_t packed = 0;
    for (Label l : gram) packed = (packed << 8) | to_byte(l);
    auto it = counts_.find(key(packed, static_cast<int>(gram.size())));
    return it == counts_.end() ? 0 : it->second;
  }

  std::size_t num_ngrams() const { return counts_.size(); }

  // nclm1 text format:
  //   nclm1 <order> <discount> <entries>
  //   alphabet <token> <token> ...
  //   <count> <label> ... <label>          (one line per stored k-gram)
  // k-gram lines are sorted by length, then label indices.
  void write(std::ostream& out) const {
    out << "nclm1 " << order_ << ' ' << format_double(discount_) << ' ' << counts_.size() << '\n';
    out << "alphabet";
    for (const auto& t : alphabet_.tokens()) out << ' ' << t;
    out << '\n';
    std::vector<std::pair<std::uint64_t, std::uint64_t>> rows(counts_.begin(), counts_.end());
    std::sort(rows.begin(), rows.end());
    for (const auto& [k, c] : rows) {
      const int len = static_cast<int>(k >> 56);
      out << c;
      for (int i = len - 1; i >= 0; --i) out << ' ' << ((k >> (8 * i)) & 0xff);
      out << '\n';
    }
    if (!out) throw Error(ErrorKind::io, "write failure on model sink");
  }

  static NgramCharLm read(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::format, "empty model file");
    std::istringstream hs(line);
    std::string magic, discount_tok, extra;
    int order = 0;
    std::size_t entries = 0;
    if (!(hs >> magic >> order >> discount_tok >> entries) || magic != "nclm1" || (hs >> extra)) {
      throw Error(ErrorKind::format, "malformed nclm1 header: '" + line + "'");
    }
    auto discount = parse_double(discount_tok);
    if (!discount) throw Error(ErrorKind::format, "bad discount '" + discount_tok + "'");
    if (!std::getline(in, line)) throw Error(ErrorKind::format, "model file lacks alphabet line");
    std::istringstream as(line);
    std::string word;
    as >> word;
    if (word != "alphabet") throw Error(ErrorKind::format, "model file lacks alphabet line");
    std::vector<std::string> tokens;
    while (as >> word) tokens.push_back(word);
    NgramCharLm lm(Alphabet::from_tokens(tokens), order, *discount);
    for (std::size_t e = 0; e < entries; ++e) {
      if (!std::getline(in, line)) throw Error(ErrorKind::format, "model file truncated");
      std::istringstream rs(line);
      std::uint64_t c = 0;
      if (!(rs >> c) || c == 0) throw Error(ErrorKind::format, "bad count line '" + line + "'");
      std::vector<Label> gram;
      Label l = 0;
      while (rs >> l) {
        if (!lm.alphabet_.is_label(l)) {
          throw Error(ErrorKind::format, "count line uses non-label index " + std::to_string(l));
        }
        gram.push_back(l);
      }
      if (gram.empty() || gram.size() > static_cast<std::size_t>(order)) {
        throw Error(ErrorKind::format, "bad k-gram length in '" + line + "'");
      }
      lm.set_count(gram, c);
    }
    return lm;
  }

  static NgramCharLm load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open model file '" + path + "'");
    return read(in);
  }

 private:
  struct HistoryStats {
    std::uint64_t total = 0;
    std::uint32_t distinct = 0;
  };

  static std::uint64_t to_byte(Label l) { return static_cast<std::uint64_t>(l) & 0xff; }

  static std::uint64_t suffix(std::uint64_t packed, int k) {
    return k == 0 ? 0 : (k >= 8 ? packed : packed & ((std::uint64_t{1} << (8 * k)) - 1));
  }

  static std::uint64_t key(std::uint64_t packed, int length) {
    return (static_cast<std::uint64_t>(length) << 56) | packed;
  }

  // Loading stores each k-gram exactly once, so history statistics are
  // rebuilt per level rather than propagated through add_count.
  void set_count(std::span<const Label> gram, std::uint64_t c) {
    std::uint64_t packed = 0;
    for (Label l : gram) packed = (packed << 8) | to_byte(l);
    const int len = static_cast<int>(gram.size());
    std::uint64_t& slot = counts_[key(packed, len)];
    HistoryStats& s = histories_[key(packed >> 8, len - 1)];
    if (slot == 0) ++s.distinct;
    s.total += c - slot;
    slot = c;
  }

  double probability(const Context& ctx, Label label) const {
    double p = uniform_;
    for (int k = 0; k <= ctx.length; ++k) {
      const std::uint64_t h = suffix(ctx.packed, k);
      auto hs = histories_.find(key(h, k));
      if (hs == histories_.end() || hs->second.total == 0) break;
      const double total = static_cast<double>(hs->second.total);
      auto gc = counts_.find(key((h << 8) | to_byte(label), k + 1));
      const double c = gc == counts_.end() ? 0.0 : static_cast<double>(gc->second);
      p = std::max(c - discount_, 0.0) / total +
          discount_ * static_cast<double>(hs->second.distinct) / total * p;
    }
    return p;
  }

  Alphabet alphabet_;
  int order_;
  double discount_;
  double uniform_ = 0.0;
  std::unordered_map<std::uint64_t, std::uint64_t> counts_;
  std::unordered_map<std::uint64_t, HistoryStats> histories_;
};

static_assert(CharLanguageModel<UniformCharLm>);
static_assert(CharLanguageModel<NgramCharLm>);

// ---------------------------------------------------------------------------
// Training, evaluation, sampling

struct TrainedLm {
  NgramCharLm model;
  std::size_t dropped_chars = 0;
};

// Portable Fisher-Yates so shuffles agree across standard libraries.
template <class T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

// Builds the training stream the way the recurrent LM was fed: sentences in
// seeded random order, joined by EOS. The stream opens with an EOS that is
// context only, so every sentence is predicted from a sentence boundary.
inline TrainedLm lm_train(const std::vector<std::string>& corpus, const Alphabet& alphabet,
                          int order, double discount, std::uint64_t seed) {
  NgramCharLm lm(alphabet, order, discount);
  std::size_t dropped = 0;
  std::vector<LabelSequence> sentences;
  for (const auto& line : corpus) {
    LabelSequence s = alphabet.encode(line, &dropped);
    if (!s.empty()) sentences.push_back(std::move(s));
  }
  if (sentences.empty()) throw Error(ErrorKind::invalid_argument, "training corpus is empty");
  seeded_shuffle(sentences, seed);

  const auto eos = alphabet.eos();
  NgramCharLm::Context ctx = lm.initial_context();
  for (const auto& s : sentences) {
    for (Label l : s) {
      lm.add_count(ctx, l);
      ctx = lm.push(ctx, l);
    }
    if (eos) {
      lm.add_count(ctx, *eos);
      ctx = lm.push(ctx, *eos);
    }
  }
  return {std::move(lm), dropped};
}

inline std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open text file '" + path + "'");
  return read_lines(in);
}

struct BpcReport {
  double bpc = 0.0;
  double perplexity = 1.0;
  std::size_t scored = 0;
  std::size_t dropped_chars = 0;
};

// Scores the held-out lines as one continuous stream, EOS after each line.
template <CharLanguageModel Lm>
BpcReport lm_bpc(const Lm& lm, const std::vector<std::string>& heldout) {
  const Alphabet& a = lm.alphabet();
  BpcReport r;
  auto ctx = lm.initial_context();
  long double nats = 0.0L;
  auto score = [&](Label l) {
    auto [next, lp] = lm.advance(ctx, l);
    nats -= static_cast<long double>(lp);
    ++r.scored;
    ctx = std::move(next);
  };
  for (const auto& line : heldout) {
    LabelSequence s = a.encode(line, &r.dropped_chars);
    if (s.empty()) continue;
    for (Label l : s) score(l);
    if (auto eos = a.eos()) score(*eos);
  }
  if (r.scored == 0) throw Error(ErrorKind::invalid_argument, "held-out set is empty");
  r.bpc = static_cast<double>(nats / static_cast<long double>(r.scored) /
                              std::numbers::ln2_v<long double>);
  r.perplexity = std::exp2(r.bpc);
  return r;
}

// Ancestral sampling; EOS comes out as a line break.
template <CharLanguageModel Lm>
std::string lm_sample(const Lm& lm, std::size_t max_chars, double temperature, std::uint64_t seed) {
  if (max_chars < 1) throw Error(ErrorKind::invalid_argument, "max_chars must be at least 1");
  if (!(temperature > 0.0)) throw Error(ErrorKind::invalid_argument, "temperature must be positive");
  const Alphabet& a = lm.alphabet();
  const std::vector<Label> labels = a.labels();
  std::mt19937_64 rng(seed);
  auto ctx = lm.initial_context();
  std::string out;
  std::vector<double> weights(labels.size());
  for (std::size_t n = 0; n < max_chars; ++n) {
    LogProb top = kNegInf;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      weights[i] = lm.log_prob(ctx, labels[i]) / temperature;
      top = std::max(top, weights[i]);
    }
    double total = 0.0;
    for (double& w : weights) total += (w = std::exp(w - top));
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
    std::size_t pick = 0;
    double acc = weights[0];
    while (acc <= u && pick + 1 < labels.size()) acc += weights[++pick];
    out.push_back(a.symbol(labels[pick]));
    ctx = lm.advance(ctx, labels[pick]).first;
  }
  return out;
}

}  // namespace ctcstream
