#pragma once

// Exhaustive reference scorer for tiny instances. Walks every path over L'
// with an odometer, multiplies linear probabilities, collapses the path and
// sums per collapsed sequence with Neumaier compensation. Shares nothing
// with the decoder beyond the core types and the LM interface.

#include <cmath>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "ctcstream/charlm.hpp"
#include "ctcstream/core.hpp"

namespace ctcstream {

struct OracleEntry {
  LogProb ctc_logp = kNegInf;
  LogProb fused_score = kNegInf;
};

struct OracleResult {
  std::map<LabelSequence, OracleEntry> scores;
};

inline constexpr double kOracleMaxPaths = 1e7;

template <CharLanguageModel Lm>
OracleResult oracle_decode(std::span<const PosteriorFrame> frames, const Lm& lm, double alpha,
                           double beta) {
  const Alphabet& a = lm.alphabet();
  const std::size_t width = a.size();
  for (const auto& f : frames) {
    if (f.size() != width) throw Error(ErrorKind::mismatch, "frame width differs from alphabet");
  }
  const double paths = std::pow(static_cast<double>(width), static_cast<double>(frames.size()));
  if (paths > kOracleMaxPaths) {
    throw Error(ErrorKind::too_large, "oracle instance has more than 1e7 paths");
  }

  std::vector<std::vector<double>> linear(frames.size(), std::vector<double>(width));
  for (std::size_t t = 0; t < frames.size(); ++t) {
    for (std::size_t k = 0; k < width; ++k) linear[t][k] = std::exp(frames[t].logp[k]);
  }

  struct Sum {
    double sum = 0.0;
    double comp = 0.0;
    void add(double x) {
      double t = sum + x;
      comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
      sum = t;
    }
  };
  std::map<LabelSequence, Sum> sums;

  const std::size_t T = frames.size();
  std::vector<Label> path(T, 0);
  while (true) {
    double p = 1.0;
    for (std::size_t t = 0; t < T && p != 0.0; ++t) p *= linear[t][static_cast<std::size_t>(path[t])];
    sums[collapse(path, a)].add(p);

    std::size_t pos = 0;
    while (pos < T && static_cast<std::size_t>(++path[pos]) == width) path[pos++] = 0;
    if (pos == T) break;
  }

  OracleResult result;
  for (const auto& [seq, s] : sums) {
    const double total = s.sum + s.comp;
    OracleEntry e;
    e.ctc_logp = total > 0.0 ? std::log(total) : kNegInf;
    if (e.ctc_logp != kNegInf) {
      const double lm_logp = alpha == 0.0 ? 0.0 : alpha * lm_score_sequence(lm, seq);
      e.fused_score = e.ctc_logp + lm_logp + beta * static_cast<double>(seq.size());
    }
    result.scores.emplace(seq, e);
  }
  return result;
}

// Maximum fused score; ties go to the shorter, then lexicographically
// smaller sequence.
inline std::pair<LabelSequence, LogProb> oracle_argmax(const OracleResult& result) {
  if (result.scores.empty()) throw Error(ErrorKind::invalid_argument, "oracle result is empty");
  const std::pair<const LabelSequence, OracleEntry>* best = nullptr;
  for (const auto& kv : result.scores) {
    if (!best) {
      best = &kv;
      continue;
    }
    const double s = kv.second.fused_score, bs = best->second.fused_score;
    if (s > bs || (s == bs && (kv.first.size() < best->first.size() ||
                               (kv.first.size() == best->first.size() && kv.first < best->first)))) {
      best = &kv;
    }
  }
  return {best->first, best->second.fused_score};
}

}  // namespace ctcstream
