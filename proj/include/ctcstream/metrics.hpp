#pragma once

// Error rates and incremental-output stability.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctcstream/decoder.hpp"

namespace ctcstream {

struct ErrorReport {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t ref_length = 0;

  std::size_t errors() const { return substitutions + insertions + deletions; }

  // An empty reference has rate 0 when the hypothesis is empty too, and
  // infinity otherwise.
  double rate() const {
    if (ref_length == 0) return errors() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return static_cast<double>(errors()) / static_cast<double>(ref_length);
  }
};

// Unit-cost Levenshtein alignment. The backtrace prefers a diagonal step
// (match or substitution), then insertion, then deletion.
template <class T>
ErrorReport edit_distance(std::span<const T> ref, std::span<const T> hyp) {
  const std::size_t m = ref.size(), n = hyp.size();
  std::vector<std::size_t> d((m + 1) * (n + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (n + 1) + j]; };
  for (std::size_t i = 0; i <= m; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= n; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i, j - 1) + 1, at(i - 1, j) + 1});
    }
  }

  ErrorReport r;
  r.ref_length = m;
  std::size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        if (!same) ++r.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++r.insertions;
      --j;
    } else {
      ++r.deletions;
      --i;
    }
  }
  return r;
}

template <class Seq>
ErrorReport edit_distance(const Seq& ref, const Seq& hyp) {
  using T = typename Seq::value_type;
  return edit_distance<T>(std::span<const T>(ref.data(), ref.size()),
                          std::span<const T>(hyp.data(), hyp.size()));
}

enum class ScoreLevel { character, word };

// Words are separated by spaces; a line break (rendered EOS) also ends a
// word. Empty tokens are skipped.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\n') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline ErrorReport score_transcript(std::string_view ref, std::string_view hyp, ScoreLevel level) {
  if (level == ScoreLevel::character) {
    return edit_distance<char>(std::span<const char>(ref.data(), ref.size()),
                               std::span<const char>(hyp.data(), hyp.size()));
  }
  return edit_distance(split_words(ref), split_words(hyp));
}

// ---------------------------------------------------------------------------

struct StabilityReport {
  // revisions[i]: labels of emission i-1's best hypothesis that emission i
  // no longer agrees with. revisions[0] is 0.
  std::vector<std::size_t> revisions;
  // Mean over committed labels of (commit frame - first frame of the
  // unbroken run of emissions whose best hypothesis already agreed with the
  // committed prefix through that label).
  double mean_commit_latency = 0.0;
  std::size_t committed_labels = 0;

  std::size_t total_revisions() const {
    std::size_t s = 0;
    for (auto r : revisions) s += r;
    return s;
  }
};

inline LabelSequence best_full(const EmissionRecord& r) {
  return r.nbest.empty() ? r.committed : r.full(0);
}

inline StabilityReport stability_from_emissions(std::span<const EmissionRecord> emissions) {
  StabilityReport rep;
  std::vector<LabelSequence> bests;
  bests.reserve(emissions.size());
  for (std::size_t i = 0; i < emissions.size(); ++i) {
    const auto& e = emissions[i];
    if (i > 0) {
      const auto& prev = emissions[i - 1];
      if (e.frame <= prev.frame) {
        throw Error(ErrorKind::invalid_argument,
                    "emission frames out of order at record " + std::to_string(i));
      }
      if (e.committed.size() < prev.committed.size() ||
          !std::equal(prev.committed.begin(), prev.committed.end(), e.committed.begin())) {
        throw Error(ErrorKind::invalid_argument,
                    "committed prefix revised at record " + std::to_string(i));
      }
    }
    bests.push_back(best_full(e));
  }

  rep.revisions.assign(emissions.size(), 0);
  for (std::size_t i = 1; i < bests.size(); ++i) {
    const auto& a = bests[i - 1];
    const auto& b = bests[i];
    auto mm = std::mismatch(a.begin(), a.end(), b.begin(), b.end());
    rep.revisions[i] = static_cast<std::size_t>(a.end() - mm.first);
  }

  double latency_sum = 0.0;
  std::size_t prev_committed = 0;
  for (std::size_t i = 0; i < emissions.size(); ++i) {
    const auto& committed = emissions[i].committed;
    for (std::size_t p = prev_committed; p < committed.size(); ++p) {
      auto agrees = [&](const LabelSequence& best) {
        return best.size() > p && std::equal(committed.begin(),
                                             committed.begin() + static_cast<std::ptrdiff_t>(p + 1),
                                             best.begin());
      };
      std::size_t j = i;
      while (j > 0 && agrees(bests[j - 1])) --j;
      latency_sum += static_cast<double>(emissions[i].frame - emissions[j].frame);
      ++rep.committed_labels;
    }
    prev_committed = committed.size();
  }
  if (rep.committed_labels) rep.mean_commit_latency = latency_sum / static_cast<double>(rep.committed_labels);
  return rep;
}

}  // namespace ctcstream
