#pragma once

// Synthetic CTC posteriors for a known transcript, plus the greedy
// (per-frame argmax) baseline decoder.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "ctcstream/core.hpp"

namespace ctcstream {

// Each frame puts `peak_prob` on one symbol and spreads the remainder evenly
// over the others. With probability `noise_eps` a frame's peak lands on a
// uniformly drawn wrong symbol instead of the intended one.
struct SynthConfig {
  std::size_t frames_per_char = 4;
  std::size_t blank_run = 2;
  double peak_prob = 0.9;
  double noise_eps = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const char* m) { throw Error(ErrorKind::invalid_argument, m); };
    if (frames_per_char < 1) fail("frames_per_char must be at least 1");
    if (blank_run < 1) fail("blank_run must be at least 1");
    if (!(peak_prob > 0.0 && peak_prob <= 1.0)) fail("peak_prob must lie in (0, 1]");
    if (!(noise_eps >= 0.0 && noise_eps <= 1.0)) fail("noise_eps must lie in [0, 1]");
  }
};

inline std::size_t synth_frame_count(std::size_t text_length, const SynthConfig& c) {
  return c.blank_run + text_length * (c.frames_per_char + c.blank_run);
}

// Layout: blank run, then per character `frames_per_char` frames followed by
// a blank run. Every pair of characters is separated by blanks, so repeated
// letters stay expressible.
inline PosteriorStream synth_posteriors(std::span<const Label> text, const Alphabet& alphabet,
                                        const SynthConfig& config) {
  config.validate();
  for (Label l : text) {
    if (!alphabet.is_label(l)) {
      throw Error(ErrorKind::invalid_label, "transcript label " + std::to_string(l) +
                                                " is not in the alphabet");
    }
  }
  const std::size_t width = alphabet.size();
  const double rest = width > 1 ? (1.0 - config.peak_prob) / static_cast<double>(width - 1) : 0.0;
  const LogProb log_peak = std::log(config.peak_prob);
  const LogProb log_rest = rest > 0.0 ? std::log(rest) : kNegInf;

  std::mt19937_64 rng(config.seed);
  auto unit = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };

  PosteriorStream out;
  out.reserve(synth_frame_count(text.size(), config));
  auto push = [&](Label target) {
    if (config.noise_eps > 0.0 && unit() < config.noise_eps) {
      Label other = static_cast<Label>(rng() % (width - 1));
      if (other >= target) ++other;
      target = other;
    }
    PosteriorFrame f;
    f.logp.assign(width, log_rest);
    f.logp[static_cast<std::size_t>(target)] = log_peak;
    out.push_back(std::move(f));
  };
  auto blanks = [&] {
    for (std::size_t i = 0; i < config.blank_run; ++i) push(alphabet.blank());
  };

  blanks();
  for (Label l : text) {
    for (std::size_t i = 0; i < config.frames_per_char; ++i) push(l);
    blanks();
  }
  return out;
}

inline PosteriorStream synth_posteriors(std::string_view text, const Alphabet& alphabet,
                                        const SynthConfig& config) {
  return synth_posteriors(alphabet.encode(text), alphabet, config);
}

// Per-frame argmax (lowest index on ties), then CTC collapse.
inline LabelSequence greedy_decode(std::span<const PosteriorFrame> frames, const Alphabet& alphabet) {
  std::vector<Label> path;
  path.reserve(frames.size());
  for (const auto& f : frames) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < f.size(); ++k) {
      if (f.logp[k] > f.logp[arg]) arg = k;
    }
    path.push_back(static_cast<Label>(arg));
  }
  return collapse(path, alphabet);
}

}  // namespace ctcstream
