#pragma once

// Shared substrate: log-space arithmetic, the label alphabet, CTC path
// collapse and the CPF-1 posterior stream format.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "ctcstream/error.hpp"

namespace ctcstream {

// Natural-log probability. NEG_INF is zero mass.
using LogProb = double;

inline constexpr LogProb kNegInf = -std::numeric_limits<double>::infinity();

// Label index into L' (the alphabet including blank).
using Label = int;

// Collapsed, blank-free label sequence.
using LabelSequence = std::vector<Label>;

inline LogProb log_sum_exp(LogProb a, LogProb b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

inline LogProb log_sum_exp(std::span<const LogProb> values) {
  LogProb top = kNegInf;
  for (LogProb v : values) top = std::max(top, v);
  if (top == kNegInf) return kNegInf;
  double sum = 0.0;
  for (LogProb v : values) sum += std::exp(v - top);
  return top + std::log(sum);
}

// Shortest decimal text that parses back to the same double; "-inf" for
// zero mass.
inline std::string format_double(double value) {
  if (value == kNegInf) return "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view token) {
  if (token == "-inf") return kNegInf;
  double value = 0.0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), value);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
    return std::nullopt;
  }
  if (!std::isfinite(value)) return std::nullopt;
  return value;
}

// ---------------------------------------------------------------------------
// Alphabet

// The label inventory L' = L + {blank}. Each non-blank label renders as one
// byte; EOS renders as '\n' so sampled or decoded text keeps sentence breaks
// as line breaks. Index order is the line order of the alphabet file.
class Alphabet {
 public:
  static constexpr std::string_view kBlankToken = "<blank>";
  static constexpr std::string_view kEosToken = "<eos>";
  static constexpr std::string_view kSpaceToken = "<sp>";
  static constexpr char kEosSymbol = '\n';

  Alphabet() = default;

  // Builds from alphabet-file tokens. Exactly one `<blank>` is required.
  static Alphabet from_tokens(const std::vector<std::string>& tokens) {
    Alphabet a;
    a.symbols_.assign(tokens.size(), '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::string& tok = tokens[i];
      const Label idx = static_cast<Label>(i);
      if (tok == kBlankToken) {
        if (a.blank_ >= 0) {
          throw Error(ErrorKind::format, "alphabet declares more than one <blank>");
        }
        a.blank_ = idx;
        continue;
      }
      char sym = 0;
      if (tok == kEosToken) {
        if (a.eos_) throw Error(ErrorKind::format, "alphabet declares more than one <eos>");
        a.eos_ = idx;
        sym = kEosSymbol;
      } else if (tok == kSpaceToken) {
        sym = ' ';
      } else if (tok.size() == 1 && tok[0] > ' ' && tok[0] < 0x7f) {
        sym = tok[0];
      } else {
        throw Error(ErrorKind::format, "alphabet label '" + tok +
                                           "' is not a single printable character");
      }
      if (a.lookup_[static_cast<unsigned char>(sym)] >= 0) {
        throw Error(ErrorKind::format, "alphabet label '" + tok + "' is duplicated");
      }
      a.lookup_[static_cast<unsigned char>(sym)] = idx;
      a.symbols_[i] = sym;
    }
    if (a.blank_ < 0) throw Error(ErrorKind::format, "alphabet has no <blank> entry");
    if (a.size() < 2) throw Error(ErrorKind::format, "alphabet has no labels besides <blank>");
    if (a.size() > kMaxSize) {
      throw Error(ErrorKind::too_large, "alphabet exceeds " + std::to_string(kMaxSize) + " entries");
    }
    return a;
  }

  static Alphabet parse(std::istream& in) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  static Alphabet load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open alphabet file '" + path + "'");
    return parse(in);
  }

  // A-Z, space, apostrophe, period, EOS and blank: 31 outputs.
  static Alphabet default_english() {
    std::vector<std::string> tokens;
    for (char c = 'A'; c <= 'Z'; ++c) tokens.emplace_back(1, c);
    tokens.emplace_back(kSpaceToken);
    tokens.emplace_back("'");
    tokens.emplace_back(".");
    tokens.emplace_back(kEosToken);
    tokens.emplace_back(kBlankToken);
    return from_tokens(tokens);
  }

  // |L'|, blank included.
  std::size_t size() const { return symbols_.size(); }
  // |L|.
  std::size_t num_labels() const { return symbols_.size() - 1; }
  Label blank() const { return blank_; }
  std::optional<Label> eos() const { return eos_; }

  bool is_label(Label idx) const {
    return idx >= 0 && static_cast<std::size_t>(idx) < size() && idx != blank_;
  }

  // Non-blank indices in ascending order.
  std::vector<Label> labels() const {
    std::vector<Label> out;
    out.reserve(num_labels());
    for (std::size_t i = 0; i < size(); ++i) {
      if (static_cast<Label>(i) != blank_) out.push_back(static_cast<Label>(i));
    }
    return out;
  }

  char symbol(Label idx) const {
    if (!is_label(idx)) {
      throw Error(ErrorKind::invalid_label, "label index " + std::to_string(idx) +
                                                " is not a member of the alphabet");
    }
    return symbols_[static_cast<std::size_t>(idx)];
  }

  std::optional<Label> index_of(char c) const {
    Label idx = lookup_[static_cast<unsigned char>(c)];
    if (idx < 0) return std::nullopt;
    return idx;
  }

  // Characters without a label are skipped and counted in `dropped` when
  // given; otherwise they raise invalid_label.
  LabelSequence encode(std::string_view text, std::size_t* dropped = nullptr) const {
    LabelSequence out;
    out.reserve(text.size());
    for (char c : text) {
      if (auto idx = index_of(c)) {
        out.push_back(*idx);
      } else if (dropped) {
        ++*dropped;
      } else {
        throw Error(ErrorKind::invalid_label,
                    std::string("character '") + c + "' is not in the alphabet");
      }
    }
    return out;
  }

  std::string decode(std::span<const Label> seq) const {
    std::string out;
    out.reserve(seq.size());
    for (Label l : seq) out.push_back(symbol(l));
    return out;
  }

  // Alphabet-file token for an index, blank included.
  std::string token(Label idx) const {
    if (idx == blank_) return std::string(kBlankToken);
    char c = symbol(idx);
    if (eos_ && idx == *eos_) return std::string(kEosToken);
    if (c == ' ') return std::string(kSpaceToken);
    return std::string(1, c);
  }

  std::vector<std::string> tokens() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < size(); ++i) out.push_back(token(static_cast<Label>(i)));
    return out;
  }

  void write(std::ostream& out) const {
    for (const auto& t : tokens()) out << t << '\n';
  }

  friend bool operator==(const Alphabet& a, const Alphabet& b) {
    return a.symbols_ == b.symbols_ && a.blank_ == b.blank_ && a.eos_ == b.eos_;
  }

  static constexpr std::size_t kMaxSize = 255;

 private:
  std::vector<char> symbols_;
  Label blank_ = -1;
  std::optional<Label> eos_;
  std::array<Label, 256> lookup_ = make_empty_lookup();

  static constexpr std::array<Label, 256> make_empty_lookup() {
    std::array<Label, 256> t{};
    for (auto& v : t) v = -1;
    return t;
  }
};

// CTC collapse F(.): merge consecutive repeats, then drop blanks.
inline LabelSequence collapse(std::span<const Label> path, const Alphabet& alphabet) {
  LabelSequence out;
  Label prev = -1;
  for (Label l : path) {
    if (l < 0 || static_cast<std::size_t>(l) >= alphabet.size()) {
      throw Error(ErrorKind::invalid_label,
                  "path index " + std::to_string(l) + " is outside the alphabet");
    }
    if (l != prev && l != alphabet.blank()) out.push_back(l);
    prev = l;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Posterior frames and the CPF-1 format

struct PosteriorFrame {
  std::vector<LogProb> logp;

  std::size_t size() const { return logp.size(); }
  LogProb operator[](std::size_t i) const { return logp[i]; }

  friend bool operator==(const PosteriorFrame&, const PosteriorFrame&) = default;
};

using PosteriorStream = std::vector<PosteriorFrame>;

inline constexpr double kNormalizationTolerance = 1e-6;

inline bool is_normalized(const PosteriorFrame& frame, double tol = kNormalizationTolerance) {
  return std::abs(log_sum_exp(frame.logp)) <= tol;
}

// Builds a log-domain frame from linear probabilities.
inline PosteriorFrame frame_from_probs(std::span<const double> probs) {
  PosteriorFrame f;
  f.logp.reserve(probs.size());
  for (double p : probs) f.logp.push_back(p > 0.0 ? std::log(p) : kNegInf);
  return f;
}

inline PosteriorFrame frame_from_probs(std::initializer_list<double> probs) {
  return frame_from_probs(std::span<const double>(probs.begin(), probs.size()));
}

// Lazy CPF-1 reader. The header is validated on construction; frames are
// parsed one line at a time by next().
class PosteriorReader {
 public:
  PosteriorReader(std::istream& in, const Alphabet& alphabet, bool strict)
      : in_(&in), width_(alphabet.size()), strict_(strict) {
    std::string line;
    if (!std::getline(*in_, line)) {
      throw Error(ErrorKind::format, "posterior stream is empty (missing cpf1 header)");
    }
    std::istringstream hs(line);
    std::string magic;
    long long width = -1, blank = -1;
    std::string extra;
    if (!(hs >> magic >> width >> blank) || magic != "cpf1" || (hs >> extra)) {
      throw Error(ErrorKind::format, "malformed cpf1 header: '" + line + "'");
    }
    if (width != static_cast<long long>(alphabet.size())) {
      throw Error(ErrorKind::mismatch, "posterior width " + std::to_string(width) +
                                           " does not match alphabet size " +
                                           std::to_string(alphabet.size()));
    }
    if (blank != alphabet.blank()) {
      throw Error(ErrorKind::mismatch, "posterior blank index " + std::to_string(blank) +
                                           " does not match alphabet blank " +
                                           std::to_string(alphabet.blank()));
    }
  }

  std::optional<PosteriorFrame> next() {
    std::string line;
    while (std::getline(*in_, line)) {
      ++line_no_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      return parse_row(line);
    }
    if (in_->bad()) throw Error(ErrorKind::io, "read failure in posterior stream");
    return std::nullopt;
  }

  std::size_t frames_read() const { return frames_; }

 private:
  PosteriorFrame parse_row(const std::string& line) {
    PosteriorFrame f;
    f.logp.reserve(width_);
    std::string_view rest(line);
    while (!rest.empty()) {
      auto start = rest.find_first_not_of(" \t");
      if (start == std::string_view::npos) break;
      rest.remove_prefix(start);
      auto end = rest.find_first_of(" \t");
      std::string_view tok = rest.substr(0, end);
      auto v = parse_double(tok);
      if (!v) {
        throw Error(ErrorKind::format, "row " + std::to_string(line_no_) + ": bad value '" +
                                           std::string(tok) + "'");
      }
      if (*v > 0.0) {
        throw Error(ErrorKind::format, "row " + std::to_string(line_no_) +
                                           ": log-probability above zero");
      }
      f.logp.push_back(*v);
      rest.remove_prefix(end == std::string_view::npos ? rest.size() : end);
    }
    if (f.logp.size() != width_) {
      throw Error(ErrorKind::mismatch, "row " + std::to_string(line_no_) + " has " +
                                           std::to_string(f.logp.size()) + " values, expected " +
                                           std::to_string(width_));
    }
    if (strict_ && !is_normalized(f)) {
      throw Error(ErrorKind::normalization,
                  "row " + std::to_string(line_no_) + " is not normalized (logsumexp = " +
                      format_double(log_sum_exp(f.logp)) + ")");
    }
    ++frames_;
    return f;
  }

  std::istream* in_;
  std::size_t width_;
  bool strict_;
  std::size_t line_no_ = 1;
  std::size_t frames_ = 0;
};

inline PosteriorReader parse_posterior_stream(std::istream& in, const Alphabet& alphabet,
                                              bool strict) {
  return PosteriorReader(in, alphabet, strict);
}

inline PosteriorStream read_posterior_stream(std::istream& in, const Alphabet& alphabet,
                                             bool strict) {
  PosteriorReader reader(in, alphabet, strict);
  PosteriorStream out;
  while (auto f = reader.next()) out.push_back(std::move(*f));
  return out;
}

inline PosteriorStream load_posterior_stream(const std::string& path, const Alphabet& alphabet,
                                             bool strict) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open posterior file '" + path + "'");
  return read_posterior_stream(in, alphabet, strict);
}

inline void write_posterior_header(std::ostream& out, const Alphabet& alphabet) {
  out << "cpf1 " << alphabet.size() << ' ' << alphabet.blank() << '\n';
}

inline void write_posterior_frame(std::ostream& out, const PosteriorFrame& frame) {
  for (std::size_t i = 0; i < frame.size(); ++i) {
    if (i) out << ' ';
    out << format_double(frame.logp[i]);
  }
  out << '\n';
}

inline void write_posterior_stream(std::span<const PosteriorFrame> frames, const Alphabet& alphabet,
                                   std::ostream& out) {
  write_posterior_header(out, alphabet);
  for (const auto& f : frames) {
    if (f.size() != alphabet.size()) {
      throw Error(ErrorKind::mismatch, "frame width " + std::to_string(f.size()) +
                                           " does not match alphabet size " +
                                           std::to_string(alphabet.size()));
    }
    write_posterior_frame(out, f);
  }
  out.flush();
  if (!out) throw Error(ErrorKind::io, "write failure on posterior sink");
}

}  // namespace ctcstream
