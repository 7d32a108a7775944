#pragma once

// Tree-based online CTC beam search with character-LM shallow fusion.
//
// Every node of the prefix tree stands for one collapsed label sequence (the
// labels on its root path, after the committed prefix) and carries the two
// CTC states of its label: p_nb, the mass of paths whose last frame emitted
// the label, and p_b, the mass of paths that have since moved to blank.
// Because each (parent, label) pair owns at most one child, all paths that
// collapse to the same sequence share a node and their masses are summed.
//
// Per frame, with primed values from the previous frame:
//
//   p_b(u)  = lse(p_b'(u), p_nb'(u)) + x[blank]
//   p_nb(u) = lse(p_nb'(u) + x[c], entry(v, c) + x[c] + bonus(u))
//
// where v is the parent and entry(v, c) is p_b'(v) when v carries the same
// label c (a label can not follow itself without a blank in between) and
// lse(p_b'(v), p_nb'(v)) otherwise. bonus(u) = alpha * ln P_LM(c | v) + beta
// is computed once when u is created from a copy of v's LM context, and is
// paid by every unit of mass entering u, so a node's score is exactly
// ln P_CTC(z) + alpha * ln P_LM(z) + beta * |z|.
//
// Width-pruning keeps the top beam_width scoring nodes active. Depth-pruning
// re-roots the tree at the beam_depth-th ancestor of the best node and
// commits the labels above the new root.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctcstream/charlm.hpp"
#include "ctcstream/core.hpp"

namespace ctcstream {

struct DecoderConfig {
  std::size_t beam_width = 64;
  std::size_t beam_depth = 50;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t depth_prune_interval = 20;
  std::size_t emit_interval = 50;
  std::size_t nbest = 1;
  // A new child is only allocated when the mass flowing into it is within
  // this many nats of (previous best score + best frame log-prob). Infinity
  // disables the filter; results are then exact up to width/depth pruning.
  double admission_margin = std::log(1e9);

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::invalid_argument, m); };
    if (beam_width < 1) fail("beam width must be at least 1");
    if (beam_depth < 1) fail("beam depth must be at least 1");
    if (nbest < 1) fail("nbest must be at least 1");
    if (nbest > beam_width) fail("nbest must not exceed the beam width");
    if (depth_prune_interval < 1) fail("depth-prune interval must be at least 1");
    if (emit_interval < 1) fail("emit interval must be at least 1");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha must be a finite value >= 0");
    if (!std::isfinite(beta)) fail("beta must be finite");
    if (!(admission_margin > 0.0)) fail("admission margin must be positive");
  }

  // Settings under which the decoder is exact for the given instance size.
  static DecoderConfig unpruned(std::size_t num_labels, std::size_t frames) {
    DecoderConfig c;
    double paths = std::pow(static_cast<double>(num_labels) + 1.0, static_cast<double>(frames));
    c.beam_width = static_cast<std::size_t>(std::min(paths, 1e9)) + 1;
    c.beam_depth = frames + 1;
    c.depth_prune_interval = frames + 1;
    c.admission_margin = std::numeric_limits<double>::infinity();
    return c;
  }
};

// A hypothesis below the committed prefix.
struct Hypothesis {
  LabelSequence suffix;
  LogProb score = kNegInf;

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

struct EmissionRecord {
  std::size_t frame = 0;
  LabelSequence committed;
  std::vector<Hypothesis> nbest;  // best first

  LabelSequence full(std::size_t i) const {
    LabelSequence out = committed;
    out.insert(out.end(), nbest[i].suffix.begin(), nbest[i].suffix.end());
    return out;
  }

  friend bool operator==(const EmissionRecord&, const EmissionRecord&) = default;
};

// Outcome of the most recent depth-prune, for inspection.
struct DepthPruneEvent {
  std::size_t frame = 0;
  LabelSequence best_before;  // full sequence of the best node before re-rooting
  LabelSequence committed_added;
  std::size_t nodes_after = 0;
};

template <CharLanguageModel Lm>
class Decoder {
 public:
  using Context = typename Lm::Context;

  // The LM is borrowed and must outlive the decoder.
  Decoder(const Alphabet& alphabet, const Lm& lm, DecoderConfig config)
      : alphabet_(alphabet), lm_(&lm), config_(config), labels_(alphabet.labels()) {
    config_.validate();
    if (!(lm.alphabet() == alphabet)) {
      throw Error(ErrorKind::mismatch, "language model alphabet differs from decoder alphabet");
    }
    reserve_arena();
    root_ = allocate();
    Node& r = nodes_[root_];
    r.label = kNoLabel;
    r.parent = kNone;
    r.depth = 0;
    r.p_b = 0.0;
    r.ctx = lm.initial_context();
    active_.push_back(root_);
    best_ = root_;
  }

  const DecoderConfig& config() const { return config_; }
  const Alphabet& alphabet() const { return alphabet_; }
  std::size_t frame_count() const { return frame_count_; }
  const LabelSequence& committed() const { return committed_; }
  std::size_t active_count() const { return active_.size(); }
  std::size_t node_count() const { return nodes_.size() - free_.size(); }
  // Allocated node slots; grows only when the live high-water mark does.
  std::size_t arena_size() const { return nodes_.size(); }
  // Most nodes ever live at once, counting children created within a frame
  // before width pruning.
  std::size_t peak_node_count() const { return peak_nodes_; }
  // Live nodes that can exist at once under the configured pruning:
  // N(M + I + 1) after a frame plus up to N|L'| fresh children during it.
  std::size_t node_budget() const {
    const double n = static_cast<double>(config_.beam_width);
    const double b = n * (static_cast<double>(config_.beam_depth) +
                          static_cast<double>(config_.depth_prune_interval) + 1.0) +
                     n * static_cast<double>(alphabet_.size()) + 1.0;
    return b > 1e18 ? std::numeric_limits<std::size_t>::max() : static_cast<std::size_t>(b);
  }
  const std::optional<DepthPruneEvent>& last_depth_prune() const { return last_prune_; }

  void step(const PosteriorFrame& frame) {
    if (frame.size() != alphabet_.size()) {
      throw Error(ErrorKind::mismatch, "frame width " + std::to_string(frame.size()) +
                                           " does not match alphabet size " +
                                           std::to_string(alphabet_.size()));
    }
    propagate(frame);
    prune_width();
    ++frame_count_;
    if (++frames_since_prune_ >= config_.depth_prune_interval) prune_depth();
  }

  // Keeps the beam_width best active nodes; the rest lose their mass and
  // childless inactive nodes are released.
  void prune_width() {
    const std::size_t n = config_.beam_width;
    if (active_.size() > n) {
      std::nth_element(active_.begin(), active_.begin() + static_cast<std::ptrdiff_t>(n - 1),
                       active_.end(), [this](std::uint32_t a, std::uint32_t b) {
                         return ranks_before(a, b);
                       });
      for (std::size_t i = n; i < active_.size(); ++i) {
        Node& d = nodes_[active_[i]];
        d.p_nb = d.p_b = kNegInf;
        release_if_dead(active_[i]);
      }
      active_.resize(n);
    }
    refresh_best();
  }

  // Re-roots at the beam_depth-th ancestor of the best node and returns the
  // labels that became committed.
  LabelSequence prune_depth() {
    frames_since_prune_ = 0;
    DepthPruneEvent ev;
    ev.frame = frame_count_;
    ev.best_before = full_sequence(best_);
    const std::size_t rel = nodes_[best_].depth - nodes_[root_].depth;
    if (rel > config_.beam_depth) {
      std::uint32_t new_root = best_;
      for (std::size_t i = 0; i < config_.beam_depth; ++i) new_root = nodes_[new_root].parent;

      LabelSequence added;
      for (std::uint32_t u = new_root; u != root_; u = nodes_[u].parent) {
        added.push_back(nodes_[u].label);
      }
      std::reverse(added.begin(), added.end());

      std::vector<char> keep(nodes_.size(), 0);
      std::vector<std::uint32_t> stack{new_root};
      while (!stack.empty()) {
        std::uint32_t u = stack.back();
        stack.pop_back();
        keep[u] = 1;
        for (std::uint32_t c : nodes_[u].child) {
          if (c != kNone) stack.push_back(c);
        }
      }
      for (std::uint32_t u = 0; u < nodes_.size(); ++u) {
        if (nodes_[u].live && !keep[u]) release(u);
      }
      nodes_[new_root].parent = kNone;
      root_ = new_root;
      std::erase_if(active_, [&](std::uint32_t u) { return !keep[u]; });
      committed_.insert(committed_.end(), added.begin(), added.end());
      ev.committed_added = std::move(added);
    }
    ev.nodes_after = node_count();
    LabelSequence result = ev.committed_added;
    last_prune_ = std::move(ev);
    return result;
  }

  // Active hypotheses ranked best first, at most `n` of them.
  std::vector<Hypothesis> top(std::size_t n) const {
    std::vector<std::uint32_t> ids = active_;
    const std::size_t k = std::min(n, ids.size());
    auto cmp = [this](std::uint32_t a, std::uint32_t b) { return ranks_before(a, b); };
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), cmp);
    std::vector<Hypothesis> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({suffix_of(ids[i]), score(ids[i])});
    return out;
  }

  EmissionRecord emit() const { return {frame_count_, committed_, top(config_.nbest)}; }

  // Full sequence (committed prefix included) and fused score of the best
  // active node.
  std::pair<LabelSequence, LogProb> best() const { return {full_sequence(best_), score(best_)}; }

  // Every active node as (full sequence, score).
  std::vector<std::pair<LabelSequence, LogProb>> active_hypotheses() const {
    std::vector<std::pair<LabelSequence, LogProb>> out;
    out.reserve(active_.size());
    for (std::uint32_t u : active_) out.emplace_back(full_sequence(u), score(u));
    return out;
  }

  // Fused score for a full sequence; kNegInf when it holds no mass.
  LogProb score_of(std::span<const Label> full) const {
    if (full.size() < committed_.size() ||
        !std::equal(committed_.begin(), committed_.end(), full.begin())) {
      return kNegInf;
    }
    std::uint32_t u = root_;
    for (std::size_t i = committed_.size(); i < full.size(); ++i) {
      if (!alphabet_.is_label(full[i])) return kNegInf;
      u = nodes_[u].child[static_cast<std::size_t>(full[i])];
      if (u == kNone) return kNegInf;
    }
    return score(u);
  }

 private:
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  static constexpr Label kNoLabel = -1;

  struct Node {
    Label label = kNoLabel;
    std::uint32_t parent = kNone;
    std::vector<std::uint32_t> child;  // indexed by L' position
    std::uint32_t num_children = 0;
    std::size_t depth = 0;  // labels from the original root, i.e. full length
    LogProb p_nb = kNegInf;
    LogProb p_b = kNegInf;
    LogProb next_nb = kNegInf;
    LogProb next_b = kNegInf;
    LogProb bonus = 0.0;
    Context ctx{};
    bool live = false;
    bool touched = false;
  };

  LogProb score(std::uint32_t u) const { return log_sum_exp(nodes_[u].p_nb, nodes_[u].p_b); }

  // Small budgets are allocated up front so memory stays flat for the whole
  // stream; large ones grow on demand.
  void reserve_arena() {
    constexpr std::size_t kPreallocate = std::size_t{1} << 16;
    const std::size_t budget = node_budget();
    if (budget > kPreallocate) return;
    nodes_.resize(budget);
    for (auto& n : nodes_) n.child.assign(alphabet_.size(), kNone);
    free_.reserve(budget);
    for (std::size_t i = budget; i-- > 0;) free_.push_back(static_cast<std::uint32_t>(i));
  }

  std::uint32_t allocate() {
    std::uint32_t id;
    if (!free_.empty()) {
      id = free_.back();
      free_.pop_back();
    } else {
      id = static_cast<std::uint32_t>(nodes_.size());
      nodes_.emplace_back();
      nodes_[id].child.assign(alphabet_.size(), kNone);
    }
    nodes_[id].live = true;
    peak_nodes_ = std::max(peak_nodes_, node_count());
    return id;
  }

  void release(std::uint32_t u) {
    Node& d = nodes_[u];
    d.live = false;
    d.p_nb = d.p_b = d.next_nb = d.next_b = kNegInf;
    d.touched = false;
    if (d.num_children) std::fill(d.child.begin(), d.child.end(), kNone);
    d.num_children = 0;
    d.parent = kNone;
    free_.push_back(u);
  }

  // Releases u and then any ancestors left as massless leaves.
  void release_if_dead(std::uint32_t u) {
    while (u != root_ && u != kNone) {
      Node& d = nodes_[u];
      if (!d.live || d.num_children > 0 || d.p_nb != kNegInf || d.p_b != kNegInf) return;
      const std::uint32_t parent = d.parent;
      Node& p = nodes_[parent];
      p.child[static_cast<std::size_t>(d.label)] = kNone;
      --p.num_children;
      release(u);
      u = parent;
    }
  }

  std::uint32_t create_child(std::uint32_t v, Label c) {
    const std::uint32_t u = allocate();
    Node& parent = nodes_[v];
    Node& child = nodes_[u];
    child.label = c;
    child.parent = v;
    child.depth = parent.depth + 1;
    auto [ctx, lp] = lm_->advance(parent.ctx, c);
    child.ctx = std::move(ctx);
    child.bonus = config_.alpha == 0.0 ? config_.beta : config_.alpha * lp + config_.beta;
    parent.child[static_cast<std::size_t>(c)] = u;
    ++parent.num_children;
    return u;
  }

  void accumulate(std::uint32_t u, LogProb nb, LogProb b) {
    Node& d = nodes_[u];
    if (!d.touched) {
      d.touched = true;
      touched_.push_back(u);
    }
    d.next_nb = log_sum_exp(d.next_nb, nb);
    d.next_b = log_sum_exp(d.next_b, b);
  }

  void propagate(const PosteriorFrame& frame) {
    const LogProb blank = frame[static_cast<std::size_t>(alphabet_.blank())];
    LogProb frame_max = kNegInf;
    for (Label c : labels_) frame_max = std::max(frame_max, frame[static_cast<std::size_t>(c)]);
    const LogProb threshold = std::isinf(config_.admission_margin)
                                  ? kNegInf
                                  : score(best_) + frame_max - config_.admission_margin;

    touched_.clear();
    for (std::uint32_t v : active_) {
      const LogProb nb = nodes_[v].p_nb;
      const LogProb b = nodes_[v].p_b;
      const LogProb total = log_sum_exp(nb, b);
      const Label own = nodes_[v].label;
      accumulate(v, own == kNoLabel ? kNegInf : nb + frame[static_cast<std::size_t>(own)],
                 total + blank);
      for (Label c : labels_) {
        const LogProb x = frame[static_cast<std::size_t>(c)];
        if (x == kNegInf) continue;
        const LogProb entry = (c == own) ? b : total;
        if (entry == kNegInf) continue;
        const LogProb mass = entry + x;
        std::uint32_t u = nodes_[v].child[static_cast<std::size_t>(c)];
        if (u == kNone) {
          if (!(mass > threshold)) continue;
          u = create_child(v, c);
        }
        accumulate(u, mass + nodes_[u].bonus, kNegInf);
      }
    }

    active_.clear();
    for (std::uint32_t u : touched_) {
      Node& d = nodes_[u];
      d.p_nb = d.next_nb;
      d.p_b = d.next_b;
      d.next_nb = d.next_b = kNegInf;
      d.touched = false;
      if (d.p_nb != kNegInf || d.p_b != kNegInf) active_.push_back(u);
    }
    for (std::uint32_t u : touched_) {
      if (nodes_[u].live) release_if_dead(u);
    }
  }

  void refresh_best() {
    if (active_.empty()) {
      best_ = root_;
      return;
    }
    best_ = *std::min_element(active_.begin(), active_.end(), [this](std::uint32_t a, std::uint32_t b) {
      return ranks_before(a, b);
    });
  }

  // Higher score, then shorter sequence, then lexicographically smaller
  // label sequence.
  bool ranks_before(std::uint32_t a, std::uint32_t b) const {
    const LogProb sa = score(a), sb = score(b);
    if (sa != sb) return sa > sb;
    if (nodes_[a].depth != nodes_[b].depth) return nodes_[a].depth < nodes_[b].depth;
    if (a == b) return false;
    return suffix_of(a) < suffix_of(b);
  }

  LabelSequence suffix_of(std::uint32_t u) const {
    LabelSequence out;
    for (; u != root_; u = nodes_[u].parent) out.push_back(nodes_[u].label);
    std::reverse(out.begin(), out.end());
    return out;
  }

  LabelSequence full_sequence(std::uint32_t u) const {
    LabelSequence out = committed_;
    LabelSequence s = suffix_of(u);
    out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  Alphabet alphabet_;
  const Lm* lm_;
  DecoderConfig config_;
  std::vector<Label> labels_;

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> free_;
  std::vector<std::uint32_t> active_;
  std::vector<std::uint32_t> touched_;
  std::uint32_t root_ = kNone;
  std::uint32_t best_ = kNone;
  LabelSequence committed_;
  std::size_t frame_count_ = 0;
  std::size_t frames_since_prune_ = 0;
  std::size_t peak_nodes_ = 0;
  std::optional<DepthPruneEvent> last_prune_;
};

// Drives `decoder` over a frame source: anything with next() returning
// std::optional<PosteriorFrame>. Records go to `sink` every emit_interval
// frames and once more at the end unless the last frame already emitted.
template <CharLanguageModel Lm, class Source, class Sink>
  requires requires(Source& s) {
    { s.next() } -> std::same_as<std::optional<PosteriorFrame>>;
  }
void decode_stream(Decoder<Lm>& decoder, Source& source, Sink&& sink) {
  const std::size_t every = decoder.config().emit_interval;
  std::optional<std::size_t> last_emitted;
  while (auto frame = source.next()) {
    decoder.step(*frame);
    if (decoder.frame_count() % every == 0) {
      sink(decoder.emit());
      last_emitted = decoder.frame_count();
    }
  }
  if (last_emitted != decoder.frame_count()) sink(decoder.emit());
}

// In-memory frame source.
class SpanSource {
 public:
  explicit SpanSource(std::span<const PosteriorFrame> frames) : frames_(frames) {}
  std::optional<PosteriorFrame> next() {
    if (pos_ >= frames_.size()) return std::nullopt;
    return frames_[pos_++];
  }

 private:
  std::span<const PosteriorFrame> frames_;
  std::size_t pos_ = 0;
};

template <CharLanguageModel Lm>
std::vector<EmissionRecord> decode_stream(Decoder<Lm>& decoder,
                                          std::span<const PosteriorFrame> frames) {
  SpanSource src(frames);
  std::vector<EmissionRecord> out;
  decode_stream(decoder, src, [&](EmissionRecord r) { out.push_back(std::move(r)); });
  return out;
}

}  // namespace ctcstream
