// ctcstream command-line front end.
//
// Exit status: 0 success, 1 usage, then one code per error kind:
// 2 io, 3 format, 4 mismatch, 5 invalid label, 6 normalization,
// 7 invalid argument, 8 too large.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "CLI11.hpp"
#include "ctcstream/ctcstream.hpp"
#include "json.hpp"

namespace {

using namespace ctcstream;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return 2;
    case ErrorKind::format: return 3;
    case ErrorKind::mismatch: return 4;
    case ErrorKind::invalid_label: return 5;
    case ErrorKind::normalization: return 6;
    case ErrorKind::invalid_argument: return 7;
    case ErrorKind::too_large: return 8;
  }
  return 1;
}

std::uint64_t env_seed() {
  const char* s = std::getenv("CTCSTREAM_SEED");
  if (!s || !*s) return 0;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (s[used] != '\0') throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::invalid_argument, std::string("CTCSTREAM_SEED is not an integer: '") + s + "'");
  }
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  return flag ? *flag : env_seed();
}

// Output to a file, or stdout when the path is empty or "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
      if (!*file_) throw Error(ErrorKind::io, "cannot open output file '" + path + "'");
    }
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }
  void finish() {
    stream().flush();
    if (!stream()) throw Error(ErrorKind::io, "write failure on output");
  }

 private:
  std::unique_ptr<std::ofstream> file_;
};

// Input from a file, or stdin for "-".
class Input {
 public:
  explicit Input(const std::string& path) {
    if (path != "-") {
      file_ = std::make_unique<std::ifstream>(path, std::ios::binary);
      if (!*file_) throw Error(ErrorKind::io, "cannot open input file '" + path + "'");
    }
  }
  std::istream& stream() { return file_ ? *file_ : std::cin; }

 private:
  std::unique_ptr<std::ifstream> file_;
};

std::string read_text(const std::string& path) {
  Input in(path);
  std::ostringstream ss;
  ss << in.stream().rdbuf();
  std::string s = ss.str();
  s.erase(std::remove(s.begin(), s.end(), '\r'), s.end());
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

std::string trim_newlines(std::string s) {
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

using AnyLm = std::variant<UniformCharLm, NgramCharLm>;

// The alphabet comes from --alphabet, else from the LM file, else the
// built-in default. An LM over a different alphabet is a mismatch.
struct Model {
  Alphabet alphabet;
  std::unique_ptr<AnyLm> lm;
};

Model load_model(const std::string& alphabet_path, const std::string& lm_path) {
  Model m;
  std::optional<Alphabet> given;
  if (!alphabet_path.empty()) given = Alphabet::load(alphabet_path);
  if (!lm_path.empty()) {
    NgramCharLm lm = NgramCharLm::load(lm_path);
    if (given && !(*given == lm.alphabet())) {
      throw Error(ErrorKind::mismatch, "LM '" + lm_path + "' was trained on a different alphabet than '" +
                                           alphabet_path + "'");
    }
    m.alphabet = lm.alphabet();
    m.lm = std::make_unique<AnyLm>(std::move(lm));
  } else {
    m.alphabet = given ? *given : Alphabet::default_english();
    m.lm = std::make_unique<AnyLm>(UniformCharLm(m.alphabet));
  }
  return m;
}

std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

// ---------------------------------------------------------------------------

struct DecodeArgs {
  std::string input = "-";
  std::string alphabet;
  std::string lm;
  std::string out;
  DecoderConfig config;
  bool lenient = false;
};

void add_decoder_flags(CLI::App* cmd, DecoderConfig& c) {
  cmd->add_option("--alpha", c.alpha, "LM weight")->capture_default_str();
  cmd->add_option("--beta", c.beta, "insertion bonus per label")->capture_default_str();
  cmd->add_option("--prune-interval", c.depth_prune_interval, "frames between depth prunes")
      ->capture_default_str();
  cmd->add_option("--emit-interval", c.emit_interval, "frames between emissions")->capture_default_str();
  cmd->add_option("--admission-margin", c.admission_margin,
                  "nats below the running best at which new children are not created")
      ->capture_default_str();
}

int cmd_decode(const DecodeArgs& args) {
  args.config.validate();
  Model m = load_model(args.alphabet, args.lm);
  Input in(args.input);
  PosteriorReader reader(in.stream(), m.alphabet, !args.lenient);
  Output out(args.out);
  std::ostream& os = out.stream();
  os << config_to_json(args.config) << '\n';
  std::visit(
      [&](const auto& lm) {
        Decoder dec(m.alphabet, lm, args.config);
        decode_stream(dec, reader, [&](const EmissionRecord& r) {
          os << emission_to_json(r, m.alphabet) << '\n';
          os.flush();
        });
      },
      *m.lm);
  out.finish();
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string input;
  std::string ref;
  std::string alphabet;
  std::string lm;
  std::string out;
  std::vector<std::size_t> widths{4, 16, 64};
  std::vector<std::size_t> depths{2, 8, 32};
  DecoderConfig config;
  unsigned threads = 0;
};

struct SweepRow {
  std::size_t width = 0, depth = 0;
  double cer = 0.0, wer = 0.0, latency = 0.0;
  std::size_t revisions = 0;
};

int cmd_sweep(const SweepArgs& args) {
  if (args.widths.empty() || args.depths.empty()) {
    throw Error(ErrorKind::invalid_argument, "sweep grids must be nonempty");
  }
  Model m = load_model(args.alphabet, args.lm);
  const PosteriorStream frames = load_posterior_stream(args.input, m.alphabet, true);
  const std::string ref = read_text(args.ref);

  std::vector<SweepRow> rows;
  for (auto w : args.widths) {
    for (auto d : args.depths) {
      DecoderConfig c = args.config;
      c.beam_width = w;
      c.beam_depth = d;
      c.validate();
      rows.push_back({w, d});
    }
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(rows.size());
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < rows.size();) {
      try {
        SweepRow& row = rows[i];
        DecoderConfig c = args.config;
        c.beam_width = row.width;
        c.beam_depth = row.depth;
        std::visit(
            [&](const auto& lm) {
              Decoder dec(m.alphabet, lm, c);
              auto log = decode_stream(dec, frames);
              const std::string hyp = trim_newlines(m.alphabet.decode(best_full(log.back())));
              row.cer = score_transcript(ref, hyp, ScoreLevel::character).rate();
              row.wer = score_transcript(ref, hyp, ScoreLevel::word).rate();
              StabilityReport s = stability_from_emissions(log);
              row.latency = s.mean_commit_latency;
              row.revisions = s.total_revisions();
            },
            *m.lm);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  unsigned n = args.threads ? args.threads : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<std::size_t>(n, rows.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Output out(args.out);
  std::ostream& os = out.stream();
  os << "beam_width\tbeam_depth\tcer\twer\tmean_commit_latency\trevisions\n";
  for (const auto& r : rows) {
    os << r.width << '\t' << r.depth << '\t' << format_double(r.cer) << '\t' << format_double(r.wer) << '\t'
       << format_double(r.latency) << '\t' << r.revisions << '\n';
  }
  out.finish();
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string text;
  std::string text_file;
  std::string alphabet;
  std::string out;
  SynthConfig config;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(SynthArgs args) {
  const Alphabet a = args.alphabet.empty() ? Alphabet::default_english() : Alphabet::load(args.alphabet);
  args.config.seed = resolve_seed(args.seed);
  const std::string text = args.text_file.empty() ? args.text : read_text(args.text_file);
  PosteriorStream frames = synth_posteriors(text, a, args.config);
  Output out(args.out);
  write_posterior_stream(frames, a, out.stream());
  out.finish();
  return 0;
}

// ---------------------------------------------------------------------------

struct LmTrainArgs {
  std::string corpus;
  std::string alphabet;
  std::string out;
  int order = 3;
  double discount = NgramCharLm::kDefaultDiscount;
  std::optional<std::uint64_t> seed;
};

int cmd_lm_train(const LmTrainArgs& args) {
  const Alphabet a = args.alphabet.empty() ? Alphabet::default_english() : Alphabet::load(args.alphabet);
  Input in(args.corpus);
  TrainedLm t = lm_train(read_lines(in.stream()), a, args.order, args.discount, resolve_seed(args.seed));
  if (t.dropped_chars) std::cerr << "lm-train: dropped " << t.dropped_chars << " out-of-alphabet characters\n";
  Output out(args.out);
  t.model.write(out.stream());
  out.finish();
  return 0;
}

int cmd_lm_eval(const std::string& lm_path, const std::string& heldout, const std::string& out_path) {
  NgramCharLm lm = NgramCharLm::load(lm_path);
  Input in(heldout);
  BpcReport r = lm_bpc(lm, read_lines(in.stream()));
  Output out(out_path);
  out.stream() << "bpc\tperplexity\tscored\tdropped\n"
               << format_double(r.bpc) << '\t' << format_double(r.perplexity) << '\t' << r.scored << '\t'
               << r.dropped_chars << '\n';
  out.finish();
  return 0;
}

int cmd_lm_sample(const std::string& lm_path, std::size_t chars, double temperature,
                  const std::optional<std::uint64_t>& seed, const std::string& out_path) {
  NgramCharLm lm = NgramCharLm::load(lm_path);
  Output out(out_path);
  std::string s = lm_sample(lm, chars, temperature, resolve_seed(seed));
  out.stream() << s;
  if (s.empty() || s.back() != '\n') out.stream() << '\n';
  out.finish();
  return 0;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string ref;
  std::string hyp;
  std::string alphabet;
  bool log = false;
  std::string out;
};

int cmd_score(const ScoreArgs& args) {
  const std::string ref = read_text(args.ref);
  std::string hyp;
  std::optional<StabilityReport> stability;
  if (args.log) {
    const Alphabet a = args.alphabet.empty() ? Alphabet::default_english() : Alphabet::load(args.alphabet);
    Input in(args.hyp);
    std::vector<EmissionRecord> log;
    std::string line;
    while (std::getline(in.stream(), line)) {
      if (line.empty() || line.rfind("{\"config\"", 0) == 0) continue;
      log.push_back(parse_emission(line, a));
    }
    if (log.empty()) throw Error(ErrorKind::format, "emission log '" + args.hyp + "' has no records");
    hyp = trim_newlines(a.decode(best_full(log.back())));
    stability = stability_from_emissions(log);
  } else {
    hyp = read_text(args.hyp);
  }
  Output out(args.out);
  std::ostream& os = out.stream();
  os << "level\tsubstitutions\tinsertions\tdeletions\tref_length\trate\n";
  for (auto [name, level] : {std::pair{"char", ScoreLevel::character}, std::pair{"word", ScoreLevel::word}}) {
    ErrorReport r = score_transcript(ref, hyp, level);
    os << name << '\t' << r.substitutions << '\t' << r.insertions << '\t' << r.deletions << '\t' << r.ref_length
       << '\t' << format_double(r.rate()) << '\n';
  }
  if (stability) {
    os << "\nemissions\trevisions\tcommitted\tmean_commit_latency\n"
       << stability->revisions.size() << '\t' << stability->total_revisions() << '\t'
       << stability->committed_labels << '\t' << format_double(stability->mean_commit_latency) << '\n';
  }
  out.finish();
  return 0;
}

// ---------------------------------------------------------------------------

struct OracleArgs {
  std::string input;
  std::string alphabet;
  std::string lm;
  std::string out;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t top = 0;
};

int cmd_oracle(const OracleArgs& args) {
  Model m = load_model(args.alphabet, args.lm);
  const PosteriorStream frames = load_posterior_stream(args.input, m.alphabet, true);
  OracleResult r = std::visit([&](const auto& lm) { return oracle_decode(frames, lm, args.alpha, args.beta); },
                              *m.lm);
  std::vector<std::pair<LabelSequence, OracleEntry>> rows(r.scores.begin(), r.scores.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) {
    if (x.second.fused_score != y.second.fused_score) return x.second.fused_score > y.second.fused_score;
    if (x.first.size() != y.first.size()) return x.first.size() < y.first.size();
    return x.first < y.first;
  });
  if (args.top && rows.size() > args.top) rows.resize(args.top);
  Output out(args.out);
  std::ostream& os = out.stream();
  os << "text\tctc_logp\tfused_score\n";
  for (const auto& [seq, e] : rows) {
    os << json_string(m.alphabet.decode(seq)) << '\t' << format_double(e.ctc_logp) << '\t'
       << format_double(e.fused_score) << '\n';
  }
  out.finish();
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_concat(const std::vector<std::string>& inputs, const std::string& alphabet_path, const std::string& out_path) {
  const Alphabet a = alphabet_path.empty() ? Alphabet::default_english() : Alphabet::load(alphabet_path);
  Output out(out_path);
  std::ostream& os = out.stream();
  write_posterior_header(os, a);
  for (const auto& path : inputs) {
    Input in(path);
    PosteriorReader reader(in.stream(), a, true);
    while (auto f = reader.next()) write_posterior_frame(os, *f);
  }
  out.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming CTC prefix-tree beam search with character LM fusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ctcstream 0.1.0");

  DecodeArgs decode;
  auto* dec = app.add_subcommand("decode", "decode a CPF-1 posterior stream into emission records");
  dec->add_option("input", decode.input, "CPF-1 file, '-' for stdin")->capture_default_str();
  dec->add_option("--alphabet", decode.alphabet, "alphabet file (default: LM alphabet or built-in)");
  dec->add_option("--lm", decode.lm, "nclm1 model; uniform LM when absent");
  dec->add_option("--out", decode.out, "output path (default stdout)");
  dec->add_option("--beam-width", decode.config.beam_width, "active hypotheses kept (N)")->capture_default_str();
  dec->add_option("--beam-depth", decode.config.beam_depth, "labels kept behind the best (M)")
      ->capture_default_str();
  dec->add_option("--nbest", decode.config.nbest, "hypotheses per emission")->capture_default_str();
  add_decoder_flags(dec, decode.config);
  dec->add_flag("--lenient", decode.lenient, "skip the per-frame normalization check");

  SweepArgs sweep;
  auto* sw = app.add_subcommand("sweep", "decode one stream over a beam width x depth grid");
  sw->add_option("input", sweep.input, "CPF-1 file")->required();
  sw->add_option("--ref", sweep.ref, "reference transcript")->required();
  sw->add_option("--alphabet", sweep.alphabet, "alphabet file");
  sw->add_option("--lm", sweep.lm, "nclm1 model");
  sw->add_option("--out", sweep.out, "TSV output path");
  sw->add_option("--widths", sweep.widths, "beam widths")->delimiter(',')->capture_default_str();
  sw->add_option("--depths", sweep.depths, "beam depths")->delimiter(',')->capture_default_str();
  sw->add_option("--threads", sweep.threads, "worker threads (0 = all cores)");
  add_decoder_flags(sw, sweep.config);

  SynthArgs synth;
  auto* sy = app.add_subcommand("synth", "write synthetic CTC posteriors for a transcript");
  auto* text_opt = sy->add_option("--text", synth.text, "transcript");
  sy->add_option("--text-file", synth.text_file, "transcript file; line breaks become EOS")->excludes(text_opt);
  sy->add_option("--alphabet", synth.alphabet, "alphabet file");
  sy->add_option("--out", synth.out, "CPF-1 output path");
  sy->add_option("--frames-per-char", synth.config.frames_per_char)->capture_default_str();
  sy->add_option("--blank-run", synth.config.blank_run)->capture_default_str();
  sy->add_option("--peak", synth.config.peak_prob, "probability on the target symbol")->capture_default_str();
  sy->add_option("--noise", synth.config.noise_eps, "probability a frame peaks on a wrong symbol")
      ->capture_default_str();
  sy->add_option("--seed", synth.seed, "RNG seed (default $CTCSTREAM_SEED or 0)");

  LmTrainArgs train;
  auto* lt = app.add_subcommand("lm-train", "train an n-gram character LM");
  lt->add_option("corpus", train.corpus, "one sentence per line")->required();
  lt->add_option("--alphabet", train.alphabet, "alphabet file");
  lt->add_option("--order", train.order)->capture_default_str();
  lt->add_option("--discount", train.discount)->capture_default_str();
  lt->add_option("--seed", train.seed, "sentence shuffle seed (default $CTCSTREAM_SEED or 0)");
  lt->add_option("--out", train.out, "model output path");

  std::string eval_lm, eval_text, eval_out;
  auto* le = app.add_subcommand("lm-eval", "bits per character on held-out text");
  le->add_option("--lm", eval_lm)->required();
  le->add_option("heldout", eval_text)->required();
  le->add_option("--out", eval_out);

  std::string sample_lm, sample_out;
  std::size_t sample_chars = 200;
  double sample_temp = 1.0;
  std::optional<std::uint64_t> sample_seed;
  auto* ls = app.add_subcommand("lm-sample", "sample text from an LM");
  ls->add_option("--lm", sample_lm)->required();
  ls->add_option("--chars", sample_chars)->capture_default_str();
  ls->add_option("--temperature", sample_temp)->capture_default_str();
  ls->add_option("--seed", sample_seed, "default $CTCSTREAM_SEED or 0");
  ls->add_option("--out", sample_out);

  ScoreArgs score;
  auto* sc = app.add_subcommand("score", "CER/WER of a hypothesis against a reference");
  sc->add_option("ref", score.ref, "reference transcript")->required();
  sc->add_option("hyp", score.hyp, "hypothesis text, or emission log with --log")->required();
  sc->add_flag("--log", score.log, "hyp is an emission log; also report stability");
  sc->add_option("--alphabet", score.alphabet, "alphabet of the emission log");
  sc->add_option("--out", score.out);

  OracleArgs oracle;
  auto* orc = app.add_subcommand("oracle", "exhaustive score table for a tiny CPF-1 file");
  orc->add_option("input", oracle.input)->required();
  orc->add_option("--alphabet", oracle.alphabet);
  orc->add_option("--lm", oracle.lm);
  orc->add_option("--alpha", oracle.alpha)->capture_default_str();
  orc->add_option("--beta", oracle.beta)->capture_default_str();
  orc->add_option("--top", oracle.top, "print only the best rows");
  orc->add_option("--out", oracle.out);

  std::vector<std::string> concat_inputs;
  std::string concat_alphabet, concat_out;
  auto* cc = app.add_subcommand("concat", "join CPF-1 files frame-wise into one stream");
  cc->add_option("inputs", concat_inputs)->required();
  cc->add_option("--alphabet", concat_alphabet);
  cc->add_option("--out", concat_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*dec) return cmd_decode(decode);
    if (*sw) return cmd_sweep(sweep);
    if (*sy) return cmd_synth(synth);
    if (*lt) return cmd_lm_train(train);
    if (*le) return cmd_lm_eval(eval_lm, eval_text, eval_out);
    if (*ls) return cmd_lm_sample(sample_lm, sample_chars, sample_temp, sample_seed, sample_out);
    if (*sc) return cmd_score(score);
    if (*orc) return cmd_oracle(oracle);
    if (*cc) return cmd_concat(concat_inputs, concat_alphabet, concat_out);
  } catch (const Error& e) {
    std::cerr << "ctcstream: " << to_string(e.kind()) << " error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "ctcstream: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
