#pragma once

// One JSON object per line. Key order is fixed so logs can be diffed:
//
//   {"config":{"beam_width":..,"beam_depth":..,"alpha":..,"beta":..,
//              "prune_interval":..,"emit_interval":..,"nbest":..}}
//   {"frame":100,"committed":"HE","nbest":[{"text":"HE'S THE","score":-3.25}]}
//
// "text" is the full hypothesis, committed prefix included. EOS is written
// as "\n" inside the string. A score of zero mass is written as null.

#include <algorithm>
#include <cmath>
#include <string>

#include "ctcstream/core.hpp"
#include "ctcstream/decoder.hpp"
#include "json.hpp"

namespace ctcstream {

inline std::string config_to_json(const DecoderConfig& c) {
  nlohmann::ordered_json cfg;
  cfg["beam_width"] = c.beam_width;
  cfg["beam_depth"] = c.beam_depth;
  cfg["alpha"] = c.alpha;
  cfg["beta"] = c.beta;
  cfg["prune_interval"] = c.depth_prune_interval;
  cfg["emit_interval"] = c.emit_interval;
  cfg["nbest"] = c.nbest;
  nlohmann::ordered_json j;
  j["config"] = std::move(cfg);
  return j.dump();
}

inline std::string emission_to_json(const EmissionRecord& r, const Alphabet& alphabet) {
  nlohmann::ordered_json j;
  j["frame"] = r.frame;
  j["committed"] = alphabet.decode(r.committed);
  auto list = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.nbest.size(); ++i) {
    nlohmann::ordered_json h;
    h["text"] = alphabet.decode(r.full(i));
    if (std::isfinite(r.nbest[i].score)) {
      h["score"] = r.nbest[i].score;
    } else {
      h["score"] = nullptr;
    }
    list.push_back(std::move(h));
  }
  j["nbest"] = std::move(list);
  return j.dump();
}

inline EmissionRecord parse_emission(const std::string& line, const Alphabet& alphabet) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("emission record is not JSON: ") + e.what());
  }
  try {
    EmissionRecord r;
    r.frame = j.at("frame").get<std::size_t>();
    r.committed = alphabet.encode(j.at("committed").get<std::string>());
    for (const auto& h : j.at("nbest")) {
      LabelSequence full = alphabet.encode(h.at("text").get<std::string>());
      if (full.size() < r.committed.size() ||
          !std::equal(r.committed.begin(), r.committed.end(), full.begin())) {
        throw Error(ErrorKind::format, "hypothesis text does not extend the committed prefix");
      }
      Hypothesis hyp;
      hyp.suffix.assign(full.begin() + static_cast<std::ptrdiff_t>(r.committed.size()), full.end());
      const auto& s = h.at("score");
      hyp.score = s.is_null() ? kNegInf : s.get<double>();
      r.nbest.push_back(std::move(hyp));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("malformed emission record: ") + e.what());
  }
}

}  // namespace ctcstream
