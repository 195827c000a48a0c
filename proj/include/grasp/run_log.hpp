#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grasp/controller.hpp"
#include "grasp/error.hpp"
#include "grasp/format.hpp"

namespace grasp {

namespace detail {

// JSON has no NaN; failed rewards are written as null.
inline nlohmann::json real_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double real_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const ControllerRecord& rec) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : rec.candidates) {
    cands.push_back({{"z", c.z},
                     {"p", c.p},
                     {"reward", detail::real_or_null(c.reward)},
                     {"relative_reward", detail::real_or_null(c.relative_reward)},
                     {"valid", c.valid}});
  }
  return {{"round", rec.round},
          {"step", rec.step},
          {"p_curr_before", rec.p_curr_before},
          {"baseline_reward", detail::real_or_null(rec.baseline_reward)},
          {"candidates", std::move(cands)},
          {"committed", rec.committed},
          {"failed", rec.failed},
          {"p_curr_after", rec.p_curr_after},
          {"mu_after", rec.mu_after},
          {"sigma_after", rec.sigma_after}};
}

inline ControllerRecord record_from_json(const nlohmann::json& j) {
  ControllerRecord rec;
  try {
    rec.round = j.at("round").get<std::size_t>();
    rec.step = j.at("step").get<std::size_t>();
    rec.p_curr_before = j.at("p_curr_before").get<double>();
    rec.baseline_reward = detail::real_from(j.at("baseline_reward"));
    for (const auto& c : j.at("candidates")) {
      rec.candidates.push_back({c.at("z").get<double>(), c.at("p").get<double>(),
                                detail::real_from(c.at("reward")),
                                detail::real_from(c.at("relative_reward")),
                                c.at("valid").get<bool>()});
    }
    rec.committed = j.at("committed").get<bool>();
    rec.failed = j.at("failed").get<bool>();
    rec.p_curr_after = j.at("p_curr_after").get<double>();
    rec.mu_after = j.at("mu_after").get<double>();
    rec.sigma_after = j.at("sigma_after").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("round record: ") + e.what());
  }
  return rec;
}

inline std::string record_line(const ControllerRecord& rec) { return to_json(rec).dump() + "\n"; }

// Append-only round log, flushed after every record so an interrupted run
// leaves every completed round on disk.
class RoundLogWriter {
 public:
  explicit RoundLogWriter(const std::filesystem::path& path) : path_(path) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }

  void append(const ControllerRecord& rec) {
    out_ << record_line(rec);
    out_.flush();
    if (!out_) throw IoError("write failed for " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

// Parses a round log. A final line without its newline is an interrupted
// write and is dropped; any other malformed line is an error.
inline std::vector<ControllerRecord> parse_round_log(const std::string& text) {
  std::vector<ControllerRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;
    ++line_no;
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("round log line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(record_from_json(j));
  }
  return out;
}

inline std::string round_summary_csv(const std::vector<ControllerRecord>& log) {
  std::ostringstream out;
  out << "round,step,p_curr,baseline_reward,committed,mu,sigma\n";
  for (const auto& r : log) {
    out << r.round << ',' << r.step << ',' << format_real(r.p_curr_before) << ','
        << format_real(r.baseline_reward) << ',' << (r.committed ? 1 : 0) << ','
        << format_real(r.mu_after) << ',' << format_real(r.sigma_after) << '\n';
  }
  return out.str();
}

}  // namespace grasp
