#pragma once

// Runner for the recorded oracle conformance suite (conformance/ at the
// repository root). See conformance/README.md for the file format.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/oracle.hpp"

namespace rapscan::oracle {

struct ConformanceCase {
  std::string name;
  std::vector<std::string> requests;
  std::vector<json> expectations;
};

struct ConformanceResult {
  std::string name;
  enum class Status { Pass, Fail, Skip } status = Status::Pass;
  std::string detail;
};

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read '" + p.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

inline std::vector<ConformanceCase> load_conformance_suite(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("no suite directory '" + dir.string() + "'");
  std::vector<ConformanceCase> cases;
  const std::string suffix = ".request.jsonl";
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string file = entry.path().filename().string();
    if (file.size() <= suffix.size() || file.compare(file.size() - suffix.size(), suffix.size(), suffix) != 0)
      continue;
    ConformanceCase c;
    c.name = file.substr(0, file.size() - suffix.size());
    c.requests = read_lines(entry.path());
    for (const auto& l : read_lines(dir / (c.name + ".expect.jsonl"))) {
      try {
        c.expectations.push_back(json::parse(l));
      } catch (const json::exception& e) {
        throw FormatError("bad expectation in " + c.name + ": " + e.what());
      }
    }
    if (c.expectations.size() != c.requests.size())
      throw FormatError("case " + c.name + ": one expectation per request line is required");
    cases.push_back(std::move(c));
  }
  std::sort(cases.begin(), cases.end(),
            [](const ConformanceCase& a, const ConformanceCase& b) { return a.name < b.name; });
  return cases;
}

// Expands {"fill": x, "length_delta": k} embeddings. Non-JSON lines pass
// through unchanged.
inline std::string expand_request(const std::string& line, int d) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    return line;
  }
  if (j.is_object() && j.contains("trigger") && j["trigger"].is_object() &&
      j["trigger"].contains("embedding") && j["trigger"]["embedding"].is_object()) {
    const json& spec = j["trigger"]["embedding"];
    const int n = d + spec.value("length_delta", 0);
    j["trigger"]["embedding"] = std::vector<double>(std::max(0, n), spec.value("fill", 0.0));
  }
  return j.dump();
}

// Empty string when the response meets the expectation.
inline std::string check_response(const json& expect, const std::string& request_line,
                                  const std::string& response_line) {
  json resp;
  try {
    resp = json::parse(response_line);
  } catch (const json::exception&) {
    return "response is not JSON";
  }
  if (!resp.is_object()) return "response is not an object";
  if (!resp.contains("id") || resp.at("id") != expect.at("id"))
    return "id mismatch: expected " + expect.at("id").dump() + ", got " + resp.value("id", json()).dump();
  const std::string kind = expect.at("kind").get<std::string>();
  if (kind == "error") return resp.contains("error") ? "" : "expected an error frame";
  if (kind == "ok") return resp.value("ok", false) ? "" : "expected \"ok\": true";
  if (kind == "echo") return resp.value("echo", json()) == expect.at("payload") ? "" : "echo payload differs";
  if (kind != "outputs") return "unknown expectation kind '" + kind + "'";
  if (resp.contains("error")) return "unexpected error: " + resp.at("error").dump();
  TokenSequence x;
  x.task = task_from_string(expect.at("shape").get<std::string>());
  x.ids = json::parse(request_line).at("ids").get<std::vector<TokenId>>();
  TaskOutput out;
  out.task = x.task;
  try {
    out.rows = resp.at("outputs").get<std::vector<std::vector<double>>>();
    validate_outputs(out, x, expect.at("id").dump());
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

inline bool case_applicable(const ConformanceCase& c, const Handshake& hs, std::string& why) {
  for (std::size_t i = 0; i < c.requests.size(); ++i) {
    const auto& ex = c.expectations[i];
    if (ex.contains("trigger_mode") && ex.at("trigger_mode") != hs.trigger_mode) {
      why = "trigger_mode " + hs.trigger_mode;
      return false;
    }
    try {
      const json r = json::parse(c.requests[i]);
      if (r.is_object() && r.contains("task")) {
        const Task t = task_from_string(r.at("task").get<std::string>());
        if (std::find(hs.tasks.begin(), hs.tasks.end(), t) == hs.tasks.end()) {
          why = "task " + std::string(to_string(t)) + " not served";
          return false;
        }
      }
    } catch (const std::exception&) {
    }
  }
  return true;
}

inline std::string check_handshake(const std::string& line, Handshake& out) {
  json hs;
  try {
    hs = json::parse(line);
  } catch (const json::exception&) {
    return "handshake is not JSON";
  }
  if (!hs.is_object()) return "handshake is not an object";
  if (!hs.contains("d") || !hs["d"].is_number_integer() || hs["d"].get<int>() <= 0)
    return "handshake d must be a positive integer";
  if (!hs.contains("tasks") || !hs["tasks"].is_array() || hs["tasks"].empty())
    return "handshake tasks must be a non-empty array";
  const std::string mode = hs.value("trigger_mode", std::string());
  if (mode != "embedding" && mode != "token") return "handshake trigger_mode must be embedding or token";
  try {
    out = parse_handshake(line);
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

inline std::vector<ConformanceResult> run_conformance(const std::vector<ConformanceCase>& cases,
                                                      const Endpoint& ep,
                                                      std::chrono::milliseconds timeout =
                                                          std::chrono::milliseconds(30000)) {
  std::vector<ConformanceResult> results;
  for (const auto& c : cases) {
    ConformanceResult r;
    r.name = c.name;
    FrameChannel ch;
    try {
      Handshake hs;
      r.detail = check_handshake(ch.open(ep, timeout), hs);
      std::string why;
      if (!r.detail.empty()) {
        r.status = ConformanceResult::Status::Fail;
      } else if (!case_applicable(c, hs, why)) {
        r.status = ConformanceResult::Status::Skip;
        r.detail = why;
      } else {
        for (std::size_t i = 0; i < c.requests.size() && r.detail.empty(); ++i) {
          const std::string line = expand_request(c.requests[i], hs.d);
          if (!ch.send(line)) {
            r.detail = "send failed";
            break;
          }
          const auto resp = ch.recv(timeout);
          if (!resp) {
            r.detail = "no response to frame " + std::to_string(i + 1);
            break;
          }
          r.detail = check_response(c.expectations[i], c.requests[i], *resp);
        }
        if (!r.detail.empty()) r.status = ConformanceResult::Status::Fail;
      }
    } catch (const std::exception& e) {
      r.status = ConformanceResult::Status::Fail;
      r.detail = e.what();
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace rapscan::oracle
