#pragma once

// Shared fixtures: temp directories, an in-process HTTP server, and
// brute-force reference implementations used as oracles.

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "popcal/core_model.hpp"
#include "popcal/corpus_index.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using nlohmann::json;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "popcal-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// httplib server on an ephemeral localhost port, running on its own thread.
class MockServer {
 public:
  MockServer() = default;
  ~MockServer() { stop(); }
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  httplib::Server& server() { return server_; }

  void start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw std::runtime_error("mock server failed to bind");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }
  std::string url(const std::string& path = "") const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

// Chat-completions body with one choice; logprobs are omitted when empty.
inline json chat_body(const std::string& content, const std::vector<double>& token_probs = {}) {
  json choice = {{"index", 0},
                 {"message", {{"role", "assistant"}, {"content", content}}},
                 {"finish_reason", "stop"}};
  if (!token_probs.empty()) {
    json toks = json::array();
    for (double p : token_probs) toks.push_back({{"token", "t"}, {"logprob", std::log(p)}});
    choice["logprobs"] = {{"content", toks}};
  }
  return {{"id", "cmpl"}, {"object", "chat.completion"}, {"choices", json::array({choice})}};
}

inline std::string prompt_of(const json& request) {
  return request.at("messages").at(0).at("content").get<std::string>();
}

// Average ranks by counting: rank(x) = #{y < x} + (#{y == x} + 1) / 2.
inline std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : v) {
      if (y < v[i]) ++less;
      if (y == v[i]) ++equal;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double brute_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

inline double brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return brute_pearson(brute_ranks(x), brute_ranks(y));
}

inline bool word_byte(unsigned char c) {
  return std::isalnum(c) || c >= 0x80;
}

inline std::string lower(std::string s) {
  for (auto& c : s)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return s;
}

// Per-document, per-surface std::string::find with explicit edge checks.
inline std::map<std::string, std::vector<popcal::DocId>> naive_scan(
    const std::vector<popcal::Document>& docs, const popcal::EntityCatalog& catalog,
    bool case_insensitive = false) {
  std::map<std::string, std::vector<popcal::DocId>> out;
  for (const auto& e : catalog.entries()) out[e.id];
  for (const auto& d : docs) {
    const std::string text = case_insensitive ? lower(d.text) : d.text;
    for (const auto& e : catalog.entries()) {
      std::vector<std::string> surfaces = {e.label};
      surfaces.insert(surfaces.end(), e.aliases.begin(), e.aliases.end());
      bool hit = false;
      for (auto s : surfaces) {
        if (case_insensitive) s = lower(s);
        if (s.empty()) continue;
        for (auto pos = text.find(s); pos != std::string::npos && !hit; pos = text.find(s, pos + 1)) {
          const std::size_t end = pos + s.size();
          const auto* b = reinterpret_cast<const unsigned char*>(text.data());
          const bool left_ok = !word_byte(static_cast<unsigned char>(s.front())) || pos == 0 ||
                               !word_byte(b[pos - 1]);
          const bool right_ok = !word_byte(static_cast<unsigned char>(s.back())) ||
                                end == text.size() || !word_byte(b[end]);
          if (left_ok && right_ok) hit = true;
        }
        if (hit) break;
      }
      if (hit) out[e.id].push_back(d.id);
    }
  }
  for (auto& [id, list] : out) std::sort(list.begin(), list.end());
  return out;
}

}  // namespace testsupport
