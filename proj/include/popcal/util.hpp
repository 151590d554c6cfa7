#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace popcal {

// Error categories. The CLI maps these onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DependencyError : public Error {
 public:
  DependencyError(std::string stage, const std::string& what)
      : Error(what), missing_stage_(std::move(stage)) {}
  const std::string& missing_stage() const { return missing_stage_; }

 private:
  std::string missing_stage_;
};

class ServiceError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A problem with a single input record that did not abort the load.
struct RecordIssue {
  std::size_t line = 0;
  std::string message;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::vector<std::string> read_lines(const std::filesystem::path& path);

// ASCII lowercase; bytes >= 0x80 pass through untouched.
std::string ascii_lower(std::string_view s);

// Lowercase, collapse runs of whitespace to one space, trim both ends.
std::string normalize_text(std::string_view s);

// Fixed-precision decimal formatting used by every CSV writer so reports
// are byte-stable.
std::string fmt_fixed(double v, int precision = 4);

// Portable random helpers on top of mt19937_64 (the standard distributions
// are implementation-defined, which would break cross-toolchain replay).
using Rng = std::mt19937_64;

double uniform01(Rng& rng);
double standard_normal(Rng& rng);
std::size_t uniform_index(Rng& rng, std::size_t n);

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace popcal
