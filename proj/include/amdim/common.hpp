#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace amdim {

// Rejected-input errors (bad shapes, bad arguments) throw std::invalid_argument
// through AMDIM_CHECK. Configuration and ingestion failures get their own types
// so the CLI can map them to distinct exit codes.

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class IngestError : public std::runtime_error {
 public:
  IngestError(const std::string& file, std::int64_t offset, const std::string& what)
      : std::runtime_error(file + " @ byte " + std::to_string(offset) + ": " + what),
        file_(file),
        offset_(offset) {}
  const std::string& file() const { return file_; }
  std::int64_t offset() const { return offset_; }

 private:
  std::string file_;
  std::int64_t offset_;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream oss;
  oss << "[";
  for (size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
  oss << "]";
  return oss.str();
}

}  // namespace amdim

#define AMDIM_CHECK(cond, msg)                \
  do {                                        \
    if (!(cond)) {                            \
      std::ostringstream oss_;                \
      oss_ << msg;                            \
      throw std::invalid_argument(oss_.str()); \
    }                                         \
  } while (0)

#define AMDIM_CONFIG_CHECK(cond, msg)      \
  do {                                     \
    if (!(cond)) {                         \
      std::ostringstream oss_;             \
      oss_ << msg;                         \
      throw ::amdim::ConfigError(oss_.str()); \
    }                                      \
  } while (0)
