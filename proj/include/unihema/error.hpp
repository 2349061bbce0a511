#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace unihema {

// Exit codes used by the command line tool.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kData = 3,
  kOrdering = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const { return ExitCode::kData; }
};

// Operand extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A configuration value is inconsistent (bad strides, K > V_t, empty globs ...).
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};

// An API was called in a way its contract forbids.
class UsageError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};

// Token not present in the closed vocabulary.
class LexicalError : public Error {
 public:
  LexicalError(const std::string& token)
      : Error("out-of-vocabulary token '" + token + "'"), token_(token) {}
  const std::string& token() const { return token_; }

 private:
  std::string token_;
};

// Data content problems: bad values, impossible matchings, unknown names.
class DataError : public Error {
 public:
  using Error::Error;
};

// Binary or text file does not follow its declared layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class MissingFileError : public DataError {
 public:
  explicit MissingFileError(const std::string& path)
      : DataError("missing file: " + path), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class MalformedRecordError : public FormatError {
 public:
  MalformedRecordError(const std::string& file, std::size_t line, const std::string& detail)
      : FormatError(file + ":" + std::to_string(line) + ": malformed record: " + detail),
        file_(file),
        line_(line) {}
  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

// Training stages executed out of order.
class OrderingError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kOrdering; }
};

// Checkpoint architecture does not match the requested configuration.
class ConfigMismatchError : public Error {
 public:
  struct Entry {
    std::string key;
    std::string expected;
    std::string found;
  };

  explicit ConfigMismatchError(std::vector<Entry> entries)
      : Error(render(entries)), entries_(std::move(entries)) {}
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  static std::string render(const std::vector<Entry>& entries) {
    std::string out = "checkpoint config mismatch:";
    for (const auto& e : entries) {
      out += "\n  " + e.key + ": expected " + e.expected + ", found " + e.found;
    }
    return out;
  }
  std::vector<Entry> entries_;
};

}  // namespace unihema
