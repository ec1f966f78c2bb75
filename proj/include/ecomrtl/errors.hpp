#pragma once

#include <stdexcept>
#include <string>

namespace ecomrtl {

/// A caller broke a documented precondition (e.g. non-positive IDM gap,
/// action map not matching the active AVs).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or out-of-range structured text input. The message carries the
/// source name, line number and offending field when they are known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Training produced non-finite values; carries a diagnostic dump.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ecomrtl
