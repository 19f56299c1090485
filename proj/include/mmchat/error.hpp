#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mmchat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch inside a tensor op. The message names the op.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// A dialogue record that violates a preprocessing precondition.
class CorpusError : public Error {
 public:
  CorpusError(std::string dialogue_id, const std::string& what)
      : Error("dialogue " + dialogue_id + ": " + what), dialogue_id_(std::move(dialogue_id)) {}
  const std::string& dialogue_id() const noexcept { return dialogue_id_; }

 private:
  std::string dialogue_id_;
};

class ImageLoadError : public Error {
 public:
  ImageLoadError(std::string ref, const std::string& what)
      : Error("image " + ref + ": " + what), ref_(std::move(ref)) {}
  const std::string& ref() const noexcept { return ref_; }

 private:
  std::string ref_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Operation is not allowed in the object's current state (closed session, busy session, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

struct Diagnostic {
  enum class Level { kWarning, kError };
  Level level = Level::kWarning;
  std::string subject;  // dialogue id, image id, ...
  std::string message;
};

// Collects non-fatal findings from batch operations (preprocessing, index builds).
class Diagnostics {
 public:
  void warn(std::string subject, std::string message) {
    items_.push_back({Diagnostic::Level::kWarning, std::move(subject), std::move(message)});
  }
  void error(std::string subject, std::string message) {
    items_.push_back({Diagnostic::Level::kError, std::move(subject), std::move(message)});
  }
  const std::vector<Diagnostic>& items() const noexcept { return items_; }
  std::size_t count(Diagnostic::Level level) const {
    std::size_t n = 0;
    for (const auto& d : items_) n += d.level == level ? 1 : 0;
    return n;
  }
  std::size_t warnings() const { return count(Diagnostic::Level::kWarning); }
  std::size_t errors() const { return count(Diagnostic::Level::kError); }
  void clear() { items_.clear(); }

 private:
  std::vector<Diagnostic> items_;
};

}  // namespace mmchat
