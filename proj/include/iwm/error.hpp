#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace iwm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string to_string(const Shape& shape);

/// Base of every error thrown by the library. `kind()` is a stable
/// machine-readable tag; `what()` carries the human-readable diagnostic.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : Error("shape_error", op + " got " + to_string(a) + " and " + to_string(b)),
        lhs(a), rhs(b) {}
  ShapeError(const std::string& op, const std::string& message)
      : Error("shape_error", op + ": " + message) {}

  Shape lhs;
  Shape rhs;
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& message) : Error("value_error", message) {}
};

class DatasetError : public Error {
 public:
  DatasetError(const std::string& kind, const std::string& message) : Error(kind, message) {}
};

class CheckpointError : public Error {
 public:
  CheckpointError(const std::string& kind, const std::string& message) : Error(kind, message) {}
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& kind, const std::string& message) : Error(kind, message) {}
};

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace iwm
