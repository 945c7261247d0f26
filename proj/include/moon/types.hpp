#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace moon {

// Row-major throughout: one row per token / sample.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

/// Which raw modalities an encoder input carries.
enum class Modality { kText, kImage, kMultimodal };

inline constexpr std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::kText: return "t";
    case Modality::kImage: return "i";
    case Modality::kMultimodal: return "mm";
  }
  return "?";
}

Modality parse_modality(std::string_view s);

// Error taxonomy. All derive from std::runtime_error so callers can catch broadly.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class AugmentationError : public std::runtime_error {
 public:
  AugmentationError(std::string record_id, const std::string& what)
      : std::runtime_error(record_id + ": " + what), record_id_(std::move(record_id)) {}
  const std::string& record_id() const noexcept { return record_id_; }

 private:
  std::string record_id_;
};

}  // namespace moon
