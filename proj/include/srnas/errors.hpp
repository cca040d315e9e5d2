#ifndef SRNAS_ERRORS_HPP
#define SRNAS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace srnas {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed JSON or a document that does not match the expected schema.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Decision vector inconsistent with its search space (length, range).
class InvalidGenome : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied configuration (unknown key, out-of-range value, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor/layer geometry violation (kernel larger than input, rank mismatch, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Stored weights disagree with the shape the consumer expects.
// Distinct from ShapeError so cache corruption is identifiable upstream.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

// API used out of order (backward before forward, resume without checkpoint, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss. This is an evaluation *outcome*:
// search loops catch it and turn the candidate into a worst-reward record.
class DivergedError : public Error {
 public:
  using Error::Error;
};

// A raw metric fed to the reward pipeline was NaN/Inf.
class NonFiniteMetric : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (missing file, short read, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace srnas

#endif  // SRNAS_ERRORS_HPP
