#pragma once

#include <stdexcept>
#include <string>

namespace advscale {

// Base for every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or layer shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value violates a documented precondition (negative epsilon, bad index...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// The loss gradient (or J*delta) is exactly zero, so no attack direction exists.
class DegenerateGradient : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

class IdxError : public Error {
 public:
  enum class Kind { Io, WrongMagic, Truncated, CountMismatch };

  IdxError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Experiment configuration failed validation. `field` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace advscale
