#pragma once

#include <stdexcept>
#include <string>

namespace ensforge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid sizes, schedules, method blocks, arities.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Two ParamSets (or a ParamSet and a network) whose architecture fingerprints differ.
class CombinabilityError : public Error {
 public:
  using Error::Error;
};

// Malformed ENSW/ENSR/manifest content. The message names the byte offset.
class FormatError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  PlacementError(const std::string& what, int vehicles_placed, int distractors_placed)
      : Error(what), vehicles_placed_(vehicles_placed), distractors_placed_(distractors_placed) {}
  int vehicles_placed() const noexcept { return vehicles_placed_; }
  int distractors_placed() const noexcept { return distractors_placed_; }

 private:
  int vehicles_placed_;
  int distractors_placed_;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace ensforge
