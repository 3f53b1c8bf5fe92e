#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace geoproj {

enum class ErrorCode {
  // geometry / liealg
  ZeroInput,
  SingularRotationBlock,
  OffManifoldBase,
  UnsupportedManifold,
  OffTangent,
  CutLocus,
  DimensionMismatch,
  // dynamics
  DegenerateTriad,
  ProjectionFailure,
  // neuralnet
  ShapeMismatch,
  OffManifoldInput,
  DivergedLoss,
  // flowmatch
  IntegratorStepLimit,
  // oracles
  OutOfReach,
  AntipodeHit,
  // harness
  Config,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace geoproj
