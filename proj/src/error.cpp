#include "geoproj/error.hpp"

namespace geoproj {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroInput: return "ZeroInput";
    case ErrorCode::SingularRotationBlock: return "SingularRotationBlock";
    case ErrorCode::OffManifoldBase: return "OffManifoldBase";
    case ErrorCode::UnsupportedManifold: return "UnsupportedManifold";
    case ErrorCode::OffTangent: return "OffTangent";
    case ErrorCode::CutLocus: return "CutLocus";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DegenerateTriad: return "DegenerateTriad";
    case ErrorCode::ProjectionFailure: return "ProjectionFailure";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::OffManifoldInput: return "OffManifoldInput";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::IntegratorStepLimit: return "IntegratorStepLimit";
    case ErrorCode::OutOfReach: return "OutOfReach";
    case ErrorCode::AntipodeHit: return "AntipodeHit";
    case ErrorCode::Config: return "Config";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace geoproj
