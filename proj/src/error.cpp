#include "poroperm/error.hpp"

namespace poroperm {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FileSizeMismatch: return "FileSizeMismatch";
    case ErrorCode::NotBinary: return "NotBinary";
    case ErrorCode::ZeroSurface: return "ZeroSurface";
    case ErrorCode::InvalidPorosity: return "InvalidPorosity";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::EdgeTooLarge: return "EdgeTooLarge";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::MissingLabels: return "MissingLabels";
    case ErrorCode::InvalidSplit: return "InvalidSplit";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::HeadsDontDivide: return "HeadsDontDivide";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::InvalidEpsilon: return "InvalidEpsilon";
    case ErrorCode::NegativeLearningRate: return "NegativeLearningRate";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::WrongHead: return "WrongHead";
    case ErrorCode::MissingNormStats: return "MissingNormStats";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::InvalidK: return "InvalidK";
    case ErrorCode::EmptyBudget: return "EmptyBudget";
  }
  return "Unknown";
}

}  // namespace poroperm
