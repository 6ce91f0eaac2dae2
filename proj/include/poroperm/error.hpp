#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace poroperm {

enum class ErrorCode {
  IoError,
  FileSizeMismatch,
  NotBinary,
  ZeroSurface,
  InvalidPorosity,
  InvalidSpec,
  EdgeTooLarge,
  EmptyInput,
  MissingLabels,
  InvalidSplit,
  ShapeMismatch,
  HeadsDontDivide,
  NonScalarLoss,
  NonFiniteValue,
  InvalidEpsilon,
  NegativeLearningRate,
  InvalidConfig,
  WrongHead,
  MissingNormStats,
  ConfigMismatch,
  CorruptCheckpoint,
  BadMagic,
  UnsupportedVersion,
  LengthMismatch,
  EmptyMask,
  ZeroVariance,
  NonFiniteLoss,
  TooFewSamples,
  InvalidK,
  EmptyBudget,
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

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace poroperm
