#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmseq {

enum class Errc {
  InsufficientData,
  DimensionMismatch,
  IndexOutOfRange,
  AlreadyFrozen,
  NotFrozen,
  DuplicateModality,
  ZeroSize,
  EmptyVocab,
  OutOfRange,
  UnknownModality,
  LengthNotDivisible,
  LayerRangeViolation,
  EmptyInstruction,
  SampleTooLong,
  AllZeroWeights,
  MalformedStream,
  MissingCodebooks,
  ShrinkNotAllowed,
  EmptyMask,
  NonFiniteLoss,
  PromptTooLong,
  BadSchedule,
  PredictorDistributionInvalid,
  ClientFailure,
  UnparseableResponse,
  InvalidConfig,
  Io,
  BadFormat,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::AlreadyFrozen: return "AlreadyFrozen";
    case Errc::NotFrozen: return "NotFrozen";
    case Errc::DuplicateModality: return "DuplicateModality";
    case Errc::ZeroSize: return "ZeroSize";
    case Errc::EmptyVocab: return "EmptyVocab";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::UnknownModality: return "UnknownModality";
    case Errc::LengthNotDivisible: return "LengthNotDivisible";
    case Errc::LayerRangeViolation: return "LayerRangeViolation";
    case Errc::EmptyInstruction: return "EmptyInstruction";
    case Errc::SampleTooLong: return "SampleTooLong";
    case Errc::AllZeroWeights: return "AllZeroWeights";
    case Errc::MalformedStream: return "MalformedStream";
    case Errc::MissingCodebooks: return "MissingCodebooks";
    case Errc::ShrinkNotAllowed: return "ShrinkNotAllowed";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::PromptTooLong: return "PromptTooLong";
    case Errc::BadSchedule: return "BadSchedule";
    case Errc::PredictorDistributionInvalid: return "PredictorDistributionInvalid";
    case Errc::ClientFailure: return "ClientFailure";
    case Errc::UnparseableResponse: return "UnparseableResponse";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::Io: return "Io";
    case Errc::BadFormat: return "BadFormat";
  }
  return "Unknown";
}

}  // namespace mmseq
