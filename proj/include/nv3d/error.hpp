#ifndef NV3D_ERROR_HPP
#define NV3D_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace nv3d {

enum class ErrorCode {
  // input errors
  FileNotFound,
  MalformedFrame,
  NonFiniteValue,
  IoError,
  InvalidConfig,
  UsageError,
  // pipeline errors
  PointOutOfRange,
  EmptyInput,
  EmptyFrame,
  InsufficientNeighbors,
  DegenerateNeighborhood,
  LengthMismatch,
  DimensionMismatch,
  NonFiniteInput,
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::MalformedFrame: return "MalformedFrame";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::PointOutOfRange: return "PointOutOfRange";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyFrame: return "EmptyFrame";
    case ErrorCode::InsufficientNeighbors: return "InsufficientNeighbors";
    case ErrorCode::DegenerateNeighborhood: return "DegenerateNeighborhood";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// True for errors caused by bad user input (files, configs, flags) rather
/// than by a failure inside the processing chain.
inline bool is_input_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::FileNotFound:
    case ErrorCode::MalformedFrame:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::IoError:
    case ErrorCode::InvalidConfig:
    case ErrorCode::UsageError:
      return true;
    default:
      return false;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nv3d

#endif  // NV3D_ERROR_HPP
