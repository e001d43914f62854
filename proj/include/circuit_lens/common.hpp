#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace circuit_lens {

using Index = Eigen::Index;
using TokenId = std::int32_t;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Every failure the library reports. The CLI maps each to its own exit code.
enum class ErrorCode : int {
  MissingTensor = 1,
  ShapeMismatch,
  UnreadableContainer,
  NonFiniteWeight,
  IdOutOfRange,
  MalformedLine,
  EmptyCorpus,
  PositionOutOfRange,
  HeadOutOfRange,
  NeuronOutOfRange,
  LengthMismatch,
  NotNormalized,
  ContextTooShort,
  MissingBounds,
  MissingVariance,
  MixedAnchors,
  TooShort,
  NonFinite,
  RankOutOfRange,
  DegenerateVariance,
  ConfigError,
  ArtifactMismatch,
  Io,
};

std::string_view error_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace circuit_lens
