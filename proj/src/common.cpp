#include "circuit_lens/common.hpp"

namespace circuit_lens {

std::string_view error_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::UnreadableContainer: return "UnreadableContainer";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::IdOutOfRange: return "IdOutOfRange";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
    case ErrorCode::HeadOutOfRange: return "HeadOutOfRange";
    case ErrorCode::NeuronOutOfRange: return "NeuronOutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::ContextTooShort: return "ContextTooShort";
    case ErrorCode::MissingBounds: return "MissingBounds";
    case ErrorCode::MissingVariance: return "MissingVariance";
    case ErrorCode::MixedAnchors: return "MixedAnchors";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::RankOutOfRange: return "RankOutOfRange";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::ArtifactMismatch: return "ArtifactMismatch";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace circuit_lens
