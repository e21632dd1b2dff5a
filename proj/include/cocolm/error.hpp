#pragma once

#include <stdexcept>
#include <string>

namespace cocolm {

enum class ErrorCode {
  MalformedLine,
  DuplicateNodeId,
  DuplicateEdge,
  UnknownNodeReference,
  NonPositiveWeight,
  UnknownRelationLabel,
  NodeOutOfRange,
  EmptyGraph,
  InvalidConfig,
  NoEligibleStartNodes,
  SamplingStalled,
  EmptyCorpus,
  UnknownNode,
  IdOutOfRange,
  NoEventualitySpans,
  NoConnectiveSpans,
  NoPositiveCandidate,
  SequenceTooLong,
  MissingLabelPosition,
  NonFiniteLoss,
  ShapeMismatch,
  EmptyAfterUnking,
  TooFewCandidates,
  EmptyHeldOut,
  InvalidSpec,
  MissingArtifact,
  ConfigParse,
  Io,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::DuplicateNodeId: return "DuplicateNodeId";
    case ErrorCode::DuplicateEdge: return "DuplicateEdge";
    case ErrorCode::UnknownNodeReference: return "UnknownNodeReference";
    case ErrorCode::NonPositiveWeight: return "NonPositiveWeight";
    case ErrorCode::UnknownRelationLabel: return "UnknownRelationLabel";
    case ErrorCode::NodeOutOfRange: return "NodeOutOfRange";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NoEligibleStartNodes: return "NoEligibleStartNodes";
    case ErrorCode::SamplingStalled: return "SamplingStalled";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::UnknownNode: return "UnknownNode";
    case ErrorCode::IdOutOfRange: return "IdOutOfRange";
    case ErrorCode::NoEventualitySpans: return "NoEventualitySpans";
    case ErrorCode::NoConnectiveSpans: return "NoConnectiveSpans";
    case ErrorCode::NoPositiveCandidate: return "NoPositiveCandidate";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::MissingLabelPosition: return "MissingLabelPosition";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyAfterUnking: return "EmptyAfterUnking";
    case ErrorCode::TooFewCandidates: return "TooFewCandidates";
    case ErrorCode::EmptyHeldOut: return "EmptyHeldOut";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::ConfigParse: return "ConfigParse";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

// All library failures are reported through this one exception type; the
// code lets callers (and the CLI exit-status mapping) branch without parsing
// messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cocolm
