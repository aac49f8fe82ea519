#pragma once

#include <stdexcept>
#include <string>

namespace sdclip {

// Tensor shapes disagree for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke an operation's precondition (non-scalar loss, batch mismatch, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Checkpoint could not be read: missing files, version mismatch, checksum/length failure.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sdclip
