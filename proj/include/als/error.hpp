#pragma once

#include <stdexcept>
#include <string>

namespace als {

enum class ErrorKind {
    ZeroNorm,
    EmptyPool,
    DimMismatch,
    NonFinite,
    InvalidConfig,
    ContextOverflow,
    IoFailure,
    CorruptFile,
    LayerMismatch,
    EmptyGoodPool,
    EmptyBadPool,
    EmptyCorpus,
    InvalidTime,
};

const char *to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string &what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

// Process exit code used by the CLI for a given failure class.
int exit_code_for(ErrorKind kind) noexcept;

} // namespace als
