// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lalora {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    kSuccess = 0,
    kValidation = 2,
    kNumeric = 3,
    kIo = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual ExitCode exit_code() const noexcept = 0;
};

/// Bad user input: malformed config, inconsistent shapes, unknown kinds.
class ValidationError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::kValidation; }
};

/// Dimensions that overflow a configured cap or do not line up.
class SizeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// A precondition between cooperating calls was violated (stale trace, asymmetric input).
class ContractError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class NumericError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

/// An inverse was requested of something that has none.
class SingularityError : public NumericError {
public:
    using NumericError::NumericError;
};

class IoError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::kIo; }
};

}  // namespace lalora
