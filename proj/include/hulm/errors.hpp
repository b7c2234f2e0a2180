#pragma once

#include <stdexcept>
#include <string>

namespace hulm {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// config/contract -> 2, data/parse/vocab -> 3, numeric -> 4.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller violated an operation precondition (non-scalar loss, empty author, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not line up; message names both shapes.
struct ShapeError : ContractError {
    explicit ShapeError(const std::string& msg) : ContractError(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : DataError {
    explicit ParseError(const std::string& msg) : DataError(msg) {}
};

struct VocabError : DataError {
    explicit VocabError(const std::string& msg) : DataError(msg) {}
};

// Non-finite values where finite math was required (log/softmax domains, ...).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hulm
