#pragma once

#include <stdexcept>
#include <string>

namespace derain {

// Shape/size disagreements between tensor operands.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contracts that are not plain shape mismatches
// (non-scalar loss, too few frames, zero-sized memory bank, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where the training loop requires finite ones.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace derain
