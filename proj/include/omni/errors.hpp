// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace omni {

/// Violated precondition or interface contract.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ShapeError : ContractError {
    using ContractError::ContractError;
};

/// Math domain violation, e.g. log of a non-positive value.
struct DomainError : ContractError {
    using ContractError::ContractError;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

}  // namespace omni
