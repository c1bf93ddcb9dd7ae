#pragma once

#include <stdexcept>
#include <string>

namespace changeminds {

// Bad or inconsistent configuration; also used for CLI usage problems.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Missing/corrupt files, invalid labels, unreadable checkpoints.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes that violate an operation's contract.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values in a computation that must stay finite.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace changeminds
