#pragma once

#include <stdexcept>
#include <string>

namespace idprune {

// Base of every exception thrown by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed numeric input (non-finite entries, empty operands, bad parameters).
class InvalidInput : public Error {
public:
    using Error::Error;
};

// R11 of a pivoted QR is numerically singular at the requested rank.
class RankDeficiency : public Error {
public:
    using Error::Error;
};

// Tensor or model shapes do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Model topology violates a structural rule (orphan batch norm, bad residual nesting, ...).
class StructuralError : public Error {
public:
    using Error::Error;
};

// On-disk format problems: bad magic, truncated payload, schema mismatch.
class FormatError : public Error {
public:
    using Error::Error;
};

// Training diverged.
class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace idprune
