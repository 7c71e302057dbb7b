#pragma once

#include <stdexcept>
#include <string>

namespace gradselect {

// Base of every error the library raises. The CLI maps the concrete
// subclasses onto exit codes (usage 1, data 2, numerical 3).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

// Malformed input files, missing ids, inconsistent stores.
class DataError : public Error {
public:
    using Error::Error;
};

// Non-finite losses and other numerical failures during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace gradselect
