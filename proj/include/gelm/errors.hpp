#pragma once

#include <stdexcept>
#include <string>

namespace gelm {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch or out-of-domain argument to a numeric primitive.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API contract (e.g. backward from a non-scalar node).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad model input: sequence too long, token id out of range, bad mask.
class InputError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Malformed file on disk (checkpoint, dataset, report).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Wire-protocol failure talking to a model backend.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace gelm
