// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ilab {

// Every failure the library reports derives from Error so callers can catch
// one type at the boundary (the CLI does exactly that).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class LookupError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class AllocationError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };

}  // namespace ilab
