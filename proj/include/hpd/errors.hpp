#pragma once

#include <stdexcept>
#include <string>

namespace hpd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// bad user input: unknown ids, schema violations, invalid arguments
struct ConfigError : Error {
  using Error::Error;
};

// missing or corrupt files, checksum mismatches
struct DataError : Error {
  using Error::Error;
};

// numerical failures during training/optimization (divergence, NaN)
struct TrainError : Error {
  using Error::Error;
};

}  // namespace hpd
