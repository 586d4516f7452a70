#pragma once

#include <stdexcept>
#include <string>

namespace ttmg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct NumericalError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };

} // namespace ttmg
