#ifndef BFDA_ERROR_HPP
#define BFDA_ERROR_HPP

#include <stdexcept>
#include <string>

/**
 * @file error.hpp
 * @brief Exception types raised by the library.
 */

namespace bfda {

/**
 * @brief Base class for all errors raised by this library.
 */
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define BFDA_DEFINE_ERROR(Name)                                                 \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}    \
    };

BFDA_DEFINE_ERROR(InvalidSeries)
BFDA_DEFINE_ERROR(EmptySample)
BFDA_DEFINE_ERROR(DomainMismatch)
BFDA_DEFINE_ERROR(Underdetermined)
BFDA_DEFINE_ERROR(InvalidWarp)
BFDA_DEFINE_ERROR(NonPositiveDerivative)
BFDA_DEFINE_ERROR(TruncationError)
BFDA_DEFINE_ERROR(PairingError)
BFDA_DEFINE_ERROR(GroupError)
BFDA_DEFINE_ERROR(ConfigError)
BFDA_DEFINE_ERROR(IoError)

#undef BFDA_DEFINE_ERROR

}

#endif
