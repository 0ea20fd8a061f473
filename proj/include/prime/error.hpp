#pragma once

#include <stdexcept>
#include <string>

namespace prime {

// Validation errors map to CLI exit code 2, numeric errors to exit code 3.
enum class ErrorCategory { Validation, Numeric };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define PRIME_DECLARE_ERROR(Name, Category)                                    \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what)                                 \
            : Error(ErrorCategory::Category, std::string(#Name ": ") + what) {} \
    }

PRIME_DECLARE_ERROR(ShapeMismatch, Validation);
PRIME_DECLARE_ERROR(InvalidConfig, Validation);
PRIME_DECLARE_ERROR(FormatError, Validation);
PRIME_DECLARE_ERROR(MissingFile, Validation);
PRIME_DECLARE_ERROR(DimMismatch, Validation);
PRIME_DECLARE_ERROR(NoObservedModality, Validation);
PRIME_DECLARE_ERROR(EmptyBatch, Validation);
PRIME_DECLARE_ERROR(InsufficientGroup, Validation);

PRIME_DECLARE_ERROR(NonFiniteError, Numeric);
PRIME_DECLARE_ERROR(NonFiniteLoss, Numeric);
PRIME_DECLARE_ERROR(AllKeysMasked, Numeric);
PRIME_DECLARE_ERROR(ZeroVector, Numeric);
PRIME_DECLARE_ERROR(NoReliableToken, Numeric);
PRIME_DECLARE_ERROR(NoComparablePairs, Numeric);
PRIME_DECLARE_ERROR(SingleClass, Numeric);
PRIME_DECLARE_ERROR(Separation, Numeric);
PRIME_DECLARE_ERROR(DegenerateBins, Numeric);

#undef PRIME_DECLARE_ERROR

} // namespace prime
