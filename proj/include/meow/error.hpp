#pragma once

#include <stdexcept>
#include <string>

namespace meow {

// Error classes map 1:1 onto the CLI's machine-parsable failure categories.
enum class ErrorClass {
    domain,             // argument outside the operation's domain
    shape,              // dimension / length mismatch
    validation,         // well-formedness check failed
    insufficient_data,  // not enough samples to fit a model
    state,              // object not in the required state (e.g. untrained)
    config,             // inconsistent or unknown configuration
    io,                 // file missing or unreadable
    checksum,           // container CRC or size mismatch
    divergence,         // training produced a non-finite loss
    dataset,            // malformed dataset entry
    undefined_metric,   // metric has no value for the given inputs
};

const char* error_class_name(ErrorClass c);

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& msg)
        : std::runtime_error(msg), cls_(cls) {}
    ErrorClass error_class() const { return cls_; }

private:
    ErrorClass cls_;
};

#define MEOW_DEFINE_ERROR(Name, Cls)                         \
    class Name : public Error {                              \
    public:                                                  \
        explicit Name(const std::string& msg)                \
            : Error(ErrorClass::Cls, msg) {}                 \
    }

MEOW_DEFINE_ERROR(DomainError, domain);
MEOW_DEFINE_ERROR(ShapeError, shape);
MEOW_DEFINE_ERROR(ValidationError, validation);
MEOW_DEFINE_ERROR(InsufficientDataError, insufficient_data);
MEOW_DEFINE_ERROR(StateError, state);
MEOW_DEFINE_ERROR(ConfigError, config);
MEOW_DEFINE_ERROR(IoError, io);
MEOW_DEFINE_ERROR(ChecksumError, checksum);
MEOW_DEFINE_ERROR(DivergenceError, divergence);
MEOW_DEFINE_ERROR(DatasetError, dataset);
MEOW_DEFINE_ERROR(UndefinedMetricError, undefined_metric);

#undef MEOW_DEFINE_ERROR

}  // namespace meow
