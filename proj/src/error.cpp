#include "meow/error.hpp"

namespace meow {

const char* error_class_name(ErrorClass c) {
    switch (c) {
        case ErrorClass::domain: return "domain";
        case ErrorClass::shape: return "shape";
        case ErrorClass::validation: return "validation";
        case ErrorClass::insufficient_data: return "insufficient-data";
        case ErrorClass::state: return "state";
        case ErrorClass::config: return "config";
        case ErrorClass::io: return "io";
        case ErrorClass::checksum: return "checksum";
        case ErrorClass::divergence: return "divergence";
        case ErrorClass::dataset: return "dataset";
        case ErrorClass::undefined_metric: return "undefined-metric";
    }
    return "?";
}

}  // namespace meow
