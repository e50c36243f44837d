#pragma once

#include <stdexcept>
#include <string>

namespace qkdsim {

// Malformed input text (bad JSON, bad CSV). Message carries file:line context.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Well-formed input that breaks a model invariant.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CalibrationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Northbound request rejected before any switch was touched.
class RequestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace qkdsim
