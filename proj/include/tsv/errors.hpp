#pragma once

#include <stdexcept>
#include <string>

namespace tsv {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Container format errors. Each malformed-input condition has its own type so
// callers (and tests) can tell them apart without parsing messages.
class IoError : public Error {
public:
    using Error::Error;
};

class MalformedHeaderError : public Error {
public:
    using Error::Error;
};

class TruncatedPayloadError : public Error {
public:
    using Error::Error;
};

class UnsupportedDtypeError : public Error {
public:
    using Error::Error;
};

class DuplicateNameError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

// Alignment errors between a pre-trained checkpoint and fine-tuned ones.
// `name()` is the offending parameter.
class AlignmentError : public Error {
public:
    AlignmentError(const std::string& what, std::string name) : Error(what), name_(std::move(name)) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

class NameSetMismatchError : public AlignmentError {
public:
    using AlignmentError::AlignmentError;
};

class ShapeMismatchError : public AlignmentError {
public:
    using AlignmentError::AlignmentError;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace tsv
