#pragma once

#include <stdexcept>
#include <string>

namespace implantformer {

// Base class for all library errors. Each subclass maps to a distinct
// process exit code in the CLI (see tools/main.cpp).
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// File could not be opened, read or written.
class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// A file header is malformed (bad magic, version or field values).
class FormatError : public Error {
public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Declared sizes do not match the payload actually present.
class SizeMismatchError : public Error {
public:
  explicit SizeMismatchError(const std::string& msg) : Error(msg) {}
};

// A precondition on arguments or configuration was violated.
class InvalidArgumentError : public Error {
public:
  explicit InvalidArgumentError(const std::string& msg) : Error(msg) {}
};

// Least-squares line fit is undefined for the given points
// (fewer than two points, or all slice indices identical).
class DegenerateFitError : public Error {
public:
  explicit DegenerateFitError(const std::string& msg) : Error(msg) {}
};

// Training loss became non-finite.
class DivergedError : public Error {
public:
  explicit DivergedError(const std::string& msg) : Error(msg) {}
};

}  // namespace implantformer
