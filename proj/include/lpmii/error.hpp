#pragma once

#include <stdexcept>
#include <string>

namespace lpmii {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside its documented domain (class index, N_sc, ...).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// On-disk data is missing, malformed or disagrees with its manifest.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace lpmii
