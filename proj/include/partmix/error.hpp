#pragma once

#include <stdexcept>
#include <string>

namespace partmix {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input smaller than an operation can handle (image, grid, window).
class SizeError : public Error {
 public:
  using Error::Error;
};

// Index or window outside its container.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Structurally invalid input: bad annotation, bad partition, bad ordering.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite or otherwise unusable numeric data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file contents.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures; message always carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace partmix
