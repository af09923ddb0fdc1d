#pragma once

#include <stdexcept>
#include <string>

namespace wsdesc {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t location, const std::string& what)
      : Error(path + ":" + std::to_string(location) + ": " + what), location_(location) {}

  /// Line number for text formats, byte offset for binary payloads.
  std::size_t location() const { return location_; }

 private:
  std::size_t location_;
};

class DegeneratePatch : public Error {
 public:
  using Error::Error;
};

class AmbiguousFrame : public Error {
 public:
  using Error::Error;
};

class RankDeficient : public Error {
 public:
  using Error::Error;
};

class DegenerateSpectrum : public Error {
 public:
  using Error::Error;
};

class RegistrationFailed : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace wsdesc
