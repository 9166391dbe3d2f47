#ifndef TCMA_ERROR_HPP
#define TCMA_ERROR_HPP

#include <stdexcept>
#include <string>

namespace tcma {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible or invalid tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (e.g. tau <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Requested count exceeds what the input provides (top-k with k > n).
class SizeError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a precondition that is not about shapes or domains.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data: bad magic, truncated payload, checksum mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// The operating system refused a read or write.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Corpus-level validation failure (dangling reference, shape mismatch, ...).
class CorpusError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a NaN or infinite loss.
class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

}  // namespace tcma

#endif  // TCMA_ERROR_HPP
