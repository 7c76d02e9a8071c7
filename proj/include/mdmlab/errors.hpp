// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mdm {

// Argument outside an operation's mathematical domain (bad token, bad schedule value, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Operation called on a state it is not defined for (e.g. predicting on a fully unmasked state).
class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Exact enumeration would exceed the configured cap.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// File system failure; carries the offending path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Transport or protocol failure talking to a remote denoiser. Safe to retry on a fresh connection.
class RemoteError : public std::runtime_error {
 public:
  RemoteError(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }
  bool retriable() const noexcept { return true; }

 private:
  std::string code_;
};

}  // namespace mdm
