/*
 * Copyright (c) 2026, the persona-moe contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace persona {

/// Root of every exception thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed caller input: empty sequences, length mismatches, ids out of range.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A zero-norm vector reached an operation that normalizes it.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A hyperparameter is outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

/// A record or trait selection violates a data invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Generator output that could not be parsed. Keeps the raw text for audit.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class BatchConstructionError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class VersionMismatchError : public Error {
 public:
  using Error::Error;
};

/// Training loss went NaN or grew past the divergence bound.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace persona
