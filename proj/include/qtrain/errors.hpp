// Copyright 2026 The qtrain Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include <stdexcept>
#include <string>

namespace qtrain {

// Base for every error the engine reports. Callers that only care about
// failure can catch this; tests match on the concrete subclasses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or layer geometries that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed IDX files, checkpoints and config documents.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Semantically invalid configuration (bad hyperparameters, unknown keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An operation was invoked in a state that does not allow it, e.g. applying
// a gradient update before a full minibatch has been buffered.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace qtrain
