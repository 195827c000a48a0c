#pragma once

#include <stdexcept>
#include <string>

namespace grasp {

// Base of every error the library throws. Each subclass maps to one CLI exit
// code class (see tools/grasp_cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition (bad ratio, empty list, invalid config).
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf losses, divergent training, degenerate scales.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed config, checkpoint, log, or p_star file.
class ParseError : public Error {
 public:
  using Error::Error;
};

// An input artifact was produced under different settings than the current
// run (config hash mismatch across phases).
class ArtifactMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace grasp
