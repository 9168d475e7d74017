#pragma once

#include <stdexcept>
#include <string>

namespace projnorm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  RankDeficientError(const std::string& what, long effective_rank)
      : Error(what + " (effective rank " + std::to_string(effective_rank) + ")"),
        effective_rank_(effective_rank) {}
  long effective_rank() const { return effective_rank_; }

 private:
  long effective_rank_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// Non-finite loss during training; step is zero-based.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(long step)
      : Error("training diverged: non-finite loss at step " + std::to_string(step)),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace projnorm
