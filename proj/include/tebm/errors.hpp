#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tebm {

// Tensor/image/sinogram extents do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A numerical process produced non-finite values or lost its step size.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (at step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Binary file could not be decoded.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// API called out of order (e.g. buffer refill without a draw).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace tebm
