#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ckmpm {

// Exit-code taxonomy: ConfigError -> 2, NumericalError -> 3, IoError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// A particle left the allocated domain (or would scatter outside it).
struct OutOfDomainError : NumericalError {
  OutOfDomainError(std::size_t particle, const std::string& what)
      : NumericalError(what), particle_index(particle) {}
  std::size_t particle_index;
};

// det F <= 0 detected for a solid particle.
struct InvertedElementError : NumericalError {
  explicit InvertedElementError(const std::string& what) : NumericalError(what) {}
};

}  // namespace ckmpm
