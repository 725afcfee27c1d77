#pragma once

#include <stdexcept>
#include <string>

namespace kprox {

/// Caller handed in something malformed: wrong shapes, invalid config, bad file.
class InputError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced non-finite or runaway values.
class NumericalError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what)
{
  if (!cond)
    throw InputError(what);
}

} // namespace detail

} // namespace kprox
