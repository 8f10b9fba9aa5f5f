#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pnet {

// Base for every data-level failure raised by the library. The CLI maps these
// to exit code 2; usage errors never derive from this type.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error
{
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : Error(path + ":" + std::to_string(line) + ": " + what)
        , line_(line)
    {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class MeshError : public Error
{
public:
    using Error::Error;
};

class DimensionError : public Error
{
public:
    using Error::Error;
};

class FactorizationError : public Error
{
public:
    using Error::Error;
};

class ConfigError : public Error
{
public:
    using Error::Error;
};

} // namespace pnet
