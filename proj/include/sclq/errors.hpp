#ifndef SCLQ_ERRORS_HPP
#define SCLQ_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace sclq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// phase geometry
class SingularFiber : public Error { public: using Error::Error; };
class TangentialIntersection : public Error { public: using Error::Error; };
class PointNotOnFiber : public Error { public: using Error::Error; };
class NoReferencePoint : public Error { public: using Error::Error; };

// semiclassics
class TangencyAtEndpoint : public Error { public: using Error::Error; };
class NonMonotoneAction : public Error { public: using Error::Error; };
class DegenerateStationaryPoint : public Error { public: using Error::Error; };

// quantum oracle
class UnsupportedOrdering : public Error { public: using Error::Error; };
class GridMismatch : public Error { public: using Error::Error; };
class OpenFiber : public Error { public: using Error::Error; };
class CountMismatch : public Error { public: using Error::Error; };

// star product
class OrderOverflow : public Error { public: using Error::Error; };
class ParseError : public Error { public: using Error::Error; };

// experiment runner
class DegenerateFit : public Error { public: using Error::Error; };

class ConfigError : public Error {
public:
    ConfigError(const std::string& what, int line = 0, std::string field = {})
        : Error(format(what, line, field)), line_(line), field_(std::move(field)) {}

    int line() const noexcept { return line_; }
    const std::string& field() const noexcept { return field_; }

private:
    static std::string format(const std::string& what, int line, const std::string& field) {
        std::string out = "config";
        if (line > 0) out += ":" + std::to_string(line);
        if (!field.empty()) out += " [" + field + "]";
        return out + ": " + what;
    }

    int line_;
    std::string field_;
};

} // namespace sclq

#endif
