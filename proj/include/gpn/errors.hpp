#ifndef GPN_ERRORS_HPP
#define GPN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace gpn {

struct NotPositiveDefinite : std::runtime_error {
    explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};

struct JitterExhausted : std::runtime_error {
    explicit JitterExhausted(const std::string& what) : std::runtime_error(what) {}
};

struct DimensionMismatch : std::runtime_error {
    explicit DimensionMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct NotPsd : std::runtime_error {
    explicit NotPsd(const std::string& what) : std::runtime_error(what) {}
};

struct NonFiniteGradient : std::runtime_error {
    explicit NonFiniteGradient(const std::string& what) : std::runtime_error(what) {}
};

struct BadShape : std::runtime_error {
    explicit BadShape(const std::string& what) : std::runtime_error(what) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

struct SchemaMismatch : std::runtime_error {
    explicit SchemaMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct BadMagic : std::runtime_error {
    explicit BadMagic(const std::string& what) : std::runtime_error(what) {}
};

struct TruncatedFile : std::runtime_error {
    explicit TruncatedFile(const std::string& what) : std::runtime_error(what) {}
};

struct DatasetMissing : std::runtime_error {
    explicit DatasetMissing(const std::string& what) : std::runtime_error(what) {}
};

} // namespace gpn

#endif
