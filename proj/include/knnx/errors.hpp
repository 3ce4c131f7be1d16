#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace knnx {

// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KNNX_DEFINE_ERROR(Name)              \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  }

KNNX_DEFINE_ERROR(ArchError);
KNNX_DEFINE_ERROR(ShapeError);
KNNX_DEFINE_ERROR(LabelError);
KNNX_DEFINE_ERROR(DataError);
KNNX_DEFINE_ERROR(TapError);
KNNX_DEFINE_ERROR(SingularHessianError);
KNNX_DEFINE_ERROR(ModelError);
KNNX_DEFINE_ERROR(ArgError);
KNNX_DEFINE_ERROR(IdError);
KNNX_DEFINE_ERROR(SampleError);

#undef KNNX_DEFINE_ERROR

class DegenerateVectorError : public Error {
 public:
  explicit DegenerateVectorError(const std::string& what, std::int64_t id = -1)
      : Error(id >= 0 ? what + " (sample id " + std::to_string(id) + ")" : what), id_(id) {}
  // Offending sample id, or -1 when the vector is not a stored row.
  std::int64_t id() const noexcept { return id_; }

 private:
  std::int64_t id_;
};

// Malformed file input. `position` is a byte offset for binary formats and a
// 1-based row number for text formats.
class ParseError : public Error {
 public:
  enum class Unit { byte, row };

  ParseError(const std::string& what, std::size_t position, Unit unit)
      : Error(what + (unit == Unit::byte ? " at byte offset " : " at row ") + std::to_string(position)),
        position_(position),
        unit_(unit) {}

  std::size_t position() const noexcept { return position_; }
  Unit unit() const noexcept { return unit_; }

 private:
  std::size_t position_;
  Unit unit_;
};

// Configuration validation failure; carries every violated field.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

}  // namespace knnx
