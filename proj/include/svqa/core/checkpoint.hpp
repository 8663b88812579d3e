#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "svqa/core/array.hpp"
#include "svqa/core/autodiff.hpp"

namespace svqa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named float32 array container.
///
/// Layout (all integers unsigned 32-bit little-endian):
///   "SVQA" | version | record count | records...
///   record = name length | UTF-8 name | rank | extents[rank] | float32 LE payload
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(std::string name, Array value);
  bool contains(std::string_view name) const;
  const Array& get(std::string_view name) const;
  const std::vector<std::pair<std::string, Array>>& records() const noexcept { return records_; }

  /// Writes to a temporary sibling and renames it into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  /// Stores every parameter whose name starts with `prefix`; optionally Adam moments and step.
  void put_params(const ParameterStore& store, std::string_view prefix, bool with_optimizer);
  /// Loads all parameters under `prefix`; each must be present with a matching shape.
  void load_params(ParameterStore& store, std::string_view prefix) const;

  /// Scalar helper records (stored as rank-1, one element).
  void put_scalar(std::string name, double value) { put(std::move(name), Array(Shape{1}, value)); }
  double get_scalar(std::string_view name) const { return get(name).item(); }

 private:
  std::vector<std::pair<std::string, Array>> records_;
};

}  // namespace svqa
