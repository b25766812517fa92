#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "molfuse/numerics/rng.hpp"
#include "molfuse/numerics/tape.hpp"

namespace molfuse::model {

// Named parameter arrays in insertion order. Names are namespaced by the
// owning module: "encoder.", "fusion.", "text.".
class ParamSet {
 public:
  numerics::Tensor& add(const std::string& name, numerics::Tensor value);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const numerics::Tensor& get(const std::string& name) const;
  numerics::Tensor& get(const std::string& name);
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;
  // Adds every array of `other`; names must not collide.
  void merge(const ParamSet& other);

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::string> names_;
  std::map<std::string, numerics::Tensor> values_;
};

// Glorot-uniform fan_in x fan_out matrix.
numerics::Tensor glorot(std::size_t fan_in, std::size_t fan_out, numerics::Rng& rng);

// A ParamSet placed on a tape, one leaf per array.
class BoundParams {
 public:
  BoundParams(numerics::Tape& tape, const ParamSet& params, bool trainable = true);
  // Reuses existing tape values, one per name in params.names() order.
  BoundParams(const ParamSet& params, std::span<const numerics::Var> vars);

  numerics::Var operator[](const std::string& name) const;
  // Gradients in params.names() order; call after backward.
  std::vector<numerics::Tensor> gradients() const;

 private:
  const ParamSet* params_;
  std::map<std::string, numerics::Var> vars_;
};

// Binary container: magic, u32 version, config block of named f64 values,
// then arrays (u32-length-prefixed name, u32 rank, u32 extents, f64 data).
// All integers and floats little-endian.
struct Checkpoint {
  std::vector<std::pair<std::string, double>> config;
  ParamSet params;

  double config_value(std::string_view key) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace molfuse::model
