#include "molfuse/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "molfuse/error.hpp"
#include "molfuse/util.hpp"

namespace molfuse::model {
namespace {

constexpr char kMagic[8] = {'M', 'O', 'L', 'F', 'U', 'S', 'E', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_name(std::string& out, std::string_view name) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    const auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32(const char* what) {
    const auto b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  double f64(const char* what) {
    const auto b = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(b[i])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string name(const char* what) { return std::string(take(u32(what), what)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

numerics::Tensor& ParamSet::add(const std::string& name, numerics::Tensor value) {
  if (contains(name)) throw PreconditionError("duplicate parameter name '" + name + "'");
  numerics::require_finite(value, name);
  names_.push_back(name);
  return values_.emplace(name, std::move(value)).first->second;
}

const numerics::Tensor& ParamSet::get(const std::string& name) const {
  const auto it = values_.find(name);
  if (it == values_.end()) throw IndexError("unknown parameter '" + name + "'");
  return it->second;
}

numerics::Tensor& ParamSet::get(const std::string& name) {
  const auto it = values_.find(name);
  if (it == values_.end()) throw IndexError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : values_) n += t.size();
  return n;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& name : other.names()) add(name, other.get(name));
}

numerics::Tensor glorot(std::size_t fan_in, std::size_t fan_out, numerics::Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = rng.uniform(-limit, limit);
  return numerics::Tensor({fan_in, fan_out}, std::move(w));
}

BoundParams::BoundParams(numerics::Tape& tape, const ParamSet& params, bool trainable)
    : params_(&params) {
  for (const auto& name : params.names()) {
    vars_.emplace(name, trainable ? tape.variable(params.get(name))
                                  : tape.constant(params.get(name)));
  }
}

BoundParams::BoundParams(const ParamSet& params, std::span<const numerics::Var> vars)
    : params_(&params) {
  if (vars.size() != params.size()) {
    throw DimensionError("expected " + std::to_string(params.size()) + " bound values, got " +
                         std::to_string(vars.size()));
  }
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const auto& name = params.names()[i];
    if (vars[i].shape() != params.get(name).shape()) {
      throw DimensionError("bound value for '" + name + "' has shape " +
                           numerics::shape_string(vars[i].shape()));
    }
    vars_.emplace(name, vars[i]);
  }
}

numerics::Var BoundParams::operator[](const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw IndexError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<numerics::Tensor> BoundParams::gradients() const {
  std::vector<numerics::Tensor> out;
  out.reserve(params_->size());
  for (const auto& name : params_->names()) out.push_back(vars_.at(name).grad());
  return out;
}

double Checkpoint::config_value(std::string_view key) const {
  for (const auto& [k, v] : config)
    if (k == key) return v;
  throw FormatError("checkpoint config has no key '" + std::string(key) + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.config.size()));
  for (const auto& [key, value] : ckpt.config) {
    put_name(out, key);
    put_f64(out, value);
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& name : ckpt.params.names()) {
    const auto& t = ckpt.params.get(name);
    put_name(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof kMagic, "magic") != std::string_view(kMagic, sizeof kMagic)) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint32_t n_config = r.u32("config count");
  for (std::uint32_t i = 0; i < n_config; ++i) {
    std::string key = r.name("config key");
    ckpt.config.emplace_back(std::move(key), r.f64("config value"));
  }
  const std::uint32_t n_arrays = r.u32("array count");
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    const std::string name = r.name("array name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("array '" + name + "' has implausible rank");
    numerics::Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
      e = r.u32("extent");
      count *= e;
    }
    if (count * 8 > bytes.size()) throw FormatError("array '" + name + "' exceeds file size");
    std::vector<double> data(count);
    for (double& v : data) v = r.f64("array data");
    try {
      ckpt.params.add(name, numerics::Tensor(std::move(shape), std::move(data)));
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint array rejected: ") + e.what());
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint arrays");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  util::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(util::read_file(path));
}

}  // namespace molfuse::model
