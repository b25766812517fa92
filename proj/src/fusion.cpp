#include "molfuse/fusion.hpp"

#include <string>

#include "molfuse/numerics/ops.hpp"

namespace molfuse::fusion {

using numerics::Shape;
using numerics::Tensor;
using numerics::Var;
namespace ops = numerics;

namespace {

// The Glorot bound is symmetric in the fans, so an in x out draw read as
// out x in has the same distribution.
Tensor output_major(std::size_t out, std::size_t in, numerics::Rng& rng) {
  return model::glorot(in, out, rng).reshaped({out, in});
}

void expect_shape(const model::ParamSet& params, const std::string& name, const Shape& shape) {
  if (!params.contains(name)) throw DimensionError("missing fusion parameter '" + name + "'");
  const auto& actual = params.get(name).shape();
  if (actual != shape) {
    throw DimensionError("fusion matrix '" + name + "' has shape " +
                         numerics::shape_string(actual) + ", expected " +
                         numerics::shape_string(shape));
  }
}

void expect_cols(Var x, std::size_t cols, const char* what, const char* matrix) {
  const auto& v = x.value();
  const std::size_t have = v.rank() == 2 ? v.cols() : v.size();
  if (have != cols) {
    throw DimensionError(std::string(what) + " has width " + std::to_string(have) + " but '" +
                         matrix + "' expects " + std::to_string(cols));
  }
}

Var stem(Var g, const model::BoundParams& p) {
  expect_cols(g, p["fusion.wg"].value().cols(), "geometry embedding", "fusion.wg");
  return ops::layer_norm(ops::matmul_bt(g, p["fusion.wg"]), p["fusion.ln_g.gamma"],
                         p["fusion.ln_g.beta"]);
}

}  // namespace

void FusionConfig::validate() const {
  if (hidden < 2) throw ConfigError("fusion width must be at least 2 for layer norm");
  if (text_width < 1) throw ConfigError("text projection width must be at least 1");
}

model::ParamSet init_fusion(const FusionConfig& cfg, numerics::Rng& rng, bool multimodal) {
  cfg.validate();
  const std::size_t n = cfg.hidden, d = cfg.text_width, h = cfg.head_width();
  model::ParamSet p;
  p.add("fusion.wg", output_major(n, n, rng));
  p.add("fusion.ln_g.gamma", Tensor({n}, 1.0));
  p.add("fusion.ln_g.beta", Tensor({n}, 0.0));
  if (multimodal) {
    p.add("fusion.wt", output_major(n, d, rng));
    p.add("fusion.ln_t.gamma", Tensor({n}, 1.0));
    p.add("fusion.ln_t.beta", Tensor({n}, 0.0));
    p.add("fusion.gate.w", output_major(n, 2 * n, rng));
    p.add("fusion.gate.b", Tensor({n}, 0.0));
  }
  p.add("fusion.head.w1", output_major(h, n, rng));
  p.add("fusion.head.b1", Tensor({h}, 0.0));
  p.add("fusion.head.w2", output_major(1, h, rng));
  p.add("fusion.head.b2", Tensor({1}, 0.0));
  return p;
}

void check_fusion_params(const model::ParamSet& params, const FusionConfig& cfg,
                         bool multimodal) {
  cfg.validate();
  const std::size_t n = cfg.hidden, d = cfg.text_width, h = cfg.head_width();
  expect_shape(params, "fusion.wg", {n, n});
  expect_shape(params, "fusion.ln_g.gamma", {n});
  expect_shape(params, "fusion.ln_g.beta", {n});
  if (multimodal) {
    expect_shape(params, "fusion.wt", {n, d});
    expect_shape(params, "fusion.ln_t.gamma", {n});
    expect_shape(params, "fusion.ln_t.beta", {n});
    expect_shape(params, "fusion.gate.w", {n, 2 * n});
    expect_shape(params, "fusion.gate.b", {n});
  }
  expect_shape(params, "fusion.head.w1", {h, n});
  expect_shape(params, "fusion.head.b1", {h});
  expect_shape(params, "fusion.head.w2", {1, h});
  expect_shape(params, "fusion.head.b2", {1});
}

Fused fuse(Var g, Var t_proj, const model::BoundParams& p) {
  Fused out;
  out.g_tilde = stem(g, p);
  expect_cols(t_proj, p["fusion.wt"].value().cols(), "projected text", "fusion.wt");
  out.t_tilde = ops::layer_norm(ops::matmul_bt(t_proj, p["fusion.wt"]), p["fusion.ln_t.gamma"],
                                p["fusion.ln_t.beta"]);
  const Var both = ops::concat_cols(out.g_tilde, out.t_tilde);
  out.gate = ops::sigmoid(ops::add_row(ops::matmul_bt(both, p["fusion.gate.w"]),
                                       p["fusion.gate.b"]));
  out.f = ops::gated_interpolate(out.gate, out.g_tilde, out.t_tilde);
  return out;
}

Var predict(Var f, const model::BoundParams& p) {
  expect_cols(f, p["fusion.head.w1"].value().cols(), "fused vector", "fusion.head.w1");
  Var h = ops::add_row(ops::matmul_bt(f, p["fusion.head.w1"]), p["fusion.head.b1"]);
  h = ops::shifted_softplus(h);
  return ops::add_row(ops::matmul_bt(h, p["fusion.head.w2"]), p["fusion.head.b2"]);
}

Var geometry_only_head(Var g, const model::BoundParams& p) { return predict(stem(g, p), p); }

}  // namespace molfuse::fusion
