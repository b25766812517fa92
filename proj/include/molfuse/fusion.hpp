#pragma once

#include <cstddef>

#include "molfuse/error.hpp"
#include "molfuse/params.hpp"

namespace molfuse::fusion {

struct FusionConfig {
  std::size_t hidden = 128;     // width of g and of the fused vector
  std::size_t text_width = 16;  // width of the projected text vector

  void validate() const;
  std::size_t head_width() const { return hidden / 2; }
};

// Parameters under "fusion.". Matrices are stored output-major, so a batch
// of row vectors x is mapped as x * W^T.
//   wg n x n, ln_g.gamma n, ln_g.beta n            geometry stem
//   wt n x d, ln_t.gamma n, ln_t.beta n            text branch
//   gate.w n x 2n, gate.b n                       gate over [g~ | t~]
//   head.w1 n/2 x n, head.b1 n/2, head.w2 1 x n/2, head.b2 1
// The geometry-only model holds only the stem and the head.
model::ParamSet init_fusion(const FusionConfig& cfg, numerics::Rng& rng, bool multimodal);
void check_fusion_params(const model::ParamSet& params, const FusionConfig& cfg, bool multimodal);

struct Fused {
  numerics::Var g_tilde;  // B x n
  numerics::Var t_tilde;  // B x n
  numerics::Var gate;     // B x n, in (0, 1)
  numerics::Var f;        // B x n
};

// g: B x n, t_proj: B x d.
Fused fuse(numerics::Var g, numerics::Var t_proj, const model::BoundParams& params);
// f: B x n -> B x 1.
numerics::Var predict(numerics::Var f, const model::BoundParams& params);
// The baseline: LayerNorm(g W_g^T) into the same head.
numerics::Var geometry_only_head(numerics::Var g, const model::BoundParams& params);

}  // namespace molfuse::fusion
