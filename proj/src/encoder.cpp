#include "molfuse/encoder.hpp"

#include <string>

#include "molfuse/numerics/ops.hpp"

namespace molfuse::encoder {

using numerics::Shape;
using numerics::Tensor;
using numerics::Var;
namespace ops = numerics;

namespace {

std::string layer(const char* kind, std::size_t t, const char* field) {
  return "encoder." + std::string(kind) + std::to_string(t) + "." + field;
}

void expect_shape(const model::ParamSet& params, const std::string& name, const Shape& shape) {
  if (!params.contains(name)) throw DimensionError("missing encoder parameter '" + name + "'");
  const auto& actual = params.get(name).shape();
  if (actual != shape) {
    throw DimensionError("encoder parameter '" + name + "' has shape " +
                         numerics::shape_string(actual) + ", expected " +
                         numerics::shape_string(shape));
  }
}

// x * w1 + b1 -> shifted softplus -> * w2 + b2
Var dense2(Var x, const model::BoundParams& p, const char* kind, std::size_t t) {
  Var h = ops::add_row(ops::matmul(x, p[layer(kind, t, "w1")]), p[layer(kind, t, "b1")]);
  h = ops::shifted_softplus(h);
  return ops::add_row(ops::matmul(h, p[layer(kind, t, "w2")]), p[layer(kind, t, "b2")]);
}

}  // namespace

void EncoderConfig::validate() const {
  rbf.validate();
  if (hidden < 2) throw ConfigError("encoder hidden width must be at least 2");
  if (iterations < 1) throw ConfigError("encoder needs at least one iteration");
}

model::ParamSet init_encoder(const EncoderConfig& cfg, numerics::Rng& rng) {
  cfg.validate();
  const std::size_t n = cfg.hidden, k = cfg.rbf.num_centers;
  model::ParamSet p;
  p.add("encoder.embed", model::glorot(qm9::kNumElements, n, rng));
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    p.add(layer("filter", t, "w1"), model::glorot(k, n, rng));
    p.add(layer("filter", t, "b1"), Tensor({n}, 0.0));
    p.add(layer("filter", t, "w2"), model::glorot(n, n, rng));
    p.add(layer("filter", t, "b2"), Tensor({n}, 0.0));
    p.add(layer("update", t, "w1"), model::glorot(n, n, rng));
    p.add(layer("update", t, "b1"), Tensor({n}, 0.0));
    p.add(layer("update", t, "w2"), model::glorot(n, n, rng));
    p.add(layer("update", t, "b2"), Tensor({n}, 0.0));
  }
  return p;
}

void check_encoder_params(const model::ParamSet& params, const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.hidden, k = cfg.rbf.num_centers;
  expect_shape(params, "encoder.embed", {qm9::kNumElements, n});
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    expect_shape(params, layer("filter", t, "w1"), {k, n});
    expect_shape(params, layer("filter", t, "b1"), {n});
    expect_shape(params, layer("filter", t, "w2"), {n, n});
    expect_shape(params, layer("filter", t, "b2"), {n});
    expect_shape(params, layer("update", t, "w1"), {n, n});
    expect_shape(params, layer("update", t, "b1"), {n});
    expect_shape(params, layer("update", t, "w2"), {n, n});
    expect_shape(params, layer("update", t, "b2"), {n});
  }
}

GraphBatch make_batch(std::span<const graph::MoleculeGraph* const> graphs) {
  GraphBatch b;
  b.num_molecules = graphs.size();
  std::size_t n_nodes = 0, n_edges = 0, k = 0;
  for (const auto* g : graphs) {
    n_nodes += g->num_atoms;
    n_edges += g->edges.size();
    if (!g->edges.empty()) {
      if (k != 0 && g->edge_rbf.cols() != k) {
        throw DimensionError("make_batch: graphs use different RBF sizes");
      }
      k = g->edge_rbf.cols();
    }
  }
  std::vector<double> feats, rbf;
  feats.reserve(n_nodes * qm9::kNumElements);
  rbf.reserve(n_edges * k);
  std::size_t offset = 0;
  for (std::size_t m = 0; m < graphs.size(); ++m) {
    const auto& g = *graphs[m];
    const auto f = g.node_feats.values();
    feats.insert(feats.end(), f.begin(), f.end());
    const auto r = g.edge_rbf.values();
    rbf.insert(rbf.end(), r.begin(), r.end());
    for (const auto& e : g.edges) {
      b.receivers.push_back(offset + e.i);
      b.senders.push_back(offset + e.j);
    }
    b.molecule_of_node.insert(b.molecule_of_node.end(), g.num_atoms, m);
    offset += g.num_atoms;
  }
  b.node_feats = Tensor({n_nodes, qm9::kNumElements}, std::move(feats));
  b.edge_rbf = Tensor({n_edges, k}, std::move(rbf));
  return b;
}

GraphBatch make_batch(const graph::MoleculeGraph& g) {
  const graph::MoleculeGraph* one[] = {&g};
  return make_batch(one);
}

Var pool(Var node_feats, std::span<const std::size_t> molecule_of_node,
         std::size_t num_molecules) {
  if (node_feats.value().rows() == 0) throw DegenerateInputError("cannot pool an empty graph");
  return ops::scatter_sum(node_feats, molecule_of_node, num_molecules);
}

Var pool(Var node_feats) {
  const std::vector<std::size_t> zeros(node_feats.value().rank() == 2
                                           ? node_feats.value().rows()
                                           : 1,
                                       0);
  return pool(node_feats, zeros, 1);
}

Var encode(const GraphBatch& batch, const model::BoundParams& params, const EncoderConfig& cfg) {
  if (batch.node_feats.rows() == 0) throw DegenerateInputError("cannot encode an empty graph");
  numerics::Tape& tape = params["encoder.embed"].tape();
  const std::size_t n_nodes = batch.node_feats.rows();
  const Var onehot = tape.constant(batch.node_feats);
  Var h = ops::matmul(onehot, params["encoder.embed"]);
  const bool has_edges = !batch.receivers.empty();
  const Var rbf = has_edges ? tape.constant(batch.edge_rbf) : Var();
  if (has_edges && batch.edge_rbf.cols() != cfg.rbf.num_centers) {
    throw DimensionError("edge RBF width " + std::to_string(batch.edge_rbf.cols()) +
                         " does not match the encoder's " +
                         std::to_string(cfg.rbf.num_centers) + " centers");
  }
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    Var agg;
    if (has_edges) {
      const Var filter = dense2(rbf, params, "filter", t);
      const Var messages = ops::mul(filter, ops::gather_rows(h, batch.senders));
      agg = ops::scatter_sum(messages, batch.receivers, n_nodes);
    } else {
      agg = tape.constant(Tensor({n_nodes, cfg.hidden}, 0.0));
    }
    h = ops::add(h, dense2(agg, params, "update", t));
  }
  return pool(h, batch.molecule_of_node, batch.num_molecules);
}

Tensor encode(const graph::MoleculeGraph& g, const model::ParamSet& params,
              const EncoderConfig& cfg) {
  check_encoder_params(params, cfg);
  numerics::Tape tape;
  const model::BoundParams bound(tape, params, false);
  const Var out = encode(make_batch(g), bound, cfg);
  return out.value().reshaped({cfg.hidden});
}

void write_config(std::vector<std::pair<std::string, double>>& out, const EncoderConfig& cfg) {
  out.emplace_back("encoder.hidden", static_cast<double>(cfg.hidden));
  out.emplace_back("encoder.iterations", static_cast<double>(cfg.iterations));
  out.emplace_back("encoder.cutoff", cfg.rbf.cutoff);
  out.emplace_back("encoder.num_centers", static_cast<double>(cfg.rbf.num_centers));
  out.emplace_back("encoder.gamma", cfg.rbf.gamma);
}

EncoderConfig read_config(const model::Checkpoint& ckpt) {
  EncoderConfig cfg;
  cfg.hidden = static_cast<std::size_t>(ckpt.config_value("encoder.hidden"));
  cfg.iterations = static_cast<std::size_t>(ckpt.config_value("encoder.iterations"));
  cfg.rbf.cutoff = ckpt.config_value("encoder.cutoff");
  cfg.rbf.num_centers = static_cast<std::size_t>(ckpt.config_value("encoder.num_centers"));
  cfg.rbf.gamma = ckpt.config_value("encoder.gamma");
  cfg.validate();
  return cfg;
}

}  // namespace molfuse::encoder
