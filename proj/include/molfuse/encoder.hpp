#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "molfuse/graph.hpp"
#include "molfuse/params.hpp"

namespace molfuse::encoder {

struct EncoderConfig {
  std::size_t hidden = 128;
  std::size_t iterations = 3;
  graph::RbfConfig rbf;

  void validate() const;
};

// Parameters under "encoder.":
//   embed            5 x n
//   filter<t>.w1     K x n, filter<t>.b1 n, filter<t>.w2 n x n, filter<t>.b2 n
//   update<t>.w1     n x n, update<t>.b1 n, update<t>.w2 n x n, update<t>.b2 n
model::ParamSet init_encoder(const EncoderConfig& cfg, numerics::Rng& rng);
void check_encoder_params(const model::ParamSet& params, const EncoderConfig& cfg);

// Several graphs laid out as one disconnected graph with global atom indices.
struct GraphBatch {
  numerics::Tensor node_feats;  // N x 5
  numerics::Tensor edge_rbf;    // E x K
  std::vector<std::size_t> receivers;
  std::vector<std::size_t> senders;
  std::vector<std::size_t> molecule_of_node;
  std::size_t num_molecules = 0;
};

GraphBatch make_batch(std::span<const graph::MoleculeGraph* const> graphs);
GraphBatch make_batch(const graph::MoleculeGraph& g);

// Column sums of node rows per molecule; one output row per molecule.
numerics::Var pool(numerics::Var node_feats, std::span<const std::size_t> molecule_of_node,
                   std::size_t num_molecules);
// All rows into one.
numerics::Var pool(numerics::Var node_feats);

// Returns the pooled embeddings, num_molecules x n.
numerics::Var encode(const GraphBatch& batch, const model::BoundParams& params,
                     const EncoderConfig& cfg);

// Forward-only convenience for one graph; returns g of length n.
numerics::Tensor encode(const graph::MoleculeGraph& g, const model::ParamSet& params,
                        const EncoderConfig& cfg);

void write_config(std::vector<std::pair<std::string, double>>& out, const EncoderConfig& cfg);
EncoderConfig read_config(const model::Checkpoint& ckpt);

}  // namespace molfuse::encoder
