#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "molfuse/error.hpp"
#include "molfuse/numerics/tensor.hpp"
#include "molfuse/qm9.hpp"

namespace molfuse::graph {

class GeometryError : public Error {
 public:
  using Error::Error;
};

// Gaussian radial basis on fixed, evenly spaced centers over [0, cutoff].
struct RbfConfig {
  double cutoff = 5.0;     // Angstrom
  std::size_t num_centers = 50;
  double gamma = 10.0;     // 1/Angstrom^2

  void validate() const;
  std::vector<double> centers() const;
};

// Ordered pair; messages flow from atom j into atom i.
struct Edge {
  std::size_t i = 0;
  std::size_t j = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

struct MoleculeGraph {
  std::size_t num_atoms = 0;
  numerics::Tensor node_feats;   // N x 5 one-hot
  std::vector<Edge> edges;       // sorted by (i, j)
  std::vector<double> edge_dist;
  numerics::Tensor edge_rbf;     // E x K

  std::vector<std::size_t> receivers() const;
  std::vector<std::size_t> senders() const;
};

// Atoms closer than this are treated as coincident.
inline constexpr double kMinSeparation = 1e-3;

std::vector<double> rbf_expand(double d, const RbfConfig& cfg);

MoleculeGraph build_graph(std::span<const qm9::Element> elements,
                          std::span<const qm9::Vec3> coords, const RbfConfig& cfg);
MoleculeGraph build_graph(const qm9::Molecule& m, const RbfConfig& cfg);

}  // namespace molfuse::graph
