#include "molfuse/graph.hpp"

#include <cmath>
#include <string>

namespace molfuse::graph {

void RbfConfig::validate() const {
  if (!(cutoff > 0.0) || !std::isfinite(cutoff))
    throw ConfigError("rbf cutoff must be positive, got " + std::to_string(cutoff));
  if (num_centers < 2)
    throw ConfigError("rbf needs at least 2 centers, got " + std::to_string(num_centers));
  if (!(gamma > 0.0) || !std::isfinite(gamma))
    throw ConfigError("rbf gamma must be positive, got " + std::to_string(gamma));
}

std::vector<double> RbfConfig::centers() const {
  std::vector<double> c(num_centers);
  for (std::size_t k = 0; k < num_centers; ++k)
    c[k] = cutoff * static_cast<double>(k) / static_cast<double>(num_centers - 1);
  return c;
}

std::vector<std::size_t> MoleculeGraph::receivers() const {
  std::vector<std::size_t> out(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) out[e] = edges[e].i;
  return out;
}

std::vector<std::size_t> MoleculeGraph::senders() const {
  std::vector<std::size_t> out(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) out[e] = edges[e].j;
  return out;
}

std::vector<double> rbf_expand(double d, const RbfConfig& cfg) {
  cfg.validate();
  if (!(d > 0.0) || !(d <= cfg.cutoff)) {
    throw PreconditionError("rbf_expand: distance " + std::to_string(d) +
                            " outside (0, " + std::to_string(cfg.cutoff) + "]");
  }
  std::vector<double> out = cfg.centers();
  for (double& c : out) c = std::exp(-cfg.gamma * (d - c) * (d - c));
  return out;
}

MoleculeGraph build_graph(std::span<const qm9::Element> elements,
                          std::span<const qm9::Vec3> coords, const RbfConfig& cfg) {
  cfg.validate();
  if (elements.size() != coords.size()) {
    throw DimensionError("build_graph: " + std::to_string(elements.size()) + " elements but " +
                         std::to_string(coords.size()) + " coordinates");
  }
  const std::size_t n = elements.size();
  MoleculeGraph g;
  g.num_atoms = n;
  g.node_feats = numerics::Tensor({n, qm9::kNumElements}, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    g.node_feats.at(a, static_cast<std::size_t>(elements[a])) = 1.0;
  }

  std::vector<double> rbf;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = coords[j].x - coords[i].x;
      const double dy = coords[j].y - coords[i].y;
      const double dz = coords[j].z - coords[i].z;
      const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (!std::isfinite(d)) throw NonFiniteError("build_graph: non-finite coordinates");
      if (d <= kMinSeparation) {
        throw GeometryError("atoms " + std::to_string(std::min(i, j)) + " and " +
                            std::to_string(std::max(i, j)) + " coincide (distance " +
                            std::to_string(d) + " A)");
      }
      if (d > cfg.cutoff) continue;
      g.edges.push_back({i, j});
      g.edge_dist.push_back(d);
      const auto row = rbf_expand(d, cfg);
      rbf.insert(rbf.end(), row.begin(), row.end());
    }
  }
  g.edge_rbf = numerics::Tensor({g.edges.size(), cfg.num_centers}, std::move(rbf));
  return g;
}

MoleculeGraph build_graph(const qm9::Molecule& m, const RbfConfig& cfg) {
  return build_graph(m.elements, m.coords, cfg);
}

}  // namespace molfuse::graph
