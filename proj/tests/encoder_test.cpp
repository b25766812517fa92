#include <cmath>

#include "doctest.h"
#include "molfuse/encoder.hpp"
#include "molfuse/numerics/grad_check.hpp"
#include "molfuse/numerics/ops.hpp"
#include "test_support.hpp"

using namespace molfuse;
using namespace molfuse::encoder;
using numerics::Tensor;
using qm9::Element;

namespace {

EncoderConfig tiny() {
  EncoderConfig cfg;
  cfg.hidden = 16;
  cfg.iterations = 1;
  return cfg;
}

graph::MoleculeGraph three_atom_graph(const graph::RbfConfig& rbf) {
  const std::vector<Element> el{Element::C, Element::O, Element::H};
  const std::vector<qm9::Vec3> xyz{{0, 0, 0}, {1.2, 0, 0}, {0, 1.0, 0}};
  return graph::build_graph(el, xyz, rbf);
}

}  // namespace

TEST_CASE("pool sums rows") {
  numerics::Tape tape;
  const auto one = pool(tape.constant(Tensor::matrix({{1.5, -2}})));
  CHECK(one.value().values() == std::vector<double>{1.5, -2});
  const auto two = pool(tape.constant(Tensor::matrix({{1, 2}, {3, 4}})));
  CHECK(two.value().values() == std::vector<double>{4, 6});
  CHECK_THROWS_AS(pool(tape.constant(Tensor({0, 3}, 0.0))), DegenerateInputError);

  numerics::Rng rng(4);
  std::vector<double> rows(40 * 3);
  for (double& v : rows) v = rng.normal() * 1e3;
  const auto base = pool(tape.constant(Tensor({40, 3}, rows))).value();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> perm(40);
    for (std::size_t i = 0; i < 40; ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<double> shuffled(rows.size());
    for (std::size_t i = 0; i < 40; ++i)
      for (std::size_t c = 0; c < 3; ++c) shuffled[perm[i] * 3 + c] = rows[i * 3 + c];
    CHECK(pool(tape.constant(Tensor({40, 3}, shuffled))).value() == base);
  }
}

TEST_CASE("hand-set two-wide encoder matches a scalar oracle") {
  EncoderConfig cfg;
  cfg.hidden = 2;
  cfg.iterations = 1;
  cfg.rbf = {5.0, 2, 0.5};
  model::ParamSet p;
  p.add("encoder.embed", Tensor::matrix({{0.1, 0.2}, {0.5, -0.3}, {0, 0}, {-0.4, 0.6}, {0, 0}}));
  p.add("encoder.filter0.w1", Tensor::matrix({{0.3, -0.2}, {0.1, 0.4}}));
  p.add("encoder.filter0.b1", Tensor::vector({0.05, -0.1}));
  p.add("encoder.filter0.w2", Tensor::matrix({{0.7, 0.2}, {-0.5, 0.3}}));
  p.add("encoder.filter0.b2", Tensor::vector({0.0, 0.1}));
  p.add("encoder.update0.w1", Tensor::matrix({{0.6, -0.1}, {0.2, 0.5}}));
  p.add("encoder.update0.b1", Tensor::vector({0.1, 0.0}));
  p.add("encoder.update0.w2", Tensor::matrix({{-0.3, 0.8}, {0.4, 0.2}}));
  p.add("encoder.update0.b2", Tensor::vector({0.02, -0.05}));
  const Tensor g = encode(three_atom_graph(cfg.rbf), p, cfg);
  // Evaluated term by term at 30 significant digits.
  CHECK(g[0] == doctest::Approx(0.21234767419889988529).epsilon(1e-13));
  CHECK(g[1] == doctest::Approx(0.50208294352928302668).epsilon(1e-13));
}

TEST_CASE("single atom encodes deterministically without messages") {
  numerics::Rng rng(1);
  const auto cfg = tiny();
  const auto params = init_encoder(cfg, rng);
  const std::vector<Element> el{Element::N};
  const std::vector<qm9::Vec3> xyz{{0.3, -1, 2}};
  const auto g = graph::build_graph(el, xyz, cfg.rbf);
  const Tensor a = encode(g, params, cfg);
  CHECK(a == encode(g, params, cfg));

  // h0 + update(0) for the N row of the embedding; with no messages only the
  // first update bias reaches the activation.
  const auto& emb = params.get("encoder.embed");
  const auto& b1 = params.get("encoder.update0.b1");
  const auto& w2 = params.get("encoder.update0.w2");
  const auto& b2 = params.get("encoder.update0.b2");
  for (std::size_t c = 0; c < cfg.hidden; ++c) {
    double u = b2[c];
    for (std::size_t k = 0; k < cfg.hidden; ++k)
      u += std::log(0.5 * std::exp(b1[k]) + 0.5) * w2.at(k, c);
    CHECK(a[c] == doctest::Approx(emb.at(2, c) + u).epsilon(1e-12));
  }
}

TEST_CASE("parameter shapes are checked") {
  numerics::Rng rng(2);
  auto cfg = tiny();
  auto params = init_encoder(cfg, rng);
  CHECK_NOTHROW(check_encoder_params(params, cfg));
  auto wider = cfg;
  wider.hidden = 8;
  CHECK_THROWS_AS(check_encoder_params(params, wider), DimensionError);
  auto deeper = cfg;
  deeper.iterations = 2;
  CHECK_THROWS_AS(check_encoder_params(params, deeper), DimensionError);
  auto coarse = cfg;
  coarse.rbf.num_centers = 10;
  CHECK_THROWS_AS(encode(three_atom_graph(coarse.rbf), params, coarse), DimensionError);
}

TEST_CASE("rigid motions and relabeling leave g unchanged") {
  numerics::Rng rng(11);
  const auto cfg = tiny();
  const auto params = init_encoder(cfg, rng);
  for (const auto& m : testsupport::fixture_molecules(5)) {
    const Tensor g0 = encode(graph::build_graph(m, cfg.rbf), params, cfg);
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor gr = encode(graph::build_graph(testsupport::rotated(m, rng), cfg.rbf), params, cfg);
      CHECK(testsupport::rel_diff(g0.data(), gr.data()) <= 1e-9);
      const Tensor gt =
          encode(graph::build_graph(testsupport::translated(m, rng, 20), cfg.rbf), params, cfg);
      CHECK(testsupport::rel_diff(g0.data(), gt.data()) <= 1e-9);
      const Tensor gp = encode(graph::build_graph(testsupport::permuted(m, rng), cfg.rbf), params, cfg);
      CHECK(gp == g0);
    }
  }
}

TEST_CASE("far-apart copies pool to twice the single embedding") {
  numerics::Rng rng(12);
  const auto cfg = tiny();
  const auto params = init_encoder(cfg, rng);
  for (const auto& m : testsupport::fixture_molecules(5)) {
    const Tensor g1 = encode(graph::build_graph(m, cfg.rbf), params, cfg);
    const Tensor g2 = encode(graph::build_graph(testsupport::doubled(m, 100.0), cfg.rbf), params, cfg);
    std::vector<double> twice(g1.values());
    for (double& v : twice) v *= 2;
    CHECK(testsupport::rel_diff(twice, g2.data()) <= 1e-9);
  }
}

TEST_CASE("batched encoding equals per-molecule encoding") {
  numerics::Rng rng(13);
  const auto cfg = tiny();
  const auto params = init_encoder(cfg, rng);
  const auto mols = testsupport::fixture_molecules(6);
  std::vector<graph::MoleculeGraph> graphs;
  for (const auto& m : mols) graphs.push_back(graph::build_graph(m, cfg.rbf));
  std::vector<const graph::MoleculeGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  numerics::Tape tape;
  const model::BoundParams bound(tape, params, false);
  const auto out = encode(make_batch(ptrs), bound, cfg).value();
  REQUIRE(out.rows() == mols.size());
  for (std::size_t m = 0; m < mols.size(); ++m) {
    const Tensor single = encode(graphs[m], params, cfg);
    for (std::size_t c = 0; c < cfg.hidden; ++c) CHECK(out.at(m, c) == single[c]);
  }
}

TEST_CASE("encoder gradients match central differences") {
  numerics::Rng rng(14);
  EncoderConfig cfg;
  cfg.hidden = 4;
  cfg.iterations = 2;
  cfg.rbf = {5.0, 6, 1.0};
  const auto params = init_encoder(cfg, rng);
  const auto g = three_atom_graph(cfg.rbf);
  const auto batch = make_batch(g);
  const Tensor readout = Tensor({cfg.hidden, 1}, std::vector<double>{0.3, -0.7, 1.1, 0.5});
  std::vector<Tensor> inputs;
  for (const auto& name : params.names()) inputs.push_back(params.get(name));
  const auto report = numerics::grad_check(
      [&](numerics::Tape& tape, std::span<const numerics::Var> vars) {
        const model::BoundParams bound(params, vars);
        const auto emb = encode(batch, bound, cfg);
        return numerics::sum(numerics::matmul(emb, tape.constant(readout)));
      },
      inputs, 1e-5);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("checkpoint round trip") {
  numerics::Rng rng(15);
  const auto cfg = tiny();
  model::Checkpoint ckpt;
  write_config(ckpt.config, cfg);
  ckpt.params = init_encoder(cfg, rng);
  const std::string bytes = model::encode_checkpoint(ckpt);
  const auto back = model::decode_checkpoint(bytes);
  CHECK(back == ckpt);
  const auto cfg2 = read_config(back);
  CHECK(cfg2.hidden == cfg.hidden);
  CHECK(cfg2.rbf.gamma == cfg.rbf.gamma);
  CHECK(bytes.substr(0, 8) == "MOLFUSE1");
  // Version field sits right after the magic, little-endian.
  CHECK(bytes[8] == 1);
  CHECK(bytes[9] == 0);

  CHECK_THROWS_AS(model::decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(model::decode_checkpoint("NOTACKPT"), FormatError);
  std::string bumped = bytes;
  bumped[8] = 9;
  CHECK_THROWS_AS(model::decode_checkpoint(bumped), FormatError);
  CHECK_THROWS_AS(model::decode_checkpoint(bytes + "x"), FormatError);
}
