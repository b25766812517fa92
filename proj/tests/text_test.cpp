#include <cmath>
#include <sstream>

#include "doctest.h"
#include "molfuse/numerics/grad_check.hpp"
#include "molfuse/numerics/ops.hpp"
#include "molfuse/text.hpp"
#include "molfuse/util.hpp"

using namespace molfuse;
using namespace molfuse::text;
using numerics::Tensor;

namespace {

pubchem::TextDescriptors methane() {
  pubchem::TextDescriptors d;
  d.cid = 297;
  d.iupac_name = "methane";
  d.molecular_formula = "CH4";
  d.molecular_weight = 16.043;
  d.xlogp = 1.1;
  d.synonyms = {"methane", "Marsh gas", "Methyl hydride", "CH4"};
  d.fetched_at = 1760745600;
  d.source_url = "https://pubchem.ncbi.nlm.nih.gov/rest/pug/compound/cid/297/property/JSON";
  return d;
}

EmbeddingRecord record(std::int64_t cid, std::size_t dim, std::uint64_t seed) {
  numerics::Rng rng(seed);
  EmbeddingRecord r;
  r.cid = cid;
  r.text_sha256 = util::sha256_hex("text " + std::to_string(cid));
  for (std::size_t i = 0; i < dim; ++i) r.vector.push_back(rng.normal() * std::pow(10.0, rng.uniform(-30, 30)));
  return r;
}

}  // namespace

TEST_CASE("embedding file parsing") {
  CHECK(parse_embeddings("").records.empty());
  CHECK(parse_embeddings("# model: none\n\n").comments.size() == 1);

  const auto r = record(297, kEmbeddingDim, 1);
  const auto one = parse_embeddings(serialize_record(r) + "\n");
  REQUIRE(one.records.size() == 1);
  CHECK(one.records.at(297) == r);

  const auto short_rec = record(5, 767, 2);
  try {
    parse_embeddings("# header\n" + serialize_record(short_rec) + "\n");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("cid 5") != std::string::npos);
    CHECK(std::string(e.what()).find("767") != std::string::npos);
  }

  auto bad_hash = r;
  bad_hash.text_sha256 = "ABC";
  CHECK_THROWS_AS(parse_embeddings(serialize_record(bad_hash)), FormatError);
  bad_hash.text_sha256 = std::string(64, 'G');
  CHECK_THROWS_AS(parse_embeddings(serialize_record(bad_hash)), FormatError);
  CHECK_THROWS_AS(parse_embeddings("{\"cid\": \"x\"}"), FormatError);
  CHECK_THROWS_AS(parse_embeddings("not json"), FormatError);
}

TEST_CASE("duplicate cids keep the last record") {
  auto first = record(9, kEmbeddingDim, 3);
  auto second = record(9, kEmbeddingDim, 4);
  const auto f = parse_embeddings(serialize_record(first) + "\n" + serialize_record(second) + "\n");
  CHECK(f.records.size() == 1);
  CHECK(f.duplicates == 1);
  CHECK(f.records.at(9) == second);
}

TEST_CASE("write then load is bit-identical") {
  std::vector<EmbeddingRecord> recs;
  for (int i = 1; i <= 5; ++i) recs.push_back(record(i * 11, kEmbeddingDim, 10 + i));
  std::ostringstream out;
  const std::vector<std::string> header{"model: test"};
  write_embeddings(out, recs, header);
  const auto back = parse_embeddings(out.str());
  CHECK(back.comments == std::vector<std::string>{"# model: test"});
  for (const auto& r : recs) CHECK(back.records.at(r.cid) == r);
  CHECK_THROWS_AS(load_embeddings("/nonexistent/embeddings.jsonl"), ConfigError);
}

TEST_CASE("atom counts from formulas") {
  CHECK(atom_count_from_formula("CH4") == 5);
  CHECK(atom_count_from_formula("C2H6O") == 9);
  CHECK(atom_count_from_formula("C10H22") == 32);
  CHECK(atom_count_from_formula("ClH") == 2);
  CHECK(atom_count_from_formula("H4N+") == 5);
  CHECK(atom_count_from_formula("") == 0);
}

TEST_CASE("featurizer layout") {
  const auto d = methane();
  const NumericStandardizer identity;
  const auto v = featurize_descriptors(d, identity);
  REQUIRE(v.size() == kEmbeddingDim);
  CHECK(v == featurize_descriptors(d, identity));
  CHECK(v[0] == 16.043);
  CHECK(v[1] == 1.1);
  CHECK(v[7] == 5.0);
  CHECK(v[8] == 1.0);

  double norm = 0;
  std::size_t nonzero = 0;
  for (std::size_t i = kNumericFeatures; i < kEmbeddingDim; ++i) {
    norm += v[i] * v[i];
    nonzero += v[i] != 0.0;
  }
  CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-12);
  // Reference block from an independent implementation of the hashing rule.
  CHECK(nonzero == 24);
  CHECK(v[kNumericFeatures + 13] == doctest::Approx(-0.14586499149789456).epsilon(1e-14));
  CHECK(v[kNumericFeatures + 71] == doctest::Approx(0.14586499149789456).epsilon(1e-14));
  CHECK(v[kNumericFeatures + 535] == doctest::Approx(-0.4375949744936837).epsilon(1e-14));

  auto bare = d;
  bare.iupac_name.clear();
  bare.synonyms.clear();
  bare.molecular_formula = "H2";
  bare.xlogp.reset();
  const auto b = featurize_descriptors(bare, identity);
  for (std::size_t i = kNumericFeatures; i < kEmbeddingDim; ++i) CHECK(b[i] == 0.0);
  CHECK(b[0] == 16.043);
  CHECK(b[1] == 0.0);
  CHECK(b[7] == 2.0);
  CHECK(b[8] == 0.0);
}

TEST_CASE("standardizer fit and round trip") {
  std::vector<pubchem::TextDescriptors> recs;
  for (int i = 0; i < 10; ++i) {
    auto d = methane();
    d.molecular_weight = 16 + i;
    d.tpsa = i % 3;
    if (i % 2) d.xlogp.reset();
    recs.push_back(d);
  }
  const auto s = fit_standardizer(recs);
  CHECK(s.scale[2] == 1.0);  // constant donor count
  std::array<double, kNumericFeatures> mean{}, sq{};
  for (const auto& d : recs) {
    const auto v = featurize_descriptors(d, s);
    for (std::size_t k = 0; k < kNumericFeatures; ++k) {
      mean[k] += v[k] / 10;
      sq[k] += v[k] * v[k] / 10;
    }
  }
  for (std::size_t k : {0, 1, 5, 8}) {
    CHECK(std::abs(mean[k]) < 1e-12);
    CHECK(std::abs(sq[k] - 1.0) < 1e-12);
  }
  const auto back = NumericStandardizer::from_json(nlohmann::json::parse(s.to_json().dump()));
  CHECK(back.mean == s.mean);
  CHECK(back.scale == s.scale);
}

TEST_CASE("projection head") {
  numerics::Rng rng(21);
  auto head = init_text_head(16, rng);
  CHECK(head.get("text.w").shape() == numerics::Shape{768, 16});
  CHECK_THROWS_AS(init_text_head(0, rng), ConfigError);

  head.get("text.w").fill(0.0);
  for (std::size_t i = 0; i < 16; ++i) head.get("text.b")[i] = 0.5 * i;
  {
    numerics::Tape tape;
    const model::BoundParams p(tape, head, false);
    const auto t = tape.constant(Tensor({1, 768}, featurize_descriptors(methane(), {})));
    CHECK(project(t, p).value().values() == head.get("text.b").values());
  }
  {
    model::ParamSet ident;
    Tensor w({768, 768}, 0.0);
    for (std::size_t i = 0; i < 768; ++i) w.at(i, i) = 1.0;
    ident.add("text.w", w);
    ident.add("text.b", Tensor({768}, 0.0));
    numerics::Tape tape;
    const model::BoundParams p(tape, ident, false);
    std::vector<double> t(768);
    for (double& v : t) v = rng.normal();
    CHECK(project(tape.constant(Tensor({1, 768}, t)), p).value().values() == t);
    CHECK_THROWS_AS(project(tape.constant(Tensor({1, 767}, 0.0)), p), DimensionError);
  }

  auto small = init_text_head(3, rng);
  std::vector<double> tv(768);
  for (double& v : tv) v = rng.normal();
  const Tensor readout = Tensor({1, 3}, std::vector<double>{0.4, -1.2, 0.9});
  const auto rep = numerics::grad_check(
      [&](numerics::Tape& tape, std::span<const numerics::Var> in) {
        const model::BoundParams p(small, in.first(2));
        const auto out = numerics::shifted_softplus(project(in[2], p));
        return numerics::sum(numerics::mul(out, tape.constant(readout)));
      },
      {small.get("text.w"), small.get("text.b"), Tensor({1, 768}, tv)}, 1e-6);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("embed-check compares hashes against rendered descriptions") {
  std::map<std::int64_t, std::string> desc{{1, "alpha"}, {2, "beta"}, {3, "gamma"}};
  EmbeddingFile f;
  auto ok = record(1, kEmbeddingDim, 5);
  ok.text_sha256 = util::sha256_hex("alpha");
  auto wrong = record(2, kEmbeddingDim, 6);
  wrong.text_sha256 = util::sha256_hex("beta ");
  auto stray = record(4, kEmbeddingDim, 7);
  f.records = {{1, ok}, {2, wrong}, {4, stray}};
  const auto rep = check_embeddings(f, desc);
  CHECK_FALSE(rep.ok());
  CHECK(rep.records == 3);
  CHECK(rep.matched == 1);
  CHECK(rep.hash_mismatch == std::vector<std::int64_t>{2});
  CHECK(rep.unknown_cid == std::vector<std::int64_t>{4});
  CHECK(rep.missing_cid == std::vector<std::int64_t>{3});

  std::ostringstream out;
  write_description_manifest(out, desc);
  CHECK(out.str() == "{\"cid\":1,\"text\":\"alpha\"}\n{\"cid\":2,\"text\":\"beta\"}\n"
                     "{\"cid\":3,\"text\":\"gamma\"}\n");
}
