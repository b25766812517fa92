#include "molfuse/text.hpp"

#include <cctype>
#include <cmath>
#include <ostream>

#include "molfuse/numerics/ops.hpp"
#include "molfuse/util.hpp"

namespace molfuse::text {
namespace {

using nlohmann::json;

bool is_hex64(const std::string& s) {
  if (s.size() != 64) return false;
  for (char c : s)
    if (!std::isdigit(static_cast<unsigned char>(c)) && (c < 'a' || c > 'f')) return false;
  return true;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void hash_trigrams(std::string_view s, std::span<double> block) {
  for (std::size_t i = 0; i + 3 <= s.size(); ++i) {
    const std::uint64_t h = fnv1a(s.substr(i, 3), kHashSeed);
    block[h % block.size()] += (h >> 63) ? -1.0 : 1.0;
  }
}

}  // namespace

EmbeddingFile parse_embeddings(std::string_view text) {
  EmbeddingFile out;
  std::size_t lineno = 0;
  for (const auto raw : util::split_lines(text)) {
    ++lineno;
    const auto line = util::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '#') {
      out.comments.emplace_back(line);
      continue;
    }
    const std::string where = "embedding line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + ": not a JSON object (" + e.what() + ")");
    }
    EmbeddingRecord r;
    if (!j.is_object() || !j.contains("cid") || !j["cid"].is_number_integer()) {
      throw FormatError(where + ": missing integer cid");
    }
    r.cid = j["cid"].get<std::int64_t>();
    const std::string rec = where + " (cid " + std::to_string(r.cid) + ")";
    if (!j.contains("text_sha256") || !j["text_sha256"].is_string() ||
        !is_hex64(j["text_sha256"].get<std::string>())) {
      throw FormatError(rec + ": text_sha256 must be 64 lowercase hex characters");
    }
    r.text_sha256 = j["text_sha256"].get<std::string>();
    if (!j.contains("vector") || !j["vector"].is_array()) {
      throw FormatError(rec + ": missing vector array");
    }
    const auto& v = j["vector"];
    if (v.size() != kEmbeddingDim) {
      throw FormatError(rec + ": vector has " + std::to_string(v.size()) + " values, expected " +
                        std::to_string(kEmbeddingDim));
    }
    r.vector.reserve(kEmbeddingDim);
    for (const auto& x : v) {
      if (!x.is_number()) throw FormatError(rec + ": vector holds a non-number");
      const double d = x.get<double>();
      if (!std::isfinite(d)) throw FormatError(rec + ": vector holds a non-finite value");
      r.vector.push_back(d);
    }
    if (out.records.count(r.cid)) ++out.duplicates;
    out.records[r.cid] = std::move(r);
  }
  return out;
}

EmbeddingFile load_embeddings(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("embedding file not found: " + path.string());
  }
  return parse_embeddings(util::read_file(path));
}

std::string serialize_record(const EmbeddingRecord& r) {
  std::string out = "{\"cid\":" + std::to_string(r.cid) + ",\"text_sha256\":\"" +
                    r.text_sha256 + "\",\"vector\":[";
  for (std::size_t i = 0; i < r.vector.size(); ++i) {
    if (i) out += ',';
    out += util::format_double(r.vector[i]);
  }
  return out + "]}";
}

void write_embeddings(std::ostream& out, std::span<const EmbeddingRecord> records,
                      std::span<const std::string> comments) {
  for (const auto& c : comments) out << (c.starts_with("#") ? "" : "# ") << c << '\n';
  for (const auto& r : records) out << serialize_record(r) << '\n';
}

std::size_t atom_count_from_formula(std::string_view formula) {
  std::size_t total = 0;
  std::size_t i = 0;
  while (i < formula.size()) {
    if (!std::isupper(static_cast<unsigned char>(formula[i]))) {
      ++i;  // charge signs and anything unexpected
      continue;
    }
    ++i;
    while (i < formula.size() && std::islower(static_cast<unsigned char>(formula[i]))) ++i;
    std::size_t count = 0;
    bool has_digits = false;
    while (i < formula.size() && std::isdigit(static_cast<unsigned char>(formula[i]))) {
      count = count * 10 + static_cast<std::size_t>(formula[i] - '0');
      has_digits = true;
      ++i;
    }
    total += has_digits ? count : 1;
  }
  return total;
}

std::array<double, kNumericFeatures> raw_numeric_features(const pubchem::TextDescriptors& d) {
  return {d.molecular_weight,
          d.xlogp.value_or(0.0),
          static_cast<double>(d.hbond_donors),
          static_cast<double>(d.hbond_acceptors),
          static_cast<double>(d.rotatable_bonds),
          d.tpsa,
          static_cast<double>(d.formal_charge),
          static_cast<double>(atom_count_from_formula(d.molecular_formula)),
          d.xlogp ? 1.0 : 0.0};
}

nlohmann::ordered_json NumericStandardizer::to_json() const {
  return {{"mean", mean}, {"scale", scale}};
}

NumericStandardizer NumericStandardizer::from_json(const json& j) {
  NumericStandardizer s;
  try {
    s.mean = j.at("mean").get<std::array<double, kNumericFeatures>>();
    s.scale = j.at("scale").get<std::array<double, kNumericFeatures>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("numeric standardizer: ") + e.what());
  }
  for (double v : s.scale)
    if (!(v > 0.0)) throw FormatError("numeric standardizer: scale must be positive");
  return s;
}

NumericStandardizer fit_standardizer(std::span<const pubchem::TextDescriptors> records) {
  NumericStandardizer s;
  if (records.empty()) return s;
  const double n = static_cast<double>(records.size());
  for (const auto& r : records) {
    const auto f = raw_numeric_features(r);
    for (std::size_t k = 0; k < kNumericFeatures; ++k) s.mean[k] += f[k];
  }
  for (double& m : s.mean) m /= n;
  std::array<double, kNumericFeatures> var{};
  for (const auto& r : records) {
    const auto f = raw_numeric_features(r);
    for (std::size_t k = 0; k < kNumericFeatures; ++k)
      var[k] += (f[k] - s.mean[k]) * (f[k] - s.mean[k]);
  }
  for (std::size_t k = 0; k < kNumericFeatures; ++k) {
    const double sd = std::sqrt(var[k] / n);
    s.scale[k] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

std::vector<double> featurize_descriptors(const pubchem::TextDescriptors& d,
                                          const NumericStandardizer& standardizer) {
  std::vector<double> out(kEmbeddingDim, 0.0);
  const auto raw = raw_numeric_features(d);
  for (std::size_t k = 0; k < kNumericFeatures; ++k)
    out[k] = (raw[k] - standardizer.mean[k]) / standardizer.scale[k];

  const std::span<double> block(out.data() + kNumericFeatures, kHashedFeatures);
  hash_trigrams(d.iupac_name, block);
  hash_trigrams(d.molecular_formula, block);
  for (const auto& s : d.synonyms) hash_trigrams(s, block);
  double norm = 0.0;
  for (double v : block) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& v : block) v /= norm;
  }
  return out;
}

model::ParamSet init_text_head(std::size_t width, numerics::Rng& rng) {
  if (width < 1) throw ConfigError("text projection width must be at least 1");
  model::ParamSet p;
  p.add("text.w", model::glorot(kEmbeddingDim, width, rng));
  p.add("text.b", numerics::Tensor({width}, 0.0));
  return p;
}

numerics::Var project(numerics::Var t, const model::BoundParams& params) {
  return numerics::add_row(numerics::matmul(t, params["text.w"]), params["text.b"]);
}

EmbedCheckReport check_embeddings(const EmbeddingFile& file,
                                  const std::map<std::int64_t, std::string>& descriptions) {
  EmbedCheckReport rep;
  for (const auto& [cid, rec] : file.records) {
    ++rep.records;
    const auto it = descriptions.find(cid);
    if (it == descriptions.end()) {
      rep.unknown_cid.push_back(cid);
    } else if (util::sha256_hex(it->second) != rec.text_sha256) {
      rep.hash_mismatch.push_back(cid);
    } else {
      ++rep.matched;
    }
  }
  for (const auto& [cid, text] : descriptions)
    if (!file.records.count(cid)) rep.missing_cid.push_back(cid);
  return rep;
}

void write_description_manifest(std::ostream& out,
                                const std::map<std::int64_t, std::string>& descriptions) {
  for (const auto& [cid, text] : descriptions) {
    nlohmann::ordered_json j;
    j["cid"] = cid;
    j["text"] = text;
    out << j.dump() << '\n';
  }
}

}  // namespace molfuse::text
