#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "molfuse/params.hpp"
#include "molfuse/pubchem.hpp"

namespace molfuse::text {

inline constexpr std::size_t kEmbeddingDim = 768;
inline constexpr std::size_t kNumericFeatures = 9;
inline constexpr std::size_t kHashedFeatures = kEmbeddingDim - kNumericFeatures;
inline constexpr std::uint64_t kHashSeed = 0x6d6f6c66757365ULL;

// One line of an embedding file:
//   {"cid": 297, "text_sha256": "<64 hex>", "vector": [768 numbers]}
// Lines starting with '#' are comments (the exporter's header).
struct EmbeddingRecord {
  std::int64_t cid = 0;
  std::string text_sha256;
  std::vector<double> vector;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct EmbeddingFile {
  std::map<std::int64_t, EmbeddingRecord> records;
  std::size_t duplicates = 0;  // later lines replaced earlier ones
  std::vector<std::string> comments;
};

EmbeddingFile parse_embeddings(std::string_view text);
EmbeddingFile load_embeddings(const std::filesystem::path& path);
std::string serialize_record(const EmbeddingRecord& r);
void write_embeddings(std::ostream& out, std::span<const EmbeddingRecord> records,
                      std::span<const std::string> comments = {});

// Numeric block before standardisation: MW, XLogP-or-0, HBD, HBA, rotatable
// bonds, TPSA, formal charge, atom count from the formula, XLogP-present flag.
std::array<double, kNumericFeatures> raw_numeric_features(const pubchem::TextDescriptors& d);

// Sum of element counts in a Hill formula such as "C2H6O". Charge suffixes
// are ignored.
std::size_t atom_count_from_formula(std::string_view formula);

struct NumericStandardizer {
  std::array<double, kNumericFeatures> mean{};
  // Population std; 1 for constant features.
  std::array<double, kNumericFeatures> scale{1, 1, 1, 1, 1, 1, 1, 1, 1};

  nlohmann::ordered_json to_json() const;
  static NumericStandardizer from_json(const nlohmann::json& j);
};

NumericStandardizer fit_standardizer(std::span<const pubchem::TextDescriptors> records);

// Deterministic 768-wide stand-in for a pretrained text embedding.
std::vector<double> featurize_descriptors(const pubchem::TextDescriptors& d,
                                          const NumericStandardizer& standardizer);

// Projection head parameters under "text.": w 768 x d, b d.
model::ParamSet init_text_head(std::size_t width, numerics::Rng& rng);
// t: B x 768 -> B x d.
numerics::Var project(numerics::Var t, const model::BoundParams& params);

// Comparison of an embedding file against the dataset's descriptions.
struct EmbedCheckReport {
  std::size_t records = 0;
  std::size_t matched = 0;
  std::vector<std::int64_t> hash_mismatch;
  std::vector<std::int64_t> unknown_cid;    // in the file, not in the dataset
  std::vector<std::int64_t> missing_cid;    // in the dataset, not in the file

  bool ok() const { return hash_mismatch.empty() && unknown_cid.empty() && missing_cid.empty(); }
};

EmbedCheckReport check_embeddings(const EmbeddingFile& file,
                                  const std::map<std::int64_t, std::string>& descriptions);

// The exporter's input: one {"cid": ..., "text": ...} line per distinct cid.
void write_description_manifest(std::ostream& out,
                                const std::map<std::int64_t, std::string>& descriptions);

}  // namespace molfuse::text
