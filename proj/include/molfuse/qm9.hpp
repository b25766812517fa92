#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "molfuse/error.hpp"

namespace molfuse::qm9 {

// The QM9 alphabet, in one-hot column order.
enum class Element : std::uint8_t { H = 0, C = 1, N = 2, O = 3, F = 4 };
inline constexpr std::size_t kNumElements = 5;

std::optional<Element> parse_element(std::string_view symbol);
std::string_view element_symbol(Element e);

// Scalar properties in the order they appear on the QM9 property line.
enum class TargetId : std::uint8_t {
  A = 0, B, C,  // rotational constants, GHz
  mu,           // Debye
  alpha,        // Bohr^3
  homo, lumo, gap,  // Hartree
  r2,           // Bohr^2
  zpve, u0, u298, h298, g298,  // Hartree
  cv,           // cal/(mol K)
};
inline constexpr std::size_t kNumTargets = 15;

// The twelve properties models are trained and evaluated on; the rotational
// constants are parsed but never used.
inline constexpr std::array<TargetId, 12> kBenchmarkTargets{
    TargetId::mu,   TargetId::alpha, TargetId::homo, TargetId::lumo,
    TargetId::gap,  TargetId::r2,    TargetId::zpve, TargetId::u0,
    TargetId::u298, TargetId::h298,  TargetId::g298, TargetId::cv};

std::string_view target_name(TargetId t);
std::optional<TargetId> parse_target(std::string_view name);
bool is_benchmark_target(TargetId t);

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

struct Molecule {
  std::string id;
  std::int64_t index = 0;
  std::vector<Element> elements;
  std::vector<Vec3> coords;  // Angstrom
  std::array<double, kNumTargets> targets{};
  std::vector<double> partial_charges;  // parsed, not a model input
  // Trailing lines kept verbatim; empty when the file omits them.
  std::string frequencies_line;
  std::string smiles_line;
  std::string inchi_line;

  std::size_t atom_count() const { return elements.size(); }
  double target(TargetId t) const { return targets[static_cast<std::size_t>(t)]; }
  // Relaxed-geometry identifiers (second column) with the first as fallback.
  std::string inchi() const;
  std::string smiles() const;

  friend bool operator==(const Molecule&, const Molecule&) = default;
};

enum class ParseErrorKind {
  MissingAtomCount,
  MissingPropertyLine,
  AtomCountMismatch,
  UnknownElement,
  NonNumericField,
};

class ParseError : public FormatError {
 public:
  ParseError(ParseErrorKind kind, std::size_t line, const std::string& message);
  ParseErrorKind kind() const { return kind_; }
  // 1-based line the problem was detected at.
  std::size_t line() const { return line_; }

 private:
  ParseErrorKind kind_;
  std::size_t line_;
};

class UnsupportedTargetError : public Error {
 public:
  using Error::Error;
};

// Accepts the dataset's Fortran-style "1.2*^-3" exponent as well as the usual
// forms. Returns nullopt for anything that is not a complete finite number.
std::optional<double> parse_number(std::string_view token);

Molecule parse_xyz(std::string_view text);
std::string serialize_xyz(const Molecule& m);

// Reads one file; the molecule id becomes the file stem.
Molecule load_xyz_file(const std::filesystem::path& path);

struct LoadFailure {
  std::string id;
  std::string message;
};

struct LoadResult {
  std::vector<Molecule> molecules;  // sorted by id
  std::vector<LoadFailure> failures;
};

// Loads every *.xyz in `dir`. Molecules whose QM9 index is in `excluded`
// (the uncharacterized list) are skipped.
LoadResult load_directory(const std::filesystem::path& dir,
                          const std::set<std::int64_t>& excluded = {});

// Reads a QM9 exclusion file: every line whose first token is an integer
// contributes that index. A missing path yields an empty set.
std::set<std::int64_t> load_exclusion_list(const std::filesystem::path& path);

double select_target(const Molecule& m, TargetId t);

struct TargetScaler {
  double mean = 0.0;
  double std = 1.0;

  double normalize(double y) const { return (y - mean) / std; }
  double denormalize(double z) const { return z * std + mean; }
};

// Mean and population standard deviation; throws DegenerateInputError on
// an empty set or zero variance.
TargetScaler fit_scaler(std::span<const double> ys);

struct NormalizedTargets {
  TargetScaler scaler;
  std::vector<double> values;
};

NormalizedTargets normalize_targets(std::span<const Molecule> dataset, TargetId t);

// One JSON object per line: id, n_atoms and all fifteen named targets.
void write_manifest(std::ostream& out, std::span<const Molecule> molecules);

}  // namespace molfuse::qm9
