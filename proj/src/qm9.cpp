#include "molfuse/qm9.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>

#include "json.hpp"
#include "molfuse/util.hpp"

namespace molfuse::qm9 {
namespace {

constexpr std::array<std::string_view, kNumTargets> kTargetNames{
    "A", "B", "C", "mu", "alpha", "homo", "lumo", "gap",
    "r2", "zpve", "u0", "u298", "h298", "g298", "cv"};

constexpr std::array<std::string_view, kNumElements> kSymbols{"H", "C", "N", "O", "F"};

bool starts_like_symbol(std::string_view tok) {
  return !tok.empty() && std::isalpha(static_cast<unsigned char>(tok[0]));
}

// An atom line: known symbol followed by four numbers.
bool looks_like_atom_line(std::string_view line) {
  const auto tok = util::split_whitespace(line);
  if (tok.size() != 5 || !parse_element(tok[0])) return false;
  for (std::size_t i = 1; i < 5; ++i)
    if (!parse_number(tok[i])) return false;
  return true;
}

double require_number(std::string_view token, std::size_t line, std::string_view what) {
  const auto v = parse_number(token);
  if (!v) {
    throw ParseError(ParseErrorKind::NonNumericField, line,
                     "line " + std::to_string(line) + ": " + std::string(what) + " '" +
                         std::string(token) + "' is not a finite number");
  }
  return *v;
}

std::string column(const std::string& line, std::size_t preferred) {
  const auto tok = util::split_whitespace(line);
  if (tok.empty()) return {};
  return std::string(tok.size() > preferred ? tok[preferred] : tok[0]);
}

}  // namespace

std::optional<Element> parse_element(std::string_view symbol) {
  for (std::size_t i = 0; i < kNumElements; ++i)
    if (kSymbols[i] == symbol) return static_cast<Element>(i);
  return std::nullopt;
}

std::string_view element_symbol(Element e) { return kSymbols[static_cast<std::size_t>(e)]; }

std::string_view target_name(TargetId t) { return kTargetNames[static_cast<std::size_t>(t)]; }

std::optional<TargetId> parse_target(std::string_view name) {
  for (std::size_t i = 0; i < kNumTargets; ++i)
    if (kTargetNames[i] == name) return static_cast<TargetId>(i);
  return std::nullopt;
}

bool is_benchmark_target(TargetId t) {
  return std::find(kBenchmarkTargets.begin(), kBenchmarkTargets.end(), t) !=
         kBenchmarkTargets.end();
}

ParseError::ParseError(ParseErrorKind kind, std::size_t line, const std::string& message)
    : FormatError(message), kind_(kind), line_(line) {}

std::string Molecule::inchi() const { return column(inchi_line, 1); }

std::string Molecule::smiles() const { return column(smiles_line, 1); }

std::optional<double> parse_number(std::string_view token) {
  std::string buf(token);
  if (const auto pos = buf.find("*^"); pos != std::string::npos) buf.replace(pos, 2, "e");
  if (buf.empty()) return std::nullopt;
  const char* first = buf.data();
  const char* last = buf.data() + buf.size();
  if (*first == '+') ++first;
  double value = 0.0;
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last || !std::isfinite(value)) return std::nullopt;
  return value;
}

Molecule parse_xyz(std::string_view text) {
  const auto lines = util::split_lines(text);
  Molecule m;

  if (lines.empty() || util::trim(lines[0]).empty()) {
    throw ParseError(ParseErrorKind::MissingAtomCount, 1, "line 1: missing atom count");
  }
  std::size_t n_atoms = 0;
  {
    const auto tok = util::trim(lines[0]);
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), n_atoms);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
      throw ParseError(ParseErrorKind::MissingAtomCount, 1,
                       "line 1: atom count '" + std::string(tok) + "' is not an integer");
    }
    if (n_atoms == 0) {
      throw ParseError(ParseErrorKind::AtomCountMismatch, 1, "line 1: atom count is zero");
    }
  }

  if (lines.size() < 2) {
    throw ParseError(ParseErrorKind::MissingPropertyLine, 2, "line 2: missing property line");
  }
  {
    const auto tok = util::split_whitespace(lines[1]);
    if (tok.size() < 2 + kNumTargets || tok[0] != "gdb") {
      throw ParseError(ParseErrorKind::MissingPropertyLine, 2,
                       "line 2: expected 'gdb <index>' followed by " +
                           std::to_string(kNumTargets) + " properties");
    }
    const auto res = std::from_chars(tok[1].data(), tok[1].data() + tok[1].size(), m.index);
    if (res.ec != std::errc() || res.ptr != tok[1].data() + tok[1].size()) {
      throw ParseError(ParseErrorKind::NonNumericField, 2,
                       "line 2: molecule index '" + std::string(tok[1]) + "' is not an integer");
    }
    for (std::size_t i = 0; i < kNumTargets; ++i) {
      m.targets[i] = require_number(tok[2 + i], 2, kTargetNames[i]);
    }
    m.id = "gdb_" + std::to_string(m.index);
  }

  for (std::size_t a = 0; a < n_atoms; ++a) {
    const std::size_t lineno = 3 + a;
    const bool present = lineno - 1 < lines.size();
    const auto tok = present ? util::split_whitespace(lines[lineno - 1])
                             : std::vector<std::string_view>{};
    if (tok.empty() || !starts_like_symbol(tok[0])) {
      // The atom block ended early; report where the last atom line was.
      throw ParseError(ParseErrorKind::AtomCountMismatch, lineno - 1,
                       "atom count mismatch: header declares " + std::to_string(n_atoms) +
                           " atoms but the atom block ends at line " +
                           std::to_string(lineno - 1) + " after " + std::to_string(a));
    }
    const auto element = parse_element(tok[0]);
    if (!element) {
      throw ParseError(ParseErrorKind::UnknownElement, lineno,
                       "line " + std::to_string(lineno) + ": unknown element '" +
                           std::string(tok[0]) + "'");
    }
    if (tok.size() != 5) {
      throw ParseError(ParseErrorKind::NonNumericField, lineno,
                       "line " + std::to_string(lineno) + ": expected symbol, x, y, z, charge");
    }
    m.elements.push_back(*element);
    m.coords.push_back({require_number(tok[1], lineno, "x"), require_number(tok[2], lineno, "y"),
                        require_number(tok[3], lineno, "z")});
    m.partial_charges.push_back(require_number(tok[4], lineno, "charge"));
  }

  const std::size_t after = 2 + n_atoms;  // index of the first trailing line
  if (after < lines.size() && looks_like_atom_line(lines[after])) {
    throw ParseError(ParseErrorKind::AtomCountMismatch, after + 1,
                     "atom count mismatch: header declares " + std::to_string(n_atoms) +
                         " atoms but line " + std::to_string(after + 1) +
                         " holds another atom");
  }
  if (after < lines.size()) m.frequencies_line = std::string(lines[after]);
  if (after + 1 < lines.size()) m.smiles_line = std::string(lines[after + 1]);
  if (after + 2 < lines.size()) m.inchi_line = std::string(lines[after + 2]);
  return m;
}

std::string serialize_xyz(const Molecule& m) {
  std::string out = std::to_string(m.atom_count()) + "\n";
  out += "gdb " + std::to_string(m.index);
  for (double v : m.targets) out += "\t" + util::format_double(v);
  out += "\t\n";
  for (std::size_t i = 0; i < m.atom_count(); ++i) {
    out += std::string(element_symbol(m.elements[i]));
    for (double v : {m.coords[i].x, m.coords[i].y, m.coords[i].z, m.partial_charges[i]}) {
      out += "\t" + util::format_double(v);
    }
    out += "\n";
  }
  out += m.frequencies_line + "\n" + m.smiles_line + "\n" + m.inchi_line + "\n";
  return out;
}

Molecule load_xyz_file(const std::filesystem::path& path) {
  Molecule m = parse_xyz(util::read_file(path));
  m.id = path.stem().string();
  return m;
}

LoadResult load_directory(const std::filesystem::path& dir,
                          const std::set<std::int64_t>& excluded) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error("not a readable directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".xyz") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  LoadResult result;
  for (const auto& path : files) {
    try {
      Molecule m = load_xyz_file(path);
      if (excluded.count(m.index)) continue;
      result.molecules.push_back(std::move(m));
    } catch (const Error& e) {
      result.failures.push_back({path.stem().string(), e.what()});
    }
  }
  std::sort(result.molecules.begin(), result.molecules.end(),
            [](const Molecule& a, const Molecule& b) { return a.id < b.id; });
  return result;
}

std::set<std::int64_t> load_exclusion_list(const std::filesystem::path& path) {
  std::set<std::int64_t> out;
  if (path.empty() || !std::filesystem::exists(path)) return out;
  const std::string text = util::read_file(path);
  for (const auto line : util::split_lines(text)) {
    const auto tok = util::split_whitespace(line);
    if (tok.empty()) continue;
    std::int64_t idx = 0;
    const auto res = std::from_chars(tok[0].data(), tok[0].data() + tok[0].size(), idx);
    if (res.ec == std::errc() && res.ptr == tok[0].data() + tok[0].size()) out.insert(idx);
  }
  return out;
}

double select_target(const Molecule& m, TargetId t) {
  if (!is_benchmark_target(t)) {
    throw UnsupportedTargetError("target '" + std::string(target_name(t)) +
                                 "' is a rotational constant and not a benchmark target");
  }
  return m.target(t);
}

TargetScaler fit_scaler(std::span<const double> ys) {
  if (ys.empty()) throw DegenerateInputError("cannot normalise an empty target set");
  double mean = 0.0;
  for (double y : ys) mean += y;
  mean /= static_cast<double>(ys.size());
  double var = 0.0;
  for (double y : ys) var += (y - mean) * (y - mean);
  var /= static_cast<double>(ys.size());
  if (!(var > 0.0)) throw DegenerateInputError("target has zero variance");
  return {mean, std::sqrt(var)};
}

NormalizedTargets normalize_targets(std::span<const Molecule> dataset, TargetId t) {
  std::vector<double> ys;
  ys.reserve(dataset.size());
  for (const auto& m : dataset) ys.push_back(select_target(m, t));
  NormalizedTargets out{fit_scaler(ys), {}};
  out.values.reserve(ys.size());
  for (double y : ys) out.values.push_back(out.scaler.normalize(y));
  return out;
}

void write_manifest(std::ostream& out, std::span<const Molecule> molecules) {
  for (const auto& m : molecules) {
    nlohmann::ordered_json rec;
    rec["id"] = m.id;
    rec["n_atoms"] = m.atom_count();
    nlohmann::ordered_json targets;
    for (std::size_t i = 0; i < kNumTargets; ++i) {
      targets[std::string(kTargetNames[i])] = m.targets[i];
    }
    rec["targets"] = std::move(targets);
    out << rec.dump() << '\n';
  }
}

}  // namespace molfuse::qm9
