#include "molfuse/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <tuple>

#include "molfuse/util.hpp"

namespace molfuse::report {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr double kTolerance = 1e-9;

bool close(double a, double b) {
  return std::abs(a - b) <= kTolerance * std::max(1.0, std::abs(a));
}

std::string sig6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

void check_field(const std::string& s, std::string_view what) {
  if (s.find_first_of(",\"\n\r") != std::string::npos)
    throw FormatError(std::string(what) + " '" + s + "' cannot be written to CSV");
}

double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v))
    throw FormatError(where + ": '" + std::string(s) + "' is not a finite number");
  return v;
}

template <class T>
T parse_unsigned(std::string_view s, const std::string& where) {
  T v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty())
    throw FormatError(where + ": '" + std::string(s) + "' is not a non-negative integer");
  return v;
}

// Data lines of a CSV with the given header, split into fields.
std::vector<std::pair<std::size_t, std::vector<std::string>>> csv_records(
    std::string_view text, std::string_view header, std::string_view what) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> out;
  const std::size_t width = util::split(header, ',').size();
  bool seen_header = false;
  std::size_t lineno = 0;
  for (const auto raw : util::split_lines(text)) {
    ++lineno;
    const auto line = util::trim(raw);
    if (line.empty()) continue;
    if (!seen_header) {
      if (line != header) {
        throw FormatError(std::string(what) + " line " + std::to_string(lineno) +
                          ": expected header '" + std::string(header) + "', got '" +
                          std::string(line) + "'");
      }
      seen_header = true;
      continue;
    }
    auto fields = util::split(line, ',');
    if (fields.size() != width) {
      throw FormatError(std::string(what) + " line " + std::to_string(lineno) + ": " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(width));
    }
    out.emplace_back(lineno, std::move(fields));
  }
  if (!seen_header) throw FormatError(std::string(what) + ": missing header");
  return out;
}

qm9::TargetId known_target(const std::string& name, const std::string& where) {
  const auto t = qm9::parse_target(name);
  if (!t || !qm9::is_benchmark_target(*t))
    throw FormatError(where + ": unknown target '" + name + "'");
  return *t;
}

void known_modality(const std::string& name, const std::string& where) {
  if (!training::parse_modality(name))
    throw FormatError(where + ": unknown modality '" + name + "'");
}

using RunKey = std::tuple<std::string, std::string, std::uint64_t, std::size_t>;

RunKey key_of(const RunRow& r) { return {r.target, r.modality, r.seed, r.fold}; }
RunKey key_of(const PredictionRow& r) { return {r.target, r.modality, r.seed, r.fold}; }

std::string describe(const RunKey& k) {
  return std::get<0>(k) + "/" + std::get<1>(k) + " seed " + std::to_string(std::get<2>(k)) +
         " fold " + std::to_string(std::get<3>(k));
}

std::string svg_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

double percent_change(double mae_base, double mae_multi) {
  if (!std::isfinite(mae_base) || !std::isfinite(mae_multi))
    throw PreconditionError("percent_change: MAEs must be finite");
  if (!(mae_base > 0.0))
    throw PreconditionError("percent_change: base MAE must be positive, got " +
                            util::format_double(mae_base));
  return 100.0 * (mae_base - mae_multi) / mae_base;
}

std::string format_change(double pct) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", std::abs(pct));
  const std::string mag = buf;
  if (mag == "0.00") return "0.00% =";
  return pct > 0 ? "+" + mag + "% ↑" : "−" + mag + "% ↓";
}

std::string_view target_label(qm9::TargetId t) {
  using qm9::TargetId;
  switch (t) {
    case TargetId::mu: return "Dipole Moment";
    case TargetId::alpha: return "Isotropic Polarizability";
    case TargetId::homo: return "HOMO";
    case TargetId::lumo: return "LUMO";
    case TargetId::gap: return "HOMO-LUMO Gap";
    case TargetId::r2: return "Electronic Spatial Extent";
    case TargetId::zpve: return "ZPVE";
    case TargetId::u0: return "Internal Energy (0 K)";
    case TargetId::u298: return "Internal Energy (298 K)";
    case TargetId::h298: return "Enthalpy (298 K)";
    case TargetId::g298: return "Free Energy (298 K)";
    case TargetId::cv: return "Heat Capacity";
    default: return qm9::target_name(t);
  }
}

std::string runs_csv(std::span<const RunRow> rows) {
  std::string out(kRunsHeader);
  out += '\n';
  for (const auto& r : rows) {
    check_field(r.target, "target");
    check_field(r.modality, "modality");
    out += r.target + ',' + r.modality + ',' + std::to_string(r.seed) + ',' +
           std::to_string(r.fold) + ',' + util::format_double(r.mae) + '\n';
  }
  return out;
}

std::vector<RunRow> parse_runs_csv(std::string_view text) {
  std::vector<RunRow> out;
  for (const auto& [lineno, f] : csv_records(text, kRunsHeader, "runs CSV")) {
    const std::string where = "runs CSV line " + std::to_string(lineno);
    RunRow r;
    r.target = f[0];
    known_target(r.target, where);
    r.modality = f[1];
    known_modality(r.modality, where);
    r.seed = parse_unsigned<std::uint64_t>(f[2], where);
    r.fold = parse_unsigned<std::size_t>(f[3], where);
    r.mae = parse_double(f[4], where);
    if (r.mae < 0) throw FormatError(where + ": negative MAE");
    out.push_back(std::move(r));
  }
  return out;
}

std::string predictions_csv(std::span<const PredictionRow> rows) {
  std::string out(kPredictionsHeader);
  out += '\n';
  for (const auto& r : rows) {
    check_field(r.target, "target");
    check_field(r.modality, "modality");
    check_field(r.id, "molecule id");
    out += r.target + ',' + r.modality + ',' + std::to_string(r.seed) + ',' +
           std::to_string(r.fold) + ',' + r.id + ',' + util::format_double(r.y) + ',' +
           util::format_double(r.yhat) + ',' +
           (r.gate_mean ? util::format_double(*r.gate_mean) : std::string()) + '\n';
  }
  return out;
}

std::vector<PredictionRow> parse_predictions_csv(std::string_view text) {
  std::vector<PredictionRow> out;
  for (const auto& [lineno, f] : csv_records(text, kPredictionsHeader, "predictions CSV")) {
    const std::string where = "predictions CSV line " + std::to_string(lineno);
    PredictionRow r;
    r.target = f[0];
    known_target(r.target, where);
    r.modality = f[1];
    known_modality(r.modality, where);
    r.seed = parse_unsigned<std::uint64_t>(f[2], where);
    r.fold = parse_unsigned<std::size_t>(f[3], where);
    r.id = f[4];
    r.y = parse_double(f[5], where);
    r.yhat = parse_double(f[6], where);
    if (!f[7].empty()) r.gate_mean = parse_double(f[7], where);
    out.push_back(std::move(r));
  }
  return out;
}

ordered_json AblationReport::to_json() const {
  ordered_json j;
  j["runs_definition"] = runs_definition;
  j["rows"] = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["target"] = std::string(qm9::target_name(r.target));
    row["mae_geometry"] = r.mae_geometry;
    row["mae_multimodal"] = r.mae_multimodal;
    row["percent_change"] = r.percent_change;
    row["n_runs"] = r.n_runs;
    row["seeds"] = r.seeds;
    row["fold_hash"] = r.fold_hash;
    j["rows"].push_back(std::move(row));
  }
  return j;
}

AblationReport AblationReport::from_json(const json& j) {
  AblationReport rep;
  try {
    rep.runs_definition = j.at("runs_definition").get<std::string>();
    for (const auto& row : j.at("rows")) {
      TargetSummary s;
      s.target = known_target(row.at("target").get<std::string>(), "report");
      s.mae_geometry = row.at("mae_geometry").get<double>();
      s.mae_multimodal = row.at("mae_multimodal").get<double>();
      s.percent_change = row.at("percent_change").get<double>();
      s.n_runs = row.at("n_runs").get<std::size_t>();
      s.seeds = row.at("seeds").get<std::vector<std::uint64_t>>();
      s.fold_hash = row.at("fold_hash").get<std::string>();
      rep.rows.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return rep;
}

AblationReport summarize(std::span<const RunRow> rows,
                         const std::map<std::string, std::string>& fold_hashes) {
  std::map<RunKey, double> unique;
  for (const auto& r : rows) {
    const std::string where = "run " + describe(key_of(r));
    known_target(r.target, where);
    known_modality(r.modality, where);
    const auto [it, inserted] = unique.emplace(key_of(r), r.mae);
    if (!inserted && it->second != r.mae)
      throw FormatError(where + " appears twice with different MAEs");
  }
  // target -> modality -> seed -> fold maes
  std::map<std::string, std::map<std::string, std::map<std::uint64_t, std::vector<double>>>>
      grouped;
  for (const auto& [k, mae] : unique)
    grouped[std::get<0>(k)][std::get<1>(k)][std::get<2>(k)].push_back(mae);

  AblationReport rep;
  for (const qm9::TargetId t : qm9::kBenchmarkTargets) {
    const std::string name(qm9::target_name(t));
    const auto it = grouped.find(name);
    if (it == grouped.end()) continue;
    const auto& by_mod = it->second;
    const std::string geo(training::modality_name(training::Modality::GeometryOnly));
    const std::string multi(training::modality_name(training::Modality::Multimodal));
    for (const auto& m : {geo, multi})
      if (!by_mod.count(m)) throw FormatError("target " + name + " has no " + m + " runs");

    std::optional<std::size_t> folds;
    auto mean_over_seeds = [&](const std::string& m) {
      double total = 0.0;
      for (const auto& [seed, maes] : by_mod.at(m)) {
        if (folds && *folds != maes.size()) {
          throw FormatError("target " + name + ": " + m + " seed " + std::to_string(seed) +
                            " has " + std::to_string(maes.size()) + " folds, expected " +
                            std::to_string(*folds));
        }
        folds = maes.size();
        double s = 0.0;
        for (double v : maes) s += v;
        total += s / static_cast<double>(maes.size());
      }
      return total / static_cast<double>(by_mod.at(m).size());
    };

    TargetSummary s;
    s.target = t;
    s.mae_geometry = mean_over_seeds(geo);
    s.mae_multimodal = mean_over_seeds(multi);
    std::set<std::uint64_t> seeds_geo, seeds_multi;
    for (const auto& [seed, _] : by_mod.at(geo)) seeds_geo.insert(seed);
    for (const auto& [seed, _] : by_mod.at(multi)) seeds_multi.insert(seed);
    if (seeds_geo != seeds_multi)
      throw FormatError("target " + name + ": modalities were run with different seeds");
    s.seeds.assign(seeds_geo.begin(), seeds_geo.end());
    s.n_runs = s.seeds.size();
    s.percent_change = percent_change(s.mae_geometry, s.mae_multimodal);
    if (const auto h = fold_hashes.find(name); h != fold_hashes.end()) s.fold_hash = h->second;
    rep.rows.push_back(std::move(s));
  }
  for (const auto& [name, _] : grouped) {
    if (!std::any_of(rep.rows.begin(), rep.rows.end(),
                     [&](const TargetSummary& s) { return qm9::target_name(s.target) == name; }))
      throw FormatError("unknown target '" + name + "'");
  }
  return rep;
}

std::string render_table(const AblationReport& report) {
  std::string out = "# " + report.runs_definition + "\n";
  out += pad("Target", 28) + pad("Geometry MAE", 16) + pad("Multimodal MAE", 16) +
         pad("Runs", 6) + "Change\n";
  for (const auto& r : report.rows) {
    out += pad(std::string(target_label(r.target)), 28) + pad(sig6(r.mae_geometry), 16) +
           pad(sig6(r.mae_multimodal), 16) + pad(std::to_string(r.n_runs), 6) +
           format_change(r.percent_change) + "\n";
  }
  return out;
}

Verification verify(const AblationReport& report, std::span<const RunRow> runs,
                    std::span<const PredictionRow> predictions) {
  Verification v;
  std::map<RunKey, std::pair<double, std::size_t>> sums;
  for (const auto& p : predictions) {
    auto& [s, n] = sums[key_of(p)];
    s += std::abs(p.y - p.yhat);
    ++n;
  }
  for (const auto& r : runs) {
    const auto it = sums.find(key_of(r));
    if (it == sums.end()) {
      v.problems.push_back("no predictions for " + describe(key_of(r)));
      continue;
    }
    const double mae = it->second.first / static_cast<double>(it->second.second);
    if (!close(mae, r.mae)) {
      v.problems.push_back(describe(key_of(r)) + ": stored MAE " + util::format_double(r.mae) +
                           ", recomputed " + util::format_double(mae));
    }
  }

  std::map<std::string, std::string> hashes;
  for (const auto& r : report.rows) hashes[std::string(qm9::target_name(r.target))] = r.fold_hash;
  AblationReport again;
  try {
    again = summarize(runs, hashes);
  } catch (const Error& e) {
    v.problems.push_back(std::string("run rows do not summarise: ") + e.what());
    return v;
  }
  if (again.rows.size() != report.rows.size()) {
    v.problems.push_back("report has " + std::to_string(report.rows.size()) +
                         " targets, run rows give " + std::to_string(again.rows.size()));
    return v;
  }
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    const auto& a = again.rows[i];
    const std::string name(qm9::target_name(r.target));
    if (r.target != a.target) {
      v.problems.push_back("row " + std::to_string(i) + " is " + name + ", expected " +
                           std::string(qm9::target_name(a.target)));
      continue;
    }
    if (!close(r.mae_geometry, a.mae_geometry))
      v.problems.push_back(name + ": geometry MAE does not match the run rows");
    if (!close(r.mae_multimodal, a.mae_multimodal))
      v.problems.push_back(name + ": multimodal MAE does not match the run rows");
    if (r.seeds != a.seeds || r.n_runs != a.n_runs)
      v.problems.push_back(name + ": seeds do not match the run rows");
    try {
      const double pct = percent_change(r.mae_geometry, r.mae_multimodal);
      if (!close(pct, r.percent_change))
        v.problems.push_back(name + ": percent change " + util::format_double(r.percent_change) +
                             ", recomputed " + util::format_double(pct));
    } catch (const PreconditionError& e) {
      v.problems.push_back(name + ": " + e.what());
    }
  }
  return v;
}

void append_rows(const training::TrainResult& result, const training::TrainConfig& cfg,
                 const training::Dataset& data, std::vector<RunRow>& runs,
                 std::vector<PredictionRow>& predictions) {
  const std::string target(qm9::target_name(cfg.target));
  const std::string modality(training::modality_name(cfg.modality));
  for (const auto& f : result.folds) {
    runs.push_back({target, modality, cfg.seed, f.fold, f.mae});
    for (std::size_t i = 0; i < f.held_out.size(); ++i) {
      const auto& s = data.samples[f.held_out[i]];
      PredictionRow p{target, modality, cfg.seed, f.fold, s.id, s.target(cfg.target),
                      f.predictions.values[i], std::nullopt};
      if (!f.predictions.gate_mean.empty()) p.gate_mean = f.predictions.gate_mean[i];
      predictions.push_back(std::move(p));
    }
  }
}

AblationResult run_ablation(const AblationConfig& cfg, const training::Dataset& data,
                            const training::Progress& progress) {
  if (cfg.targets.empty()) throw ConfigError("ablation needs at least one target");
  if (cfg.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const auto folds = training::split_folds(data.samples.size(), cfg.train.folds, cfg.fold_seed);
  const std::string hash = training::fold_hash(folds);
  AblationResult out;
  std::map<std::string, std::string> hashes;
  for (const qm9::TargetId t : cfg.targets) {
    const std::string name(qm9::target_name(t));
    hashes[name] = hash;
    for (const std::uint64_t seed : cfg.seeds) {
      for (const auto m : {training::Modality::GeometryOnly, training::Modality::Multimodal}) {
        training::TrainConfig run = cfg.train;
        run.target = t;
        run.seed = seed;
        run.modality = m;
        if (progress) {
          progress(name + " " + std::string(training::modality_name(m)) + " seed " +
                   std::to_string(seed));
        }
        const auto result = training::train(run, data, folds, progress);
        std::vector<std::vector<std::size_t>> used;
        for (const auto& f : result.folds) used.push_back(f.held_out);
        if (training::fold_hash(used) != hash)
          throw PreconditionError("run " + name + " used folds that differ from the ablation's");
        append_rows(result, run, data, out.runs, out.predictions);
      }
    }
  }
  out.report = summarize(out.runs, hashes);
  return out;
}

std::string mae_bar_svg(const AblationReport& report) {
  const double bar = 26.0, gap = 14.0, left = 210.0, top = 50.0, plot_w = 420.0;
  const double group = 2 * bar + gap;
  const double height = top + group * static_cast<double>(report.rows.size()) + 50.0;
  double max_ratio = 1.0;
  for (const auto& r : report.rows)
    if (r.mae_geometry > 0) max_ratio = std::max(max_ratio, r.mae_multimodal / r.mae_geometry);
  const double scale = plot_w / (max_ratio * 1.1);

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"700\" height=\"" +
                  fmt(height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"10\" y=\"22\" font-size=\"15\">Held-out MAE relative to geometry-only</text>\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    const double y = top + group * static_cast<double>(i);
    const double ratio = r.mae_geometry > 0 ? r.mae_multimodal / r.mae_geometry : 0.0;
    s += "<text x=\"10\" y=\"" + fmt(y + bar + 4) + "\">" +
         svg_escape(target_label(r.target)) + "</text>\n";
    s += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(scale) +
         "\" height=\"" + fmt(bar - 2) + "\" fill=\"#7f8c8d\"/>\n";
    s += "<text x=\"" + fmt(left + scale + 6) + "\" y=\"" + fmt(y + bar - 9) +
         "\">geometry " + svg_escape(sig6(r.mae_geometry)) + "</text>\n";
    const std::string colour = r.percent_change >= 0 ? "#27ae60" : "#c0392b";
    s += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(y + bar) + "\" width=\"" +
         fmt(scale * ratio) + "\" height=\"" + fmt(bar - 2) + "\" fill=\"" + colour + "\"/>\n";
    s += "<text x=\"" + fmt(left + scale * ratio + 6) + "\" y=\"" + fmt(y + 2 * bar - 9) +
         "\">multimodal " + svg_escape(sig6(r.mae_multimodal)) + " (" +
         svg_escape(format_change(r.percent_change)) + ")</text>\n";
  }
  s += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top - 6) + "\" x2=\"" + fmt(left) +
       "\" y2=\"" + fmt(height - 40) + "\" stroke=\"black\"/>\n";
  s += "</svg>\n";
  return s;
}

std::string gate_histogram_svg(std::span<const PredictionRow> predictions,
                               std::string_view target) {
  constexpr std::size_t kBins = 20;
  std::array<std::size_t, kBins> counts{};
  std::size_t total = 0;
  for (const auto& p : predictions) {
    if (p.target != target || !p.gate_mean) continue;
    const double g = std::clamp(*p.gate_mean, 0.0, 1.0);
    ++counts[std::min(kBins - 1, static_cast<std::size_t>(g * kBins))];
    ++total;
  }
  const std::size_t peak = std::max<std::size_t>(1, *std::max_element(counts.begin(), counts.end()));
  const double left = 50.0, top = 40.0, w = 500.0, h = 260.0, bw = w / kBins;
  std::string s =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"360\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"10\" y=\"22\" font-size=\"15\">Mean gate value per molecule, " +
       svg_escape(target) + " (" + std::to_string(total) + " predictions)</text>\n";
  for (std::size_t b = 0; b < kBins; ++b) {
    const double bh = h * static_cast<double>(counts[b]) / static_cast<double>(peak);
    s += "<rect x=\"" + fmt(left + bw * static_cast<double>(b)) + "\" y=\"" +
         fmt(top + h - bh) + "\" width=\"" + fmt(bw - 1) + "\" height=\"" + fmt(bh) +
         "\" fill=\"#2980b9\"/>\n";
  }
  s += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top + h) + "\" x2=\"" + fmt(left + w) +
       "\" y2=\"" + fmt(top + h) + "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double x = left + w * tick / 4.0;
    s += "<text x=\"" + fmt(x - 8) + "\" y=\"" + fmt(top + h + 18) + "\">" + fmt(tick / 4.0) +
         "</text>\n";
  }
  s += "<text x=\"" + fmt(left + w / 2 - 90) + "\" y=\"" + fmt(top + h + 40) +
       "\">gate (1 = geometry, 0 = text)</text>\n";
  s += "<text x=\"10\" y=\"" + fmt(top + 10) + "\">" + std::to_string(peak) + "</text>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace molfuse::report
