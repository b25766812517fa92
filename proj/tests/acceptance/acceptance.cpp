#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <tuple>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "molfuse/cli.hpp"
#include "molfuse/encoder.hpp"
#include "molfuse/fusion.hpp"
#include "molfuse/numerics/grad_check.hpp"
#include "molfuse/numerics/ops.hpp"
#include "molfuse/report.hpp"
#include "molfuse/text.hpp"
#include "molfuse/training.hpp"
#include "molfuse/util.hpp"
#include "../test_support.hpp"

using namespace molfuse;
using numerics::Tensor;
using numerics::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor random_tensor(numerics::Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

training::ModelConfig tiny_model(std::size_t hidden, std::size_t iterations,
                                 std::size_t text_width) {
  training::ModelConfig m;
  m.encoder.hidden = hidden;
  m.encoder.iterations = iterations;
  m.text_width = text_width;
  return m;
}

// Every 50th fixture molecule, so sizes range from a handful of atoms to 20+.
std::vector<qm9::Molecule> spread_fixtures(std::size_t count) {
  const auto all = testsupport::fixture_molecules(1000);
  std::vector<qm9::Molecule> out;
  for (std::size_t i = 0; i < count && i * 50 < all.size(); ++i) out.push_back(all[i * 50]);
  return out;
}

// Embedding g and normalised multimodal prediction for one molecule.
struct Output {
  std::vector<double> g;
  double y = 0;
};

Output evaluate(const qm9::Molecule& m, const Tensor& text, const model::ParamSet& params,
                const training::ModelConfig& cfg) {
  const auto graph = graph::build_graph(m, cfg.encoder.rbf);
  const auto batch = encoder::make_batch(graph);
  numerics::Tape tape;
  const model::BoundParams p(tape, params, false);
  const Var g = encoder::encode(batch, p, cfg.encoder);
  const Var tp = text::project(tape.constant(text), p);
  const Var y = fusion::predict(fusion::fuse(g, tp, p).f, p);
  return {g.value().values(), y.value()[0]};
}

Outcome gradient_integrity() {
  // Bent triatomic, all pairs inside the cutoff.
  const std::vector<qm9::Element> el{qm9::Element::O, qm9::Element::H, qm9::Element::H};
  const std::vector<qm9::Vec3> xyz{{0, 0, 0.1173}, {0, 0.7572, -0.4692}, {0, -0.7572, -0.4692}};
  auto cfg = tiny_model(6, 2, 3);
  cfg.encoder.rbf.num_centers = 8;
  const auto graph = graph::build_graph(el, xyz, cfg.encoder.rbf);
  const auto batch = encoder::make_batch(graph);
  numerics::Rng rng(101);
  const auto params = training::init_model(cfg, training::Modality::Multimodal, rng);

  std::vector<Tensor> inputs;
  for (const auto& n : params.names()) inputs.push_back(params.get(n));
  inputs.push_back(random_tensor(rng, 1, text::kEmbeddingDim, 1.0));
  const auto rep = numerics::grad_check(
      [&](numerics::Tape&, std::span<const Var> in) {
        const model::BoundParams p(params, in.first(params.size()));
        const Var g = encoder::encode(batch, p, cfg.encoder);
        const Var tp = text::project(in[params.size()], p);
        return numerics::sum(fusion::predict(fusion::fuse(g, tp, p).f, p));
      },
      inputs, 1e-6);
  return {rep.max_rel_err < 1e-4, "max rel err " + fmt("%.2e", rep.max_rel_err) + " over " +
                                      std::to_string(rep.coordinates) + " coordinates"};
}

Outcome symmetry() {
  const auto mols = spread_fixtures(20);
  const auto cfg = tiny_model(32, 2, 16);
  numerics::Rng rng(7);
  const auto params = training::init_model(cfg, training::Modality::Multimodal, rng);
  double worst_g = 0, worst_y = 0;
  for (const auto& m : mols) {
    const Tensor text = random_tensor(rng, 1, text::kEmbeddingDim, 1.0);
    const Output ref = evaluate(m, text, params, cfg);
    for (int kind = 0; kind < 3; ++kind) {
      for (int r = 0; r < 100; ++r) {
        const qm9::Molecule moved = kind == 0   ? testsupport::translated(m, rng, 10.0)
                                    : kind == 1 ? testsupport::rotated(m, rng)
                                                : testsupport::permuted(m, rng);
        const Output o = evaluate(moved, text, params, cfg);
        worst_g = std::max(worst_g, testsupport::rel_diff(ref.g, o.g));
        worst_y = std::max(worst_y, std::abs(o.y - ref.y) / std::max(std::abs(ref.y), 1e-300));
      }
    }
  }
  return {worst_g <= 1e-9 && worst_y <= 1e-9, "20 molecules x 300 transforms, worst rel diff g " +
                                                  fmt("%.2e", worst_g) + ", prediction " +
                                                  fmt("%.2e", worst_y)};
}

Outcome additivity() {
  const auto mols = spread_fixtures(20);
  const auto cfg = tiny_model(32, 2, 16);
  numerics::Rng rng(8);
  const auto params = encoder::init_encoder(cfg.encoder, rng);
  double worst = 0;
  for (const auto& m : mols) {
    const Tensor one = encoder::encode(graph::build_graph(m, cfg.encoder.rbf), params, cfg.encoder);
    const Tensor two = encoder::encode(
        graph::build_graph(testsupport::doubled(m, 100.0), cfg.encoder.rbf), params, cfg.encoder);
    std::vector<double> twice(one.values());
    for (double& v : twice) v *= 2;
    worst = std::max(worst, testsupport::rel_diff(twice, two.values()));
  }
  return {worst <= 1e-9, "worst rel diff " + fmt("%.2e", worst)};
}

Outcome fusion_algebra() {
  const fusion::FusionConfig fc{8, 4};
  numerics::Rng rng(9);
  auto params = fusion::init_fusion(fc, rng, true);
  const std::size_t rows = 10000;
  const Tensor g = random_tensor(rng, rows, fc.hidden, 2.0);
  const Tensor t = random_tensor(rng, rows, fc.text_width, 2.0);
  // Gate weights large enough to push some gates near 0 and 1.
  for (double& v : params.get("fusion.gate.w").data()) v *= 4;

  auto run = [&](const model::ParamSet& ps) {
    numerics::Tape tape;
    const model::BoundParams p(tape, ps, false);
    const auto fz = fusion::fuse(tape.constant(g), tape.constant(t), p);
    return std::array<Tensor, 3>{fz.g_tilde.value(), fz.t_tilde.value(), fz.f.value()};
  };

  std::size_t violations = 0;
  {
    const auto [gt, tt, f] = run(params);
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double lo = std::min(gt[i], tt[i]), hi = std::max(gt[i], tt[i]);
      const double slack = 1e-12 * std::max(1.0, std::abs(hi - lo));
      if (f[i] < lo - slack || f[i] > hi + slack) ++violations;
    }
  }
  double sat_g = 0, sat_t = 0, mid = 0;
  auto set_gate = [&](double b) {
    auto ps = params;
    ps.get("fusion.gate.w").fill(0);
    ps.get("fusion.gate.b").fill(b);
    return run(ps);
  };
  {
    const auto [gt, tt, f] = set_gate(40);
    for (std::size_t i = 0; i < f.size(); ++i) sat_g = std::max(sat_g, std::abs(f[i] - gt[i]));
  }
  {
    const auto [gt, tt, f] = set_gate(-40);
    for (std::size_t i = 0; i < f.size(); ++i) sat_t = std::max(sat_t, std::abs(f[i] - tt[i]));
  }
  {
    const auto [gt, tt, f] = set_gate(0);
    for (std::size_t i = 0; i < f.size(); ++i)
      mid = std::max(mid, std::abs(f[i] - 0.5 * (gt[i] + tt[i])));
  }
  const bool ok = violations == 0 && sat_g <= 1e-15 && sat_t <= 1e-15 && mid <= 1e-12;
  return {ok, std::to_string(violations) + " convexity violations in " +
                  std::to_string(rows * fc.hidden) + " entries; b=+40 err " + fmt("%.1e", sat_g) +
                  ", b=-40 err " + fmt("%.1e", sat_t) + ", midpoint err " + fmt("%.1e", mid)};
}

Outcome overfit() {
  const auto data = testsupport::fixture_dataset(64);
  training::TrainConfig cfg;
  cfg.model = tiny_model(16, 1, 8);
  cfg.modality = training::Modality::GeometryOnly;
  cfg.target = qm9::TargetId::homo;
  cfg.epochs = 2000;
  cfg.batch_size = 16;
  cfg.seed = 0;
  std::vector<std::size_t> idx(data.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto fitted = training::fit(cfg, data, idx);
  const auto preds = training::predict(fitted.params, cfg, data, idx, fitted.scaler);
  std::vector<double> truth;
  for (const auto& s : data.samples) truth.push_back(s.target(cfg.target));
  const double ratio = training::mean_abs_error(preds.values, truth) / fitted.scaler.std;
  return {ratio <= 0.05, std::to_string(data.samples.size()) + " molecules, training MAE " +
                             fmt("%.2f", 100 * ratio) + "% of target std after " +
                             std::to_string(cfg.epochs) + " epochs"};
}

Outcome text_utility() {
  // Random targets that no geometry can predict, copied into XLogP with
  // noise at 1% of the target spread.
  auto mols = testsupport::fixture_molecules(600);
  auto manifest = testsupport::fixture_manifest(mols);
  numerics::Rng rng(2024);
  const auto homo = static_cast<std::size_t>(qm9::TargetId::homo);
  std::map<std::string, double> leak;
  for (auto& m : mols) {
    m.targets[homo] = rng.normal();
    leak[m.id] = m.targets[homo] + 0.01 * rng.normal();
  }
  for (auto& inc : manifest.included) inc.descriptors.xlogp = leak.at(inc.id);
  const auto data = training::assemble_dataset(mols, manifest, {},
                                               training::EmbeddingSource::Featurizer);
  report::AblationConfig cfg;
  cfg.targets = {qm9::TargetId::homo};
  cfg.seeds = {0};
  cfg.fold_seed = 0;
  cfg.train.model = tiny_model(16, 1, 8);
  cfg.train.epochs = 150;
  cfg.train.batch_size = 16;
  const auto result = report::run_ablation(cfg, data);
  const auto& row = result.report.rows.at(0);
  return {row.percent_change >= 80.0,
          std::to_string(data.samples.size()) + " molecules, geometry MAE " +
              fmt("%.4f", row.mae_geometry) + ", multimodal MAE " +
              fmt("%.4f", row.mae_multimodal) + ", " + report::format_change(row.percent_change)};
}

Outcome constant_text() {
  const auto mols = spread_fixtures(20);
  const auto cfg = tiny_model(32, 2, 16);
  numerics::Rng rng(11);
  const auto params = training::init_model(cfg, training::Modality::Multimodal, rng);
  const Tensor one = random_tensor(rng, 1, text::kEmbeddingDim, 1.0);

  // Each molecule next to a permuted copy, which has a bitwise-equal g.
  std::vector<graph::MoleculeGraph> graphs;
  for (const auto& m : mols) {
    graphs.push_back(graph::build_graph(m, cfg.encoder.rbf));
    graphs.push_back(graph::build_graph(testsupport::permuted(m, rng), cfg.encoder.rbf));
  }
  std::vector<const graph::MoleculeGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  const auto batch = encoder::make_batch(ptrs);
  Tensor text({graphs.size(), text::kEmbeddingDim});
  for (std::size_t r = 0; r < graphs.size(); ++r)
    std::copy(one.data().begin(), one.data().end(), text.row(r).begin());

  numerics::Tape tape;
  const model::BoundParams p(tape, params, false);
  const Tensor g = encoder::encode(batch, p, cfg.encoder).value();
  const Tensor y =
      training::forward(batch, text, p, cfg, training::Modality::Multimodal).value();
  std::size_t equal_g = 0, mismatched = 0;
  for (std::size_t i = 0; i < graphs.size(); i += 2) {
    if (!std::equal(g.row(i).begin(), g.row(i).end(), g.row(i + 1).begin())) continue;
    ++equal_g;
    if (y[i] != y[i + 1]) ++mismatched;
  }
  // Fusing a lone g with the shared text reproduces the batched output.
  std::size_t lone_mismatch = 0;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    numerics::Tape t2;
    const model::BoundParams p2(t2, params, false);
    const Var gi = t2.constant(Tensor::matrix(1, cfg.encoder.hidden, std::vector<double>(
                                                                          g.row(i).begin(), g.row(i).end())));
    const Var yi = fusion::predict(fusion::fuse(gi, text::project(t2.constant(one), p2), p2).f, p2);
    if (yi.value()[0] != y[i]) ++lone_mismatch;
  }
  const bool ok = equal_g == mols.size() && mismatched == 0 && lone_mismatch == 0;
  return {ok, std::to_string(equal_g) + " equal-g pairs, " + std::to_string(mismatched) +
                  " differing outputs; " + std::to_string(lone_mismatch) +
                  " outputs differ from g-only recomputation"};
}

struct CliResult {
  int code;
  std::string err;
};

CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

const std::string kXyz = (testsupport::kFixtureDir / "xyz").string();
const std::string kCache = (testsupport::kFixtureDir / "pubchem_cache").string();

Outcome determinism() {
  const auto dir = fresh_dir("molfuse_acceptance_determinism");
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << R"({
  "profile": "smoke",
  "data": {"limit": 40},
  "model": {"hidden": 8, "iterations": 1, "text_width": 4},
  "train": {"epochs": 3, "batch_size": 8},
  "ablation": {"targets": ["homo", "gap"], "seeds": [0, 1]}
})";
  std::vector<std::string> failures;
  for (const std::string cmd : {"train", "ablate"}) {
    for (const std::string run : {"a", "b"}) {
      const auto r = run_cli({cmd, "--config", cfg.string(), "--xyz", kXyz, "--cache-dir", kCache,
                              "--out", (dir / (cmd + run)).string()});
      if (r.code != 0) failures.push_back(cmd + " exited " + std::to_string(r.code) + ": " + r.err);
    }
    for (const char* f : {"runs.csv", "predictions.csv"}) {
      const fs::path a = dir / (cmd + "a") / f, b = dir / (cmd + "b") / f;
      if (!fs::exists(a) || util::read_file(a) != util::read_file(b))
        failures.push_back(cmd + " " + f + " differs");
    }
  }
  fs::remove_all(dir);
  if (!failures.empty()) return {false, failures.front()};
  return {true, "train and ablate reruns give byte-identical runs.csv and predictions.csv"};
}

Outcome report_fidelity() {
  using qm9::TargetId;
  // The reference improvement cells, four setups per property.
  const std::vector<std::pair<TargetId, std::array<double, 4>>> cells{
      {TargetId::mu, {12.07, 8.05, 7.17, -1.38}},
      {TargetId::alpha, {-14.60, -1.82, -27.98, 8.06}},
      {TargetId::homo, {20.36, 23.63, 19.65, 9.00}},
      {TargetId::lumo, {15.42, 12.22, 4.92, 1.07}},
      {TargetId::gap, {14.82, 19.47, 12.95, 6.50}},
      {TargetId::r2, {-3.34, 4.04, -3.97, 12.35}},
      {TargetId::zpve, {0.88, -12.12, -5.71, -28.21}},
  };
  std::size_t checked = 0;
  std::vector<std::string> wrong;
  for (std::size_t col = 0; col < 4; ++col) {
    std::vector<report::RunRow> rows;
    std::vector<std::pair<std::string, std::string>> expected;
    double base = 0.0173;
    for (const auto& [t, pct] : cells) {
      const std::string name(qm9::target_name(t));
      const double multi = base * (1.0 - pct[col] / 100.0);
      rows.push_back({name, "geometry_only", 0, 0, base});
      rows.push_back({name, "multimodal", 0, 0, multi});
      std::string cell = fmt("%.2f", std::abs(pct[col])) + "% ";
      cell = (pct[col] > 0 ? "+" : "−") + cell + (pct[col] > 0 ? "↑" : "↓");
      expected.emplace_back(std::string(report::target_label(t)), cell);
      base *= 3.1;
    }
    const auto table = report::render_table(report::summarize(rows));
    for (const auto& [label, cell] : expected) {
      ++checked;
      bool found = false;
      std::istringstream lines(table);
      for (std::string line; std::getline(lines, line);)
        if (line.rfind(label + " ", 0) == 0 && line.size() >= cell.size() &&
            line.compare(line.size() - cell.size(), cell.size(), cell) == 0)
          found = true;
      if (!found) wrong.push_back(label + " " + cell);
    }
  }
  if (!wrong.empty()) return {false, "missing row string " + wrong.front()};
  return {true, std::to_string(checked) + " reference cells reproduced, e.g. \"+20.36% ↑\", "
                                          "\"−14.60% ↓\""};
}

Outcome directional(const fs::path& out, std::size_t epochs) {
  fs::create_directories(out);
  const fs::path cfg = out / "directional.json";
  std::ofstream(cfg) << R"({"profile": "desk", "train": {"epochs": )" << epochs << "}}";
  const auto r = run_cli({"ablate", "--config", cfg.string(), "--xyz", kXyz, "--cache-dir", kCache,
                          "--out", (out / "ablate").string()});
  if (r.code != 0) return {false, "ablate exited " + std::to_string(r.code) + ": " + r.err};
  std::ostringstream rep_out, rep_err;
  const int code = cli::run({"report", (out / "ablate" / "runs.csv").string(), "--predictions",
                             (out / "ablate" / "predictions.csv").string(), "--out",
                             (out / "report").string()},
                            rep_out, rep_err);
  if (code != 0) return {false, "report exited " + std::to_string(code) + ": " + rep_err.str()};
  const auto rep = report::AblationReport::from_json(
      nlohmann::json::parse(util::read_file(out / "ablate" / "report.json")));
  std::string detail = "report emitted and verified;";
  for (const auto& row : rep.rows)
    detail += " " + std::string(qm9::target_name(row.target)) + " " +
              report::format_change(row.percent_change) +
              (row.percent_change > 0 ? " (same sign as the reference table)" : " (opposite sign)");
  return {true, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string only;
  std::string directional_out;
  std::size_t directional_epochs = 30;
  app.add_option("--only", only, "Run one check by name");
  app.add_option("--directional", directional_out,
                 "Also run the 1000-molecule ablation, writing into this directory");
  app.add_option("--directional-epochs", directional_epochs, "Epochs for the directional run");
  CLI11_PARSE(app, argc, argv);

  // Wall-clock limits in seconds; 0 means none.
  const std::vector<std::tuple<std::string, std::function<Outcome()>, double>> checks{
      {"gradient-integrity", gradient_integrity, 10},
      {"symmetry", symmetry, 60},
      {"disconnected-additivity", additivity, 0},
      {"fusion-algebra", fusion_algebra, 0},
      {"overfit-capacity", overfit, 600},
      {"text-utility", text_utility, 0},
      {"constant-text", constant_text, 0},
      {"determinism", determinism, 0},
      {"report-fidelity", report_fidelity, 0},
  };
  int failed = 0;
  for (const auto& [name, fn, limit] : checks) {
    if (!only.empty() && only != name) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (limit > 0 && secs >= limit) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", limit) + " s limit";
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " ["
              << fmt("%.1f", secs) << " s]" << std::endl;
  }
  if (only.empty() || only == "directional") {
    if (directional_out.empty()) {
      std::cout << "SKIP directional: reported only; run with --directional DIR" << std::endl;
    } else {
      const auto start = std::chrono::steady_clock::now();
      Outcome o;
      try {
        o = directional(directional_out, directional_epochs);
      } catch (const std::exception& e) {
        o = {false, std::string("threw: ") + e.what()};
      }
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << (o.pass ? "PASS " : "FAIL ") << "directional: " << o.detail << " ["
                << fmt("%.1f", secs) << " s]" << std::endl;
      if (!o.pass) ++failed;
    }
  }
  return failed == 0 ? 0 : 1;
}
