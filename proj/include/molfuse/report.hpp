#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "molfuse/qm9.hpp"
#include "molfuse/training.hpp"

namespace molfuse::report {

// 100 * (base - multi) / base; positive means the multimodal model is better.
// Throws PreconditionError unless base > 0 and both are finite.
double percent_change(double mae_base, double mae_multi);

// "+20.36% ↑", "−14.60% ↓" (U+2212 minus), "0.00% =" when it rounds to zero.
std::string format_change(double pct);

// Row label as printed in the summary table, e.g. "HOMO-LUMO Gap".
std::string_view target_label(qm9::TargetId t);

// One held-out fold of one run.
struct RunRow {
  std::string target;
  std::string modality;
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  double mae = 0.0;

  friend bool operator==(const RunRow&, const RunRow&) = default;
};

// One held-out molecule of one run.
struct PredictionRow {
  std::string target;
  std::string modality;
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  std::string id;
  double y = 0.0;
  double yhat = 0.0;
  std::optional<double> gate_mean;  // multimodal only

  friend bool operator==(const PredictionRow&, const PredictionRow&) = default;
};

inline constexpr std::string_view kRunsHeader = "target,modality,seed,fold,mae";
inline constexpr std::string_view kPredictionsHeader =
    "target,modality,seed,fold,id,y,yhat,gate_mean";

std::string runs_csv(std::span<const RunRow> rows);
// Throws FormatError naming the line on a header or field mismatch.
std::vector<RunRow> parse_runs_csv(std::string_view text);
std::string predictions_csv(std::span<const PredictionRow> rows);
std::vector<PredictionRow> parse_predictions_csv(std::string_view text);

struct TargetSummary {
  qm9::TargetId target = qm9::TargetId::homo;
  double mae_geometry = 0.0;    // native units, mean over seeds of the fold mean
  double mae_multimodal = 0.0;
  double percent_change = 0.0;
  std::size_t n_runs = 0;
  std::vector<std::uint64_t> seeds;
  std::string fold_hash;  // empty when summarised from CSV alone

  friend bool operator==(const TargetSummary&, const TargetSummary&) = default;
};

inline constexpr std::string_view kRunsDefinition =
    "independent runs are distinct model seeds over identical folds";

struct AblationReport {
  std::string runs_definition{kRunsDefinition};
  std::vector<TargetSummary> rows;  // benchmark target order

  nlohmann::ordered_json to_json() const;
  static AblationReport from_json(const nlohmann::json& j);
  friend bool operator==(const AblationReport&, const AblationReport&) = default;
};

// Aggregates run rows from any number of CSVs; order does not matter.
// Identical duplicate rows collapse; conflicting duplicates, unknown targets
// or modalities, a target missing one modality, or unequal fold counts
// across seeds throw FormatError.
AblationReport summarize(std::span<const RunRow> rows,
                         const std::map<std::string, std::string>& fold_hashes = {});

std::string render_table(const AblationReport& report);

struct Verification {
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

// Recomputes every fold MAE from the predictions, every summary MAE from the
// run rows, and every percent change from the summary MAEs, each within 1e-9.
Verification verify(const AblationReport& report, std::span<const RunRow> runs,
                    std::span<const PredictionRow> predictions);

struct AblationConfig {
  std::vector<qm9::TargetId> targets{qm9::TargetId::homo, qm9::TargetId::gap};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t fold_seed = 0;
  training::TrainConfig train;  // modality, target and seed are set per run
};

struct AblationResult {
  AblationReport report;
  std::vector<RunRow> runs;
  std::vector<PredictionRow> predictions;
};

// Per target and seed, trains both modalities on the same folds.
AblationResult run_ablation(const AblationConfig& cfg, const training::Dataset& data,
                            const training::Progress& progress = {});

// Rows for a finished cross-validated run.
void append_rows(const training::TrainResult& result, const training::TrainConfig& cfg,
                 const training::Dataset& data, std::vector<RunRow>& runs,
                 std::vector<PredictionRow>& predictions);

// Static SVG plots.
std::string mae_bar_svg(const AblationReport& report);
// Histogram of per-molecule mean gate values for one target, 20 bins on [0, 1].
std::string gate_histogram_svg(std::span<const PredictionRow> predictions,
                               std::string_view target);

}  // namespace molfuse::report
