#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "molfuse/report.hpp"
#include "molfuse/training.hpp"

namespace molfuse::cli {

inline constexpr std::string_view kVersion = "molfuse 0.1.0";
inline constexpr const char* kContactEnv = "MOLFUSE_CONTACT";

enum ExitCode : int { kOk = 0, kUserError = 2, kEnvironmentError = 3 };

enum class Profile { Smoke, Desk, Full };
std::optional<Profile> parse_profile(std::string_view s);
std::string_view profile_name(Profile p);

// Everything a subcommand needs. Built from the profile defaults, then the
// JSON config file, then command-line flags.
struct RunConfig {
  Profile profile = Profile::Desk;

  std::filesystem::path xyz_dir;
  std::filesystem::path exclusion_list;
  std::filesystem::path cache_dir = ".molfuse-cache";
  std::optional<std::size_t> limit;  // first molecules by id

  std::string base_url = "https://pubchem.ncbi.nlm.nih.gov";
  double rate = 5.0;
  int max_retries = 4;
  bool offline = false;

  training::TrainConfig train;
  training::EmbeddingSource source = training::EmbeddingSource::Featurizer;
  std::filesystem::path embeddings;

  std::vector<qm9::TargetId> ablation_targets{qm9::TargetId::homo, qm9::TargetId::gap};
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::uint64_t fold_seed = 0;

  std::filesystem::path out = "molfuse-out";

  nlohmann::ordered_json to_json() const;
};

RunConfig profile_defaults(Profile p);

// Applies a config document on top of `cfg`. Unknown keys and wrongly typed
// values throw ConfigError naming the dotted key.
void apply_config(RunConfig& cfg, const nlohmann::json& doc);

// Runs one command line (without the program name). Output goes to `out`,
// progress and diagnostics to `err`. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace molfuse::cli
