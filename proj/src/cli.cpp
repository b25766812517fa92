#include "molfuse/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "molfuse/params.hpp"
#include "molfuse/pubchem.hpp"
#include "molfuse/qm9.hpp"
#include "molfuse/text.hpp"
#include "molfuse/util.hpp"

namespace molfuse::cli {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config reading

class Section {
 public:
  Section(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError("key '" + display() + "' must be an object");
  }

  // Throws on keys that no accessor asked for.
  void finish() const {
    for (const auto& [k, _] : obj_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path(k) + "'");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void string(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void path_value(const std::string& key, fs::path& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a path string");
      out = v->get<std::string>();
    }
  }
  void count(const std::string& key, std::size_t& out, std::size_t min) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < static_cast<std::int64_t>(min))
        fail(key, "an integer >= " + std::to_string(min));
      out = v->get<std::size_t>();
    }
  }
  void integer(const std::string& key, int& out, int min) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < min)
        fail(key, "an integer >= " + std::to_string(min));
      out = v->get<int>();
    }
  }
  void seed(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void positive(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number() || !(v->get<double>() > 0.0)) fail(key, "a positive number");
      out = v->get<double>();
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  Section child(const std::string& key) {
    const json* v = find(key);
    static const json empty = json::object();
    return Section(v ? *v : empty, path(key));
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("config key '" + path(key) + "' must be " + what);
  }
  std::string path(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

 private:
  std::string display() const { return prefix_.empty() ? "(root)" : prefix_; }

  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

qm9::TargetId target_from(const std::string& name, const std::string& key) {
  const auto t = qm9::parse_target(name);
  if (!t || !qm9::is_benchmark_target(*t))
    throw ConfigError("config key '" + key + "': '" + name + "' is not a benchmark target");
  return *t;
}

// ---------------------------------------------------------------------------
// Shared pipeline steps

struct NoSleepClock : pubchem::Clock {
  double now() override { return 0.0; }
  void sleep(double) override {}
  std::int64_t unix_time() override { return 0; }
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Loaded {
  std::vector<qm9::Molecule> molecules;
  std::vector<qm9::LoadFailure> failures;
};

Loaded load_molecules(const RunConfig& cfg) {
  if (cfg.xyz_dir.empty()) throw ConfigError("no XYZ directory given (--xyz or data.xyz_dir)");
  auto excluded = qm9::load_exclusion_list(cfg.exclusion_list);
  if (!cfg.exclusion_list.empty() && !fs::exists(cfg.exclusion_list))
    throw ConfigError("exclusion list not found: " + cfg.exclusion_list.string());
  auto lr = qm9::load_directory(cfg.xyz_dir, excluded);
  if (cfg.limit && lr.molecules.size() > *cfg.limit) lr.molecules.resize(*cfg.limit);
  return {std::move(lr.molecules), std::move(lr.failures)};
}

struct Enriched {
  Loaded loaded;
  pubchem::MultimodalManifest manifest;
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;
};

Enriched enrich(const RunConfig& cfg, bool offline, std::ostream& err) {
  Enriched e;
  e.loaded = load_molecules(cfg);
  pubchem::DescriptorCache cache(cfg.cache_dir);
  pubchem::ClientOptions opts;
  opts.rate = cfg.rate;
  opts.max_retries = cfg.max_retries;
  std::unique_ptr<pubchem::HttpTransport> transport;
  std::unique_ptr<pubchem::Clock> clock;
  if (offline) {
    transport = std::make_unique<pubchem::OfflineTransport>();
    clock = std::make_unique<NoSleepClock>();
    opts.max_retries = 0;
  } else {
    const char* contact = std::getenv(kContactEnv);
    transport = pubchem::make_http_transport(cfg.base_url, contact ? contact : "");
    clock = std::make_unique<pubchem::SystemClock>();
    err << "querying " << cfg.base_url << " at most " << cfg.rate << " requests/s\n";
  }
  pubchem::Client client(*transport, cache, *clock, opts);
  e.manifest = pubchem::build_multimodal_manifest(e.loaded.molecules, client);
  for (const auto& f : e.loaded.failures)
    e.manifest.excluded.push_back({f.id, pubchem::ExclusionReason::ParseError, f.message});
  std::sort(e.manifest.excluded.begin(), e.manifest.excluded.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  e.network_calls = offline ? 0 : client.network_calls();
  e.cache_hits = client.cache_hits();
  return e;
}

std::size_t count_reason(const pubchem::MultimodalManifest& m, pubchem::ExclusionReason r) {
  return static_cast<std::size_t>(std::count_if(
      m.excluded.begin(), m.excluded.end(), [r](const auto& e) { return e.reason == r; }));
}

void print_summary(const Enriched& e, std::ostream& out) {
  out << e.manifest.included.size() << " included, " << e.manifest.excluded.size()
      << " excluded\n";
  for (const auto& [reason, n] : e.manifest.reason_histogram())
    out << "  " << reason << ": " << n << "\n";
  out << "network calls: " << e.network_calls << ", cache hits: " << e.cache_hits << "\n";
}

std::string dataset_hash(const Enriched& e) {
  std::map<std::string, const qm9::Molecule*> by_id;
  for (const auto& m : e.loaded.molecules) by_id[m.id] = &m;
  std::string text;
  for (const auto& inc : e.manifest.included) {
    text += inc.id + '\t' + util::sha256_hex(qm9::serialize_xyz(*by_id.at(inc.id))) + '\t' +
            util::sha256_hex(pubchem::render_description(inc.descriptors)) + '\n';
  }
  return util::sha256_hex(text);
}

std::string cache_snapshot_id(const fs::path& dir) {
  if (!fs::is_directory(dir)) return util::sha256_hex("");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::string text;
  for (const auto& f : files)
    text += f.filename().string() + ' ' + util::sha256_hex(util::read_file(f)) + '\n';
  return util::sha256_hex(text);
}

std::map<std::int64_t, std::string> descriptions(const pubchem::MultimodalManifest& m) {
  std::map<std::int64_t, std::string> out;
  for (const auto& inc : m.included)
    out.emplace(inc.descriptors.cid, pubchem::render_description(inc.descriptors));
  return out;
}

// Fails with a user error when any molecule still needs the network.
void require_built(const Enriched& e) {
  const std::size_t missing = count_reason(e.manifest, pubchem::ExclusionReason::NetworkExhausted);
  if (missing > 0) {
    throw ConfigError(std::to_string(missing) +
                      " molecules have no cached PubChem record; run 'molfuse fetch' first");
  }
  if (e.manifest.included.empty()) throw ConfigError("dataset is empty");
}

struct Artifacts {
  fs::path dir;
  ordered_json listed = ordered_json::object();

  void write(const std::string& name, const std::string& contents) {
    util::write_file_atomic(dir / name, contents);
    listed[name] = util::sha256_hex(contents);
  }
};

struct RunManifest {
  ordered_json doc;

  RunManifest(const RunConfig& cfg, std::string_view command) {
    doc["code_version"] = std::string(kVersion);
    doc["command"] = std::string(command);
    doc["config"] = cfg.to_json();
    doc["started_at"] = utc_now();
  }

  void finish(Artifacts& a, double seconds) {
    doc["finished_at"] = utc_now();
    doc["wall_seconds"] = seconds;
    doc["artifacts"] = a.listed;
    util::write_file_atomic(a.dir / "manifest.json", doc.dump(2) + "\n");
  }
};

void describe_inputs(RunManifest& m, const RunConfig& cfg, const Enriched& e) {
  m.doc["dataset"] = {{"molecules", e.manifest.included.size()},
                      {"excluded", e.manifest.excluded.size()},
                      {"content_sha256", dataset_hash(e)}};
  m.doc["cache_snapshot"] = cache_snapshot_id(cfg.cache_dir);
  ordered_json emb;
  emb["source"] = std::string(training::source_name(cfg.source));
  if (cfg.source == training::EmbeddingSource::File) {
    emb["path"] = cfg.embeddings.string();
    emb["sha256"] = util::sha256_hex(util::read_file(cfg.embeddings));
  }
  m.doc["embeddings"] = emb;
}

training::Dataset make_dataset(const RunConfig& cfg, const Enriched& e, std::ostream& err) {
  text::EmbeddingFile file;
  if (cfg.source == training::EmbeddingSource::File) {
    if (cfg.embeddings.empty())
      throw ConfigError("file embedding source needs --embeddings or train.embeddings");
    file = text::load_embeddings(cfg.embeddings);
    const auto rep = text::check_embeddings(file, descriptions(e.manifest));
    if (!rep.hash_mismatch.empty()) {
      throw ConfigError("embedding file " + cfg.embeddings.string() + " has " +
                        std::to_string(rep.hash_mismatch.size()) +
                        " records whose text hash does not match the dataset (first cid " +
                        std::to_string(rep.hash_mismatch.front()) + ")");
    }
  }
  auto data = training::assemble_dataset(e.loaded.molecules, e.manifest,
                                         cfg.train.model.encoder.rbf, cfg.source, &file);
  err << "dataset: " << data.samples.size() << " molecules, text from "
      << training::source_name(cfg.source) << "\n";
  return data;
}

model::Checkpoint checkpoint_for(const training::FoldResult& f, const training::TrainConfig& t) {
  model::Checkpoint c;
  encoder::write_config(c.config, t.model.encoder);
  c.config.emplace_back("text.width", static_cast<double>(t.model.text_width));
  c.config.emplace_back("model.multimodal", t.modality == training::Modality::Multimodal ? 1 : 0);
  c.config.emplace_back("target.index", static_cast<double>(t.target));
  c.config.emplace_back("target.mean", f.fit.scaler.mean);
  c.config.emplace_back("target.std", f.fit.scaler.std);
  c.config.emplace_back("train.seed", static_cast<double>(t.seed));
  c.config.emplace_back("train.fold", static_cast<double>(f.fold));
  c.params = f.fit.params;
  return c;
}

training::Progress progress_to(std::ostream& err) {
  return [&err](const std::string& line) { err << line << "\n"; };
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_fetch(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Enriched e = enrich(cfg, cfg.offline, err);
  print_summary(e, out);
  const std::size_t exhausted = count_reason(e.manifest, pubchem::ExclusionReason::NetworkExhausted);
  if (exhausted > 0) {
    err << exhausted << " molecules could not be resolved because PubChem was unreachable or "
        << "kept throttling. Rerun the same command to resume; cached records are reused.\n";
    return kEnvironmentError;
  }
  return kOk;
}

int cmd_build_dataset(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  const Enriched e = enrich(cfg, cfg.offline, err);
  print_summary(e, out);
  if (count_reason(e.manifest, pubchem::ExclusionReason::NetworkExhausted) > 0) {
    err << "some molecules still need PubChem; rerun to resume\n";
    return kEnvironmentError;
  }
  fs::create_directories(cfg.out);
  RunManifest manifest(cfg, "build-dataset");
  describe_inputs(manifest, cfg, e);
  Artifacts a{cfg.out};

  std::string dataset;
  for (const auto& inc : e.manifest.included) {
    ordered_json j;
    j["id"] = inc.id;
    j["cid"] = inc.descriptors.cid;
    const std::string text = pubchem::render_description(inc.descriptors);
    j["text_sha256"] = util::sha256_hex(text);
    j["description"] = text;
    dataset += j.dump() + "\n";
  }
  a.write("dataset.jsonl", dataset);
  std::ostringstream desc;
  text::write_description_manifest(desc, descriptions(e.manifest));
  a.write("descriptions.jsonl", desc.str());
  std::string excl = "id,reason,detail\n";
  for (const auto& x : e.manifest.excluded) {
    std::string detail = x.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    std::replace(detail.begin(), detail.end(), '\n', ' ');
    excl += x.id + "," + std::string(pubchem::reason_code(x.reason)) + "," + detail + "\n";
  }
  a.write("exclusions.csv", excl);
  manifest.finish(a, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  out << "wrote " << (cfg.out / "dataset.jsonl").string() << "\n";
  return kOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.source == training::EmbeddingSource::File && !cfg.embeddings.empty() &&
      !fs::exists(cfg.embeddings))
    throw ConfigError("embedding file not found: " + cfg.embeddings.string());
  const Enriched e = enrich(cfg, true, err);
  require_built(e);
  const auto data = make_dataset(cfg, e, err);
  cfg.train.validate();
  const auto folds = training::split_folds(data.samples.size(), cfg.train.folds, cfg.fold_seed);

  fs::create_directories(cfg.out);
  RunManifest manifest(cfg, "train");
  describe_inputs(manifest, cfg, e);
  manifest.doc["fold_hash"] = training::fold_hash(folds);
  Artifacts a{cfg.out};

  const auto result = training::train(cfg.train, data, folds, progress_to(err));
  std::vector<report::RunRow> runs;
  std::vector<report::PredictionRow> preds;
  report::append_rows(result, cfg.train, data, runs, preds);
  a.write("runs.csv", report::runs_csv(runs));
  a.write("predictions.csv", report::predictions_csv(preds));
  for (const auto& f : result.folds) {
    const std::string name = "checkpoint_fold" + std::to_string(f.fold) + ".bin";
    a.write(name, model::encode_checkpoint(checkpoint_for(f, cfg.train)));
  }
  manifest.finish(a, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  for (const auto& f : result.folds)
    out << "fold " << f.fold << " MAE " << util::format_double(f.mae) << "\n";
  out << qm9::target_name(cfg.train.target) << " " << training::modality_name(cfg.train.modality)
      << " mean MAE " << util::format_double(result.mean_mae) << "\n";
  return kOk;
}

void write_report_files(Artifacts& a, const report::AblationReport& rep,
                        const std::vector<report::PredictionRow>& preds) {
  ordered_json j = rep.to_json();
  j["manifest"] = "manifest.json";
  a.write("report.json", j.dump(2) + "\n");
  a.write("report.txt", report::render_table(rep));
  a.write("mae_bars.svg", report::mae_bar_svg(rep));
  for (const auto& row : rep.rows) {
    const std::string t(qm9::target_name(row.target));
    a.write("gates_" + t + ".svg", report::gate_histogram_svg(preds, t));
  }
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.source == training::EmbeddingSource::File && !cfg.embeddings.empty() &&
      !fs::exists(cfg.embeddings))
    throw ConfigError("embedding file not found: " + cfg.embeddings.string());
  const Enriched e = enrich(cfg, true, err);
  require_built(e);
  const auto data = make_dataset(cfg, e, err);
  cfg.train.validate();

  report::AblationConfig ac;
  ac.targets = cfg.ablation_targets;
  ac.seeds = cfg.ablation_seeds;
  ac.fold_seed = cfg.fold_seed;
  ac.train = cfg.train;
  fs::create_directories(cfg.out);
  RunManifest manifest(cfg, "ablate");
  describe_inputs(manifest, cfg, e);
  Artifacts a{cfg.out};

  const auto result = report::run_ablation(ac, data, progress_to(err));
  const auto check = report::verify(result.report, result.runs, result.predictions);
  if (!check.ok()) {
    for (const auto& p : check.problems) err << "verification: " << p << "\n";
    throw PreconditionError("ablation report failed verification");
  }
  a.write("runs.csv", report::runs_csv(result.runs));
  a.write("predictions.csv", report::predictions_csv(result.predictions));
  write_report_files(a, result.report, result.predictions);
  manifest.doc["fold_hash"] = training::fold_hash(
      training::split_folds(data.samples.size(), cfg.train.folds, cfg.fold_seed));
  manifest.finish(a, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  out << report::render_table(result.report);
  return kOk;
}

int cmd_report(const std::vector<std::string>& csvs, const std::vector<std::string>& pred_csvs,
               const RunConfig& cfg, bool write_out, std::ostream& out, std::ostream& err) {
  std::vector<report::RunRow> runs;
  for (const auto& p : csvs) {
    if (!fs::exists(p)) throw ConfigError("runs CSV not found: " + p);
    auto rows = report::parse_runs_csv(util::read_file(p));
    runs.insert(runs.end(), rows.begin(), rows.end());
  }
  std::vector<report::PredictionRow> preds;
  for (const auto& p : pred_csvs) {
    if (!fs::exists(p)) throw ConfigError("predictions CSV not found: " + p);
    auto rows = report::parse_predictions_csv(util::read_file(p));
    preds.insert(preds.end(), rows.begin(), rows.end());
  }
  const auto rep = report::summarize(runs);
  out << report::render_table(rep);
  if (!pred_csvs.empty()) {
    const auto v = report::verify(rep, runs, preds);
    if (!v.ok()) {
      for (const auto& p : v.problems) err << "verification: " << p << "\n";
      return kUserError;
    }
    out << "verified " << runs.size() << " fold MAEs against " << preds.size()
        << " predictions\n";
  }
  if (write_out) {
    fs::create_directories(cfg.out);
    RunManifest manifest(cfg, "report");
    ordered_json inputs = ordered_json::array();
    for (const auto& p : csvs) inputs.push_back({{"path", p}, {"sha256", util::sha256_hex(util::read_file(p))}});
    for (const auto& p : pred_csvs) inputs.push_back({{"path", p}, {"sha256", util::sha256_hex(util::read_file(p))}});
    manifest.doc["inputs"] = inputs;
    Artifacts a{cfg.out};
    write_report_files(a, rep, preds);
    manifest.finish(a, 0.0);
  }
  return kOk;
}

int cmd_embed_check(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.embeddings.empty()) throw ConfigError("embed-check needs --embeddings");
  const auto file = text::load_embeddings(cfg.embeddings);
  const Enriched e = enrich(cfg, true, err);
  require_built(e);
  const auto rep = text::check_embeddings(file, descriptions(e.manifest));
  out << rep.records << " records, " << rep.matched << " matched, " << rep.hash_mismatch.size()
      << " hash mismatches, " << rep.unknown_cid.size() << " unknown cids, "
      << rep.missing_cid.size() << " missing cids";
  if (file.duplicates) out << ", " << file.duplicates << " duplicate lines";
  out << "\n";
  auto list = [&](const char* what, const std::vector<std::int64_t>& cids) {
    for (std::size_t i = 0; i < cids.size() && i < 10; ++i) err << what << " cid " << cids[i] << "\n";
  };
  list("hash mismatch:", rep.hash_mismatch);
  list("unknown:", rep.unknown_cid);
  list("missing:", rep.missing_cid);
  return rep.ok() ? kOk : kUserError;
}

}  // namespace

// ---------------------------------------------------------------------------

std::optional<Profile> parse_profile(std::string_view s) {
  if (s == "smoke") return Profile::Smoke;
  if (s == "desk") return Profile::Desk;
  if (s == "full") return Profile::Full;
  return std::nullopt;
}

std::string_view profile_name(Profile p) {
  switch (p) {
    case Profile::Smoke: return "smoke";
    case Profile::Desk: return "desk";
    case Profile::Full: return "full";
  }
  return "desk";
}

RunConfig profile_defaults(Profile p) {
  RunConfig c;
  c.profile = p;
  auto& m = c.train.model;
  switch (p) {
    case Profile::Smoke:
      c.limit = 64;
      m.encoder.hidden = 16;
      m.encoder.iterations = 1;
      m.text_width = 8;
      c.train.epochs = 30;
      break;
    case Profile::Desk:
      c.limit = 1000;
      m.encoder.hidden = 32;
      m.encoder.iterations = 2;
      m.text_width = 16;
      c.train.epochs = 300;
      break;
    case Profile::Full:
      c.limit.reset();
      m.encoder.hidden = 128;
      m.encoder.iterations = 3;
      m.text_width = 16;
      c.train.epochs = 300;
      break;
  }
  return c;
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["profile"] = std::string(profile_name(profile));
  j["data"] = {{"xyz_dir", xyz_dir.string()},
               {"exclusion_list", exclusion_list.string()},
               {"cache_dir", cache_dir.string()},
               {"limit", limit ? ordered_json(*limit) : ordered_json(nullptr)}};
  j["pubchem"] = {{"base_url", base_url},
                  {"rate", rate},
                  {"max_retries", max_retries},
                  {"offline", offline}};
  const auto& m = train.model;
  j["model"] = {{"hidden", m.encoder.hidden},
                {"iterations", m.encoder.iterations},
                {"cutoff", m.encoder.rbf.cutoff},
                {"num_centers", m.encoder.rbf.num_centers},
                {"gamma", m.encoder.rbf.gamma},
                {"text_width", m.text_width}};
  j["train"] = {{"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"epochs", train.epochs},
                {"folds", train.folds},
                {"seed", train.seed},
                {"target", std::string(qm9::target_name(train.target))},
                {"modality", std::string(training::modality_name(train.modality))},
                {"embedding_source", std::string(training::source_name(source))},
                {"embeddings", embeddings.string()}};
  ordered_json targets = ordered_json::array();
  for (auto t : ablation_targets) targets.push_back(std::string(qm9::target_name(t)));
  j["ablation"] = {{"targets", targets}, {"seeds", ablation_seeds}, {"fold_seed", fold_seed}};
  j["out"] = out.string();
  return j;
}

void apply_config(RunConfig& cfg, const json& doc) {
  Section root(doc, "");
  if (const json* v = root.find("profile")) {
    if (!v->is_string() || !parse_profile(v->get<std::string>()))
      root.fail("profile", "one of smoke, desk, full");
  }
  {
    Section s = root.child("data");
    s.path_value("xyz_dir", cfg.xyz_dir);
    s.path_value("exclusion_list", cfg.exclusion_list);
    s.path_value("cache_dir", cfg.cache_dir);
    if (const json* v = s.find("limit")) {
      if (v->is_null()) {
        cfg.limit.reset();
      } else {
        if (!v->is_number_integer() || v->get<std::int64_t>() < 1)
          s.fail("limit", "a positive integer or null");
        cfg.limit = v->get<std::size_t>();
      }
    }
    s.finish();
  }
  {
    Section s = root.child("pubchem");
    s.string("base_url", cfg.base_url);
    s.positive("rate", cfg.rate);
    s.integer("max_retries", cfg.max_retries, 0);
    s.boolean("offline", cfg.offline);
    s.finish();
  }
  {
    Section s = root.child("model");
    auto& m = cfg.train.model;
    s.count("hidden", m.encoder.hidden, 2);
    s.count("iterations", m.encoder.iterations, 1);
    s.positive("cutoff", m.encoder.rbf.cutoff);
    s.count("num_centers", m.encoder.rbf.num_centers, 2);
    s.positive("gamma", m.encoder.rbf.gamma);
    s.count("text_width", m.text_width, 1);
    s.finish();
  }
  {
    Section s = root.child("train");
    auto& t = cfg.train;
    s.count("batch_size", t.batch_size, 1);
    s.positive("learning_rate", t.learning_rate);
    s.count("epochs", t.epochs, 1);
    s.count("folds", t.folds, 2);
    s.seed("seed", t.seed);
    std::string name;
    s.string("target", name);
    if (!name.empty()) t.target = target_from(name, "train.target");
    name.clear();
    s.string("modality", name);
    if (!name.empty()) {
      const auto m = training::parse_modality(name);
      if (!m) s.fail("modality", "geometry_only or multimodal");
      t.modality = *m;
    }
    name.clear();
    s.string("embedding_source", name);
    if (!name.empty()) {
      if (name == "file") cfg.source = training::EmbeddingSource::File;
      else if (name == "featurizer") cfg.source = training::EmbeddingSource::Featurizer;
      else s.fail("embedding_source", "file or featurizer");
    }
    s.path_value("embeddings", cfg.embeddings);
    s.finish();
  }
  {
    Section s = root.child("ablation");
    if (const json* v = s.find("targets")) {
      if (!v->is_array() || v->empty()) s.fail("targets", "a non-empty list of target names");
      cfg.ablation_targets.clear();
      for (const auto& t : *v) {
        if (!t.is_string()) s.fail("targets", "a non-empty list of target names");
        cfg.ablation_targets.push_back(target_from(t.get<std::string>(), "ablation.targets"));
      }
    }
    if (const json* v = s.find("seeds")) {
      if (!v->is_array() || v->empty()) s.fail("seeds", "a non-empty list of seeds");
      cfg.ablation_seeds.clear();
      for (const auto& x : *v) {
        if (!x.is_number_unsigned()) s.fail("seeds", "a non-empty list of seeds");
        cfg.ablation_seeds.push_back(x.get<std::uint64_t>());
      }
    }
    s.seed("fold_seed", cfg.fold_seed);
    s.finish();
  }
  root.path_value("out", cfg.out);
  root.finish();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal molecular property prediction: geometry plus PubChem text"};
  app.name("molfuse");
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_path, profile_flag, cache_dir, embeddings, out_dir, xyz_dir, exclusions;
  std::optional<double> rate;
  std::optional<std::uint64_t> seed;
  bool offline = false;

  auto common = [&](CLI::App* sub, bool training_flags) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--profile", profile_flag, "smoke, desk or full")
        ->check(CLI::IsMember({"smoke", "desk", "full"}));
    sub->add_option("--xyz", xyz_dir, "directory of QM9 .xyz files");
    sub->add_option("--exclusions", exclusions, "QM9 uncharacterized list");
    sub->add_option("--cache-dir", cache_dir, "PubChem record cache");
    sub->add_option("--out", out_dir, "output directory");
    if (training_flags) {
      sub->add_option("--seed", seed, "model seed (ablate: first of three seeds and fold seed)");
      sub->add_option("--embeddings", embeddings, "precomputed embedding file (file source)");
    }
  };

  auto* fetch = app.add_subcommand("fetch", "warm the PubChem cache for an XYZ directory");
  common(fetch, false);
  fetch->add_option("--rate", rate, "requests per second ceiling");
  fetch->add_flag("--offline", offline, "serve from the cache only");
  auto* build = app.add_subcommand("build-dataset", "write the multimodal dataset files");
  common(build, false);
  build->add_option("--rate", rate, "requests per second ceiling");
  build->add_flag("--offline", offline, "serve from the cache only");
  auto* train = app.add_subcommand("train", "cross-validated training of one modality");
  common(train, true);
  auto* ablate = app.add_subcommand("ablate", "geometry-only vs multimodal per target");
  common(ablate, true);
  auto* rep = app.add_subcommand("report", "summarise run CSVs");
  std::vector<std::string> csvs, pred_csvs;
  rep->add_option("runs", csvs, "runs CSV files")->required();
  rep->add_option("--predictions", pred_csvs, "predictions CSV files to verify against");
  rep->add_option("--out", out_dir, "write report files and plots here");
  auto* check = app.add_subcommand("embed-check", "validate an embedding file");
  common(check, false);
  check->add_option("--embeddings", embeddings, "embedding file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUserError;
  }

  try {
    RunConfig cfg = profile_defaults(Profile::Desk);
    json doc = json::object();
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw ConfigError("config file not found: " + config_path);
      try {
        doc = json::parse(util::read_file(config_path));
      } catch (const json::exception& e) {
        throw ConfigError("config file " + config_path + " is not valid JSON: " + e.what());
      }
      if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");
    }
    std::string profile = profile_flag;
    if (profile.empty() && doc.contains("profile") && doc["profile"].is_string())
      profile = doc["profile"].get<std::string>();
    if (!profile.empty()) {
      const auto p = parse_profile(profile);
      if (!p) throw ConfigError("config key 'profile' must be one of smoke, desk, full");
      cfg = profile_defaults(*p);
    }
    apply_config(cfg, doc);
    if (!xyz_dir.empty()) cfg.xyz_dir = xyz_dir;
    if (!exclusions.empty()) cfg.exclusion_list = exclusions;
    if (!cache_dir.empty()) cfg.cache_dir = cache_dir;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (rate) {
      if (!(*rate > 0)) throw ConfigError("--rate must be positive");
      cfg.rate = *rate;
    }
    if (offline) cfg.offline = true;
    if (seed) {
      cfg.train.seed = *seed;
      cfg.fold_seed = *seed;
      cfg.ablation_seeds = {*seed, *seed + 1, *seed + 2};
    }
    if (!embeddings.empty()) {
      cfg.embeddings = embeddings;
      cfg.source = training::EmbeddingSource::File;
    }
    if (cfg.source == training::EmbeddingSource::File && !cfg.embeddings.empty() &&
        !fs::exists(cfg.embeddings))
      throw ConfigError("embedding file not found: " + cfg.embeddings.string());

    if (fetch->parsed()) return cmd_fetch(cfg, out, err);
    if (build->parsed()) return cmd_build_dataset(cfg, out, err);
    if (train->parsed()) return cmd_train(cfg, out, err);
    if (ablate->parsed()) return cmd_ablate(cfg, out, err);
    if (rep->parsed()) return cmd_report(csvs, pred_csvs, cfg, !out_dir.empty(), out, err);
    if (check->parsed()) return cmd_embed_check(cfg, out, err);
  } catch (const pubchem::NetworkError& e) {
    err << "error: " << e.what() << "\n";
    return kEnvironmentError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kEnvironmentError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUserError;
  }
  return kUserError;
}

}  // namespace molfuse::cli
