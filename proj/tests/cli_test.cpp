#include <atomic>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "molfuse/cli.hpp"
#include "molfuse/params.hpp"
#include "molfuse/util.hpp"
#include "test_support.hpp"

using namespace molfuse;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result molfuse_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

const std::string kXyz = (testsupport::kFixtureDir / "xyz").string();
const std::string kCache = (testsupport::kFixtureDir / "pubchem_cache").string();

// Tiny run: 18 molecules, 2 epochs, one seed per modality.
fs::path tiny_config(const fs::path& dir) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << R"({
  "profile": "smoke",
  "data": {"limit": 18},
  "model": {"hidden": 8, "iterations": 1, "text_width": 4},
  "train": {"epochs": 2, "batch_size": 8},
  "ablation": {"targets": ["homo"], "seeds": [5]}
})";
  return p;
}

std::vector<std::string> with_data(std::vector<std::string> args) {
  for (const auto& a : {"--xyz", kXyz.c_str(), "--cache-dir", kCache.c_str()}) args.push_back(a);
  return args;
}

struct LocalPubChem {
  httplib::Server server;
  std::thread worker;
  std::atomic<int> hits{0};
  int port = 0;

  explicit LocalPubChem(int status) {
    auto reply = [this, status](const httplib::Request&, httplib::Response& res) {
      ++hits;
      res.status = status;
      res.set_content(R"({"Fault":{"Code":"PUGREST.NotFound"}})", "application/json");
    };
    server.Post(R"(/rest/pug/.*)", reply);
    server.Get(R"(/rest/pug/.*)", reply);
    port = server.bind_to_any_port("127.0.0.1");
    worker = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalPubChem() {
    server.stop();
    worker.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

fs::path config_for_server(const fs::path& dir, const std::string& url) {
  const fs::path p = dir / "net.json";
  std::ofstream(p) << R"({"pubchem": {"base_url": ")" << url
                   << R"(", "max_retries": 0, "rate": 100}})";
  return p;
}

}  // namespace

TEST_CASE("fetch on an empty directory") {
  const auto dir = fresh_dir("molfuse_cli_empty");
  fs::create_directories(dir / "xyz");
  const auto r = molfuse_cli({"fetch", "--xyz", (dir / "xyz").string(), "--cache-dir",
                              (dir / "cache").string(), "--offline"});
  CHECK(r.code == 0);
  CHECK(r.out.rfind("0 included, 0 excluded\n", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("fetch reports an unparsable file as a parse-error exclusion") {
  const auto dir = fresh_dir("molfuse_cli_parse");
  fs::create_directories(dir / "xyz");
  const auto mols = testsupport::fixture_molecules(1);
  util::write_file_atomic(dir / "xyz" / (mols[0].id + ".xyz"), qm9::serialize_xyz(mols[0]));
  util::write_file_atomic(dir / "xyz" / "broken.xyz", "three\n");
  const auto r = molfuse_cli({"fetch", "--xyz", (dir / "xyz").string(), "--cache-dir", kCache,
                              "--offline"});
  CHECK(r.code == 0);
  CHECK(r.out.find("1 included, 1 excluded") != std::string::npos);
  CHECK(r.out.find("parse-error: 1") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("fetch on a missing directory is a user error") {
  const auto r = molfuse_cli({"fetch", "--xyz", "/nonexistent/molfuse", "--offline"});
  CHECK(r.code == 2);
  CHECK(r.err.find("/nonexistent/molfuse") != std::string::npos);
}

TEST_CASE("second fetch is served from the cache") {
  const auto dir = fresh_dir("molfuse_cli_rerun");
  fs::create_directories(dir / "xyz");
  for (const auto& m : testsupport::fixture_molecules(3))
    util::write_file_atomic(dir / "xyz" / (m.id + ".xyz"), qm9::serialize_xyz(m));
  LocalPubChem pubchem(404);
  const auto cfg = config_for_server(dir, pubchem.url());
  const std::vector<std::string> args{"fetch", "--config", cfg.string(), "--xyz",
                                      (dir / "xyz").string(), "--cache-dir",
                                      (dir / "cache").string()};
  const auto first = molfuse_cli(args);
  CHECK(first.code == 0);
  CHECK(first.out.find("0 included, 3 excluded") != std::string::npos);
  CHECK(first.out.find("network calls: 3") != std::string::npos);
  const int hits = pubchem.hits;
  const auto second = molfuse_cli(args);
  CHECK(second.code == 0);
  CHECK(second.out.find("network calls: 0, cache hits: 3") != std::string::npos);
  CHECK(pubchem.hits == hits);
  fs::remove_all(dir);
}

TEST_CASE("throttling that never clears exits 3 with resume advice") {
  const auto dir = fresh_dir("molfuse_cli_throttle");
  fs::create_directories(dir / "xyz");
  const auto m = testsupport::fixture_molecules(1)[0];
  util::write_file_atomic(dir / "xyz" / (m.id + ".xyz"), qm9::serialize_xyz(m));
  LocalPubChem pubchem(503);
  const auto cfg = config_for_server(dir, pubchem.url());
  const auto r = molfuse_cli({"fetch", "--config", cfg.string(), "--xyz", (dir / "xyz").string(),
                              "--cache-dir", (dir / "cache").string()});
  CHECK(r.code == 3);
  CHECK(r.out.find("network-exhausted: 1") != std::string::npos);
  CHECK(r.err.find("Rerun the same command") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("config schema violations name the key") {
  const auto dir = fresh_dir("molfuse_cli_schema");
  const struct {
    const char* doc;
    const char* key;
  } cases[] = {{R"({"train": {"epoch": 3}})", "train.epoch"},
               {R"({"train": {"batch_size": 0}})", "train.batch_size"},
               {R"({"train": {"learning_rate": "fast"}})", "train.learning_rate"},
               {R"({"train": {"target": "A"}})", "train.target"},
               {R"({"model": {"hidden": 2.5}})", "model.hidden"},
               {R"({"ablation": {"seeds": [-1]}})", "ablation.seeds"},
               {R"({"profile": "huge"})", "profile"},
               {R"({"colour": "blue"})", "colour"}};
  for (const auto& c : cases) {
    const auto p = dir / "c.json";
    std::ofstream(p) << c.doc;
    const auto r = molfuse_cli(with_data({"train", "--config", p.string()}));
    CHECK(r.code == 2);
    CHECK_MESSAGE(r.err.find(c.key) != std::string::npos, r.err);
  }
  std::ofstream(dir / "bad.json") << "{not json";
  CHECK(molfuse_cli({"train", "--config", (dir / "bad.json").string()}).code == 2);
  CHECK(molfuse_cli({"train", "--config", (dir / "absent.json").string()}).code == 2);
  CHECK(molfuse_cli({"train", "--profile", "gigantic"}).code == 2);
  CHECK(molfuse_cli({"frobnicate"}).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("missing embedding file names the path") {
  const auto r = molfuse_cli(
      with_data({"train", "--profile", "smoke", "--embeddings", "/nonexistent/emb.jsonl"}));
  CHECK(r.code == 2);
  CHECK(r.err.find("/nonexistent/emb.jsonl") != std::string::npos);
}

TEST_CASE("train writes checkpoints, CSVs and a manifest; reruns are byte-identical") {
  const auto dir = fresh_dir("molfuse_cli_train");
  const auto cfg = tiny_config(dir);
  const auto a = molfuse_cli(with_data({"train", "--config", cfg.string(), "--out",
                                        (dir / "a").string(), "--seed", "3"}));
  REQUIRE_MESSAGE(a.code == 0, a.err);
  CHECK(a.out.find("homo geometry_only mean MAE") != std::string::npos);
  const auto b = molfuse_cli(with_data({"train", "--config", cfg.string(), "--out",
                                        (dir / "b").string(), "--seed", "3"}));
  REQUIRE(b.code == 0);
  for (const char* f : {"runs.csv", "predictions.csv", "checkpoint_fold0.bin"})
    CHECK(util::read_file(dir / "a" / f) == util::read_file(dir / "b" / f));

  const auto ckpt = model::read_checkpoint(dir / "a" / "checkpoint_fold2.bin");
  CHECK(ckpt.config_value("encoder.hidden") == 8);
  CHECK(ckpt.config_value("train.fold") == 2);
  const auto manifest = nlohmann::json::parse(util::read_file(dir / "a" / "manifest.json"));
  CHECK(manifest["code_version"] == std::string(cli::kVersion));
  CHECK(manifest["config"]["train"]["seed"] == 3);
  CHECK(manifest["dataset"]["molecules"] == 18);
  CHECK(manifest["dataset"]["content_sha256"].get<std::string>().size() == 64);
  CHECK(manifest["cache_snapshot"].get<std::string>().size() == 64);
  CHECK(manifest["embeddings"]["source"] == "featurizer");
  CHECK(manifest["artifacts"]["runs.csv"] ==
        util::sha256_hex(util::read_file(dir / "a" / "runs.csv")));
  fs::remove_all(dir);
}

TEST_CASE("ablate and report agree and verify") {
  const auto dir = fresh_dir("molfuse_cli_ablate");
  const auto cfg = tiny_config(dir);
  const auto r = molfuse_cli(with_data({"ablate", "--config", cfg.string(), "--out",
                                        (dir / "a").string()}));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("HOMO") != std::string::npos);
  for (const char* f : {"runs.csv", "predictions.csv", "report.json", "report.txt",
                        "mae_bars.svg", "gates_homo.svg", "manifest.json"})
    CHECK_MESSAGE(fs::exists(dir / "a" / f), f);
  const auto rep = nlohmann::json::parse(util::read_file(dir / "a" / "report.json"));
  CHECK(rep["manifest"] == "manifest.json");
  CHECK(rep["rows"][0]["seeds"] == nlohmann::json::array({5}));

  const auto again = molfuse_cli({"report", (dir / "a" / "runs.csv").string(), "--predictions",
                                  (dir / "a" / "predictions.csv").string(), "--out",
                                  (dir / "r").string()});
  REQUIRE_MESSAGE(again.code == 0, again.err);
  CHECK(again.out.find(util::read_file(dir / "a" / "report.txt")) == 0);
  CHECK(again.out.find("verified 6 fold MAEs") != std::string::npos);
  CHECK(fs::exists(dir / "r" / "mae_bars.svg"));

  std::string drift = util::read_file(dir / "a" / "runs.csv");
  drift.replace(drift.find("mae"), 3, "err");
  util::write_file_atomic(dir / "drift.csv", drift);
  CHECK(molfuse_cli({"report", (dir / "drift.csv").string()}).code == 2);

  const auto preds = util::read_file(dir / "a" / "predictions.csv");
  const std::size_t row = preds.find('\n') + 1;
  auto fields = util::split(preds.substr(row, preds.find('\n', row) - row), ',');
  fields[6] = "123.5";
  std::string line;
  for (const auto& f : fields) line += (line.empty() ? "" : ",") + f;
  const std::string tampered =
      preds.substr(0, row) + line + preds.substr(preds.find('\n', row));
  util::write_file_atomic(dir / "tampered.csv", tampered);
  CHECK(molfuse_cli({"report", (dir / "a" / "runs.csv").string(), "--predictions",
                     (dir / "tampered.csv").string()})
            .code == 2);
  fs::remove_all(dir);
}

TEST_CASE("build-dataset, exporter-format embeddings, embed-check and file-mode training") {
  const auto dir = fresh_dir("molfuse_cli_embed");
  const auto cfg = tiny_config(dir);
  const auto built = molfuse_cli(with_data({"build-dataset", "--config", cfg.string(),
                                            "--offline", "--out", (dir / "ds").string()}));
  REQUIRE_MESSAGE(built.code == 0, built.err);

  // Stand-in for the exporter: one record per manifest line.
  std::vector<text::EmbeddingRecord> recs;
  const std::string manifest_text = util::read_file(dir / "ds" / "descriptions.jsonl");
  for (const auto line : util::split_lines(manifest_text)) {
    if (util::trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    text::EmbeddingRecord r;
    r.cid = j["cid"].get<std::int64_t>();
    r.text_sha256 = util::sha256_hex(j["text"].get<std::string>());
    r.vector.assign(text::kEmbeddingDim, 0.0);
    r.vector[r.cid % text::kEmbeddingDim] = 1.0;
    recs.push_back(r);
  }
  REQUIRE(recs.size() == 18);
  {
    std::ofstream f(dir / "emb.jsonl");
    text::write_embeddings(f, recs, std::vector<std::string>{"model: stand-in"});
  }
  const auto ok = molfuse_cli(with_data({"embed-check", "--config", cfg.string(), "--embeddings",
                                         (dir / "emb.jsonl").string()}));
  CHECK_MESSAGE(ok.code == 0, ok.err);
  CHECK(ok.out.find("18 records, 18 matched, 0 hash mismatches") != std::string::npos);

  const auto trained = molfuse_cli(with_data({"train", "--config", cfg.string(), "--embeddings",
                                              (dir / "emb.jsonl").string(), "--out",
                                              (dir / "t").string()}));
  CHECK_MESSAGE(trained.code == 0, trained.err);
  const auto manifest = nlohmann::json::parse(util::read_file(dir / "t" / "manifest.json"));
  CHECK(manifest["embeddings"]["source"] == "file");
  CHECK(manifest["embeddings"]["sha256"] == util::sha256_hex(util::read_file(dir / "emb.jsonl")));

  recs[0].text_sha256[0] = recs[0].text_sha256[0] == 'a' ? 'b' : 'a';
  recs.pop_back();
  {
    std::ofstream f(dir / "emb.jsonl");
    text::write_embeddings(f, recs);
  }
  const auto bad = molfuse_cli(with_data({"embed-check", "--config", cfg.string(),
                                          "--embeddings", (dir / "emb.jsonl").string()}));
  CHECK(bad.code == 2);
  CHECK(bad.out.find("1 hash mismatches") != std::string::npos);
  CHECK(bad.out.find("1 missing cids") != std::string::npos);
  fs::remove_all(dir);
}
