#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "molfuse/error.hpp"
#include "molfuse/qm9.hpp"

namespace molfuse::pubchem {

// Transport failed (connection, TLS, timeout) after the retry budget.
class NetworkError : public Error {
 public:
  using Error::Error;
};

// The server kept answering 503/429 after the retry budget.
class RateLimitError : public NetworkError {
 public:
  using NetworkError::NetworkError;
};

// A property record lacks a required field.
class IncompleteRecordError : public Error {
 public:
  using Error::Error;
};

struct TextDescriptors {
  std::int64_t cid = 0;
  std::string iupac_name;
  std::string molecular_formula;
  double molecular_weight = 0.0;  // g/mol
  std::optional<double> xlogp;
  std::int64_t hbond_donors = 0;
  std::int64_t hbond_acceptors = 0;
  std::int64_t rotatable_bonds = 0;
  double tpsa = 0.0;  // Angstrom^2
  std::int64_t formal_charge = 0;
  std::vector<std::string> synonyms;
  std::int64_t fetched_at = 0;  // unix seconds
  std::string source_url;

  // Throws IncompleteRecordError naming the first violated field.
  void validate() const;
  friend bool operator==(const TextDescriptors&, const TextDescriptors&) = default;
};

nlohmann::ordered_json to_json(const TextDescriptors& d);
TextDescriptors descriptors_from_json(const nlohmann::json& j);

// Deduplicates keeping first occurrences, then keeps at most `cap`.
std::vector<std::string> dedupe_synonyms(std::span<const std::string> synonyms, std::size_t cap);

// Single-line text fed to the text embedder.
std::string render_description(const TextDescriptors& d);

// ---------------------------------------------------------------------------
// Transport and time

struct HttpResponse {
  int status = 0;
  std::string body;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  // Both throw NetworkError when no HTTP response was obtained.
  virtual HttpResponse get(const std::string& path) = 0;
  virtual HttpResponse post_form(const std::string& path, const std::string& body) = 0;
};

// cpp-httplib client against a base URL such as https://pubchem.ncbi.nlm.nih.gov.
// `contact`, when nonempty, is appended to the User-Agent header.
std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   const std::string& contact);

// Always fails; for runs that must be served entirely from the cache.
class OfflineTransport : public HttpTransport {
 public:
  HttpResponse get(const std::string& path) override;
  HttpResponse post_form(const std::string& path, const std::string& body) override;
};

class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now() = 0;  // monotonic seconds
  virtual void sleep(double seconds) = 0;
  virtual std::int64_t unix_time() = 0;
};

class SystemClock : public Clock {
 public:
  double now() override;
  void sleep(double seconds) override;
  std::int64_t unix_time() override;
};

// At most `max_requests` acquisitions in any window of `window` seconds.
class RateLimiter {
 public:
  RateLimiter(double max_requests, Clock& clock, double window = 1.0);
  void acquire();

 private:
  std::size_t max_;
  double window_;
  Clock* clock_;
  std::deque<double> recent_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Cache: one file per key, named sha256(key).jsonl, holding one JSON line
// {"key": ..., "kind": "cid" | "miss" | "descriptors", ...}.

class DescriptorCache {
 public:
  explicit DescriptorCache(std::filesystem::path dir);

  std::optional<nlohmann::json> load(const std::string& key) const;
  void store(const std::string& key, nlohmann::json record);
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path file_for(const std::string& key) const;

 private:
  std::filesystem::path dir_;
  std::mutex mu_;
};

std::string inchi_key(const std::string& inchi);
std::string smiles_key(const std::string& smiles);
std::string cid_key(std::int64_t cid);

// ---------------------------------------------------------------------------

struct ClientOptions {
  double rate = 5.0;  // requests per second
  int max_retries = 4;
  double backoff_base = 0.5;  // seconds, doubled per retry
  std::size_t synonym_cap = 20;
};

class Client {
 public:
  Client(HttpTransport& transport, DescriptorCache& cache, Clock& clock,
         ClientOptions options = {});

  // Key is an InChI ("InChI=...") or a SMILES string. nullopt means PubChem
  // has no exact match; that outcome is cached.
  std::optional<std::int64_t> resolve_cid(const std::string& structure_key);
  TextDescriptors fetch_descriptors(std::int64_t cid);

  std::size_t network_calls() const { return network_calls_; }
  std::size_t cache_hits() const { return cache_hits_; }

 private:
  HttpResponse request(const std::string& path, const std::string* form_body);

  HttpTransport* transport_;
  DescriptorCache* cache_;
  Clock* clock_;
  ClientOptions options_;
  RateLimiter limiter_;
  std::size_t network_calls_ = 0;
  std::size_t cache_hits_ = 0;
};

enum class ExclusionReason { NotFound, Incomplete, NetworkExhausted, ParseError };
std::string_view reason_code(ExclusionReason r);

struct IncludedMolecule {
  std::string id;
  TextDescriptors descriptors;
};

struct ExcludedMolecule {
  std::string id;
  ExclusionReason reason;
  std::string detail;
};

struct MultimodalManifest {
  std::vector<IncludedMolecule> included;
  std::vector<ExcludedMolecule> excluded;

  std::map<std::string, std::size_t> reason_histogram() const;
};

// Resolves each molecule by InChI (SMILES when no InChI is present) and
// fetches its descriptors. Failures become exclusions; nothing is thrown for
// an individual molecule.
MultimodalManifest build_multimodal_manifest(std::span<const qm9::Molecule> molecules,
                                             Client& client);

}  // namespace molfuse::pubchem
