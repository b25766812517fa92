#include "molfuse/pubchem.hpp"

#include <chrono>
#include <cmath>
#include <set>
#include <thread>

#include "molfuse/util.hpp"

namespace molfuse::pubchem {
namespace {

using nlohmann::json;

constexpr const char* kPropertyList =
    "IUPACName,MolecularFormula,MolecularWeight,XLogP,HBondDonorCount,HBondAcceptorCount,"
    "RotatableBondCount,TPSA,Charge";

std::string url_encode(std::string_view s) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 0xF]);
    }
  }
  return out;
}

// PUG REST returns some numeric properties as strings ("16.043").
std::optional<double> number_field(const json& obj, const char* field) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (it->is_number()) return it->get<double>();
  if (it->is_string()) return qm9::parse_number(it->get<std::string>());
  return std::nullopt;
}

std::int64_t count_field(const json& obj, const char* field) {
  const auto v = number_field(obj, field);
  if (!v) throw IncompleteRecordError(std::string("property record lacks ") + field);
  if (*v != std::floor(*v)) {
    throw IncompleteRecordError(std::string("property ") + field + " is not an integer");
  }
  return static_cast<std::int64_t>(*v);
}

std::string string_field(const json& obj, const char* field) {
  const auto it = obj.find(field);
  if (it == obj.end() || !it->is_string() || it->get<std::string>().empty()) {
    throw IncompleteRecordError(std::string("property record lacks ") + field);
  }
  return it->get<std::string>();
}

json parse_body(const HttpResponse& r, const std::string& what) {
  try {
    return json::parse(r.body);
  } catch (const json::exception& e) {
    throw IncompleteRecordError(what + ": response is not JSON (" + e.what() + ")");
  }
}

std::string na_or(const std::string& s) { return s.empty() ? "N/A" : s; }

}  // namespace

void TextDescriptors::validate() const {
  if (cid <= 0) throw IncompleteRecordError("cid must be positive");
  if (iupac_name.empty()) throw IncompleteRecordError("iupac_name is empty");
  if (molecular_formula.empty()) throw IncompleteRecordError("molecular_formula is empty");
  if (!(molecular_weight > 0.0) || !std::isfinite(molecular_weight))
    throw IncompleteRecordError("molecular_weight must be positive");
  if (xlogp && !std::isfinite(*xlogp)) throw IncompleteRecordError("xlogp is not finite");
  if (hbond_donors < 0 || hbond_acceptors < 0 || rotatable_bonds < 0)
    throw IncompleteRecordError("negative count field");
  if (!(tpsa >= 0.0) || !std::isfinite(tpsa)) throw IncompleteRecordError("tpsa must be >= 0");
  std::set<std::string> seen;
  for (const auto& s : synonyms)
    if (!seen.insert(s).second) throw IncompleteRecordError("duplicate synonym '" + s + "'");
}

nlohmann::ordered_json to_json(const TextDescriptors& d) {
  nlohmann::ordered_json j;
  j["cid"] = d.cid;
  j["iupac_name"] = d.iupac_name;
  j["molecular_formula"] = d.molecular_formula;
  j["molecular_weight"] = d.molecular_weight;
  if (d.xlogp) j["xlogp"] = *d.xlogp;
  j["hbond_donors"] = d.hbond_donors;
  j["hbond_acceptors"] = d.hbond_acceptors;
  j["rotatable_bonds"] = d.rotatable_bonds;
  j["tpsa"] = d.tpsa;
  j["formal_charge"] = d.formal_charge;
  j["synonyms"] = d.synonyms;
  j["fetched_at"] = d.fetched_at;
  j["source_url"] = d.source_url;
  return j;
}

TextDescriptors descriptors_from_json(const json& j) {
  try {
    TextDescriptors d;
    d.cid = j.at("cid").get<std::int64_t>();
    d.iupac_name = j.at("iupac_name").get<std::string>();
    d.molecular_formula = j.at("molecular_formula").get<std::string>();
    d.molecular_weight = j.at("molecular_weight").get<double>();
    if (j.contains("xlogp") && !j["xlogp"].is_null()) d.xlogp = j["xlogp"].get<double>();
    d.hbond_donors = j.at("hbond_donors").get<std::int64_t>();
    d.hbond_acceptors = j.at("hbond_acceptors").get<std::int64_t>();
    d.rotatable_bonds = j.at("rotatable_bonds").get<std::int64_t>();
    d.tpsa = j.at("tpsa").get<double>();
    d.formal_charge = j.at("formal_charge").get<std::int64_t>();
    d.synonyms = j.at("synonyms").get<std::vector<std::string>>();
    d.fetched_at = j.at("fetched_at").get<std::int64_t>();
    d.source_url = j.at("source_url").get<std::string>();
    d.validate();
    return d;
  } catch (const json::exception& e) {
    throw IncompleteRecordError(std::string("descriptor record: ") + e.what());
  }
}

std::vector<std::string> dedupe_synonyms(std::span<const std::string> synonyms, std::size_t cap) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : synonyms) {
    if (out.size() == cap) break;
    if (s.empty() || !seen.insert(s).second) continue;
    out.push_back(s);
  }
  return out;
}

std::string render_description(const TextDescriptors& d) {
  std::string synonyms;
  for (const auto& s : d.synonyms) synonyms += (synonyms.empty() ? "" : ", ") + s;
  std::string out;
  out += "IUPAC name: " + na_or(d.iupac_name) + ". ";
  out += "Formula: " + na_or(d.molecular_formula) + ". ";
  out += "Molecular weight: " + util::format_double(d.molecular_weight) + ". ";
  out += "XLogP: " + (d.xlogp ? util::format_double(*d.xlogp) : std::string("N/A")) + ". ";
  out += "H-bond donors: " + std::to_string(d.hbond_donors) + ". ";
  out += "H-bond acceptors: " + std::to_string(d.hbond_acceptors) + ". ";
  out += "Rotatable bonds: " + std::to_string(d.rotatable_bonds) + ". ";
  out += "TPSA: " + util::format_double(d.tpsa) + ". ";
  out += "Formal charge: " + std::to_string(d.formal_charge) + ". ";
  out += "Synonyms: " + na_or(synonyms) + ".";
  return out;
}

// ---------------------------------------------------------------------------

HttpResponse OfflineTransport::get(const std::string& path) {
  throw NetworkError("offline: no transport for GET " + path);
}

HttpResponse OfflineTransport::post_form(const std::string& path, const std::string&) {
  throw NetworkError("offline: no transport for POST " + path);
}

double SystemClock::now() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void SystemClock::sleep(double seconds) {
  if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

std::int64_t SystemClock::unix_time() {
  using namespace std::chrono;
  return duration_cast<seconds>(system_clock::now().time_since_epoch()).count();
}

RateLimiter::RateLimiter(double max_requests, Clock& clock, double window)
    : window_(window), clock_(&clock) {
  if (!(max_requests >= 1.0) || !std::isfinite(max_requests)) {
    throw ConfigError("rate ceiling must be at least 1 request per second");
  }
  max_ = static_cast<std::size_t>(max_requests);
}

void RateLimiter::acquire() {
  std::lock_guard lock(mu_);
  double t = clock_->now();
  while (!recent_.empty() && t - recent_.front() >= window_) recent_.pop_front();
  if (recent_.size() >= max_) {
    clock_->sleep(recent_.front() + window_ - t);
    t = std::max(clock_->now(), recent_.front() + window_);
    while (!recent_.empty() && t - recent_.front() >= window_) recent_.pop_front();
  }
  recent_.push_back(t);
}

// ---------------------------------------------------------------------------

DescriptorCache::DescriptorCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path DescriptorCache::file_for(const std::string& key) const {
  return dir_ / (util::sha256_hex(key) + ".jsonl");
}

std::optional<json> DescriptorCache::load(const std::string& key) const {
  const auto path = file_for(key);
  if (!std::filesystem::exists(path)) return std::nullopt;
  const std::string text = util::read_file(path);
  for (const auto line : util::split_lines(text)) {
    if (util::trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("corrupt cache file " + path.string() + ": " + e.what());
    }
    if (rec.value("key", "") == key) return rec;
  }
  return std::nullopt;
}

void DescriptorCache::store(const std::string& key, json record) {
  record["key"] = key;
  std::lock_guard lock(mu_);
  util::write_file_atomic(file_for(key), record.dump() + "\n");
}

std::string inchi_key(const std::string& inchi) { return "inchi:" + inchi; }
std::string smiles_key(const std::string& smiles) { return "smiles:" + smiles; }
std::string cid_key(std::int64_t cid) { return "cid:" + std::to_string(cid); }

// ---------------------------------------------------------------------------

Client::Client(HttpTransport& transport, DescriptorCache& cache, Clock& clock,
               ClientOptions options)
    : transport_(&transport),
      cache_(&cache),
      clock_(&clock),
      options_(options),
      limiter_(options.rate, clock) {}

HttpResponse Client::request(const std::string& path, const std::string* form_body) {
  double delay = options_.backoff_base;
  std::string last_failure;
  for (int attempt = 0;; ++attempt) {
    limiter_.acquire();
    ++network_calls_;
    bool throttled = false;
    try {
      HttpResponse r = form_body ? transport_->post_form(path, *form_body) : transport_->get(path);
      if (r.status != 503 && r.status != 429) return r;
      throttled = true;
      last_failure = "HTTP " + std::to_string(r.status);
    } catch (const NetworkError& e) {
      last_failure = e.what();
    }
    if (attempt >= options_.max_retries) {
      const std::string msg = path + ": gave up after " + std::to_string(attempt + 1) +
                              " attempts (" + last_failure + ")";
      if (throttled) throw RateLimitError(msg);
      throw NetworkError(msg);
    }
    clock_->sleep(delay);
    delay *= 2;
  }
}

std::optional<std::int64_t> Client::resolve_cid(const std::string& structure_key) {
  if (util::trim(structure_key).empty()) {
    throw PreconditionError("resolve_cid: empty structure key");
  }
  const bool is_inchi = structure_key.rfind("InChI=", 0) == 0;
  const std::string key = is_inchi ? inchi_key(structure_key) : smiles_key(structure_key);
  if (const auto rec = cache_->load(key)) {
    ++cache_hits_;
    if (rec->value("kind", "") == "miss") return std::nullopt;
    return rec->at("cid").get<std::int64_t>();
  }

  const std::string path = is_inchi ? "/rest/pug/compound/inchi/cids/JSON"
                                    : "/rest/pug/compound/smiles/cids/JSON";
  const std::string body = (is_inchi ? "inchi=" : "smiles=") + url_encode(structure_key);
  const HttpResponse r = request(path, &body);
  std::int64_t cid = 0;
  if (r.status == 200) {
    const json j = parse_body(r, "cid lookup");
    const auto ids = j.value("/IdentifierList/CID"_json_pointer, json::array());
    if (!ids.empty() && ids[0].is_number_integer()) cid = ids[0].get<std::int64_t>();
  } else if (r.status != 404 && r.status != 400) {
    throw NetworkError("cid lookup: unexpected HTTP " + std::to_string(r.status));
  }
  if (cid <= 0) {
    cache_->store(key, {{"kind", "miss"}, {"reason", "not-found"}});
    return std::nullopt;
  }
  cache_->store(key, {{"kind", "cid"}, {"cid", cid}});
  return cid;
}

TextDescriptors Client::fetch_descriptors(std::int64_t cid) {
  if (cid <= 0) throw PreconditionError("fetch_descriptors: cid must be positive");
  const std::string key = cid_key(cid);
  if (const auto rec = cache_->load(key)) {
    ++cache_hits_;
    if (rec->value("kind", "") == "miss") {
      throw IncompleteRecordError("cid " + std::to_string(cid) + ": " +
                                  rec->value("reason", "incomplete"));
    }
    return descriptors_from_json(rec->at("descriptors"));
  }

  const std::string base = "/rest/pug/compound/cid/" + std::to_string(cid);
  const std::string prop_path = base + "/property/" + kPropertyList + "/JSON";
  const HttpResponse props = request(prop_path, nullptr);
  TextDescriptors d;
  try {
    if (props.status != 200) {
      throw IncompleteRecordError("cid " + std::to_string(cid) + ": property lookup HTTP " +
                                  std::to_string(props.status));
    }
    const json j = parse_body(props, "property lookup");
    const json table = j.value("/PropertyTable/Properties"_json_pointer, json::array());
    if (table.empty()) throw IncompleteRecordError("property table is empty");
    const json& p = table[0];
    d.cid = cid;
    d.iupac_name = string_field(p, "IUPACName");
    d.molecular_formula = string_field(p, "MolecularFormula");
    const auto mw = number_field(p, "MolecularWeight");
    if (!mw) throw IncompleteRecordError("property record lacks MolecularWeight");
    d.molecular_weight = *mw;
    d.xlogp = number_field(p, "XLogP");
    d.hbond_donors = count_field(p, "HBondDonorCount");
    d.hbond_acceptors = count_field(p, "HBondAcceptorCount");
    d.rotatable_bonds = count_field(p, "RotatableBondCount");
    const auto tpsa = number_field(p, "TPSA");
    if (!tpsa) throw IncompleteRecordError("property record lacks TPSA");
    d.tpsa = *tpsa;
    d.formal_charge = count_field(p, "Charge");

    const HttpResponse syn = request(base + "/synonyms/JSON", nullptr);
    if (syn.status == 200) {
      const json s = parse_body(syn, "synonym lookup");
      const json info = s.value("/InformationList/Information"_json_pointer, json::array());
      if (!info.empty() && info[0].contains("Synonym")) {
        const auto all = info[0]["Synonym"].get<std::vector<std::string>>();
        d.synonyms = dedupe_synonyms(all, options_.synonym_cap);
      }
    } else if (syn.status != 404) {
      throw NetworkError("synonym lookup: unexpected HTTP " + std::to_string(syn.status));
    }
    d.fetched_at = clock_->unix_time();
    d.source_url = "https://pubchem.ncbi.nlm.nih.gov" + prop_path;
    d.validate();
  } catch (const IncompleteRecordError& e) {
    cache_->store(key, {{"kind", "miss"}, {"reason", "incomplete"}, {"detail", e.what()}});
    throw;
  } catch (const json::exception& e) {
    cache_->store(key, {{"kind", "miss"}, {"reason", "incomplete"}, {"detail", e.what()}});
    throw IncompleteRecordError(std::string("cid ") + std::to_string(cid) + ": " + e.what());
  }
  cache_->store(key, {{"kind", "descriptors"}, {"descriptors", to_json(d)}});
  return d;
}

// ---------------------------------------------------------------------------

std::string_view reason_code(ExclusionReason r) {
  switch (r) {
    case ExclusionReason::NotFound: return "not-found";
    case ExclusionReason::Incomplete: return "incomplete";
    case ExclusionReason::NetworkExhausted: return "network-exhausted";
    case ExclusionReason::ParseError: return "parse-error";
  }
  return "unknown";
}

std::map<std::string, std::size_t> MultimodalManifest::reason_histogram() const {
  std::map<std::string, std::size_t> out;
  for (const auto& e : excluded) ++out[std::string(reason_code(e.reason))];
  return out;
}

MultimodalManifest build_multimodal_manifest(std::span<const qm9::Molecule> molecules,
                                             Client& client) {
  MultimodalManifest out;
  for (const auto& m : molecules) {
    const std::string inchi = m.inchi();
    const std::string key = inchi.empty() ? m.smiles() : inchi;
    if (key.empty()) {
      out.excluded.push_back({m.id, ExclusionReason::NotFound, "no InChI or SMILES line"});
      continue;
    }
    try {
      const auto cid = client.resolve_cid(key);
      if (!cid) {
        out.excluded.push_back({m.id, ExclusionReason::NotFound, "no PubChem match"});
        continue;
      }
      out.included.push_back({m.id, client.fetch_descriptors(*cid)});
    } catch (const IncompleteRecordError& e) {
      out.excluded.push_back({m.id, ExclusionReason::Incomplete, e.what()});
    } catch (const NetworkError& e) {
      out.excluded.push_back({m.id, ExclusionReason::NetworkExhausted, e.what()});
    }
  }
  return out;
}

}  // namespace molfuse::pubchem
