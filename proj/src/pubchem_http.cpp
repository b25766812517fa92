#include "httplib.h"
#include "molfuse/pubchem.hpp"

namespace molfuse::pubchem {
namespace {

class HttplibTransport : public HttpTransport {
 public:
  HttplibTransport(const std::string& base_url, const std::string& contact)
      : client_(base_url) {
    if (!client_.is_valid()) throw ConfigError("invalid PubChem base URL '" + base_url + "'");
    client_.set_connection_timeout(10);
    client_.set_read_timeout(30);
    std::string agent = "molfuse/0.1";
    if (!contact.empty()) agent += " (" + contact + ")";
    client_.set_default_headers({{"User-Agent", agent}});
  }

  HttpResponse get(const std::string& path) override {
    return convert(client_.Get(path), "GET " + path);
  }

  HttpResponse post_form(const std::string& path, const std::string& body) override {
    return convert(client_.Post(path, body, "application/x-www-form-urlencoded"),
                   "POST " + path);
  }

 private:
  static HttpResponse convert(const httplib::Result& res, const std::string& what) {
    if (!res) throw NetworkError(what + ": " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }

  httplib::Client client_;
};

}  // namespace

std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   const std::string& contact) {
  return std::make_unique<HttplibTransport>(base_url, contact);
}

}  // namespace molfuse::pubchem
