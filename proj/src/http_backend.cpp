#include <chrono>
#include <thread>

#include "ella/encoder.hpp"
#include "httplib.h"
#include "json.hpp"

namespace ella {

using json = nlohmann::json;

namespace {

struct Endpoint {
  std::string host;
  int port;
};

Endpoint parse_endpoint(const std::string& url) {
  std::string rest = url;
  const std::string scheme = "http://";
  if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
  else if (rest.find("://") != std::string::npos)
    throw Error("unsupported endpoint scheme in '" + url + "' (only http)");
  if (auto slash = rest.find('/'); slash != std::string::npos) rest = rest.substr(0, slash);
  Endpoint ep{rest, 80};
  if (auto colon = rest.rfind(':'); colon != std::string::npos) {
    ep.host = rest.substr(0, colon);
    try {
      ep.port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error("bad port in endpoint '" + url + "'");
    }
  }
  if (ep.host.empty()) throw Error("endpoint '" + url + "' has no host");
  return ep;
}

// Retries transport failures and 5xx responses with a short linear backoff.
template <typename Call>
httplib::Result with_retries(int attempts, const std::string& what, Call&& call) {
  std::string last;
  for (int a = 1; a <= attempts; ++a) {
    auto res = call();
    if (res && res->status < 500) return res;
    last = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
    if (a < attempts) std::this_thread::sleep_for(std::chrono::milliseconds(50 * a));
  }
  throw TransportError(what + " failed after " + std::to_string(attempts) + " attempts: " + last);
}

}  // namespace

HttpBackend::HttpBackend(std::string endpoint, std::string pooling, int max_attempts)
    : pooling_(std::move(pooling)), max_attempts_(std::max(1, max_attempts)) {
  if (pooling_ != "mean" && pooling_ != "last")
    throw Error("pooling must be 'mean' or 'last', got '" + pooling_ + "'");
  auto ep = parse_endpoint(endpoint);
  host_ = ep.host;
  port_ = ep.port;
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(5);
  auto res = with_retries(max_attempts_, "GET /v1/info", [&] { return cli.Get("/v1/info"); });
  if (res->status != 200) throw Error("GET /v1/info returned HTTP " + std::to_string(res->status));
  try {
    auto j = json::parse(res->body);
    name_ = j.at("name").get<std::string>();
    long long d = j.at("dim").get<long long>();
    if (d <= 0) throw Error("backend reports non-positive dim");
    dim_ = static_cast<size_t>(d);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed /v1/info response: ") + e.what());
  }
}

Vec HttpBackend::encode(const EncodeRequest& req) {
  json body{{"template_id", req.template_id},
            {"text", req.text},
            {"placeholders", req.placeholders},
            {"pooling", req.pooling.empty() ? pooling_ : req.pooling}};
  const std::string payload = body.dump();
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(120);
  auto res = with_retries(max_attempts_, "POST /v1/encode",
                          [&] { return cli.Post("/v1/encode", payload, "application/json"); });
  if (res->status != 200)
    throw Error("POST /v1/encode returned HTTP " + std::to_string(res->status) + ": " + res->body);
  try {
    auto j = json::parse(res->body);
    Vec v = j.at("embedding").get<Vec>();
    if (j.contains("dim") && j.at("dim").get<size_t>() != v.size())
      throw Error("response dim field disagrees with embedding length");
    if (v.size() != dim_)
      throw Error("response embedding has dimension " + std::to_string(v.size()) + ", handshake said " +
                  std::to_string(dim_));
    return v;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed /v1/encode response: ") + e.what());
  }
}

}  // namespace ella
