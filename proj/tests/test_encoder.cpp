#include "doctest.h"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <thread>

#include "ella/encoder.hpp"
#include "fixtures.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace ella;

namespace {

double norm(const Vec& v) {
  double n = 0;
  for (double x : v) n += x * x;
  return std::sqrt(n);
}

class CountingBackend final : public EncoderBackend {
 public:
  explicit CountingBackend(size_t dim) : inner_(dim) {}
  std::string name() const override { return "counting"; }
  size_t dim() const override { return inner_.dim(); }
  Vec encode(const EncodeRequest& req) override {
    ++calls;
    return inner_.encode(req);
  }
  std::atomic<int> calls{0};

 private:
  MockBackend inner_;
};

}  // namespace

TEST_CASE("mock backend is deterministic and mixes placeholders") {
  MockBackend m(8);
  EncodeRequest a{"t", "hello", {}};
  CHECK(m.encode(a) == m.encode(a));
  CHECK(norm(m.encode(a)) == doctest::Approx(1.0));
  EncodeRequest b{"t", "hello!", {}};
  CHECK(m.encode(a) != m.encode(b));
  EncodeRequest c{"u", "hello", {}};
  CHECK(m.encode(a) != m.encode(c));

  Vec e0(8, 0.0), e1(8, 0.0);
  e0[0] = 1.0;
  e1[1] = 1.0;
  EncodeRequest p1{"t", "hello", {e0, e1}}, p2{"t", "hello", {e1, e1}};
  CHECK(m.encode(p1) != m.encode(p2));

  // normalize(0.5 h + 0.5 mean(ph)) with h recovered from the placeholder-free call.
  Vec h = MockBackend(8).encode(a);
  EncodeRequest raw{"t", "hello", {Vec(8, 0.0)}};
  Vec got = m.encode(raw);
  // With a zero placeholder the output is the normalized base vector.
  for (size_t j = 0; j < 8; ++j) CHECK(got[j] == doctest::Approx(h[j]).epsilon(1e-12));
  CHECK_THROWS_AS(m.encode(EncodeRequest{"t", "x", {Vec(3, 0.0)}}), Error);
}

TEST_CASE("cache key covers backend, template, text and placeholders") {
  EncodeRequest r{"t", "x", {Vec{1.0, 2.0}}};
  const uint64_t k = EmbeddingCache::key("mock", r);
  CHECK(k == EmbeddingCache::key("mock", r));
  CHECK(k != EmbeddingCache::key("other", r));
  auto r2 = r;
  r2.template_id = "u";
  CHECK(k != EmbeddingCache::key("mock", r2));
  auto r3 = r;
  r3.placeholders[0][1] = 2.5;
  CHECK(k != EmbeddingCache::key("mock", r3));
}

TEST_CASE("encoder routes through the cache and persists it") {
  const std::string dir = fx::temp_dir("cache");
  const std::string path = dir + "/emb.cache";
  CountingBackend backend(6);
  {
    EmbeddingCache cache(path);
    Encoder enc(backend, cache);
    EncodeRequest r{"t", "abc", {}};
    auto first = enc.encode(r);
    auto second = enc.encode(r);
    CHECK_FALSE(first.cache_hit);
    CHECK(second.cache_hit);
    CHECK(first.vec == second.vec);
    CHECK(enc.calls() == 1);
    CHECK(enc.cache_hits() == 1);
  }
  EmbeddingCache reloaded(path);
  CHECK(reloaded.size() == 1);
  Encoder enc(backend, reloaded);
  CHECK(enc.encode(EncodeRequest{"t", "abc", {}}).cache_hit);
  CHECK(backend.calls == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("tokenize builds one relation token per present (hop, type)") {
  auto g = fx::acm_graph();
  CountingBackend backend(8);
  EmbeddingCache cache;
  Encoder enc(backend, cache);
  TokenTable table;
  tokenize_graph(enc, g, fx::all_nodes(g), 2, table);
  CHECK(table.d_llm == 8);
  CHECK(table.node_tokens.size() == g.num_nodes());

  size_t expected = 0;
  for (NodeIndex s = 0; s < g.num_nodes(); ++s)
    for (int hop = 1; hop <= 2; ++hop) {
      auto oracle = fx::oracle_hop(g, s, hop);
      std::vector<TypeId> types;
      for (const auto& [t, m] : oracle.endpoints) types.push_back(t);
      CHECK(table.hop_types.at({s, hop}) == types);
      expected += types.size();
    }
  CHECK(table.relation_tokens.size() == expected);
  // Textless o0 gets the mean of its text-bearing neighbors (a0, a1).
  const Vec& o = table.node_token(g.index("o0"));
  const Vec& a0 = table.node_token(g.index("a0"));
  const Vec& a1 = table.node_token(g.index("a1"));
  for (size_t j = 0; j < 8; ++j) CHECK(o[j] == doctest::Approx((a0[j] + a1[j]) / 2));
  CHECK(table.call_count == static_cast<uint64_t>(backend.calls.load()));
  CHECK(table.node_calls == g.num_nodes() - 1);
}

TEST_CASE("relation token uses the pooled neighborhood") {
  auto g = fx::acm_graph();
  auto table = fx::mock_table(g, 2, 8);
  MockBackend m(8);
  EmbeddingCache cache;
  Encoder enc(m, cache);
  const NodeIndex a0 = g.index("a0");
  const TypeId paper = g.schema().node_type_index("paper");
  auto nb = hop_type_neighbors(g, a0, 1, "paper");
  auto prof = meta_path_profile(g, a0, 1);
  auto prompt = build_relation_prompt(g.schema(), "author", "paper", 1, prof, TemplateId::PretrainLink);
  TokenTable t2 = table;
  CHECK(relation_token(enc, a0, 1, paper, t2, nb, prompt));
  CHECK(t2.relation_token(a0, 1, paper) == table.relation_token(a0, 1, paper));

  Vec pooled(8, 0.0);
  for (NodeIndex v : nb.members)
    for (size_t j = 0; j < 8; ++j) pooled[j] += table.node_token(v)[j] / nb.members.size();
  EncodeRequest req{"pretrain_link", prompt.rendered_text, {table.node_token(a0), pooled}};
  Vec direct = m.encode(req);
  for (size_t j = 0; j < 8; ++j) CHECK(direct[j] == doctest::Approx(table.relation_token(a0, 1, paper)[j]));
  CHECK_THROWS_AS(relation_token(enc, a0, 2, paper, t2, nb, prompt), Error);
}

TEST_CASE("parallel tokenize matches serial") {
  auto g = fx::acm_graph();
  auto serial = fx::mock_table(g, 3, 8);
  MockBackend m(8);
  EmbeddingCache cache;
  Encoder enc(m, cache);
  TokenTable par;
  TokenizeOptions opts;
  opts.workers = 4;
  tokenize_graph(enc, g, fx::all_nodes(g), 3, par, opts);
  CHECK(par.relation_tokens == serial.relation_tokens);
  CHECK(par.node_tokens == serial.node_tokens);
}

TEST_CASE("token table file round trip") {
  auto g = fx::acm_graph();
  auto table = fx::mock_table(g, 2, 8);
  const std::string dir = fx::temp_dir("tokens");
  table.save(dir + "/t.bin", g);
  auto r = TokenTable::load(dir + "/t.bin", g);
  CHECK(r.d_llm == table.d_llm);
  CHECK(r.hops == 2);
  CHECK(r.node_tokens == table.node_tokens);
  CHECK(r.relation_tokens == table.relation_tokens);
  CHECK(r.hop_types == table.hop_types);
  CHECK(r.stored_vectors(0) == table.stored_vectors(0));
  write_text_file(dir + "/bad.bin", "garbage");
  CHECK_THROWS_AS(TokenTable::load(dir + "/bad.bin", g), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("textless node without text neighbors is reported") {
  SchemaDef s = fx::acm_schema();
  std::vector<NodeRecord> nodes{{"a0", "author", std::nullopt}, {"o0", "organization", std::nullopt}};
  auto g = HeteroGraph::build(s, nodes, {{"a0", "o0", "belongs to"}});
  MockBackend m(4);
  EmbeddingCache cache;
  Encoder enc(m, cache);
  TokenTable t;
  CHECK_THROWS_WITH_AS(tokenize_graph(enc, g, {0}, 1, t), doctest::Contains("no text-bearing neighbor"), Error);
}

TEST_CASE("http backend against an in-process server") {
  httplib::Server svr;
  std::atomic<int> encodes{0}, fail_first{1};
  MockBackend inner(5);
  svr.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"name":"test-llm","dim":5})", "application/json");
  });
  svr.Post("/v1/encode", [&](const httplib::Request& req, httplib::Response& res) {
    if (fail_first.exchange(0)) {
      res.status = 503;
      return;
    }
    ++encodes;
    auto j = nlohmann::json::parse(req.body);
    EncodeRequest r{j.at("template_id"), j.at("text"), j.at("placeholders").get<std::vector<Vec>>()};
    res.set_content(nlohmann::json{{"embedding", inner.encode(r)}, {"dim", 5}}.dump(), "application/json");
  });
  const int port = svr.bind_to_any_port("127.0.0.1");
  std::thread th([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();

  HttpBackend http("http://127.0.0.1:" + std::to_string(port));
  CHECK(http.name() == "test-llm");
  CHECK(http.dim() == 5);
  EncodeRequest r{"t", "remote", {Vec(5, 0.1)}};
  CHECK(http.encode(r) == inner.encode(r));
  CHECK(encodes == 1);

  CHECK_THROWS_AS(HttpBackend("http://127.0.0.1:" + std::to_string(port), "max"), Error);
  CHECK_THROWS_AS(HttpBackend("https://127.0.0.1:1"), Error);
  svr.stop();
  th.join();
  CHECK_THROWS_AS(HttpBackend("http://127.0.0.1:" + std::to_string(port), "mean", 1), TransportError);
}
