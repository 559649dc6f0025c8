#include "doctest.h"

#include <filesystem>

#include "ella/hetgraph.hpp"
#include "fixtures.hpp"

using namespace ella;

TEST_CASE("schema validation rejects bad references") {
  SchemaDef s = fx::acm_schema();
  s.edge_types.push_back({"funds", "agency", "paper"});
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("unknown node type 'agency'"), Error);

  SchemaDef dup = fx::acm_schema();
  dup.node_types.push_back("paper");
  CHECK_THROWS_AS(dup.validate(), Error);

  SchemaDef labels = fx::acm_schema();
  labels.class_labels["venue"] = {"x"};
  CHECK_THROWS_AS(labels.validate(), Error);
}

TEST_CASE("schema json round trip") {
  SchemaDef s = fx::acm_schema();
  SchemaDef r = SchemaDef::from_json_text(s.to_json_text());
  CHECK(r.node_types == s.node_types);
  REQUIRE(r.edge_types.size() == s.edge_types.size());
  CHECK(r.edge_types[2].name == "belongs to");
  CHECK(r.class_labels == s.class_labels);
  CHECK(r.label_name == "research field");
  CHECK_THROWS_AS(SchemaDef::from_json_text("{\"node_types\": 3}"), Error);
}

TEST_CASE("graph indexing and adjacency") {
  HeteroGraph g = fx::acm_graph();
  CHECK(g.num_nodes() == 8);
  CHECK(g.num_edges() == 9);
  const NodeIndex a0 = g.index("a0");
  CHECK(g.type_name(a0) == "author");
  CHECK_FALSE(g.has_text(g.index("o0")));

  auto nb = g.neighbors(a0);
  std::vector<std::string> ids;
  for (NodeIndex v : nb) ids.push_back(g.id(v));
  CHECK(ids == std::vector<std::string>{"p0", "p3", "o0"});
  CHECK(std::is_sorted(nb.begin(), nb.end()));

  CHECK(typed_neighbors(g, "a0", "writes") == std::vector<std::string>{"p0", "p3"});
  CHECK(typed_neighbors(g, "p0") == std::vector<std::string>{"a0", "a2", "p3"});
  CHECK(g.has_edge(g.index("p0"), a0, g.schema().edge_type_index("writes")));
  CHECK_FALSE(g.has_edge(g.index("p1"), a0, 0));
  CHECK(g.type_counts().at("paper") == 4);
  CHECK_THROWS_AS(g.index("zz"), Error);
}

TEST_CASE("build drops self loops and collapses duplicates") {
  std::vector<NodeRecord> nodes{{"p0", "paper", "x"}, {"p1", "paper", "y"}, {"a0", "author", "z"}};
  std::vector<EdgeRecord> edges{{"p0", "p1", "cites"}, {"p1", "p0", "cites"}, {"p0", "p0", "cites"},
                                {"a0", "p0", "writes"}, {"a0", "p0", "writes"}};
  LoadReport rep;
  auto g = HeteroGraph::build(fx::acm_schema(), nodes, edges, &rep);
  CHECK(g.num_edges() == 2);
  CHECK(rep.self_loops == 1);
  CHECK(rep.duplicate_edges == 2);
  CHECK(rep.warnings.size() == 2);
}

TEST_CASE("build rejects schema violations") {
  std::vector<NodeRecord> nodes{{"p0", "paper", "x"}, {"a0", "author", "z"}};
  CHECK_THROWS_WITH_AS(HeteroGraph::build(fx::acm_schema(), nodes, {{"p0", "a0", "writes"}}),
                       doctest::Contains("schema declares author->paper"), Error);
  CHECK_THROWS_AS(HeteroGraph::build(fx::acm_schema(), nodes, {{"p0", "q9", "cites"}}), Error);
  nodes.push_back({"p0", "paper", "dup"});
  CHECK_THROWS_AS(HeteroGraph::build(fx::acm_schema(), nodes, {}), Error);
}

TEST_CASE("graph files round trip and report line numbers") {
  HeteroGraph g = fx::acm_graph();
  const std::string dir = fx::temp_dir("hetgraph");
  save_graph(g, dir);
  HeteroGraph r = load_graph_dir(dir);
  CHECK(r.num_nodes() == g.num_nodes());
  CHECK(r.num_edges() == g.num_edges());
  CHECK_FALSE(r.has_text(r.index("o0")));
  CHECK(r.text(r.index("p1")).value() == "mimo channels");

  write_text_file(dir + "/edges.jsonl",
                  "{\"src\":\"a0\",\"dst\":\"p0\",\"etype\":\"writes\"}\n{\"src\":\"a0\",\"dst\":\"p0\"}\n");
  CHECK_THROWS_WITH_AS(load_graph_dir(dir), doctest::Contains("edges.jsonl:2"), Error);

  Labels labels(g.num_nodes(), -1);
  labels[g.index("p0")] = 2;
  labels[g.index("a1")] = 0;
  save_labels(dir + "/labels.jsonl", g, labels);
  CHECK(load_labels(dir + "/labels.jsonl", g) == labels);
  std::filesystem::remove_all(dir);
}

TEST_CASE("planted partition generator") {
  SynthConfig cfg;
  cfg.node_types = {{"user", 60, true}, {"item", 60, false}};
  cfg.edge_types = {{"buys", "user", "item", 0.5, 0.0}};
  cfg.num_classes = 3;
  auto a = synth_generate(cfg, 9);
  auto b = synth_generate(cfg, 9);
  CHECK(a.graph.num_edges() == b.graph.num_edges());
  CHECK(a.graph.num_edges() > 0);
  for (const auto& e : a.graph.edges()) CHECK(a.labels[e.src] == a.labels[e.dst]);
  CHECK(a.labels[a.graph.index("user4")] == 1);
  CHECK_FALSE(a.graph.has_text(a.graph.index("item0")));

  auto toks = planted_node_tokens(a.graph, a.labels, 3, 16, 0.0, 1);
  const auto& u0 = *toks[a.graph.index("user0")];
  const auto& u3 = *toks[a.graph.index("user3")];
  const auto& u1 = *toks[a.graph.index("user1")];
  double same = 0, cross = 0;
  for (size_t k = 0; k < 16; ++k) {
    same += u0[k] * u3[k];
    cross += u0[k] * u1[k];
  }
  CHECK(same == doctest::Approx(1.0));
  CHECK(cross == doctest::Approx(0.0).epsilon(1e-9));
}
