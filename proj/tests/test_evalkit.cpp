#include "doctest.h"

#include <filesystem>
#include <random>

#include "ella/evalkit.hpp"
#include "ella/trainer.hpp"
#include "fixtures.hpp"

using namespace ella;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / den;
}

// Sum over distinct thresholds t (descending) of precision(score >= t) * Δrecall.
double brute_ap(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> th(s.begin(), s.end());
  std::sort(th.rbegin(), th.rend());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  double P = 0;
  for (int v : y) P += v;
  double ap = 0, prev_recall = 0;
  for (double t : th) {
    double tp = 0, n = 0;
    for (size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        n += 1;
        tp += y[i];
      }
    ap += (tp / n) * (tp / P - prev_recall);
    prev_recall = tp / P;
  }
  return ap;
}

}  // namespace

TEST_CASE("f1 on a hand-checked example") {
  // golds 0 0 1 1 2, preds 0 1 1 1 0
  // class 0: tp1 fp1 fn1 -> 0.5; class 1: tp2 fp1 fn0 -> 0.8; class 2: tp0 fp0 fn1 -> 0
  std::vector<int> golds{0, 0, 1, 1, 2}, preds{0, 1, 1, 1, 0};
  CHECK(micro_f1(preds, golds) == doctest::Approx(3.0 / 5.0));
  CHECK(macro_f1(preds, golds) == doctest::Approx((0.5 + 0.8 + 0.0) / 3));
  CHECK(macro_f1(preds, golds, 4) == doctest::Approx((0.5 + 0.8) / 4));
  CHECK_THROWS_AS(micro_f1({0}, {0, 1}), Error);
  CHECK_THROWS_AS(macro_f1({0, 5}, {0, 1}, 3), Error);
}

TEST_CASE("auc and ap against brute-force oracles") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 2 + rng() % 30;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 6) / 5.0;  // plenty of ties
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(auc(s, y) == doctest::Approx(brute_auc(s, y)).epsilon(1e-12));
    CHECK(average_precision(s, y) == doctest::Approx(brute_ap(s, y)).epsilon(1e-12));
  }
  CHECK(auc({0.1, 0.9}, {0, 1}) == 1.0);
  CHECK(auc({0.5, 0.5}, {0, 1}) == 0.5);
  CHECK(average_precision({0.9, 0.8, 0.1}, {1, 0, 1}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2));
  CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), Error);
  CHECK_THROWS_AS(average_precision({0.1, 0.2}, {1, 2}), Error);
}

TEST_CASE("mean and population std") {
  auto ms = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(ms.mean == 2.5);
  CHECK(ms.std == doctest::Approx(std::sqrt(1.25)));
}

TEST_CASE("node split counts and disjointness") {
  SynthConfig sc;
  sc.node_types = {{"paper", 750, true}, {"author", 10, true}};
  sc.edge_types = {{"writes", "author", "paper", 0.01, 0.0}};
  sc.num_classes = 3;
  auto r = synth_generate(sc, 1);
  auto split = build_node_split(r.graph, r.labels, "paper", 5);
  CHECK(split.train.size() == 300);
  CHECK(split.val.size() == 300);
  CHECK(split.test.size() == 150);
  CHECK(split.warnings.empty());
  std::set<NodeIndex> all(split.train.begin(), split.train.end());
  all.insert(split.val.begin(), split.val.end());
  all.insert(split.test.begin(), split.test.end());
  CHECK(all.size() == 750);
  std::map<int, size_t> train_per_class;
  for (NodeIndex v : split.train) ++train_per_class[r.labels[v]];
  for (const auto& [c, n] : train_per_class) CHECK(n == 100);
  CHECK(build_node_split(r.graph, r.labels, "paper", 5).train == split.train);

  auto small = build_node_split(r.graph, r.labels, "author", 5);
  CHECK(small.test.empty());
  CHECK(small.warnings.size() == 3);
  CHECK(small.train.size() + small.val.size() == 10);
}

TEST_CASE("link split structure") {
  SynthConfig sc;
  sc.node_types = {{"user", 40, true}, {"item", 40, true}};
  sc.edge_types = {{"buys", "user", "item", 0.3, 0.05}};
  auto r = synth_generate(sc, 3);
  const auto& g = r.graph;
  auto s = build_link_split(g, 2);
  const size_t E = g.num_edges(), used = E * 8 / 10;
  CHECK(s.train.positives.size() == used * 8 / 10);
  CHECK(s.val.positives.size() == used / 10);
  CHECK(s.train.positives.size() + s.val.positives.size() + s.test.positives.size() == used);
  CHECK(s.unused.size() == E - used);
  PairSet negs;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    CHECK(part->negatives.size() == 2 * part->positives.size());
    for (const auto& n : part->negatives) {
      CHECK_FALSE(g.has_edge(n.src, n.dst, n.etype));
      CHECK(negs.insert(pair_entry(n)).second);
    }
  }
  std::vector<LabeledPair> held = s.test.positives;
  auto rest = remove_edges(g, held);
  CHECK(rest.num_edges() == E - held.size());
  for (const auto& p : held) CHECK_FALSE(rest.has_edge(p.src, p.dst, p.etype));
}

TEST_CASE("complete relations have no negatives") {
  SchemaDef s = fx::acm_schema();
  std::vector<NodeRecord> nodes{{"a0", "author", "x"}, {"o0", "organization", "y"}};
  auto g = HeteroGraph::build(s, nodes, {{"a0", "o0", "belongs to"}});
  CHECK(relation_complement_size(g, 2) == 0);
  std::mt19937_64 rng(1);
  CHECK_THROWS_WITH_AS(corrupt_pairs(g, {{0, 1, 2}}, 1, rng), doctest::Contains("complete"), Error);
}

TEST_CASE("saturated endpoints fall back to uniform pairs") {
  // a0 writes every paper, so corrupting a0's partner never helps; only a1 is free.
  std::vector<NodeRecord> nodes{{"a0", "author", "x"}, {"a1", "author", "y"}, {"p0", "paper", "z"},
                                {"p1", "paper", "w"}};
  auto g = HeteroGraph::build(fx::acm_schema(), nodes,
                              {{"a0", "p0", "writes"}, {"a0", "p1", "writes"}, {"a1", "p0", "writes"}});
  std::mt19937_64 rng(2);
  auto negs = corrupt_pairs(g, {{g.index("a0"), g.index("p0"), 0}}, 1, rng);
  REQUIRE(negs.size() == 1);
  CHECK(negs[0].src == g.index("a1"));
  CHECK(negs[0].dst == g.index("p1"));
}

TEST_CASE("profile report on a typed tree") {
  auto g = fx::typed_tree(3, 3);
  MockBackend m(8);
  ProfileOptions opts;
  opts.targets = {0};
  auto rep = profile_run(g, 3, m, nullptr, opts);
  REQUIRE(rep.rows.size() == 3);
  for (const auto& r : rep.rows) {
    CHECK(r.relation_calls == static_cast<uint64_t>(r.K));
    CHECK(r.stored_vectors == static_cast<size_t>(1 + r.K));
  }
  CHECK(rep.rows[2].naive_walks == 3 + 9 + 27);
  CHECK(rep.fit_slope == doctest::Approx(1.0));
  CHECK(rep.fit_residual == doctest::Approx(0.0));
  auto csv = rep.rows_csv(g);
  CHECK(csv.find("3,v0,l0,3,3,12,39,4,13\n") != std::string::npos);
  CHECK(rep.summary_csv().find("fit_slope,1.000000\n") != std::string::npos);

  EmbeddingCache shared;
  profile_run(g, 3, m, &shared, opts);
  auto warm = profile_run(g, 3, m, &shared, opts);
  CHECK(warm.total_calls == 0);
  CHECK(warm.cache_complete);
}

TEST_CASE("attention summary and export") {
  auto g = fx::acm_graph();
  ModelConfig c;
  c.d = 4;
  c.heads = 2;
  c.K = 2;
  c.d_llm = 4;
  auto table = fx::mock_table(g, 2, 4);
  auto p = init_params(c, g.schema(), 1);
  ForwardTrace trace;
  CHECK_THROWS_AS(summarize_attention(g, trace), Error);
  forward_batch(ForwardPlan::build(table, fx::all_nodes(g), 2), p, c, &trace);
  auto s = summarize_attention(g, trace);
  CHECK_FALSE(s.alpha.empty());
  for (const auto& a : s.alpha) {
    CHECK(a.mean > 0.0);
    CHECK(a.mean <= 1.0);
  }
  const std::string dir = fx::temp_dir("attn");
  AttentionSeries series;
  series.epochs.push_back({0, s});
  export_attention(dir, s, &series);
  CHECK(read_text_file(dir + "/alpha.csv").rfind("target_type,hop,relation_type,count,mean,std\n", 0) == 0);
  CHECK(std::filesystem::exists(dir + "/gamma_series.csv"));
  write_run_metadata(dir + "/x.csv", "{\"a\":1}");
  CHECK(read_text_file(dir + "/x.csv.meta.json") == "{\"a\":1}\n");
  std::filesystem::remove_all(dir);
}
