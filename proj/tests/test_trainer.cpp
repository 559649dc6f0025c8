#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "ella/trainer.hpp"
#include "fixtures.hpp"

using namespace ella;

namespace {

struct Fixture {
  SynthResult synth;
  TokenTable table;
  PretrainConfig cfg;
};

Fixture small_fixture(uint64_t seed) {
  SynthConfig sc;
  sc.node_types = {{"user", 30, true}, {"item", 30, true}};
  sc.edge_types = {{"buys", "user", "item", 0.3, 0.02}};
  sc.num_classes = 2;
  Fixture f{synth_generate(sc, seed), {}, {}};
  f.table = fx::mock_table(f.synth.graph, 1, 8);
  f.cfg.model.d = 8;
  f.cfg.model.heads = 2;
  f.cfg.model.type_layers = 1;
  f.cfg.model.hop_layers = 1;
  f.cfg.model.K = 1;
  f.cfg.model.d_llm = 8;
  f.cfg.lr = 1e-2;
  f.cfg.max_epochs = 15;
  f.cfg.patience = 5;
  return f;
}

}  // namespace

TEST_CASE("pretrain loss matches its formula") {
  Tensor pos = Tensor::from(2, 1, {0.9, 0.6}), neg = Tensor::from(1, 1, {0.2});
  const double want = -(std::log(0.9) + std::log(0.6) + std::log(1 - 0.2));
  CHECK(pretrain_loss(pos, neg).item() == doctest::Approx(want).epsilon(1e-14));
  Tensor sat = Tensor::from(1, 1, {1.0});
  CHECK(std::isfinite(pretrain_loss(Tensor::zeros(0, 1), sat).item()));
  CHECK(pretrain_loss(Tensor::zeros(0, 1), sat).item() == doctest::Approx(-std::log(1e-12)).epsilon(1e-6));
}

TEST_CASE("similarity uses per-type projections") {
  auto g = fx::acm_graph();
  ModelConfig c;
  c.d = 4;
  c.heads = 1;
  c.d_llm = 4;
  auto p = init_params(c, g.schema(), 1);
  std::mt19937_64 rng(2);
  std::vector<double> a(4), b(4);
  for (auto& x : a) x = uniform(rng, -1, 1);
  for (auto& x : b) x = uniform(rng, -1, 1);
  Tensor za = Tensor::row(a), zb = Tensor::row(b);
  // Oracle: sigmoid((a Wp) . (b Wa)).
  auto Wp = fx::to_mat(param(p, "sim.paper")), Wa = fx::to_mat(param(p, "sim.author"));
  auto x = fx::mm({a}, Wp)[0], y = fx::mm({b}, Wa)[0];
  double dot = 0;
  for (size_t j = 0; j < 4; ++j) dot += x[j] * y[j];
  CHECK(similarity(za, zb, "paper", "author", p).item() == doctest::Approx(1 / (1 + std::exp(-dot))).epsilon(1e-14));
  CHECK(similarity(zb, za, "author", "paper", p).item() == similarity(za, zb, "paper", "author", p).item());
  CHECK_THROWS_AS(similarity(za, zb, "paper", "venue", p), Error);
}

TEST_CASE("sampled negatives are never edges") {
  auto f = small_fixture(1);
  const auto& g = f.synth.graph;
  auto s = sample_edges(g, 2, 3);
  const auto& rs = s.at(0);
  CHECK(rs.positives.size() == g.num_edges());
  CHECK(rs.negatives.size() == 2 * g.num_edges());
  for (const auto& n : rs.negatives) {
    CHECK_FALSE(g.has_edge(n.src, n.dst, n.etype));
    CHECK(g.type(n.src) == g.type(rs.positives[0].src));
    CHECK(g.type(n.dst) == g.type(rs.positives[0].dst));
  }
  CHECK(sample_edges(g, 2, 3).at(0).negatives == rs.negatives);
}

TEST_CASE("pair similarities keep input order across type groups") {
  auto g = fx::acm_graph();
  ModelConfig c;
  c.d = 4;
  c.heads = 1;
  c.K = 1;
  c.d_llm = 4;
  auto table = fx::mock_table(g, 1, 4);
  auto p = init_params(c, g.schema(), 3);
  auto plan = ForwardPlan::build(table, fx::all_nodes(g), 1);
  Tensor Z = forward_batch(plan, p, c);
  std::vector<LabeledPair> pairs{{g.index("a0"), g.index("p0"), 0},
                                 {g.index("p3"), g.index("p0"), 1},
                                 {g.index("a1"), g.index("o0"), 2},
                                 {g.index("a2"), g.index("p2"), 0}};
  Tensor sims = pair_similarities(g, Z, plan, pairs, p);
  auto one = score_pairs(g, table, p, c, pairs);
  for (size_t i = 0; i < pairs.size(); ++i) {
    Tensor zs = select_rows(Z, {plan.row_of(pairs[i].src)}), zt = select_rows(Z, {plan.row_of(pairs[i].dst)});
    double want = similarity(zs, zt, g.type_name(pairs[i].src), g.type_name(pairs[i].dst), p).item();
    CHECK(sims.at(i, 0) == doctest::Approx(want).epsilon(1e-14));
    CHECK(one[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("pretraining lowers the validation loss and keeps the best epoch") {
  auto f = small_fixture(4);
  std::vector<size_t> seen;
  auto res = pretrain(f.synth.graph, f.table, f.cfg, 7, [&](size_t e, const ForwardTrace& t) {
    seen.push_back(e);
    CHECK(t.targets.size() == f.synth.graph.num_nodes());
  });
  REQUIRE(res.val_loss.size() >= 2);
  CHECK(res.val_loss.size() == res.epochs_run + 1);
  CHECK(res.train_loss.size() == res.epochs_run);
  CHECK(seen.size() == res.val_loss.size());
  const double best = *std::min_element(res.val_loss.begin(), res.val_loss.end());
  CHECK(res.val_loss[res.best_epoch] == best);
  CHECK(best < res.val_loss[0]);

  // Params of the best epoch, re-evaluated, reproduce nothing worse than the initial model.
  CHECK(content_hash(res.params) != content_hash(init_params(f.cfg.model, f.synth.graph.schema(), 7)));
  auto again = pretrain(f.synth.graph, f.table, f.cfg, 7);
  CHECK(content_hash(again.params) == content_hash(res.params));
  CHECK(again.val_loss == res.val_loss);
}

TEST_CASE("early stopping honors patience") {
  auto f = small_fixture(5);
  f.cfg.lr = 0.0;
  f.cfg.patience = 3;
  f.cfg.max_epochs = 100;
  auto res = pretrain(f.synth.graph, f.table, f.cfg, 1);
  CHECK(res.best_epoch == 0);
  CHECK(res.epochs_run == 3);
}

TEST_CASE("pretrain config json and input checks") {
  PretrainConfig c;
  c.lr = 0.5;
  c.model.K = 2;
  auto r = PretrainConfig::from_json_text(c.to_json_text());
  CHECK(r.lr == 0.5);
  CHECK(r.model.K == 2);
  CHECK(PretrainConfig::from_json_text("{}").max_epochs == 200);
  CHECK_THROWS_AS(PretrainConfig::from_json_text("{\"val_fraction\": 1.5}"), Error);

  auto f = small_fixture(6);
  f.cfg.model.d_llm = 4;
  CHECK_THROWS_WITH_AS(pretrain(f.synth.graph, f.table, f.cfg, 1), doctest::Contains("d_llm"), Error);
}

TEST_CASE("cross entropy matches its formula") {
  Tensor logits = Tensor::from(2, 3, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
  const double want = ((lse(1, 2, 0.5) - 2.0) + (lse(-1, 0, 3) - 3.0)) / 2;
  CHECK(cross_entropy(logits, {1, 2}).item() == doctest::Approx(want).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy(logits, {1}), Error);
  CHECK_THROWS_AS(cross_entropy(logits, {1, 3}), Error);
}

TEST_CASE("finetune trains only the head") {
  auto f = small_fixture(8);
  const auto& g = f.synth.graph;
  auto pre = pretrain(g, f.table, f.cfg, 2);
  auto split = build_node_split(g, f.synth.labels, "user", 3, 5);
  FinetuneConfig fc;
  fc.max_epochs = 50;
  auto keep = [](const std::string& n) { return !is_head_param(n); };
  const uint64_t before = content_hash(pre.params, keep);
  auto res = finetune(g, f.table, f.synth.labels, split, pre.params, f.cfg.model, fc, 4);
  CHECK(content_hash(res.params, keep) == before);
  CHECK(content_hash(pre.params) == content_hash(pre.params, keep));
  CHECK(res.trials.size() == 3);
  CHECK(res.num_classes == 2);
  CHECK(res.test_preds.size() == split.test.size());
  CHECK(param(res.params, "head.user.w").cols() == 2);
  bool found = false;
  for (const auto& t : res.trials) found |= t.lr == res.chosen_lr;
  CHECK(found);
}

TEST_CASE("model checkpoint round trip") {
  auto g = fx::acm_graph();
  ModelConfig c;
  c.d = 4;
  c.heads = 2;
  c.K = 2;
  c.d_llm = 4;
  auto p = init_params(c, g.schema(), 9);
  const std::string dir = fx::temp_dir("model");
  save_model(dir + "/m.ckpt", p, c, "{\"seed\":9}");
  auto m = load_model(dir + "/m.ckpt");
  CHECK(m.config.K == 2);
  CHECK(content_hash(m.params) == content_hash(p));
  CHECK(m.metadata.find("\"seed\":9") != std::string::npos);
  save_checkpoint(dir + "/raw.ckpt", p, "{}");
  CHECK_THROWS_AS(load_model(dir + "/raw.ckpt"), Error);
  std::filesystem::remove_all(dir);
}
