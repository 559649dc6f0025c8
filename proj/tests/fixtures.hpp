#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "ella/ellanet.hpp"
#include "ella/encoder.hpp"
#include "ella/hetgraph.hpp"
#include "ella/pathstats.hpp"

namespace fx {

using namespace ella;

inline SchemaDef acm_schema() {
  SchemaDef s;
  s.node_types = {"paper", "author", "organization"};
  s.edge_types = {{"writes", "author", "paper"},
                  {"cites", "paper", "paper"},
                  {"belongs to", "author", "organization"}};
  s.domain_blurb = "an academic network";
  s.class_labels["paper"] = {"Database", "Wireless Communication", "Data Mining"};
  s.class_labels["author"] = {"Database", "Wireless Communication", "Data Mining"};
  s.label_name = "research field";
  return s;
}

// p0..p3, a0..a2, o0; o0 has no text.
inline HeteroGraph acm_graph() {
  std::vector<NodeRecord> nodes = {
      {"p0", "paper", "query optimization"}, {"p1", "paper", "mimo channels"},
      {"p2", "paper", "frequent itemsets"},  {"p3", "paper", "index tuning"},
      {"a0", "author", "alice"},             {"a1", "author", "bob"},
      {"a2", "author", "carol"},             {"o0", "organization", std::nullopt},
  };
  std::vector<EdgeRecord> edges = {
      {"a0", "p0", "writes"}, {"a0", "p3", "writes"}, {"a1", "p1", "writes"},
      {"a2", "p2", "writes"}, {"a2", "p0", "writes"}, {"p3", "p0", "cites"},
      {"p2", "p1", "cites"},  {"a0", "o0", "belongs to"}, {"a1", "o0", "belongs to"},
  };
  return HeteroGraph::build(acm_schema(), nodes, edges);
}

// Random schema with `types` node types (t0, t1, ...) and a random heterogeneous
// edge set; every node has text.
inline HeteroGraph random_graph(std::mt19937_64& rng, size_t max_nodes = 40, size_t max_types = 4) {
  std::uniform_int_distribution<size_t> nt(2, max_types), nn(4, max_nodes);
  const size_t T = nt(rng), N = nn(rng);
  SchemaDef s;
  for (size_t t = 0; t < T; ++t) s.node_types.push_back("t" + std::to_string(t));
  for (size_t a = 0; a < T; ++a)
    for (size_t b = a; b < T; ++b)
      if (rng() % 3 != 0) s.edge_types.push_back({"r" + std::to_string(a) + std::to_string(b), s.node_types[a], s.node_types[b]});
  if (s.edge_types.empty()) s.edge_types.push_back({"r01", "t0", "t1"});
  std::vector<NodeRecord> nodes;
  std::vector<std::vector<std::string>> by_type(T);
  for (size_t i = 0; i < N; ++i) {
    size_t t = i < T ? i : rng() % T;
    std::string id = "n" + std::to_string(i);
    nodes.push_back({id, s.node_types[t], "text " + id});
    by_type[t].push_back(id);
  }
  std::vector<EdgeRecord> edges;
  std::uniform_real_distribution<double> density(0.05, 0.25);
  for (const auto& e : s.edge_types) {
    const double p = density(rng);
    auto& A = by_type[std::stoi(e.src.substr(1))];
    auto& B = by_type[std::stoi(e.dst.substr(1))];
    for (const auto& a : A)
      for (const auto& b : B)
        if (a != b && std::uniform_real_distribution<double>(0, 1)(rng) < p) edges.push_back({a, b, e.name});
  }
  return HeteroGraph::build(s, nodes, edges);
}

// Complete tree of branching b: level i nodes have type "l<i>", edges "down<i>" point
// from level i to level i+1. Node 0 is the root.
inline HeteroGraph typed_tree(size_t b, size_t depth) {
  SchemaDef s;
  for (size_t i = 0; i <= depth; ++i) s.node_types.push_back("l" + std::to_string(i));
  for (size_t i = 0; i < depth; ++i)
    s.edge_types.push_back({"down" + std::to_string(i), s.node_types[i], s.node_types[i + 1]});
  std::vector<NodeRecord> nodes{{"v0", "l0", "root"}};
  std::vector<EdgeRecord> edges;
  std::vector<std::string> level{"v0"};
  for (size_t i = 0; i < depth; ++i) {
    std::vector<std::string> next;
    for (const auto& parent : level)
      for (size_t c = 0; c < b; ++c) {
        std::string id = "v" + std::to_string(nodes.size());
        nodes.push_back({id, s.node_types[i + 1], "node " + id});
        edges.push_back({parent, id, s.edge_types[i].name});
        next.push_back(id);
      }
    level = std::move(next);
  }
  return HeteroGraph::build(s, nodes, edges);
}

// --- walk oracle ------------------------------------------------------------

struct OracleHop {
  std::map<std::vector<TypeId>, uint64_t> counts;
  std::map<TypeId, std::set<NodeIndex>> endpoints;
};

// Exhaustive DFS over an adjacency matrix rebuilt from the raw edge records.
inline OracleHop oracle_hop(const HeteroGraph& g, NodeIndex s, int hop) {
  const size_t n = g.num_nodes();
  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  for (const auto& e : g.edge_records()) {
    NodeIndex a = g.index(e.src), b = g.index(e.dst);
    adj[a][b] = adj[b][a] = 1;
  }
  OracleHop out;
  std::vector<NodeIndex> path{s};
  auto dfs = [&](auto&& self) -> void {
    if (static_cast<int>(path.size()) == hop + 1) {
      if (path.back() == s) return;
      std::vector<TypeId> types;
      for (NodeIndex v : path) types.push_back(g.type(v));
      ++out.counts[types];
      out.endpoints[g.type(path.back())].insert(path.back());
      return;
    }
    const NodeIndex cur = path.back();
    for (NodeIndex nxt = 0; nxt < n; ++nxt) {
      if (!adj[cur][nxt]) continue;
      if (path.size() >= 2 && nxt == path[path.size() - 2]) continue;
      path.push_back(nxt);
      self(self);
      path.pop_back();
    }
  };
  dfs(dfs);
  return out;
}

// --- token tables -----------------------------------------------------------

inline std::vector<NodeIndex> all_nodes(const HeteroGraph& g) {
  std::vector<NodeIndex> v(g.num_nodes());
  for (NodeIndex i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

inline TokenTable mock_table(const HeteroGraph& g, int K, size_t dim,
                             TemplateId tid = TemplateId::PretrainLink) {
  MockBackend backend(dim);
  EmbeddingCache cache;
  Encoder enc(backend, cache);
  TokenTable table;
  table.template_id = tid;
  tokenize_graph(enc, g, all_nodes(g), K, table);
  return table;
}

// --- plain-loop reference forward -------------------------------------------

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (size_t r = 0; r < t.rows(); ++r)
    for (size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t k = 0; k < b.size(); ++k)
      for (size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline std::vector<double> softmax(std::vector<double> x) {
  double mx = *std::max_element(x.begin(), x.end()), z = 0;
  for (auto& v : x) z += (v = std::exp(v - mx));
  for (auto& v : x) v /= z;
  return x;
}

struct RefParams {
  const ModelParams& p;
  Mat operator()(const std::string& name) const { return to_mat(param(p, name)); }
};

inline Mat ref_stack(Mat x, const RefParams& P, const ModelConfig& cfg, const std::string& block) {
  const size_t layers = block == "type" ? cfg.type_layers : cfg.hop_layers;
  const size_t n = x.size(), d = cfg.d, dk = cfg.head_dim();
  auto ln = [&](const Mat& in, const Mat& g, const Mat& b) {
    Mat out = in;
    for (size_t i = 0; i < n; ++i) {
      double mu = 0, var = 0;
      for (double v : in[i]) mu += v;
      mu /= static_cast<double>(d);
      for (double v : in[i]) var += (v - mu) * (v - mu);
      var /= static_cast<double>(d);
      for (size_t j = 0; j < d; ++j) out[i][j] = (in[i][j] - mu) / std::sqrt(var + 1e-5) * g[0][j] + b[0][j];
    }
    return out;
  };
  for (size_t l = 0; l < layers; ++l) {
    const std::string pre = block + "." + std::to_string(l) + ".";
    Mat a = ln(x, P(pre + "ln1.g"), P(pre + "ln1.b"));
    Mat cat(n, std::vector<double>(d, 0.0));
    for (size_t h = 0; h < cfg.heads; ++h) {
      const std::string hs = std::to_string(h);
      Mat q = mm(a, P(pre + "attn.q." + hs)), k = mm(a, P(pre + "attn.k." + hs)), v = mm(a, P(pre + "attn.v." + hs));
      for (size_t i = 0; i < n; ++i) {
        std::vector<double> sc(n);
        for (size_t j = 0; j < n; ++j) {
          double dot = 0;
          for (size_t c = 0; c < dk; ++c) dot += q[i][c] * k[j][c];
          sc[j] = dot / std::sqrt(static_cast<double>(dk));
        }
        auto w = softmax(sc);
        for (size_t j = 0; j < n; ++j)
          for (size_t c = 0; c < dk; ++c) cat[i][h * dk + c] += w[j] * v[j][c];
      }
    }
    Mat o = mm(cat, P(pre + "attn.o"));
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) x[i][j] += o[i][j];
    Mat b2 = ln(x, P(pre + "ln2.g"), P(pre + "ln2.b"));
    Mat hid = mm(b2, P(pre + "ffn.w1"));
    Mat b1 = P(pre + "ffn.b1");
    for (auto& row : hid)
      for (size_t j = 0; j < row.size(); ++j) row[j] = std::max(0.0, row[j] + b1[0][j]);
    Mat f = mm(hid, P(pre + "ffn.w2"));
    Mat bb = P(pre + "ffn.b2");
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) x[i][j] += f[i][j] + bb[0][j];
  }
  return x;
}

struct RefOutput {
  std::vector<double> z;
  std::vector<std::vector<double>> alpha;  // per contributing hop
  std::vector<double> gamma;
};

inline RefOutput reference_forward(NodeIndex s, const TokenTable& table, const ModelParams& params,
                                   const ModelConfig& cfg) {
  RefParams P{params};
  auto project = [&](const Vec& u) {
    Mat r = mm(Mat{u}, P("proj.w"));
    Mat b = P("proj.b");
    for (size_t j = 0; j < cfg.d; ++j) r[0][j] += b[0][j];
    return r[0];
  };
  RefOutput out;
  const auto h0 = project(table.node_token(s));
  Mat H{h0};
  for (int hop = 1; hop <= cfg.K; ++hop) {
    const auto& types = table.hop_types.at({s, hop});
    if (types.empty()) continue;
    Mat U;
    for (TypeId t : types) U.push_back(project(table.relation_token(s, hop, t)));
    Mat Uh = ref_stack(U, P, cfg, "type");
    std::vector<double> sc;
    for (const auto& row : Uh) {
      double dot = 0;
      for (size_t j = 0; j < cfg.d; ++j) dot += row[j] * h0[j];
      sc.push_back(dot);
    }
    auto a = softmax(sc);
    std::vector<double> hj(cfg.d, 0.0);
    for (size_t i = 0; i < Uh.size(); ++i)
      for (size_t j = 0; j < cfg.d; ++j) hj[j] += a[i] * Uh[i][j];
    out.alpha.push_back(a);
    H.push_back(hj);
  }
  Mat Hh = ref_stack(H, P, cfg, "hop");
  out.z = Hh[0];
  if (Hh.size() > 1) {
    Mat w = P("readout.w");
    std::vector<double> sc;
    for (size_t j = 1; j < Hh.size(); ++j) {
      double v = 0;
      for (size_t c = 0; c < cfg.d; ++c) v += Hh[0][c] * w[c][0] + Hh[j][c] * w[cfg.d + c][0];
      sc.push_back(v);
    }
    out.gamma = softmax(sc);
    for (size_t j = 1; j < Hh.size(); ++j)
      for (size_t c = 0; c < cfg.d; ++c) out.z[c] += out.gamma[j - 1] * Hh[j][c];
  }
  return out;
}

// --- misc -------------------------------------------------------------------

inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ella_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace fx
