#include "ella/hetgraph.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ella {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// SchemaDef

std::optional<TypeId> SchemaDef::find_node_type(std::string_view name) const {
  for (size_t i = 0; i < node_types.size(); ++i)
    if (node_types[i] == name) return static_cast<TypeId>(i);
  return std::nullopt;
}

TypeId SchemaDef::node_type_index(std::string_view name) const {
  if (auto t = find_node_type(name)) return *t;
  throw Error("unknown node type '" + std::string(name) + "'");
}

int SchemaDef::edge_type_index(std::string_view name) const {
  for (size_t i = 0; i < edge_types.size(); ++i)
    if (edge_types[i].name == name) return static_cast<int>(i);
  throw Error("unknown edge type '" + std::string(name) + "'");
}

const std::vector<std::string>& SchemaDef::labels_for(std::string_view node_type) const {
  auto it = class_labels.find(std::string(node_type));
  if (it == class_labels.end() || it->second.empty())
    throw Error("node type '" + std::string(node_type) + "' has no class labels");
  return it->second;
}

void SchemaDef::validate() const {
  if (node_types.empty()) throw Error("schema declares no node types");
  for (size_t i = 0; i < node_types.size(); ++i)
    for (size_t j = i + 1; j < node_types.size(); ++j)
      if (node_types[i] == node_types[j])
        throw Error("duplicate node type '" + node_types[i] + "'");
  for (size_t i = 0; i < edge_types.size(); ++i) {
    const auto& e = edge_types[i];
    if (!find_node_type(e.src))
      throw Error("edge type '" + e.name + "' references unknown node type '" + e.src + "'");
    if (!find_node_type(e.dst))
      throw Error("edge type '" + e.name + "' references unknown node type '" + e.dst + "'");
    for (size_t j = i + 1; j < edge_types.size(); ++j)
      if (edge_types[j].name == e.name) throw Error("duplicate edge type '" + e.name + "'");
  }
  for (const auto& [type, labels] : class_labels) {
    if (!find_node_type(type))
      throw Error("class_labels references unknown node type '" + type + "'");
    if (labels.empty()) throw Error("class_labels for '" + type + "' is empty");
  }
}

SchemaDef SchemaDef::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("schema: ") + e.what());
  }
  SchemaDef s;
  try {
    s.node_types = j.at("node_types").get<std::vector<std::string>>();
    for (const auto& e : j.at("edge_types"))
      s.edge_types.push_back({e.at("name").get<std::string>(), e.at("src").get<std::string>(),
                              e.at("dst").get<std::string>()});
    s.domain_blurb = j.value("domain_blurb", std::string());
    if (j.contains("class_labels"))
      s.class_labels =
          j.at("class_labels").get<std::map<std::string, std::vector<std::string>>>();
    s.label_name = j.value("label_name", std::string("category"));
  } catch (const json::exception& e) {
    throw Error(std::string("schema: ") + e.what());
  }
  s.validate();
  return s;
}

std::string SchemaDef::to_json_text() const {
  json j;
  j["node_types"] = node_types;
  j["edge_types"] = json::array();
  for (const auto& e : edge_types) j["edge_types"].push_back({{"name", e.name}, {"src", e.src}, {"dst", e.dst}});
  j["domain_blurb"] = domain_blurb;
  j["class_labels"] = class_labels;
  j["label_name"] = label_name;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// HeteroGraph

uint64_t HeteroGraph::pair_key(NodeIndex a, NodeIndex b, int etype) {
  if (a > b) std::swap(a, b);
  return (static_cast<uint64_t>(a) << 38) | (static_cast<uint64_t>(b) << 12) |
         static_cast<uint64_t>(etype);
}

HeteroGraph HeteroGraph::build(SchemaDef schema, const std::vector<NodeRecord>& nodes,
                               const std::vector<EdgeRecord>& edges, LoadReport* report) {
  schema.validate();
  LoadReport local;
  LoadReport& rep = report ? *report : local;

  if (nodes.size() >= (1u << 26)) throw Error("graph too large");
  if (schema.edge_types.size() >= 4096) throw Error("too many edge types");

  HeteroGraph g;
  g.schema_ = std::move(schema);
  g.ids_.reserve(nodes.size());
  for (const auto& n : nodes) {
    if (n.id.empty()) throw Error("empty node id");
    auto t = g.schema_.find_node_type(n.type);
    if (!t) throw Error("node '" + n.id + "' has unknown type '" + n.type + "'");
    auto [it, inserted] = g.index_.emplace(n.id, static_cast<NodeIndex>(g.ids_.size()));
    if (!inserted) throw Error("duplicate node id '" + n.id + "'");
    g.ids_.push_back(n.id);
    g.types_.push_back(*t);
    g.text_.push_back(n.text && !n.text->empty() ? n.text : std::nullopt);
  }

  for (const auto& e : edges) {
    auto s = g.find(e.src);
    if (!s) throw Error("edge references undeclared node '" + e.src + "'");
    auto d = g.find(e.dst);
    if (!d) throw Error("edge references undeclared node '" + e.dst + "'");
    int et = g.schema_.edge_type_index(e.etype);
    const auto& def = g.schema_.edge_types[et];
    if (g.type_name(*s) != def.src || g.type_name(*d) != def.dst)
      throw Error("edge " + e.src + "->" + e.dst + " of type '" + e.etype + "' connects " +
                  g.type_name(*s) + "->" + g.type_name(*d) + ", schema declares " + def.src +
                  "->" + def.dst);
    if (*s == *d) {
      ++rep.self_loops;
      continue;
    }
    if (!g.edge_keys_.insert(pair_key(*s, *d, et)).second) {
      ++rep.duplicate_edges;
      continue;
    }
    g.edges_.push_back({*s, *d, et});
  }
  if (rep.duplicate_edges)
    rep.warnings.push_back("collapsed " + std::to_string(rep.duplicate_edges) + " duplicate edges");
  if (rep.self_loops)
    rep.warnings.push_back("dropped " + std::to_string(rep.self_loops) + " self-loops");
  if (g.schema_.node_types.size() + g.schema_.edge_types.size() <= 2)
    rep.warnings.push_back("graph is not heterogeneous: |node types| + |edge types| <= 2");

  const size_t n = g.ids_.size();
  std::vector<std::vector<Adjacent>> adj(n);
  for (const auto& e : g.edges_) {
    adj[e.src].push_back({e.dst, e.etype});
    adj[e.dst].push_back({e.src, e.etype});
  }
  g.adj_off_.assign(n + 1, 0);
  g.nbr_off_.assign(n + 1, 0);
  for (size_t v = 0; v < n; ++v) {
    auto& a = adj[v];
    std::sort(a.begin(), a.end(), [](const Adjacent& x, const Adjacent& y) {
      return x.node != y.node ? x.node < y.node : x.etype < y.etype;
    });
    g.adj_.insert(g.adj_.end(), a.begin(), a.end());
    g.adj_off_[v + 1] = g.adj_.size();
    for (size_t i = 0; i < a.size(); ++i)
      if (i == 0 || a[i].node != a[i - 1].node) g.nbr_.push_back(a[i].node);
    g.nbr_off_[v + 1] = g.nbr_.size();
  }
  return g;
}

NodeIndex HeteroGraph::index(std::string_view id) const {
  if (auto v = find(id)) return *v;
  throw Error("unknown node id '" + std::string(id) + "'");
}

std::optional<NodeIndex> HeteroGraph::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool HeteroGraph::has_edge(NodeIndex a, NodeIndex b, int etype) const {
  return edge_keys_.count(pair_key(a, b, etype)) > 0;
}

bool HeteroGraph::has_any_edge(NodeIndex a, NodeIndex b) const {
  auto nb = neighbors(a);
  return std::binary_search(nb.begin(), nb.end(), b);
}

std::vector<NodeIndex> HeteroGraph::nodes_of_type(TypeId t) const {
  std::vector<NodeIndex> out;
  for (NodeIndex v = 0; v < num_nodes(); ++v)
    if (types_[v] == t) out.push_back(v);
  return out;
}

std::map<std::string, size_t> HeteroGraph::type_counts() const {
  std::map<std::string, size_t> out;
  for (const auto& t : schema_.node_types) out[t] = 0;
  for (TypeId t : types_) ++out[schema_.node_types[t]];
  return out;
}

std::vector<NodeRecord> HeteroGraph::node_records() const {
  std::vector<NodeRecord> out;
  out.reserve(num_nodes());
  for (NodeIndex v = 0; v < num_nodes(); ++v) out.push_back({ids_[v], type_name(v), text_[v]});
  return out;
}

std::vector<EdgeRecord> HeteroGraph::edge_records() const {
  std::vector<EdgeRecord> out;
  out.reserve(edges_.size());
  for (const auto& e : edges_)
    out.push_back({ids_[e.src], ids_[e.dst], schema_.edge_types[e.etype].name});
  return out;
}

// ---------------------------------------------------------------------------
// File IO

namespace {

template <typename Fn>
void for_each_json_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const Error& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

HeteroGraph load_graph(const std::string& nodes_path, const std::string& edges_path,
                       const std::string& schema_path, LoadReport* report) {
  SchemaDef schema = SchemaDef::from_json_text(read_text_file(schema_path));

  std::vector<NodeRecord> nodes;
  std::unordered_set<std::string> seen;
  for_each_json_line(nodes_path, [&](const json& j) {
    NodeRecord r;
    r.id = j.at("id").get<std::string>();
    r.type = j.at("type").get<std::string>();
    if (j.contains("text") && !j.at("text").is_null()) r.text = j.at("text").get<std::string>();
    if (!schema.find_node_type(r.type)) throw Error("unknown node type '" + r.type + "'");
    if (!seen.insert(r.id).second) throw Error("duplicate node id '" + r.id + "'");
    nodes.push_back(std::move(r));
  });

  // Edges are validated line by line so errors carry the offending line number.
  std::vector<EdgeRecord> edges;
  std::unordered_map<std::string, std::string> node_type;
  for (const auto& n : nodes) node_type.emplace(n.id, n.type);
  for_each_json_line(edges_path, [&](const json& j) {
    EdgeRecord r{j.at("src").get<std::string>(), j.at("dst").get<std::string>(),
                 j.at("etype").get<std::string>()};
    if (!node_type.count(r.src)) throw Error("undeclared node id '" + r.src + "'");
    if (!node_type.count(r.dst)) throw Error("undeclared node id '" + r.dst + "'");
    const auto& def = schema.edge_types[schema.edge_type_index(r.etype)];
    if (node_type[r.src] != def.src || node_type[r.dst] != def.dst)
      throw Error("edge type '" + r.etype + "' expects " + def.src + "->" + def.dst + ", got " +
                  node_type[r.src] + "->" + node_type[r.dst]);
    edges.push_back(std::move(r));
  });
  return HeteroGraph::build(std::move(schema), nodes, edges, report);
}

void save_graph(const HeteroGraph& g, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream nodes, edges;
  for (const auto& n : g.node_records()) {
    json j{{"id", n.id}, {"type", n.type}};
    if (n.text) j["text"] = *n.text;
    nodes << j.dump() << "\n";
  }
  for (const auto& e : g.edge_records())
    edges << json{{"src", e.src}, {"dst", e.dst}, {"etype", e.etype}}.dump() << "\n";
  write_text_file(dir + "/nodes.jsonl", nodes.str());
  write_text_file(dir + "/edges.jsonl", edges.str());
  write_text_file(dir + "/schema.json", g.schema().to_json_text());
}

HeteroGraph load_graph_dir(const std::string& dir, LoadReport* report) {
  return load_graph(dir + "/nodes.jsonl", dir + "/edges.jsonl", dir + "/schema.json", report);
}

std::vector<std::string> typed_neighbors(const HeteroGraph& g, std::string_view v,
                                         std::optional<std::string_view> etype) {
  NodeIndex s = g.index(v);
  std::vector<std::string> out;
  if (etype) {
    int et = g.schema().edge_type_index(*etype);
    for (const auto& a : g.typed_adjacency(s))
      if (a.etype == et) out.push_back(g.id(a.node));
  } else {
    for (NodeIndex u : g.neighbors(s)) out.push_back(g.id(u));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Labels load_labels(const std::string& path, const HeteroGraph& g) {
  Labels labels(g.num_nodes(), -1);
  for_each_json_line(path, [&](const json& j) {
    NodeIndex v = g.index(j.at("id").get<std::string>());
    const auto& vocab = g.schema().labels_for(g.type_name(v));
    const auto& name = j.at("label");
    if (name.is_number_integer()) {
      int c = name.get<int>();
      if (c < 0 || static_cast<size_t>(c) >= vocab.size())
        throw Error("label index " + std::to_string(c) + " out of range");
      labels[v] = c;
      return;
    }
    auto s = name.get<std::string>();
    auto it = std::find(vocab.begin(), vocab.end(), s);
    if (it == vocab.end()) throw Error("label '" + s + "' not in vocabulary of " + g.type_name(v));
    labels[v] = static_cast<int>(it - vocab.begin());
  });
  return labels;
}

void save_labels(const std::string& path, const HeteroGraph& g, const Labels& labels) {
  std::ostringstream out;
  for (NodeIndex v = 0; v < g.num_nodes(); ++v) {
    if (labels.at(v) < 0) continue;
    const auto& vocab = g.schema().labels_for(g.type_name(v));
    out << json{{"id", g.id(v)}, {"label", vocab.at(labels[v])}}.dump() << "\n";
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Synthetic generation

SynthResult synth_generate(const SynthConfig& cfg, uint64_t seed) {
  if (cfg.num_classes == 0) throw Error("synth: num_classes must be positive");
  SchemaDef schema;
  schema.domain_blurb = cfg.domain_blurb;
  schema.label_name = cfg.label_name;
  std::vector<std::string> class_names;
  for (size_t c = 0; c < cfg.num_classes; ++c) class_names.push_back("class" + std::to_string(c));
  for (const auto& nt : cfg.node_types) {
    schema.node_types.push_back(nt.name);
    schema.class_labels[nt.name] = class_names;
  }
  for (const auto& e : cfg.edge_types) {
    if (!(e.p_intra >= 0.0 && e.p_intra <= 1.0) || !(e.p_inter >= 0.0 && e.p_inter <= 1.0))
      throw Error("synth: edge type '" + e.name + "' has a probability outside [0,1]");
    schema.edge_types.push_back({e.name, e.src, e.dst});
  }
  schema.validate();

  std::vector<NodeRecord> nodes;
  std::vector<int> labels;
  std::map<std::string, std::vector<size_t>> by_type;
  for (const auto& nt : cfg.node_types) {
    for (size_t j = 0; j < nt.count; ++j) {
      NodeRecord r;
      r.id = nt.name + std::to_string(j);
      r.type = nt.name;
      if (nt.has_text) r.text = nt.name + " " + std::to_string(j);
      by_type[nt.name].push_back(nodes.size());
      labels.push_back(static_cast<int>(j % cfg.num_classes));
      nodes.push_back(std::move(r));
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<EdgeRecord> edges;
  for (const auto& e : cfg.edge_types) {
    const auto& src = by_type[e.src];
    const auto& dst = by_type[e.dst];
    const bool same = e.src == e.dst;
    for (size_t a = 0; a < src.size(); ++a) {
      for (size_t b = same ? a + 1 : 0; b < dst.size(); ++b) {
        double p = labels[src[a]] == labels[dst[b]] ? e.p_intra : e.p_inter;
        if (unit_uniform(rng) < p) edges.push_back({nodes[src[a]].id, nodes[dst[b]].id, e.name});
      }
    }
  }
  SynthResult out{HeteroGraph::build(std::move(schema), nodes, edges), std::move(labels)};
  return out;
}

std::vector<std::optional<std::vector<double>>> planted_node_tokens(const HeteroGraph& g,
                                                                    const Labels& labels,
                                                                    size_t num_classes,
                                                                    size_t dim, double sigma,
                                                                    uint64_t seed) {
  if (num_classes > dim) throw Error("planted tokens: more classes than dimensions");
  std::mt19937_64 rng(seed);
  // Gram-Schmidt on Gaussian draws.
  std::vector<std::vector<double>> centroids;
  while (centroids.size() < num_classes) {
    std::vector<double> c(dim);
    for (auto& x : c) x = normal(rng);
    for (const auto& q : centroids) {
      double dot = 0;
      for (size_t k = 0; k < dim; ++k) dot += c[k] * q[k];
      for (size_t k = 0; k < dim; ++k) c[k] -= dot * q[k];
    }
    double norm = 0;
    for (double x : c) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (auto& x : c) x /= norm;
    centroids.push_back(std::move(c));
  }
  const double scale = sigma / std::sqrt(static_cast<double>(dim));
  std::vector<std::optional<std::vector<double>>> out(g.num_nodes());
  for (NodeIndex v = 0; v < g.num_nodes(); ++v) {
    if (labels.at(v) < 0) continue;
    std::vector<double> u = centroids.at(static_cast<size_t>(labels[v]));
    for (auto& x : u) x += scale * normal(rng);
    out[v] = std::move(u);
  }
  return out;
}

}  // namespace ella
