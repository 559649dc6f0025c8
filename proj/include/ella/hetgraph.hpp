#pragma once

// Heterogeneous graph model: typed nodes and edges, optional node text, JSON Lines
// ingestion, and a planted-partition generator for synthetic fixtures.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ella/util.hpp"

namespace ella {

using NodeIndex = uint32_t;
using TypeId = int;

struct EdgeTypeDef {
  std::string name;
  std::string src;
  std::string dst;
};

struct SchemaDef {
  std::vector<std::string> node_types;
  std::vector<EdgeTypeDef> edge_types;
  std::string domain_blurb;
  // node-type -> label vocabulary; absent for types that are never classified.
  std::map<std::string, std::vector<std::string>> class_labels;
  // Noun used by the classification prompt ("research field", "genre", ...).
  std::string label_name = "category";

  TypeId node_type_index(std::string_view name) const;  // throws on unknown
  std::optional<TypeId> find_node_type(std::string_view name) const;
  int edge_type_index(std::string_view name) const;  // throws on unknown
  const std::vector<std::string>& labels_for(std::string_view node_type) const;

  // Checks edge endpoint references and label vocabularies.
  void validate() const;

  static SchemaDef from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct NodeRecord {
  std::string id;
  std::string type;
  std::optional<std::string> text;
};

struct EdgeRecord {
  std::string src;
  std::string dst;
  std::string etype;
};

struct Adjacent {
  NodeIndex node;
  int etype;
};

struct LoadReport {
  size_t duplicate_edges = 0;
  size_t self_loops = 0;
  std::vector<std::string> warnings;
};

/// Immutable heterogeneous graph. Node ids are opaque strings mapped to dense
/// indices in input order; edges are traversable from both endpoints while
/// keeping their declared direction.
class HeteroGraph {
 public:
  static HeteroGraph build(SchemaDef schema, const std::vector<NodeRecord>& nodes,
                           const std::vector<EdgeRecord>& edges, LoadReport* report = nullptr);

  const SchemaDef& schema() const { return schema_; }
  size_t num_nodes() const { return ids_.size(); }
  size_t num_edges() const { return edges_.size(); }
  size_t num_node_types() const { return schema_.node_types.size(); }

  const std::string& id(NodeIndex v) const { return ids_.at(v); }
  NodeIndex index(std::string_view id) const;  // throws on unknown id
  std::optional<NodeIndex> find(std::string_view id) const;
  TypeId type(NodeIndex v) const { return types_[v]; }
  const std::string& type_name(NodeIndex v) const { return schema_.node_types[types_[v]]; }
  bool has_text(NodeIndex v) const { return text_[v].has_value(); }
  const std::optional<std::string>& text(NodeIndex v) const { return text_[v]; }

  // Distinct neighbor nodes regardless of edge type, ascending by index.
  std::span<const NodeIndex> neighbors(NodeIndex v) const {
    return {nbr_.data() + nbr_off_[v], nbr_.data() + nbr_off_[v + 1]};
  }
  // (neighbor, edge type) entries, ascending by (index, edge type).
  std::span<const Adjacent> typed_adjacency(NodeIndex v) const {
    return {adj_.data() + adj_off_[v], adj_.data() + adj_off_[v + 1]};
  }

  struct Edge {
    NodeIndex src;
    NodeIndex dst;
    int etype;
  };
  // Declared-direction edges in input order, duplicates removed.
  const std::vector<Edge>& edges() const { return edges_; }
  bool has_edge(NodeIndex a, NodeIndex b, int etype) const;
  bool has_any_edge(NodeIndex a, NodeIndex b) const;

  std::vector<NodeIndex> nodes_of_type(TypeId t) const;
  std::map<std::string, size_t> type_counts() const;

  std::vector<NodeRecord> node_records() const;
  std::vector<EdgeRecord> edge_records() const;

 private:
  static uint64_t pair_key(NodeIndex a, NodeIndex b, int etype);

  SchemaDef schema_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, NodeIndex> index_;
  std::vector<TypeId> types_;
  std::vector<std::optional<std::string>> text_;
  std::vector<Edge> edges_;
  std::unordered_set<uint64_t> edge_keys_;
  std::vector<size_t> adj_off_;
  std::vector<Adjacent> adj_;
  std::vector<size_t> nbr_off_;
  std::vector<NodeIndex> nbr_;
};

/// Reads the nodes/edges JSON Lines files and the schema document.
HeteroGraph load_graph(const std::string& nodes_path, const std::string& edges_path,
                       const std::string& schema_path, LoadReport* report = nullptr);

// Writes nodes.jsonl, edges.jsonl and schema.json into `dir` (created if missing).
void save_graph(const HeteroGraph& g, const std::string& dir);
HeteroGraph load_graph_dir(const std::string& dir, LoadReport* report = nullptr);

std::vector<std::string> typed_neighbors(const HeteroGraph& g, std::string_view v,
                                         std::optional<std::string_view> etype = std::nullopt);

// Per-node class index into schema.class_labels[type]; -1 when unlabeled.
using Labels = std::vector<int>;

Labels load_labels(const std::string& path, const HeteroGraph& g);
void save_labels(const std::string& path, const HeteroGraph& g, const Labels& labels);

struct SynthConfig {
  struct NodeTypeSpec {
    std::string name;
    size_t count = 0;
    bool has_text = true;
  };
  struct EdgeSpec {
    std::string name;
    std::string src;
    std::string dst;
    double p_intra = 0.0;
    double p_inter = 0.0;
  };
  std::vector<NodeTypeSpec> node_types;
  std::vector<EdgeSpec> edge_types;
  size_t num_classes = 2;
  std::string domain_blurb = "a synthetic network";
  std::string label_name = "category";
};

struct SynthResult {
  HeteroGraph graph;
  Labels labels;
};

/// Planted partition: node j of each type belongs to class j mod C; every
/// admissible pair of an edge type is linked independently with p_intra or p_inter.
SynthResult synth_generate(const SynthConfig& cfg, uint64_t seed);

/// Class-correlated embeddings: an orthonormal centroid per class plus Gaussian
/// noise with per-coordinate std `sigma / sqrt(dim)`. Unlabeled nodes get none.
std::vector<std::optional<std::vector<double>>> planted_node_tokens(const HeteroGraph& g,
                                                                    const Labels& labels,
                                                                    size_t num_classes,
                                                                    size_t dim, double sigma,
                                                                    uint64_t seed);

}  // namespace ella
