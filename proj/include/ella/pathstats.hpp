#pragma once

// Multi-hop walk statistics around a target node: typed walk enumeration,
// meta-path pattern counts/proportions and per-(hop, type) endpoint sets.
//
// A walk of length i is a node sequence s = v0, v1, ..., vi with consecutive
// nodes adjacent and v[j+1] != v[j-1] (no immediate backtracking). Nodes may
// otherwise repeat; walks whose last node is s are dropped.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ella/hetgraph.hpp"

namespace ella {

struct PathStatsConfig {
  int max_hops = 3;
  uint64_t max_walks_per_node = 1'000'000;
};

using TypeSequence = std::vector<TypeId>;

struct PatternStat {
  TypeSequence types;  // length hop+1, types.front() == type(target)
  uint64_t count = 0;
  double proportion = 0.0;  // count / walks of this hop ending in types.back()
};

struct MetaPathProfile {
  NodeIndex target = 0;
  int hop = 0;
  std::vector<PatternStat> patterns;  // lexicographic by type sequence

  // Patterns whose endpoint type is `t`, in profile order.
  std::vector<PatternStat> ending_in(TypeId t) const;
  uint64_t walks_ending_in(TypeId t) const;
  uint64_t total_walks() const;
};

struct HopTypeNeighborhood {
  NodeIndex target = 0;
  int hop = 0;
  TypeId type = 0;
  std::vector<NodeIndex> members;  // ascending, never contains target
};

// Profile and endpoint sets for one (target, hop), from a single traversal.
struct HopSummary {
  MetaPathProfile profile;
  std::map<TypeId, std::vector<NodeIndex>> endpoints;  // only types present
};

std::vector<std::vector<NodeIndex>> enumerate_walks(const HeteroGraph& g, NodeIndex s, int hop,
                                                    const PathStatsConfig& cfg = {});
uint64_t count_walks(const HeteroGraph& g, NodeIndex s, int hop, const PathStatsConfig& cfg = {});

MetaPathProfile meta_path_profile(const HeteroGraph& g, NodeIndex s, int hop,
                                  const PathStatsConfig& cfg = {});
HopTypeNeighborhood hop_type_neighbors(const HeteroGraph& g, NodeIndex s, int hop,
                                       std::string_view type, const PathStatsConfig& cfg = {});
HopSummary hop_summary(const HeteroGraph& g, NodeIndex s, int hop, const PathStatsConfig& cfg = {});

// "author-paper-paper"
std::string pattern_string(const SchemaDef& schema, const TypeSequence& types);

// One CSV row per (target, hop, pattern): target,hop,pattern,count,proportion.
std::string profiles_to_csv(const HeteroGraph& g, const std::vector<MetaPathProfile>& profiles);

}  // namespace ella
