#include "ella/pathstats.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

namespace ella {

namespace {

void check_args(const HeteroGraph& g, NodeIndex s, int hop, const PathStatsConfig& cfg) {
  if (s >= g.num_nodes()) throw Error("unknown node index " + std::to_string(s));
  if (hop < 1 || hop > cfg.max_hops)
    throw Error("hop " + std::to_string(hop) + " outside [1, " + std::to_string(cfg.max_hops) + "]");
}

// Depth-first walk traversal. `leaf` receives the walk stack at every full-length
// walk that does not end at the start node.
template <typename Leaf>
void traverse(const HeteroGraph& g, NodeIndex s, int hop, const PathStatsConfig& cfg, Leaf&& leaf) {
  std::vector<NodeIndex> stack{s};
  stack.reserve(hop + 1);
  uint64_t seen = 0;
  auto rec = [&](auto&& self, NodeIndex prev, bool has_prev) -> void {
    NodeIndex cur = stack.back();
    if (static_cast<int>(stack.size()) == hop + 1) {
      if (cur == s) return;
      if (++seen > cfg.max_walks_per_node)
        throw Error("walk count from '" + g.id(s) + "' at hop " + std::to_string(hop) +
                    " exceeds max_walks_per_node=" + std::to_string(cfg.max_walks_per_node));
      leaf(stack);
      return;
    }
    for (NodeIndex nxt : g.neighbors(cur)) {
      if (has_prev && nxt == prev) continue;
      stack.push_back(nxt);
      self(self, cur, true);
      stack.pop_back();
    }
  };
  rec(rec, 0, false);
}

}  // namespace

std::vector<PatternStat> MetaPathProfile::ending_in(TypeId t) const {
  std::vector<PatternStat> out;
  for (const auto& p : patterns)
    if (p.types.back() == t) out.push_back(p);
  return out;
}

uint64_t MetaPathProfile::walks_ending_in(TypeId t) const {
  uint64_t n = 0;
  for (const auto& p : patterns)
    if (p.types.back() == t) n += p.count;
  return n;
}

uint64_t MetaPathProfile::total_walks() const {
  uint64_t n = 0;
  for (const auto& p : patterns) n += p.count;
  return n;
}

std::vector<std::vector<NodeIndex>> enumerate_walks(const HeteroGraph& g, NodeIndex s, int hop,
                                                    const PathStatsConfig& cfg) {
  check_args(g, s, hop, cfg);
  std::vector<std::vector<NodeIndex>> out;
  traverse(g, s, hop, cfg, [&](const std::vector<NodeIndex>& w) { out.push_back(w); });
  return out;
}

uint64_t count_walks(const HeteroGraph& g, NodeIndex s, int hop, const PathStatsConfig& cfg) {
  check_args(g, s, hop, cfg);
  uint64_t n = 0;
  traverse(g, s, hop, cfg, [&](const std::vector<NodeIndex>&) { ++n; });
  return n;
}

HopSummary hop_summary(const HeteroGraph& g, NodeIndex s, int hop, const PathStatsConfig& cfg) {
  check_args(g, s, hop, cfg);
  const uint64_t base = g.num_node_types();
  {
    unsigned __int128 span = 1;
    for (int k = 0; k <= hop; ++k) span *= base;
    if (span >> 63) throw Error("too many node types to pack hop-" + std::to_string(hop) + " patterns");
  }
  // Type sequences are packed base-|A| integers; they share the leading type.
  std::unordered_map<uint64_t, uint64_t> counts;
  std::map<TypeId, std::vector<NodeIndex>> ends;
  traverse(g, s, hop, cfg, [&](const std::vector<NodeIndex>& w) {
    uint64_t code = 0;
    for (NodeIndex v : w) code = code * base + static_cast<uint64_t>(g.type(v));
    ++counts[code];
    ends[g.type(w.back())].push_back(w.back());
  });

  HopSummary out;
  out.profile.target = s;
  out.profile.hop = hop;
  for (const auto& [code, count] : counts) {
    TypeSequence seq(hop + 1);
    uint64_t c = code;
    for (int k = hop; k >= 0; --k) {
      seq[k] = static_cast<TypeId>(c % base);
      c /= base;
    }
    out.profile.patterns.push_back({std::move(seq), count, 0.0});
  }
  std::sort(out.profile.patterns.begin(), out.profile.patterns.end(),
            [](const PatternStat& a, const PatternStat& b) { return a.types < b.types; });
  std::map<TypeId, uint64_t> per_end;
  for (const auto& p : out.profile.patterns) per_end[p.types.back()] += p.count;
  for (auto& p : out.profile.patterns)
    p.proportion = static_cast<double>(p.count) / static_cast<double>(per_end[p.types.back()]);

  for (auto& [t, v] : ends) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  out.endpoints = std::move(ends);
  return out;
}

MetaPathProfile meta_path_profile(const HeteroGraph& g, NodeIndex s, int hop,
                                  const PathStatsConfig& cfg) {
  return hop_summary(g, s, hop, cfg).profile;
}

HopTypeNeighborhood hop_type_neighbors(const HeteroGraph& g, NodeIndex s, int hop,
                                       std::string_view type, const PathStatsConfig& cfg) {
  TypeId t = g.schema().node_type_index(type);
  auto summary = hop_summary(g, s, hop, cfg);
  HopTypeNeighborhood nb{s, hop, t, {}};
  if (auto it = summary.endpoints.find(t); it != summary.endpoints.end())
    nb.members = std::move(it->second);
  return nb;
}

std::string pattern_string(const SchemaDef& schema, const TypeSequence& types) {
  std::string out;
  for (size_t i = 0; i < types.size(); ++i) {
    if (i) out += '-';
    out += schema.node_types.at(types[i]);
  }
  return out;
}

std::string profiles_to_csv(const HeteroGraph& g, const std::vector<MetaPathProfile>& profiles) {
  std::ostringstream out;
  out << "target,hop,pattern,count,proportion\n";
  for (const auto& p : profiles)
    for (const auto& ps : p.patterns)
      out << csv_escape(g.id(p.target)) << ',' << p.hop << ','
          << csv_escape(pattern_string(g.schema(), ps.types)) << ',' << ps.count << ','
          << format_fixed(ps.proportion, 6) << '\n';
  return out.str();
}

}  // namespace ella
