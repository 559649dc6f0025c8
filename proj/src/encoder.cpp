#include "ella/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

namespace ella {

namespace {

constexpr std::string_view kCacheMagic = "ELLA-EMBCACHE\n";
constexpr uint32_t kCacheVersion = 1;
constexpr std::string_view kTokensMagic = "ELLA-TOKENS\n";
constexpr uint32_t kTokensVersion = 1;

Vec normalized(Vec v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0)) throw Error("cannot normalize a zero embedding");
  for (auto& x : v) x /= n;
  return v;
}

// Runs fn(i) for i in [0, n) over `workers` threads with a strided split.
template <typename Fn>
void parallel_for(size_t n, size_t workers, Fn&& fn) {
  workers = std::max<size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Vec mean_of(const std::vector<const Vec*>& vs, size_t dim) {
  Vec out(dim, 0.0);
  if (vs.empty()) return out;
  for (const Vec* v : vs)
    for (size_t k = 0; k < dim; ++k) out[k] += (*v)[k];
  for (auto& x : out) x /= static_cast<double>(vs.size());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// MockBackend

MockBackend::MockBackend(size_t dim) : dim_(dim) {
  if (dim == 0) throw Error("mock backend dimension must be positive");
}

Vec MockBackend::encode(const EncodeRequest& req) {
  const uint64_t seed = StableHash().str(req.template_id).str(req.text).value();
  Vec h(dim_);
  for (size_t j = 0; j < dim_; ++j) {
    const double u = static_cast<double>(splitmix64(seed + j) >> 11) * 0x1.0p-53;
    h[j] = 2.0 * u - 1.0;
  }
  if (req.placeholders.empty()) return normalized(std::move(h));
  Vec mix(dim_, 0.0);
  for (const auto& p : req.placeholders) {
    if (p.size() != dim_) throw Error("placeholder dimension mismatch in mock backend");
    for (size_t j = 0; j < dim_; ++j) mix[j] += p[j];
  }
  const double inv = 1.0 / static_cast<double>(req.placeholders.size());
  for (size_t j = 0; j < dim_; ++j) h[j] = 0.5 * h[j] + 0.5 * mix[j] * inv;
  return normalized(std::move(h));
}

// ---------------------------------------------------------------------------
// EmbeddingCache

EmbeddingCache::EmbeddingCache(std::string path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) {
    BinaryWriter w;
    w.raw(kCacheMagic);
    w.u32(kCacheVersion);
    write_text_file(path_, w.data());
    return;
  }
  BinaryReader r(read_text_file(path_));
  if (r.raw(kCacheMagic.size()) != kCacheMagic) throw Error(path_ + ": not an embedding cache");
  if (uint32_t v = r.u32(); v != kCacheVersion)
    throw Error(path_ + ": unsupported cache version " + std::to_string(v));
  while (!r.eof()) {
    uint64_t k = r.u64();
    uint32_t dim = r.u32();
    entries_.try_emplace(k, r.f64s(dim));
  }
}

uint64_t EmbeddingCache::key(std::string_view backend, const EncodeRequest& req) {
  StableHash h;
  h.str(backend).str(req.template_id).str(req.text).u64(req.placeholders.size());
  for (const auto& p : req.placeholders) {
    h.u64(p.size());
    for (double x : p) h.u64(static_cast<uint64_t>(std::llround(x * 1e6)));
  }
  return h.value();
}

std::optional<Vec> EmbeddingCache::get(uint64_t k) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find(k);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

Vec EmbeddingCache::put(uint64_t k, Vec value) {
  std::unique_lock lock(mu_);
  auto [it, inserted] = entries_.try_emplace(k, std::move(value));
  if (inserted && !path_.empty()) {
    BinaryWriter w;
    w.u64(k);
    w.u32(static_cast<uint32_t>(it->second.size()));
    w.f64s(it->second);
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    out << w.data();
    if (!out) throw Error("cannot append to cache file " + path_);
  }
  return it->second;
}

size_t EmbeddingCache::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

// ---------------------------------------------------------------------------
// Encoder

Encoder::Result Encoder::encode(const EncodeRequest& req) {
  const uint64_t k = EmbeddingCache::key(backend_.name(), req);
  if (auto hit = cache_.get(k)) {
    ++hits_;
    return {std::move(*hit), true};
  }
  Vec v = backend_.encode(req);
  ++calls_;
  if (v.size() != backend_.dim())
    throw Error("backend returned dimension " + std::to_string(v.size()) + ", expected " +
                std::to_string(backend_.dim()));
  return {cache_.put(k, std::move(v)), false};
}

Vec encode_text(Encoder& enc, std::string_view text) {
  if (text.empty()) throw Error("cannot encode empty text");
  EncodeRequest req{std::string(kNodeTemplate), std::string(text), {}, enc.backend().pooling()};
  return enc.encode(req).vec;
}

// ---------------------------------------------------------------------------
// TokenTable

const Vec& TokenTable::node_token(NodeIndex v) const {
  auto it = node_tokens.find(v);
  if (it == node_tokens.end()) throw Error("no node token for node " + std::to_string(v));
  return it->second;
}

const Vec& TokenTable::relation_token(NodeIndex v, int hop, TypeId t) const {
  auto it = relation_tokens.find({v, hop, t});
  if (it == relation_tokens.end())
    throw Error("no relation token for node " + std::to_string(v) + " hop " + std::to_string(hop) +
                " type " + std::to_string(t));
  return it->second;
}

size_t TokenTable::stored_vectors(NodeIndex target) const {
  size_t n = has_node_token(target) ? 1 : 0;
  for (auto it = relation_tokens.lower_bound({target, 0, 0});
       it != relation_tokens.end() && it->first.node == target; ++it)
    ++n;
  return n;
}

std::vector<NodeIndex> TokenTable::targets() const {
  std::vector<NodeIndex> out;
  for (const auto& [key, types] : hop_types)
    if (out.empty() || out.back() != key.first) out.push_back(key.first);
  return out;
}

void TokenTable::save(const std::string& path, const HeteroGraph& g) const {
  BinaryWriter w;
  w.raw(kTokensMagic);
  w.u32(kTokensVersion);
  w.u32(static_cast<uint32_t>(d_llm));
  w.str(template_name(template_id));
  w.u32(static_cast<uint32_t>(hops));
  w.u64(call_count);
  w.u64(cache_hits);
  w.u64(node_calls);
  w.u64(relation_calls);
  std::vector<NodeIndex> ids;
  for (const auto& [v, _] : node_tokens) ids.push_back(v);
  std::sort(ids.begin(), ids.end());
  w.u64(ids.size());
  for (NodeIndex v : ids) {
    w.str(g.id(v));
    w.f64s(node_tokens.at(v));
  }
  w.u64(hop_types.size());
  for (const auto& [key, types] : hop_types) {
    w.str(g.id(key.first));
    w.u32(static_cast<uint32_t>(key.second));
    w.u32(static_cast<uint32_t>(types.size()));
    for (TypeId t : types) w.str(g.schema().node_types.at(t));
  }
  w.u64(relation_tokens.size());
  for (const auto& [key, vec] : relation_tokens) {
    w.str(g.id(key.node));
    w.u32(static_cast<uint32_t>(key.hop));
    w.str(g.schema().node_types.at(key.type));
    w.f64s(vec);
  }
  w.u64(relation_calls_per_target.size());
  for (const auto& [v, n] : relation_calls_per_target) {
    w.str(g.id(v));
    w.u64(n);
  }
  write_text_file(path, w.data());
}

TokenTable TokenTable::load(const std::string& path, const HeteroGraph& g) {
  BinaryReader r(read_text_file(path));
  if (r.raw(kTokensMagic.size()) != kTokensMagic) throw Error(path + ": not a token table");
  if (uint32_t v = r.u32(); v != kTokensVersion)
    throw Error(path + ": unsupported token table version " + std::to_string(v));
  TokenTable t;
  t.d_llm = r.u32();
  t.template_id = parse_template(r.str());
  t.hops = static_cast<int>(r.u32());
  t.call_count = r.u64();
  t.cache_hits = r.u64();
  t.node_calls = r.u64();
  t.relation_calls = r.u64();
  for (uint64_t n = r.u64(); n > 0; --n) {
    NodeIndex v = g.index(r.str());
    t.node_tokens[v] = r.f64s(t.d_llm);
  }
  for (uint64_t n = r.u64(); n > 0; --n) {
    NodeIndex v = g.index(r.str());
    int hop = static_cast<int>(r.u32());
    std::vector<TypeId> types(r.u32());
    for (auto& ty : types) ty = g.schema().node_type_index(r.str());
    t.hop_types[{v, hop}] = std::move(types);
  }
  for (uint64_t n = r.u64(); n > 0; --n) {
    NodeIndex v = g.index(r.str());
    int hop = static_cast<int>(r.u32());
    TypeId ty = g.schema().node_type_index(r.str());
    t.relation_tokens[{v, hop, ty}] = r.f64s(t.d_llm);
  }
  for (uint64_t n = r.u64(); n > 0; --n) {
    NodeIndex v = g.index(r.str());
    t.relation_calls_per_target[v] = r.u64();
  }
  return t;
}

// ---------------------------------------------------------------------------
// Token construction

Vec pooled_node_token(const HeteroGraph& g, NodeIndex t, const TokenTable& table) {
  std::vector<const Vec*> members;
  for (NodeIndex u : g.neighbors(t)) {
    if (!g.has_text(u)) continue;
    auto it = table.node_tokens.find(u);
    if (it == table.node_tokens.end())
      throw Error("neighbor '" + g.id(u) + "' of '" + g.id(t) + "' has text but no node token");
    members.push_back(&it->second);
  }
  if (members.empty())
    throw Error("node '" + g.id(t) + "' has no text and no text-bearing neighbor; check the schema");
  return mean_of(members, table.d_llm);
}

namespace {

Encoder::Result compute_relation_token(Encoder& enc, NodeIndex s, const TokenTable& table,
                                       const std::vector<NodeIndex>& members,
                                       const PromptInstance& prompt) {
  std::vector<const Vec*> toks;
  toks.reserve(members.size());
  for (NodeIndex m : members) toks.push_back(&table.node_token(m));
  Vec pooled = mean_of(toks, table.d_llm);
  BoundPrompt bound = bind_placeholders(prompt, {table.node_token(s), std::move(pooled)}, table.d_llm);
  EncodeRequest req{std::string(template_name(prompt.template_id)), bound.prompt.rendered_text,
                    std::move(bound.placeholder_vectors), enc.backend().pooling()};
  return enc.encode(req);
}

}  // namespace

bool relation_token(Encoder& enc, NodeIndex s, int hop, TypeId t, TokenTable& table,
                    const HopTypeNeighborhood& nb, const PromptInstance& prompt) {
  if (nb.target != s || nb.hop != hop || nb.type != t)
    throw Error("neighborhood does not match the requested (node, hop, type)");
  if (table.d_llm == 0) table.d_llm = enc.dim();
  auto res = compute_relation_token(enc, s, table, nb.members, prompt);
  table.relation_tokens[{s, hop, t}] = std::move(res.vec);
  if (!res.cache_hit) {
    ++table.call_count;
    ++table.relation_calls;
    ++table.relation_calls_per_target[s];
  } else {
    ++table.cache_hits;
  }
  return !res.cache_hit;
}

void tokenize_graph(Encoder& enc, const HeteroGraph& g, const std::vector<NodeIndex>& targets,
                    int K, TokenTable& table, const TokenizeOptions& opts) {
  if (K < 1) throw Error("tokenize_graph: K must be at least 1");
  if (table.d_llm == 0) table.d_llm = enc.dim();
  if (table.d_llm != enc.dim())
    throw Error("token table dimension " + std::to_string(table.d_llm) +
                " does not match backend dimension " + std::to_string(enc.dim()));
  for (const auto& [v, tok] : table.node_tokens)
    if (tok.size() != table.d_llm) throw Error("preset node token has the wrong dimension");
  table.hops = std::max(table.hops, K);
  const size_t workers = std::max<size_t>(1, opts.workers);

  // Walk statistics per (target, hop).
  std::vector<std::vector<HopSummary>> summaries(targets.size());
  parallel_for(targets.size(), workers, [&](size_t i) {
    for (int h = 1; h <= K; ++h) summaries[i].push_back(hop_summary(g, targets[i], h, opts.paths));
  });

  // Node tokens needed: targets, every pooled member, and the text-bearing
  // neighbors of textless ones.
  std::set<NodeIndex> needed(targets.begin(), targets.end());
  for (const auto& per_target : summaries)
    for (const auto& hs : per_target)
      for (const auto& [t, members] : hs.endpoints) needed.insert(members.begin(), members.end());
  std::set<NodeIndex> to_encode;
  std::vector<NodeIndex> to_pool;
  for (NodeIndex v : needed) {
    if (table.has_node_token(v)) continue;
    if (g.has_text(v)) {
      to_encode.insert(v);
    } else {
      to_pool.push_back(v);
      for (NodeIndex u : g.neighbors(v))
        if (g.has_text(u) && !table.has_node_token(u)) to_encode.insert(u);
    }
  }

  const uint64_t calls0 = enc.calls(), hits0 = enc.cache_hits();
  std::vector<NodeIndex> enc_list(to_encode.begin(), to_encode.end());
  std::vector<Vec> encoded(enc_list.size());
  parallel_for(enc_list.size(), workers,
               [&](size_t i) { encoded[i] = encode_text(enc, *g.text(enc_list[i])); });
  for (size_t i = 0; i < enc_list.size(); ++i) table.node_tokens[enc_list[i]] = std::move(encoded[i]);
  const uint64_t node_calls = enc.calls() - calls0;

  std::vector<Vec> pooled(to_pool.size());
  for (size_t i = 0; i < to_pool.size(); ++i) pooled[i] = pooled_node_token(g, to_pool[i], table);
  for (size_t i = 0; i < to_pool.size(); ++i) table.node_tokens[to_pool[i]] = std::move(pooled[i]);

  // Relation tokens, one backend request per (target, hop, type present).
  struct Produced {
    RelationKey key;
    Vec vec;
  };
  std::vector<std::vector<Produced>> produced(targets.size());
  std::vector<uint64_t> target_calls(targets.size(), 0);
  parallel_for(targets.size(), workers, [&](size_t i) {
    const NodeIndex s = targets[i];
    const std::string& src_type = g.type_name(s);
    for (const auto& hs : summaries[i]) {
      for (const auto& [t, members] : hs.endpoints) {
        const std::string& dst_type = g.schema().node_types[t];
        PromptInstance prompt = build_relation_prompt(g.schema(), src_type, dst_type, hs.profile.hop,
                                                      hs.profile, table.template_id);
        if (!opts.prompt_dump_dir.empty())
          dump_prompt(opts.prompt_dump_dir, g.id(s), hs.profile.hop, dst_type, prompt);
        auto res = compute_relation_token(enc, s, table, members, prompt);
        if (!res.cache_hit) ++target_calls[i];
        produced[i].push_back({{s, hs.profile.hop, t}, std::move(res.vec)});
      }
    }
  });

  for (size_t i = 0; i < targets.size(); ++i) {
    const NodeIndex s = targets[i];
    for (const auto& hs : summaries[i]) {
      std::vector<TypeId> types;
      for (const auto& [t, _] : hs.endpoints) types.push_back(t);
      table.hop_types[{s, hs.profile.hop}] = std::move(types);
    }
    for (auto& p : produced[i]) table.relation_tokens[p.key] = std::move(p.vec);
    table.relation_calls_per_target[s] += target_calls[i];
    table.relation_calls += target_calls[i];
  }
  table.node_calls += node_calls;
  table.call_count += enc.calls() - calls0;
  table.cache_hits += enc.cache_hits() - hits0;
}

}  // namespace ella
