#pragma once

// Embedding backends and the token table: node tokens (text encodings or
// neighbor means for textless nodes) and per-(target, hop, type) relation tokens
// obtained from one backend call on a pooled relation prompt.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "ella/hetgraph.hpp"
#include "ella/pathstats.hpp"
#include "ella/promptkit.hpp"

namespace ella {

using Vec = std::vector<double>;

inline constexpr std::string_view kNodeTemplate = "node_text";

struct EncodeRequest {
  std::string template_id;
  std::string text;
  std::vector<Vec> placeholders;
  std::string pooling = "mean";
};

class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;
  virtual std::string name() const = 0;
  virtual size_t dim() const = 0;
  virtual std::string pooling() const { return "mean"; }
  virtual Vec encode(const EncodeRequest& req) = 0;
};

/// Deterministic stand-in for an LLM. The text (with its template id) seeds a
/// counter-based generator for a base vector h in [-1,1]^dim; the output is
/// normalize(0.5 h + 0.5 mean(placeholders)), or normalize(h) without placeholders.
class MockBackend final : public EncoderBackend {
 public:
  explicit MockBackend(size_t dim = 64);
  std::string name() const override { return "mock"; }
  size_t dim() const override { return dim_; }
  Vec encode(const EncodeRequest& req) override;

 private:
  size_t dim_;
};

// Retriable failure talking to a remote backend.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Remote backend speaking the /v1/info + /v1/encode JSON protocol.
class HttpBackend final : public EncoderBackend {
 public:
  // endpoint: "http://host:port"; performs the /v1/info handshake.
  explicit HttpBackend(std::string endpoint, std::string pooling = "mean", int max_attempts = 3);
  std::string name() const override { return name_; }
  size_t dim() const override { return dim_; }
  std::string pooling() const override { return pooling_; }
  Vec encode(const EncodeRequest& req) override;

 private:
  std::string host_;
  int port_ = 80;
  std::string pooling_;
  int max_attempts_;
  std::string name_;
  size_t dim_ = 0;
};

/// Concurrent embedding cache with an optional append-only backing file.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  // Loads existing records from `path` (if present) and appends new ones to it.
  explicit EmbeddingCache(std::string path);

  static uint64_t key(std::string_view backend, const EncodeRequest& req);

  std::optional<Vec> get(uint64_t key) const;
  // First writer wins; returns the stored value.
  Vec put(uint64_t key, Vec value);
  size_t size() const;

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<uint64_t, Vec> entries_;
  std::string path_;
};

/// Routes requests through the cache and counts backend calls.
class Encoder {
 public:
  Encoder(EncoderBackend& backend, EmbeddingCache& cache) : backend_(backend), cache_(cache) {}

  struct Result {
    Vec vec;
    bool cache_hit;
  };
  Result encode(const EncodeRequest& req);

  EncoderBackend& backend() { return backend_; }
  size_t dim() const { return backend_.dim(); }
  uint64_t calls() const { return calls_.load(); }
  uint64_t cache_hits() const { return hits_.load(); }

 private:
  EncoderBackend& backend_;
  EmbeddingCache& cache_;
  std::atomic<uint64_t> calls_{0};
  std::atomic<uint64_t> hits_{0};
};

struct RelationKey {
  NodeIndex node;
  int hop;
  TypeId type;
  auto operator<=>(const RelationKey&) const = default;
};

/// Node and relation tokens for one prompt template, plus call accounting.
struct TokenTable {
  size_t d_llm = 0;
  TemplateId template_id = TemplateId::PretrainLink;
  std::unordered_map<NodeIndex, Vec> node_tokens;
  std::map<RelationKey, Vec> relation_tokens;
  // (target, hop) -> types present at that hop, ascending. Every tokenized
  // target has an entry for each hop 1..K, possibly empty.
  std::map<std::pair<NodeIndex, int>, std::vector<TypeId>> hop_types;
  int hops = 0;
  uint64_t call_count = 0;
  uint64_t cache_hits = 0;
  uint64_t node_calls = 0;
  uint64_t relation_calls = 0;
  std::map<NodeIndex, uint64_t> relation_calls_per_target;

  bool has_node_token(NodeIndex v) const { return node_tokens.count(v) > 0; }
  const Vec& node_token(NodeIndex v) const;
  const Vec& relation_token(NodeIndex v, int hop, TypeId t) const;
  // 1 (node token) + relation tokens held for this target.
  size_t stored_vectors(NodeIndex target) const;
  std::vector<NodeIndex> targets() const;

  void save(const std::string& path, const HeteroGraph& g) const;
  static TokenTable load(const std::string& path, const HeteroGraph& g);
};

Vec encode_text(Encoder& enc, std::string_view text);

Vec pooled_node_token(const HeteroGraph& g, NodeIndex t, const TokenTable& table);

// Returns whether the backend was actually called (false on a cache hit).
bool relation_token(Encoder& enc, NodeIndex s, int hop, TypeId t, TokenTable& table,
                    const HopTypeNeighborhood& nb, const PromptInstance& prompt);

struct TokenizeOptions {
  PathStatsConfig paths;
  size_t workers = 1;
  std::string prompt_dump_dir;  // empty: no dump
};

/// Fills node tokens that are missing (text encodings, then neighbor means for
/// textless nodes) and relation tokens for every (target, hop <= K, type present).
void tokenize_graph(Encoder& enc, const HeteroGraph& g, const std::vector<NodeIndex>& targets,
                    int K, TokenTable& table, const TokenizeOptions& opts = {});

}  // namespace ella
