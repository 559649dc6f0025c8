#pragma once

// Hop-level relation graph transformer.
//
// Per target s: the node token and the relation tokens of every hop are
// projected into model space; each hop's type tokens are mixed by the type
// block and pooled into a hop token with attention keyed by the projected node
// token (α); the sequence {h0, h1..hK} is mixed by the hop block and pooled
// into z = ĥ0 + Σ γ_j ĥj (γ over hops 1..K).
//
// Many targets are evaluated as one batch: token rows are laid out back to
// back and attention is restricted to segments (one per (target, hop) in the
// type block, one per target in the hop block).

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ella/encoder.hpp"
#include "ella/hetgraph.hpp"
#include "ella/tensor.hpp"

namespace ella {

struct ModelConfig {
  size_t d = 128;
  size_t heads = 4;
  size_t type_layers = 2;
  size_t hop_layers = 3;
  int K = 3;
  size_t d_llm = 64;

  size_t head_dim() const { return d / heads; }
  void validate() const;
  std::string to_json_text() const;
  static ModelConfig from_json_text(const std::string& text);
};

using ModelParams = NamedTensors;

// Backbone parameters: projection, both transformer stacks, hop readout and a
// similarity projection per node type. Deterministic in `seed`.
ModelParams init_params(const ModelConfig& cfg, const SchemaDef& schema, uint64_t seed);
// Adds (or replaces) the d×C classification head for `node_type`.
void add_head(ModelParams& params, const ModelConfig& cfg, const std::string& node_type,
              size_t num_classes, uint64_t seed);

const Tensor& param(const ModelParams& params, const std::string& name);
bool is_head_param(const std::string& name);
std::vector<Tensor> backbone_params(const ModelParams& params);

// --- building blocks (single sequence) -------------------------------------

// n×d_llm -> n×d
Tensor project(const Tensor& u, const ModelParams& p, const ModelConfig& cfg);

// Attention matrices of every layer and head, in evaluation order.
struct AttentionCapture {
  std::vector<std::shared_ptr<const std::vector<double>>> blocks;
  std::vector<Segments> segments;  // segmentation used by the matching entry
};

// Pre-LN layers {x + MHA(LN(x)); x + FFN(LN(x))} of the named stack ("type" or
// "hop"), attention restricted to `segs`.
Tensor transformer_stack(const Tensor& x, const ModelParams& p, const ModelConfig& cfg,
                         const std::string& block, const Segments& segs,
                         AttentionCapture* capture = nullptr);

Tensor type_block(const Tensor& U, const ModelParams& p, const ModelConfig& cfg,
                  AttentionCapture* capture = nullptr);
// α = softmax_j(u_s · û_j); returns Σ α_j û_j (1×d).
Tensor type_readout(const Tensor& u_s, const Tensor& U_hat, std::vector<double>* alpha = nullptr);
// H must hold cfg.K + 1 rows.
Tensor hop_block(const Tensor& H, const ModelParams& p, const ModelConfig& cfg,
                 AttentionCapture* capture = nullptr);
// γ = softmax_{j≥1}((ĥ0 ∥ ĥj) W); returns ĥ0 + Σ γ_j ĥj (1×d).
Tensor hop_readout(const Tensor& H_hat, const ModelParams& p, std::vector<double>* gamma = nullptr);

// --- batched forward --------------------------------------------------------

struct TargetTrace {
  NodeIndex target = 0;
  std::vector<int> hops;                  // hops that contributed a token
  std::vector<std::vector<TypeId>> types; // per contributing hop
  std::vector<std::vector<double>> alpha; // per contributing hop, aligned with types
  std::vector<double> gamma;              // aligned with hops
};

struct ForwardTrace {
  bool capture_attention = false;  // also keep every MHA matrix
  std::vector<TargetTrace> targets;
  AttentionCapture attention;
};

/// Token layout for a list of targets, reusable across parameter updates.
class ForwardPlan {
 public:
  // Throws when the table lacks the node token or a relation token of a target
  // for some hop 1..K, naming the (hop, type).
  static ForwardPlan build(const TokenTable& table, std::vector<NodeIndex> targets, int K);

  const std::vector<NodeIndex>& targets() const { return targets_; }
  size_t row_of(NodeIndex v) const;  // row of v in the batched output
  size_t relation_rows() const { return rel_.rows(); }

 private:
  friend Tensor forward_batch(const ForwardPlan&, const ModelParams&, const ModelConfig&,
                              ForwardTrace*);
  std::vector<NodeIndex> targets_;
  std::unordered_map<NodeIndex, size_t> row_;
  Tensor node_;  // T×d_llm
  Tensor rel_;   // N×d_llm
  Segments type_segs_;
  std::vector<size_t> seg_target_;  // target row per type segment
  std::vector<int> seg_hop_;
  std::vector<std::vector<TypeId>> seg_types_;
  std::vector<size_t> rel_target_;  // target row per relation row
  std::vector<size_t> h_order_;     // rows of [h0; hseg] forming H
  Segments hop_segs_;
};

// T×d final embeddings, one row per plan target.
Tensor forward_batch(const ForwardPlan& plan, const ModelParams& p, const ModelConfig& cfg,
                     ForwardTrace* trace = nullptr);

// 1×d embedding of a single target.
Tensor forward(NodeIndex s, const TokenTable& table, const ModelParams& p, const ModelConfig& cfg,
               ForwardTrace* trace = nullptr);

}  // namespace ella
