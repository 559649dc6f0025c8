#pragma once

// Contrastive link pre-training of the whole model and frozen-backbone
// fine-tuning of a classification head.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ella/ellanet.hpp"
#include "ella/evalkit.hpp"

namespace ella {

struct RelationSamples {
  std::vector<LabeledPair> positives;
  std::vector<LabeledPair> negatives;
};

// Keyed by edge type index.
using EdgeSampleSet = std::map<int, RelationSamples>;

// Every edge as a positive, `ratio` corrupted negatives per positive.
EdgeSampleSet sample_edges(const HeteroGraph& g, size_t ratio, uint64_t seed);
EdgeSampleSet sample_negatives(const HeteroGraph& g, const std::map<int, std::vector<LabeledPair>>& positives,
                               size_t ratio, uint64_t seed);

// sigmoid((z_s W_τs) · (z_t W_τt)), row by row; zs and zt are N×d, result N×1.
Tensor similarity(const Tensor& zs, const Tensor& zt, const std::string& type_s, const std::string& type_t,
                  const ModelParams& p);

// Similarities of `pairs`, in input order, from the batched embeddings Z of `plan`.
Tensor pair_similarities(const HeteroGraph& g, const Tensor& Z, const ForwardPlan& plan,
                         const std::vector<LabeledPair>& pairs, const ModelParams& p);

// -Σ log sim(pos) - Σ log(1 - sim(neg)), sims clamped to [1e-12, 1 - 1e-12].
Tensor pretrain_loss(const Tensor& pos_sims, const Tensor& neg_sims);

struct PretrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  size_t max_epochs = 200;
  size_t patience = 30;
  size_t neg_ratio = 1;
  double val_fraction = 0.1;
  size_t max_pos_per_type = 0;  // 0: all edges
  std::string dump_dir;         // divergence dumps; empty: system temp dir

  std::string to_json_text() const;
  // Missing keys keep their defaults; "model" holds a ModelConfig object.
  static PretrainConfig from_json_text(const std::string& text);
};

struct PretrainResult {
  ModelParams params;  // best validation epoch
  std::vector<double> train_loss;  // per update
  std::vector<double> val_loss;    // entry 0: before any update
  size_t best_epoch = 0;
  size_t epochs_run = 0;
};

// Called once per evaluated epoch with the trace of that epoch's forward pass.
using EpochHook = std::function<void(size_t epoch, const ForwardTrace& trace)>;

// Full-batch Adam over all parameters; early stopping on validation loss.
// The table must hold tokens for every node of g.
PretrainResult pretrain(const HeteroGraph& g, const TokenTable& table, const PretrainConfig& cfg, uint64_t seed,
                        const EpochHook& hook = nullptr);

struct FinetuneConfig {
  std::vector<double> lrs{1e-2, 1e-3, 1e-4};
  size_t max_epochs = 500;
  size_t patience = 30;
};

struct LrTrial {
  double lr = 0.0;
  size_t best_epoch = 0;
  size_t epochs_run = 0;
  double val_loss = 0.0;
  double val_micro_f1 = 0.0;
};

struct FinetuneResult {
  ModelParams params;  // backbone tensors shared with the input, plus the head
  std::string node_type;
  size_t num_classes = 0;
  double chosen_lr = 0.0;
  std::vector<LrTrial> trials;
  double test_micro_f1 = 0.0;
  double test_macro_f1 = 0.0;
  std::vector<int> test_preds;
};

// Logits (N×C) of the head for `node_type`.
Tensor class_logits(const Tensor& Z, const ModelParams& p, const std::string& node_type);
// Mean cross-entropy of logits against class indices.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& golds);

FinetuneResult finetune(const HeteroGraph& g, const TokenTable& table, const Labels& labels, const NodeSplit& split,
                        const ModelParams& pretrained, const ModelConfig& mcfg, const FinetuneConfig& cfg,
                        uint64_t seed);

// Similarities for arbitrary pairs (embeddings computed for their endpoints).
std::vector<double> score_pairs(const HeteroGraph& g, const TokenTable& table, const ModelParams& p,
                                const ModelConfig& cfg, const std::vector<LabeledPair>& pairs);

// Checkpoint with the model config stored in its metadata under "model".
void save_model(const std::string& path, const ModelParams& p, const ModelConfig& cfg,
                const std::string& extra_json = "{}");
struct LoadedModel {
  ModelParams params;
  ModelConfig config;
  std::string metadata;
};
LoadedModel load_model(const std::string& path);

}  // namespace ella
