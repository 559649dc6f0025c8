#pragma once

// Metrics, split construction, efficiency profiling and attention export.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "ella/ellanet.hpp"
#include "ella/encoder.hpp"
#include "ella/hetgraph.hpp"

namespace ella {

// --- metrics ----------------------------------------------------------------

// Single-label multiclass F1. For macro_f1, num_classes = 0 infers max(label) + 1;
// a class absent from both preds and golds contributes 0 to the mean.
double micro_f1(const std::vector<int>& preds, const std::vector<int>& golds);
double macro_f1(const std::vector<int>& preds, const std::vector<int>& golds, size_t num_classes = 0);

// labels are 0/1. AUC counts tied positive/negative pairs as half; AP treats a
// block of tied scores as one threshold (no interpolation).
double auc(const std::vector<double>& scores, const std::vector<int>& labels);
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};
MeanStd mean_std(const std::vector<double>& xs);

// --- splits -----------------------------------------------------------------

enum class Task { NodeClassification, LinkPrediction };

struct NodeSplit {
  std::string node_type;
  std::vector<NodeIndex> train, val, test;
  std::vector<std::string> warnings;
};

struct LabeledPair {
  NodeIndex src = 0;
  NodeIndex dst = 0;
  int etype = 0;
  auto operator<=>(const LabeledPair&) const = default;
};

struct LinkPart {
  std::vector<LabeledPair> positives;
  std::vector<LabeledPair> negatives;
};

struct LinkSplit {
  LinkPart train, val, test;
  std::vector<LabeledPair> unused;  // the positives outside the 80% sample
};

struct SplitSpec {
  Task task = Task::NodeClassification;
  NodeSplit node;
  LinkSplit link;
};

// Per class of `node_type`: 100 train, 100 val, rest test.
NodeSplit build_node_split(const HeteroGraph& g, const Labels& labels, const std::string& node_type,
                           uint64_t seed, size_t per_class = 100);
// 80% of the edges split 8:1:1, two negatives per positive in every part.
LinkSplit build_link_split(const HeteroGraph& g, uint64_t seed);
SplitSpec build_splits(const HeteroGraph& g, const Labels& labels, Task task, uint64_t seed,
                       const std::string& node_type = "");

// Copy of g without the listed edges.
HeteroGraph remove_edges(const HeteroGraph& g, const std::vector<LabeledPair>& drop);

using PairSet = std::set<std::tuple<NodeIndex, NodeIndex, int>>;  // (min, max, etype)
PairSet::value_type pair_entry(const LabeledPair& p);

// Number of same-relation pairs that are not edges.
uint64_t relation_complement_size(const HeteroGraph& g, int etype);

// Negatives for `positives` (all of one relation type): each one replaces one
// endpoint of a positive, picked by a fair coin, with a uniform node of the
// same type; pairs that are edges of that relation in g, self pairs and pairs
// already in `taken` are rejected. Accepted pairs are added to `taken`.
std::vector<LabeledPair> corrupt_pairs(const HeteroGraph& g, const std::vector<LabeledPair>& positives,
                                       size_t ratio, std::mt19937_64& rng, PairSet* taken = nullptr);

// --- efficiency profile -----------------------------------------------------

struct ProfileRow {
  int K = 0;
  NodeIndex target = 0;
  uint64_t relation_requests = 0;  // prompts issued (backend calls + cache hits)
  uint64_t relation_calls = 0;     // backend calls
  uint64_t naive_walks = 0;        // sum over hops <= K of walk counts
  size_t stored_vectors = 0;       // 1 + relation tokens held
};

struct EfficiencyReport {
  std::vector<ProfileRow> rows;
  std::vector<std::pair<std::string, double>> phase_seconds;  // "K=2/tokenize", ...
  uint64_t total_calls = 0;
  bool cache_complete = false;  // no backend call was needed
  size_t num_node_types = 0;
  // Least-squares line through (K, mean stored vectors per target).
  double fit_slope = 0.0;
  double fit_intercept = 0.0;
  double fit_residual = 0.0;  // RMS residual relative to the mean stored count

  std::string rows_csv(const HeteroGraph& g) const;
  std::string summary_csv() const;
};

struct ProfileOptions {
  std::vector<NodeIndex> targets;  // empty: every node
  TemplateId template_id = TemplateId::PretrainLink;
  size_t workers = 1;
  PathStatsConfig paths;
};

// Tokenizes the targets for K = 1..max_K, each with a fresh table. With a
// shared `cache` (non-null) repeated prompts are served from it.
EfficiencyReport profile_run(const HeteroGraph& g, int max_K, EncoderBackend& backend,
                             EmbeddingCache* cache = nullptr, const ProfileOptions& opts = {});

// --- attention export -------------------------------------------------------

struct AlphaStat {
  std::string target_type;
  int hop = 0;
  std::string relation_type;
  size_t count = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct GammaStat {
  std::string target_type;
  int hop = 0;
  size_t count = 0;
  double mean = 0.0;
};

struct AttentionSummary {
  std::vector<AlphaStat> alpha;  // sorted by (target type, hop, relation type)
  std::vector<GammaStat> gamma;
};

// Throws when the trace holds no captured targets.
AttentionSummary summarize_attention(const HeteroGraph& g, const ForwardTrace& trace);

struct AttentionSeries {
  std::vector<std::pair<size_t, AttentionSummary>> epochs;  // ascending epoch
};

// Writes alpha.csv and gamma.csv (and alpha_series.csv / gamma_series.csv when
// `series` has epochs) into `dir`.
void export_attention(const std::string& dir, const AttentionSummary& summary,
                      const AttentionSeries* series = nullptr);

// Writes <output>.meta.json.
void write_run_metadata(const std::string& output_path, const std::string& json_text);

}  // namespace ella
