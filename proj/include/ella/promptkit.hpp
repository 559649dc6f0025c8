#pragma once

// Relation prompts: schema preamble, the two-entity sentence with `[PH]`
// placeholders, per-pattern path lines and the stage's chain-of-thought steps.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ella/hetgraph.hpp"
#include "ella/pathstats.hpp"

namespace ella {

enum class TemplateId { PretrainLink, FinetuneClassify };

std::string_view template_name(TemplateId t);
// Accepts "pretrain_link"/"pretrain" and "finetune_classify"/"finetune".
TemplateId parse_template(std::string_view name);

inline constexpr std::string_view kPlaceholder = "[PH]";

inline constexpr std::string_view kPretrainSteps =
    "Steps: 1. Analyze relations based on path proportions and connection types. "
    "2. Calculate the similarity (0-1) with justification.";

struct PathLine {
  std::string pattern;
  double proportion = 0.0;  // already rounded to 2 decimals
};

struct PromptInstance {
  TemplateId template_id = TemplateId::PretrainLink;
  std::string rendered_text;
  std::pair<TypeId, TypeId> placeholder_roles{0, 0};
  std::vector<PathLine> path_lines;
};

struct BoundPrompt {
  PromptInstance prompt;
  std::vector<std::vector<double>> placeholder_vectors;
};

PromptInstance build_relation_prompt(const SchemaDef& schema, std::string_view src_type,
                                     std::string_view dst_type, int hop,
                                     const MetaPathProfile& profile, TemplateId task);

BoundPrompt bind_placeholders(PromptInstance prompt, std::vector<std::vector<double>> vecs,
                              size_t d_llm);

std::string render_path_line(const PathLine& line);
PathLine parse_path_line(std::string_view text);
// Recovers the path lines from a rendered prompt.
std::vector<PathLine> parse_path_lines(std::string_view rendered);

size_t count_placeholders(std::string_view text);

// The classification steps sentence for a node type's label vocabulary.
std::string finetune_steps(const SchemaDef& schema, std::string_view src_type);

// Writes <dir>/<node-id>/hop<i>_<type>.txt.
void dump_prompt(const std::string& dir, std::string_view node_id, int hop,
                 std::string_view type, const PromptInstance& prompt);

}  // namespace ella
