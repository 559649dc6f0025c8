#include "ella/promptkit.hpp"

#include <cctype>
#include <cstdlib>
#include <filesystem>

namespace ella {

namespace {

constexpr std::string_view kAnalyzeStep =
    "Steps: 1. Analyze relations based on path proportions and connection types. ";
constexpr std::string_view kLineOpen = " (proportion of paths: ";
constexpr std::string_view kPathsIntro = " based on these paths: ";

std::string article(std::string_view noun) {
  if (!noun.empty() && std::string_view("aeiouAEIOU").find(noun.front()) != std::string_view::npos)
    return "an";
  return "a";
}

std::string count_word(size_t n) {
  static const char* words[] = {"zero", "one", "two",   "three", "four", "five",
                                "six",  "seven", "eight", "nine",  "ten"};
  return n <= 10 ? words[n] : std::to_string(n);
}

// "a", "a and b", "a, b, and c"
std::string join_list(const std::vector<std::string>& items, std::string_view conj) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) {
    if (i > 0) {
      if (items.size() > 2) out += ",";
      out += " ";
      if (i + 1 == items.size()) {
        out += conj;
        out += " ";
      }
    }
    out += items[i];
  }
  return out;
}

std::string preamble(const SchemaDef& schema) {
  std::string out = "Given a heterogeneous graph";
  if (!schema.domain_blurb.empty()) out += " about " + schema.domain_blurb;
  const size_t n = schema.node_types.size();
  if (n == 1)
    out += ", there is one type of node: " + schema.node_types[0] + ".";
  else
    out += ", there are " + count_word(n) + " types of nodes: " + join_list(schema.node_types, "and") + ".";
  if (!schema.edge_types.empty()) {
    out += " The relationships between different nodes include: ";
    for (size_t i = 0; i < schema.edge_types.size(); ++i) {
      const auto& e = schema.edge_types[i];
      if (i) out += ", ";
      out += "[" + e.src + " " + e.name + " " + e.dst + "]";
    }
    out += ".";
  }
  return out;
}

// First schema-consistent type sequence of `hop` steps from src to dst, in
// lexicographic type-id order. Empty when none exists.
TypeSequence schema_pattern(const SchemaDef& schema, TypeId src, TypeId dst, int hop) {
  const size_t n = schema.node_types.size();
  std::vector<std::vector<bool>> linked(n, std::vector<bool>(n, false));
  for (const auto& e : schema.edge_types) {
    TypeId a = schema.node_type_index(e.src), b = schema.node_type_index(e.dst);
    linked[a][b] = linked[b][a] = true;
  }
  TypeSequence seq{src};
  auto rec = [&](auto&& self) -> bool {
    if (static_cast<int>(seq.size()) == hop + 1) return seq.back() == dst;
    for (size_t t = 0; t < n; ++t) {
      if (!linked[seq.back()][t]) continue;
      seq.push_back(static_cast<TypeId>(t));
      if (self(self)) return true;
      seq.pop_back();
    }
    return false;
  };
  if (rec(rec)) return seq;
  return {};
}

double round2(double p) { return std::strtod(format_fixed(p, 2).c_str(), nullptr); }

}  // namespace

std::string_view template_name(TemplateId t) {
  switch (t) {
    case TemplateId::PretrainLink:
      return "pretrain_link";
    case TemplateId::FinetuneClassify:
      return "finetune_classify";
  }
  return "unknown";
}

TemplateId parse_template(std::string_view name) {
  if (name == "pretrain_link" || name == "pretrain") return TemplateId::PretrainLink;
  if (name == "finetune_classify" || name == "finetune") return TemplateId::FinetuneClassify;
  throw Error("unknown template '" + std::string(name) + "'");
}

std::string finetune_steps(const SchemaDef& schema, std::string_view src_type) {
  return std::string(kAnalyzeStep) + "2. Classify the first " + std::string(src_type) +
         "'s primary " + schema.label_name + " (" + join_list(schema.labels_for(src_type), "or") +
         ") with justification.";
}

PromptInstance build_relation_prompt(const SchemaDef& schema, std::string_view src_type,
                                     std::string_view dst_type, int hop,
                                     const MetaPathProfile& profile, TemplateId task) {
  const TypeId src = schema.node_type_index(src_type);
  const TypeId dst = schema.node_type_index(dst_type);
  if (profile.hop != hop)
    throw Error("profile is for hop " + std::to_string(profile.hop) + ", prompt asked for hop " +
                std::to_string(hop));

  PromptInstance p;
  p.template_id = task;
  p.placeholder_roles = {src, dst};
  for (const auto& ps : profile.ending_in(dst)) {
    if (ps.types.front() != src)
      throw Error("profile pattern " + pattern_string(schema, ps.types) + " does not start at " +
                  std::string(src_type));
    p.path_lines.push_back({pattern_string(schema, ps.types), round2(ps.proportion)});
  }
  if (p.path_lines.empty()) {
    auto seq = schema_pattern(schema, src, dst, hop);
    if (seq.empty()) seq = {src, dst};
    p.path_lines.push_back({pattern_string(schema, seq), 0.0});
  }

  std::string lines;
  for (size_t i = 0; i < p.path_lines.size(); ++i) {
    if (i) lines += ", ";
    lines += render_path_line(p.path_lines[i]);
  }

  std::string text = preamble(schema);
  text += " Given " + article(src_type) + " " + std::string(src_type) + " " + std::string(kPlaceholder) +
          " and " + article(dst_type) + " " + std::string(dst_type) + " " + std::string(kPlaceholder) + ", ";
  if (task == TemplateId::PretrainLink) {
    text += "calculate the similarity";
    text += std::string(kPathsIntro) + lines + ". ";
    text += kPretrainSteps;
  } else {
    const auto& labels = schema.labels_for(src_type);
    for (const auto& l : labels)
      if (l.find(kPlaceholder) != std::string::npos) throw Error("class label contains [PH]");
    text += "classify the first " + std::string(src_type) + "'s primary " + schema.label_name + " (" +
            join_list(labels, "or") + ")";
    text += std::string(kPathsIntro) + lines + ". ";
    text += finetune_steps(schema, src_type);
  }
  p.rendered_text = std::move(text);
  return p;
}

BoundPrompt bind_placeholders(PromptInstance prompt, std::vector<std::vector<double>> vecs,
                              size_t d_llm) {
  const size_t markers = count_placeholders(prompt.rendered_text);
  if (vecs.size() != markers)
    throw Error("placeholder arity mismatch: " + std::to_string(markers) + " markers, " +
                std::to_string(vecs.size()) + " vectors");
  for (size_t i = 0; i < vecs.size(); ++i)
    if (vecs[i].size() != d_llm)
      throw Error("placeholder vector " + std::to_string(i) + " has dimension " +
                  std::to_string(vecs[i].size()) + ", expected " + std::to_string(d_llm));
  return BoundPrompt{std::move(prompt), std::move(vecs)};
}

std::string render_path_line(const PathLine& line) {
  return line.pattern + std::string(kLineOpen) + format_fixed(line.proportion, 2) + ")";
}

PathLine parse_path_line(std::string_view text) {
  auto pos = text.find(kLineOpen);
  if (pos == std::string_view::npos || text.empty() || text.back() != ')')
    throw Error("not a path line: '" + std::string(text) + "'");
  std::string num(text.substr(pos + kLineOpen.size(), text.size() - pos - kLineOpen.size() - 1));
  char* end = nullptr;
  double v = std::strtod(num.c_str(), &end);
  if (num.empty() || *end != '\0') throw Error("bad proportion in path line: '" + num + "'");
  return {std::string(text.substr(0, pos)), v};
}

std::vector<PathLine> parse_path_lines(std::string_view rendered) {
  auto start = rendered.find(kPathsIntro);
  if (start == std::string_view::npos) throw Error("prompt has no path section");
  start += kPathsIntro.size();
  auto stop = rendered.find(". Steps:", start);
  if (stop == std::string_view::npos) throw Error("prompt has no steps section");
  std::string_view section = rendered.substr(start, stop - start);
  std::vector<PathLine> out;
  while (!section.empty()) {
    auto cut = section.find("), ");
    std::string_view item = cut == std::string_view::npos ? section : section.substr(0, cut + 1);
    out.push_back(parse_path_line(item));
    if (cut == std::string_view::npos) break;
    section.remove_prefix(cut + 3);
  }
  return out;
}

size_t count_placeholders(std::string_view text) {
  size_t n = 0;
  for (auto pos = text.find(kPlaceholder); pos != std::string_view::npos;
       pos = text.find(kPlaceholder, pos + kPlaceholder.size()))
    ++n;
  return n;
}

void dump_prompt(const std::string& dir, std::string_view node_id, int hop,
                 std::string_view type, const PromptInstance& prompt) {
  namespace fs = std::filesystem;
  fs::path p = fs::path(dir) / std::string(node_id);
  fs::create_directories(p);
  write_text_file((p / ("hop" + std::to_string(hop) + "_" + std::string(type) + ".txt")).string(),
                  prompt.rendered_text + "\n");
}

}  // namespace ella
