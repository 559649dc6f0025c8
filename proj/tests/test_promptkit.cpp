#include "doctest.h"

#include "ella/promptkit.hpp"
#include "fixtures.hpp"

using namespace ella;

namespace {

const std::string kPreamble =
    "Given a heterogeneous graph about an academic network, there are three types of nodes: paper, "
    "author, and organization. The relationships between different nodes include: [author writes paper], "
    "[paper cites paper], [author belongs to organization].";

}  // namespace

TEST_CASE("link prompt layout") {
  auto g = fx::acm_graph();
  const NodeIndex p0 = g.index("p0");
  auto p = build_relation_prompt(g.schema(), "paper", "author", 1, meta_path_profile(g, p0, 1),
                                 TemplateId::PretrainLink);
  CHECK(p.rendered_text ==
        kPreamble +
            " Given a paper [PH] and an author [PH], calculate the similarity based on these paths: "
            "paper-author (proportion of paths: 1.00). Steps: 1. Analyze relations based on path "
            "proportions and connection types. 2. Calculate the similarity (0-1) with justification.");
  CHECK(count_placeholders(p.rendered_text) == 2);
  CHECK(p.placeholder_roles == std::pair<TypeId, TypeId>{0, 1});
}

TEST_CASE("proportions are rounded to two decimals") {
  auto g = fx::acm_graph();
  // p0 at hop 2 reaches papers through authors (a0->p3, a2->p2) and through p3 (p3<-a0).
  auto prof = meta_path_profile(g, g.index("p0"), 2);
  auto p = build_relation_prompt(g.schema(), "paper", "paper", 2, prof, TemplateId::PretrainLink);
  auto lines = parse_path_lines(p.rendered_text);
  REQUIRE(lines.size() == p.path_lines.size());
  double total = 0;
  for (size_t i = 0; i < lines.size(); ++i) {
    CHECK(lines[i].pattern == p.path_lines[i].pattern);
    CHECK(lines[i].proportion == p.path_lines[i].proportion);
    total += lines[i].proportion;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(0.011));
}

TEST_CASE("path line parsing") {
  PathLine l{"author-paper-author", 0.33};
  CHECK(render_path_line(l) == "author-paper-author (proportion of paths: 0.33)");
  auto r = parse_path_line(render_path_line(l));
  CHECK(r.pattern == l.pattern);
  CHECK(r.proportion == 0.33);
  CHECK_THROWS_AS(parse_path_line("author-paper"), Error);
  CHECK_THROWS_AS(parse_path_line("a (proportion of paths: x)"), Error);
}

TEST_CASE("missing pattern falls back to a schema path at 0.00") {
  auto g = fx::acm_graph();
  // o0 has no organization at hop 2 other than itself.
  auto prof = meta_path_profile(g, g.index("o0"), 2);
  auto p = build_relation_prompt(g.schema(), "organization", "organization", 2, prof, TemplateId::PretrainLink);
  REQUIRE(p.path_lines.size() == 1);
  CHECK(p.path_lines[0].pattern == "organization-author-organization");
  CHECK(p.path_lines[0].proportion == 0.0);
  CHECK(p.rendered_text.find("Given an organization [PH] and an organization [PH]") != std::string::npos);
}

TEST_CASE("classification template") {
  auto g = fx::acm_graph();
  auto p = build_relation_prompt(g.schema(), "author", "paper", 1, meta_path_profile(g, g.index("a0"), 1),
                                 TemplateId::FinetuneClassify);
  const std::string steps =
      "Steps: 1. Analyze relations based on path proportions and connection types. 2. Classify the first "
      "author's primary research field (Database, Wireless Communication, or Data Mining) with justification.";
  CHECK(finetune_steps(g.schema(), "author") == steps);
  CHECK(p.rendered_text.size() > steps.size());
  CHECK(p.rendered_text.substr(p.rendered_text.size() - steps.size()) == steps);
  CHECK(p.rendered_text.find("classify the first author's primary research field") != std::string::npos);
  CHECK_THROWS_AS(build_relation_prompt(g.schema(), "organization", "author", 1,
                                        meta_path_profile(g, g.index("o0"), 1), TemplateId::FinetuneClassify),
                  Error);
}

TEST_CASE("placeholder binding checks arity and dimension") {
  auto g = fx::acm_graph();
  auto p = build_relation_prompt(g.schema(), "author", "paper", 1, meta_path_profile(g, g.index("a0"), 1),
                                 TemplateId::PretrainLink);
  CHECK_NOTHROW(bind_placeholders(p, {std::vector<double>(4), std::vector<double>(4)}, 4));
  CHECK_THROWS_WITH_AS(bind_placeholders(p, {std::vector<double>(4)}, 4), doctest::Contains("arity"), Error);
  CHECK_THROWS_AS(bind_placeholders(p, {std::vector<double>(4), std::vector<double>(3)}, 4), Error);
}

TEST_CASE("profile hop must match") {
  auto g = fx::acm_graph();
  CHECK_THROWS_AS(build_relation_prompt(g.schema(), "author", "paper", 2, meta_path_profile(g, g.index("a0"), 1),
                                        TemplateId::PretrainLink),
                  Error);
  CHECK(parse_template("finetune") == TemplateId::FinetuneClassify);
  CHECK(template_name(TemplateId::PretrainLink) == "pretrain_link");
  CHECK_THROWS_AS(parse_template("x"), Error);
}
