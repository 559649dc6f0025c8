// Command-line front end: graph ingestion, tokenization, training, evaluation,
// profiling and attention export. Every output file gets a <file>.meta.json.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "ella/encoder.hpp"
#include "ella/evalkit.hpp"
#include "ella/trainer.hpp"
#include "json.hpp"

using namespace ella;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct BackendOpts {
  std::string kind = "mock";
  std::string endpoint;
  size_t dim = 64;
  std::string pooling = "mean";
};

std::unique_ptr<EncoderBackend> make_backend(const BackendOpts& o) {
  if (o.kind == "mock") return std::make_unique<MockBackend>(o.dim);
  if (o.kind == "http") {
    if (o.endpoint.empty()) throw Error("--endpoint is required with --backend http");
    return std::make_unique<HttpBackend>(o.endpoint, o.pooling);
  }
  throw Error("unknown backend '" + o.kind + "' (mock|http)");
}

json graph_fingerprint(const HeteroGraph& g) {
  return {{"nodes", g.num_nodes()}, {"edges", g.num_edges()}, {"node_types", g.schema().node_types}};
}

void print_report(const LoadReport& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

HeteroGraph open_graph(const std::string& dir) {
  LoadReport rep;
  HeteroGraph g = load_graph_dir(dir, &rep);
  print_report(rep);
  return g;
}

// JSON Lines of {"id": ..., "vector": [...]}.
void load_node_tokens(const std::string& path, const HeteroGraph& g, TokenTable& table) {
  std::istringstream in(read_text_file(path));
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      table.node_tokens[g.index(j.at("id").get<std::string>())] = j.at("vector").get<Vec>();
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void save_node_tokens(const std::string& path, const HeteroGraph& g,
                      const std::vector<std::optional<Vec>>& toks) {
  std::ostringstream out;
  for (NodeIndex v = 0; v < g.num_nodes(); ++v)
    if (toks[v]) out << json{{"id", g.id(v)}, {"vector", *toks[v]}}.dump() << "\n";
  write_text_file(path, out.str());
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  for (const auto& n : j.at("node_types"))
    c.node_types.push_back({n.at("name").get<std::string>(), n.at("count").get<size_t>(), n.value("has_text", true)});
  for (const auto& e : j.at("edge_types"))
    c.edge_types.push_back({e.at("name").get<std::string>(), e.at("src").get<std::string>(),
                            e.at("dst").get<std::string>(), e.value("p_intra", 0.0), e.value("p_inter", 0.0)});
  c.num_classes = j.value("num_classes", c.num_classes);
  c.domain_blurb = j.value("domain_blurb", c.domain_blurb);
  c.label_name = j.value("label_name", c.label_name);
  return c;
}

std::vector<LabeledPair> read_pairs_csv(const std::string& path, const HeteroGraph& g,
                                        std::vector<int>* labels, std::vector<std::string>* parts) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);  // header
  std::vector<LabeledPair> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() < 5) throw Error(path + ": malformed row '" + line + "'");
    out.push_back({g.index(f[1]), g.index(f[2]), g.schema().edge_type_index(f[3])});
    if (parts) parts->push_back(f[0]);
    if (labels) labels->push_back(std::stoi(f[4]));
  }
  return out;
}

std::string pairs_csv(const HeteroGraph& g, const LinkSplit& s) {
  std::ostringstream os;
  os << "part,src,dst,etype,label\n";
  auto emit = [&](const char* part, const std::vector<LabeledPair>& v, int label) {
    for (const auto& p : v)
      os << part << ',' << csv_escape(g.id(p.src)) << ',' << csv_escape(g.id(p.dst)) << ','
         << csv_escape(g.schema().edge_types[static_cast<size_t>(p.etype)].name) << ',' << label << '\n';
  };
  emit("train", s.train.positives, 1);
  emit("train", s.train.negatives, 0);
  emit("val", s.val.positives, 1);
  emit("val", s.val.negatives, 0);
  emit("test", s.test.positives, 1);
  emit("test", s.test.negatives, 0);
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ella: relation-token graph transformer toolkit"};
  app.require_subcommand(1);

  // ingest
  std::string nodes_f, edges_f, schema_f, out_dir;
  auto* ingest = app.add_subcommand("ingest", "Validate JSON Lines nodes/edges against a schema and store a graph");
  ingest->add_option("--nodes", nodes_f, "nodes.jsonl")->required();
  ingest->add_option("--edges", edges_f, "edges.jsonl")->required();
  ingest->add_option("--schema", schema_f, "schema.json")->required();
  ingest->add_option("--out", out_dir, "output graph directory")->required();

  // synth
  std::string synth_cfg;
  uint64_t seed = 0;
  size_t planted_dim = 0;
  double planted_sigma = 0.5;
  auto* synth = app.add_subcommand("synth", "Generate a planted-partition graph with labels");
  synth->add_option("--config", synth_cfg, "generator JSON")->required();
  synth->add_option("--seed", seed);
  synth->add_option("--out", out_dir)->required();
  synth->add_option("--planted-dim", planted_dim, "also write class-correlated node tokens of this dimension");
  synth->add_option("--planted-sigma", planted_sigma);

  // tokenize
  std::string graph_dir, tokens_f, cache_f, template_s = "pretrain", node_tokens_f, dump_dir;
  int hops = 3;
  size_t workers = 1;
  BackendOpts bo;
  auto* tokenize = app.add_subcommand("tokenize", "Build node and relation tokens");
  tokenize->add_option("--graph", graph_dir)->required();
  tokenize->add_option("--backend", bo.kind, "mock|http");
  tokenize->add_option("--endpoint", bo.endpoint);
  tokenize->add_option("--dim", bo.dim, "mock backend dimension");
  tokenize->add_option("--pooling", bo.pooling, "mean|last");
  tokenize->add_option("--hops", hops);
  tokenize->add_option("--template", template_s, "pretrain|finetune");
  tokenize->add_option("--cache", cache_f, "persistent embedding cache file");
  tokenize->add_option("--out", tokens_f, "token table file (default <graph>/tokens_<template>.bin)");
  tokenize->add_option("--node-tokens", node_tokens_f, "preset node tokens (JSON Lines id/vector)");
  tokenize->add_option("--workers", workers);
  tokenize->add_option("--dump-prompts", dump_dir, "write every rendered prompt under this directory");

  // pretrain
  std::string config_f, ckpt_f, attention_dir;
  auto* pre = app.add_subcommand("pretrain", "Contrastive pre-training of the full model");
  pre->add_option("--graph", graph_dir)->required();
  pre->add_option("--tokens", tokens_f)->required();
  pre->add_option("--config", config_f, "pretrain config JSON");
  pre->add_option("--seed", seed);
  pre->add_option("--out", ckpt_f)->required();
  pre->add_option("--attention-dir", attention_dir, "write per-epoch attention series here");

  // finetune
  std::string labels_f, target_type, ft_out;
  uint64_t splits_seed = 0;
  auto* ft = app.add_subcommand("finetune", "Train a classification head on the frozen backbone");
  ft->add_option("--graph", graph_dir)->required();
  ft->add_option("--tokens", tokens_f)->required();
  ft->add_option("--ckpt", ckpt_f)->required();
  ft->add_option("--labels", labels_f)->required();
  ft->add_option("--target-type", target_type)->required();
  ft->add_option("--seed", seed);
  ft->add_option("--splits-seed", splits_seed);
  ft->add_option("--out", ft_out, "output checkpoint (default <ckpt>.<type>.ft)");

  // split
  auto* split = app.add_subcommand("split", "Hold out link-prediction pairs and write the training graph");
  split->add_option("--graph", graph_dir)->required();
  split->add_option("--seed", splits_seed);
  split->add_option("--out", out_dir)->required();

  // evaluate
  std::string task = "node", out_f, pairs_f;
  auto* ev = app.add_subcommand("evaluate", "Score the test split of a node or link task");
  ev->add_option("--task", task, "node|link");
  ev->add_option("--ckpt", ckpt_f)->required();
  ev->add_option("--splits-seed", splits_seed);
  ev->add_option("--out", out_f)->required();
  ev->add_option("--graph", graph_dir)->required();
  ev->add_option("--tokens", tokens_f)->required();
  ev->add_option("--labels", labels_f, "node task labels");
  ev->add_option("--target-type", target_type, "node task type");
  ev->add_option("--pairs", pairs_f, "link task pairs.csv written by split");

  // profile
  std::string profile_targets;
  auto* prof = app.add_subcommand("profile", "Backend call and memory accounting for K = 1..hops");
  prof->add_option("--graph", graph_dir)->required();
  prof->add_option("--hops", hops);
  prof->add_option("--out", out_f)->required();
  prof->add_option("--backend", bo.kind);
  prof->add_option("--endpoint", bo.endpoint);
  prof->add_option("--dim", bo.dim);
  prof->add_option("--cache", cache_f);
  prof->add_option("--targets", profile_targets, "comma-separated node ids (default: all)");

  // export-attention
  auto* ex = app.add_subcommand("export-attention", "Attention statistics of a checkpoint");
  ex->add_option("--ckpt", ckpt_f)->required();
  ex->add_option("--out", out_dir)->required();
  ex->add_option("--graph", graph_dir)->required();
  ex->add_option("--tokens", tokens_f)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      LoadReport rep;
      HeteroGraph g = load_graph(nodes_f, edges_f, schema_f, &rep);
      print_report(rep);
      save_graph(g, out_dir);
      json meta{{"graph", graph_fingerprint(g)},
                {"duplicate_edges", rep.duplicate_edges},
                {"self_loops", rep.self_loops},
                {"type_counts", g.type_counts()}};
      write_run_metadata(out_dir + "/nodes.jsonl", meta.dump(2));
      std::cout << "nodes " << g.num_nodes() << " edges " << g.num_edges() << "\n";
    } else if (*synth) {
      SynthConfig sc = synth_config_from_json(json::parse(read_text_file(synth_cfg)));
      SynthResult r = synth_generate(sc, seed);
      save_graph(r.graph, out_dir);
      save_labels(out_dir + "/labels.jsonl", r.graph, r.labels);
      json meta{{"graph", graph_fingerprint(r.graph)}, {"seed", seed}};
      if (planted_dim > 0) {
        auto toks = planted_node_tokens(r.graph, r.labels, sc.num_classes, planted_dim, planted_sigma, seed);
        save_node_tokens(out_dir + "/node_tokens.jsonl", r.graph, toks);
        meta["planted"] = {{"dim", planted_dim}, {"sigma", planted_sigma}};
      }
      write_run_metadata(out_dir + "/nodes.jsonl", meta.dump(2));
      std::cout << "nodes " << r.graph.num_nodes() << " edges " << r.graph.num_edges() << "\n";
    } else if (*tokenize) {
      HeteroGraph g = open_graph(graph_dir);
      auto backend = make_backend(bo);
      std::unique_ptr<EmbeddingCache> cache =
          cache_f.empty() ? std::make_unique<EmbeddingCache>() : std::make_unique<EmbeddingCache>(cache_f);
      Encoder enc(*backend, *cache);
      TokenTable table;
      table.template_id = parse_template(template_s);
      table.d_llm = backend->dim();
      if (!node_tokens_f.empty()) load_node_tokens(node_tokens_f, g, table);
      std::vector<NodeIndex> targets(g.num_nodes());
      for (NodeIndex v = 0; v < g.num_nodes(); ++v) targets[v] = v;
      TokenizeOptions opts;
      opts.workers = workers;
      opts.prompt_dump_dir = dump_dir;
      const auto t0 = std::chrono::steady_clock::now();
      tokenize_graph(enc, g, targets, hops, table, opts);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (tokens_f.empty()) tokens_f = graph_dir + "/tokens_" + std::string(template_name(table.template_id)) + ".bin";
      table.save(tokens_f, g);
      json meta{{"graph", graph_fingerprint(g)},
                {"backend", backend->name()},
                {"pooling", backend->pooling()},
                {"d_llm", table.d_llm},
                {"hops", hops},
                {"template", template_name(table.template_id)},
                {"backend_calls", table.call_count},
                {"node_calls", table.node_calls},
                {"relation_calls", table.relation_calls},
                {"cache_hits", table.cache_hits},
                {"seconds", secs}};
      write_run_metadata(tokens_f, meta.dump(2));
      std::cout << "backend_calls " << table.call_count << " cache_hits " << table.cache_hits << " relation_tokens "
                << table.relation_tokens.size() << "\n";
    } else if (*pre) {
      HeteroGraph g = open_graph(graph_dir);
      TokenTable table = TokenTable::load(tokens_f, g);
      PretrainConfig cfg = config_f.empty() ? PretrainConfig{} : PretrainConfig::from_json_text(read_text_file(config_f));
      cfg.model.d_llm = table.d_llm;
      cfg.model.K = std::min(cfg.model.K, table.hops);
      AttentionSeries series;
      EpochHook hook;
      if (!attention_dir.empty())
        hook = [&](size_t epoch, const ForwardTrace& tr) { series.epochs.emplace_back(epoch, summarize_attention(g, tr)); };
      const auto t0 = std::chrono::steady_clock::now();
      PretrainResult r = pretrain(g, table, cfg, seed, hook);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      json meta{{"config", json::parse(cfg.to_json_text())},
                {"seed", seed},
                {"epochs_run", r.epochs_run},
                {"best_epoch", r.best_epoch},
                {"val_loss", r.val_loss},
                {"train_loss", r.train_loss},
                {"template", template_name(table.template_id)},
                {"seconds", secs}};
      save_model(ckpt_f, r.params, cfg.model, json{{"seed", seed}, {"stage", "pretrain"}}.dump());
      meta["content_hash"] = hex64(content_hash(r.params));
      write_run_metadata(ckpt_f, meta.dump(2));
      if (!attention_dir.empty()) {
        auto last = series.epochs.back().second;
        export_attention(attention_dir, last, &series);
        write_run_metadata(attention_dir + "/alpha.csv", json{{"checkpoint", ckpt_f}, {"epochs", series.epochs.size()}}.dump(2));
      }
      std::cout << "epochs " << r.epochs_run << " best_epoch " << r.best_epoch << " val_loss "
                << format_fixed(r.val_loss[r.best_epoch], 6) << " hash " << hex64(content_hash(r.params)) << "\n";
    } else if (*ft) {
      HeteroGraph g = open_graph(graph_dir);
      TokenTable table = TokenTable::load(tokens_f, g);
      LoadedModel m = load_model(ckpt_f);
      Labels labels = load_labels(labels_f, g);
      NodeSplit sp = build_node_split(g, labels, target_type, splits_seed);
      for (const auto& w : sp.warnings) std::cerr << "warning: " << w << "\n";
      FinetuneResult r = finetune(g, table, labels, sp, m.params, m.config, FinetuneConfig{}, seed);
      if (ft_out.empty()) ft_out = ckpt_f + "." + target_type + ".ft";
      save_model(ft_out, r.params, m.config,
                 json{{"seed", seed}, {"stage", "finetune"}, {"target_type", target_type}}.dump());
      auto not_head = [](const std::string& n) { return !is_head_param(n); };
      json trials = json::array();
      for (const auto& t : r.trials)
        trials.push_back({{"lr", t.lr}, {"best_epoch", t.best_epoch}, {"epochs_run", t.epochs_run},
                          {"val_loss", t.val_loss}, {"val_micro_f1", t.val_micro_f1}});
      json meta{{"seed", seed},
                {"splits_seed", splits_seed},
                {"target_type", target_type},
                {"chosen_lr", r.chosen_lr},
                {"trials", trials},
                {"test_micro_f1", r.test_micro_f1},
                {"test_macro_f1", r.test_macro_f1},
                {"backbone_hash_before", hex64(content_hash(m.params, not_head))},
                {"backbone_hash_after", hex64(content_hash(r.params, not_head))}};
      write_run_metadata(ft_out, meta.dump(2));
      std::cout << "lr " << r.chosen_lr << " test_micro_f1 " << format_fixed(r.test_micro_f1, 4)
                << " test_macro_f1 " << format_fixed(r.test_macro_f1, 4) << "\n";
    } else if (*split) {
      HeteroGraph g = open_graph(graph_dir);
      LinkSplit s = build_link_split(g, splits_seed);
      std::vector<LabeledPair> held = s.val.positives;
      held.insert(held.end(), s.test.positives.begin(), s.test.positives.end());
      HeteroGraph train = remove_edges(g, held);
      save_graph(train, out_dir + "/graph");
      if (fs::exists(graph_dir + "/labels.jsonl")) fs::copy_file(graph_dir + "/labels.jsonl", out_dir + "/graph/labels.jsonl", fs::copy_options::overwrite_existing);
      write_text_file(out_dir + "/pairs.csv", pairs_csv(g, s));
      json meta{{"seed", splits_seed},
                {"source", graph_fingerprint(g)},
                {"train_graph_edges", train.num_edges()},
                {"train", {s.train.positives.size(), s.train.negatives.size()}},
                {"val", {s.val.positives.size(), s.val.negatives.size()}},
                {"test", {s.test.positives.size(), s.test.negatives.size()}}};
      write_run_metadata(out_dir + "/pairs.csv", meta.dump(2));
      std::cout << "train " << s.train.positives.size() << " val " << s.val.positives.size() << " test "
                << s.test.positives.size() << "\n";
    } else if (*ev) {
      HeteroGraph g = open_graph(graph_dir);
      TokenTable table = TokenTable::load(tokens_f, g);
      LoadedModel m = load_model(ckpt_f);
      std::ostringstream os;
      json meta{{"task", task}, {"checkpoint", ckpt_f}, {"splits_seed", splits_seed}};
      if (task == "node") {
        if (labels_f.empty() || target_type.empty()) throw Error("node evaluation needs --labels and --target-type");
        Labels labels = load_labels(labels_f, g);
        NodeSplit sp = build_node_split(g, labels, target_type, splits_seed);
        if (sp.test.empty()) throw Error("the split has no test nodes");
        Tensor Z = forward_batch(ForwardPlan::build(table, sp.test, m.config.K), m.params, m.config);
        Tensor logits = class_logits(Z, m.params, target_type);
        std::vector<int> preds, golds;
        const auto& vocab = g.schema().labels_for(target_type);
        os << "id,gold,pred\n";
        for (size_t i = 0; i < sp.test.size(); ++i) {
          size_t best = 0;
          for (size_t c = 1; c < logits.cols(); ++c)
            if (logits.at(i, c) > logits.at(i, best)) best = c;
          preds.push_back(static_cast<int>(best));
          golds.push_back(labels[sp.test[i]]);
          os << csv_escape(g.id(sp.test[i])) << ',' << csv_escape(vocab[golds.back()]) << ',' << csv_escape(vocab[best]) << '\n';
        }
        meta["micro_f1"] = micro_f1(preds, golds);
        meta["macro_f1"] = macro_f1(preds, golds, vocab.size());
        std::cout << "micro_f1 " << format_fixed(meta["micro_f1"].get<double>(), 4) << " macro_f1 "
                  << format_fixed(meta["macro_f1"].get<double>(), 4) << "\n";
      } else if (task == "link") {
        if (pairs_f.empty()) throw Error("link evaluation needs --pairs (written by `split`)");
        std::vector<int> lab;
        std::vector<std::string> parts;
        auto pairs = read_pairs_csv(pairs_f, g, &lab, &parts);
        auto scores = score_pairs(g, table, m.params, m.config, pairs);
        os << "part,src,dst,etype,label,score\n";
        std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_part;
        for (size_t i = 0; i < pairs.size(); ++i) {
          os << parts[i] << ',' << csv_escape(g.id(pairs[i].src)) << ',' << csv_escape(g.id(pairs[i].dst)) << ','
             << csv_escape(g.schema().edge_types[static_cast<size_t>(pairs[i].etype)].name) << ',' << lab[i] << ','
             << format_fixed(scores[i], 9) << '\n';
          by_part[parts[i]].first.push_back(scores[i]);
          by_part[parts[i]].second.push_back(lab[i]);
        }
        for (const auto& [part, sl] : by_part) {
          meta[part] = {{"auc", auc(sl.first, sl.second)}, {"ap", average_precision(sl.first, sl.second)}};
          std::cout << part << " auc " << format_fixed(meta[part]["auc"].get<double>(), 4) << " ap "
                    << format_fixed(meta[part]["ap"].get<double>(), 4) << "\n";
        }
      } else {
        throw Error("unknown task '" + task + "' (node|link)");
      }
      write_text_file(out_f, os.str());
      write_run_metadata(out_f, meta.dump(2));
    } else if (*prof) {
      HeteroGraph g = open_graph(graph_dir);
      auto backend = make_backend(bo);
      std::unique_ptr<EmbeddingCache> cache = cache_f.empty() ? nullptr : std::make_unique<EmbeddingCache>(cache_f);
      ProfileOptions opts;
      if (!profile_targets.empty()) {
        std::stringstream ss(profile_targets);
        std::string id;
        while (std::getline(ss, id, ',')) opts.targets.push_back(g.index(id));
      }
      EfficiencyReport rep = profile_run(g, hops, *backend, cache.get(), opts);
      write_text_file(out_f, rep.rows_csv(g));
      const std::string summary_f = out_f + ".summary.csv";
      write_text_file(summary_f, rep.summary_csv());
      json meta{{"graph", graph_fingerprint(g)}, {"hops", hops}, {"backend", backend->name()},
                {"total_calls", rep.total_calls}, {"cache_complete", rep.cache_complete},
                {"fit_slope", rep.fit_slope}, {"fit_residual", rep.fit_residual}};
      write_run_metadata(out_f, meta.dump(2));
      std::cout << "total_calls " << rep.total_calls << (rep.cache_complete ? " cache-complete" : "") << "\n";
    } else if (*ex) {
      HeteroGraph g = open_graph(graph_dir);
      TokenTable table = TokenTable::load(tokens_f, g);
      LoadedModel m = load_model(ckpt_f);
      std::vector<NodeIndex> nodes(g.num_nodes());
      for (NodeIndex v = 0; v < g.num_nodes(); ++v) nodes[v] = v;
      ForwardTrace trace;
      forward_batch(ForwardPlan::build(table, nodes, m.config.K), m.params, m.config, &trace);
      export_attention(out_dir, summarize_attention(g, trace));
      write_run_metadata(out_dir + "/alpha.csv", json{{"checkpoint", ckpt_f}, {"targets", nodes.size()}}.dump(2));
      std::cout << "wrote " << out_dir << "/alpha.csv and gamma.csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
