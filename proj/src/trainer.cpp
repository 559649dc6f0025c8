#include "ella/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "json.hpp"

namespace ella {

using json = nlohmann::json;

namespace {

Tensor row_dots(const Tensor& a, const Tensor& b) {
  return matmul(mul(a, b), Tensor::from(a.cols(), 1, std::vector<double>(a.cols(), 1.0)));
}

ModelParams deep_copy(const ModelParams& p) {
  ModelParams out;
  for (const auto& [name, t] : p) {
    const auto v = t.values();
    out[name] = Tensor::from(t.rows(), t.cols(), {v.begin(), v.end()}, true);
  }
  return out;
}

std::vector<Tensor> values_of(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const auto& [_, t] : p) out.push_back(t);
  return out;
}

std::vector<LabeledPair> flatten(const EdgeSampleSet& s, bool positives) {
  std::vector<LabeledPair> out;
  for (const auto& [_, rs] : s) {
    const auto& src = positives ? rs.positives : rs.negatives;
    out.insert(out.end(), src.begin(), src.end());
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Edge samples

EdgeSampleSet sample_negatives(const HeteroGraph& g, const std::map<int, std::vector<LabeledPair>>& positives,
                               size_t ratio, uint64_t seed) {
  if (ratio < 1) throw Error("negative ratio must be at least 1");
  std::mt19937_64 rng(seed);
  EdgeSampleSet out;
  for (const auto& [etype, pos] : positives) {
    auto& rs = out[etype];
    rs.positives = pos;
    rs.negatives = corrupt_pairs(g, pos, ratio, rng);
  }
  return out;
}

EdgeSampleSet sample_edges(const HeteroGraph& g, size_t ratio, uint64_t seed) {
  std::map<int, std::vector<LabeledPair>> pos;
  for (const auto& e : g.edges()) pos[e.etype].push_back({e.src, e.dst, e.etype});
  return sample_negatives(g, pos, ratio, seed);
}

// ---------------------------------------------------------------------------
// Similarity and losses

Tensor similarity(const Tensor& zs, const Tensor& zt, const std::string& type_s, const std::string& type_t,
                  const ModelParams& p) {
  if (zs.rows() != zt.rows() || zs.cols() != zt.cols())
    throw Error("similarity: embeddings " + zs.shape_str() + " vs " + zt.shape_str());
  auto ws = p.find("sim." + type_s), wt = p.find("sim." + type_t);
  if (ws == p.end()) throw Error("no similarity projection for node type '" + type_s + "'");
  if (wt == p.end()) throw Error("no similarity projection for node type '" + type_t + "'");
  return sigmoid(row_dots(matmul(zs, ws->second), matmul(zt, wt->second)));
}

Tensor pair_similarities(const HeteroGraph& g, const Tensor& Z, const ForwardPlan& plan,
                         const std::vector<LabeledPair>& pairs, const ModelParams& p) {
  if (pairs.empty()) return Tensor::zeros(0, 1);
  std::map<std::pair<TypeId, TypeId>, std::vector<size_t>> groups;
  for (size_t i = 0; i < pairs.size(); ++i)
    groups[{g.type(pairs[i].src), g.type(pairs[i].dst)}].push_back(i);
  std::vector<Tensor> parts;
  std::vector<size_t> position(pairs.size());
  size_t row = 0;
  for (const auto& [types, idx] : groups) {
    std::vector<size_t> rs, rt;
    for (size_t i : idx) {
      rs.push_back(plan.row_of(pairs[i].src));
      rt.push_back(plan.row_of(pairs[i].dst));
      position[i] = row++;
    }
    const auto& names = g.schema().node_types;
    parts.push_back(similarity(select_rows(Z, rs), select_rows(Z, rt), names[static_cast<size_t>(types.first)],
                               names[static_cast<size_t>(types.second)], p));
  }
  Tensor all = parts.size() == 1 ? parts[0] : concat_rows(parts);
  return select_rows(all, position);
}

Tensor pretrain_loss(const Tensor& pos_sims, const Tensor& neg_sims) {
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  Tensor total = Tensor::scalar(0.0);
  if (pos_sims.size() > 0) total = add(total, sum(log(clamp(pos_sims, lo, hi))));
  if (neg_sims.size() > 0) total = add(total, sum(log(add_scalar(scale(clamp(neg_sims, lo, hi), -1.0), 1.0))));
  return scale(total, -1.0);
}

// ---------------------------------------------------------------------------
// Pre-training

std::string PretrainConfig::to_json_text() const {
  json j{{"model", json::parse(model.to_json_text())},
         {"lr", lr},
         {"max_epochs", max_epochs},
         {"patience", patience},
         {"neg_ratio", neg_ratio},
         {"val_fraction", val_fraction},
         {"max_pos_per_type", max_pos_per_type},
         {"dump_dir", dump_dir}};
  return j.dump();
}

PretrainConfig PretrainConfig::from_json_text(const std::string& text) {
  PretrainConfig c;
  try {
    auto j = json::parse(text);
    if (j.contains("model")) c.model = ModelConfig::from_json_text(j.at("model").dump());
    c.lr = j.value("lr", c.lr);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.neg_ratio = j.value("neg_ratio", c.neg_ratio);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.max_pos_per_type = j.value("max_pos_per_type", c.max_pos_per_type);
    c.dump_dir = j.value("dump_dir", c.dump_dir);
  } catch (const json::exception& e) {
    throw Error(std::string("bad pretrain config: ") + e.what());
  }
  if (c.lr < 0) throw Error("pretrain config: lr must be non-negative");
  if (c.val_fraction < 0 || c.val_fraction >= 1) throw Error("pretrain config: val_fraction must lie in [0, 1)");
  return c;
}

namespace {

[[noreturn]] void diverged(const PretrainConfig& cfg, const ModelParams& p, size_t epoch, uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.dump_dir.empty() ? fs::temp_directory_path() : fs::path(cfg.dump_dir);
  fs::create_directories(dir);
  const std::string path = (dir / ("ella_diverged_seed" + std::to_string(seed) + ".ckpt")).string();
  save_model(path, p, cfg.model, json{{"diverged_at_epoch", epoch}, {"seed", seed}}.dump());
  throw Error("pre-training diverged at epoch " + std::to_string(epoch) + " (non-finite loss); state written to " +
              path);
}

}  // namespace

PretrainResult pretrain(const HeteroGraph& g, const TokenTable& table, const PretrainConfig& cfg, uint64_t seed,
                        const EpochHook& hook) {
  cfg.model.validate();
  if (table.d_llm != cfg.model.d_llm)
    throw Error("token dimension " + std::to_string(table.d_llm) + " does not match model d_llm " +
                std::to_string(cfg.model.d_llm));
  if (g.num_edges() == 0) throw Error("pre-training needs at least one edge");

  std::vector<NodeIndex> nodes(g.num_nodes());
  for (NodeIndex v = 0; v < g.num_nodes(); ++v) nodes[v] = v;
  ForwardPlan plan = ForwardPlan::build(table, nodes, cfg.model.K);

  std::map<int, std::vector<LabeledPair>> by_type, train_pos, val_pos;
  for (const auto& e : g.edges()) by_type[e.etype].push_back({e.src, e.dst, e.etype});
  std::mt19937_64 rng(seed);
  for (auto& [etype, pos] : by_type) {
    shuffle(pos, rng);
    const auto n_val = static_cast<size_t>(std::floor(static_cast<double>(pos.size()) * cfg.val_fraction));
    if (n_val > 0) val_pos[etype].assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_val));
    auto& tr = train_pos[etype];
    tr.assign(pos.begin() + static_cast<std::ptrdiff_t>(n_val), pos.end());
    if (cfg.max_pos_per_type > 0 && tr.size() > cfg.max_pos_per_type) tr.resize(cfg.max_pos_per_type);
  }
  const EdgeSampleSet val = sample_negatives(g, val_pos, cfg.neg_ratio, splitmix64(seed ^ 0x76616c6964ULL));
  const auto val_p = flatten(val, true), val_n = flatten(val, false);

  PretrainResult res;
  ModelParams params = init_params(cfg.model, g.schema(), seed);
  Adam opt(values_of(params), AdamConfig{.lr = cfg.lr});
  ModelParams best;
  double best_val = 0.0;

  size_t epoch = 0;
  for (;; ++epoch) {
    ForwardTrace trace;
    Tensor Z = forward_batch(plan, params, cfg.model, hook ? &trace : nullptr);
    if (hook) hook(epoch, trace);

    const EdgeSampleSet train = sample_negatives(g, train_pos, cfg.neg_ratio, splitmix64(seed + epoch + 1));
    Tensor loss = pretrain_loss(pair_similarities(g, Z, plan, flatten(train, true), params),
                                pair_similarities(g, Z, plan, flatten(train, false), params));
    double val_loss = loss.item();
    if (!val_p.empty())
      val_loss = pretrain_loss(pair_similarities(g, Z, plan, val_p, params),
                               pair_similarities(g, Z, plan, val_n, params))
                     .item();
    if (!std::isfinite(loss.item()) || !std::isfinite(val_loss)) diverged(cfg, params, epoch, seed);

    res.val_loss.push_back(val_loss);
    if (epoch == 0 || val_loss < best_val) {
      best_val = val_loss;
      res.best_epoch = epoch;
      best = deep_copy(params);
    }
    if (epoch - res.best_epoch >= cfg.patience || epoch >= cfg.max_epochs) break;

    res.train_loss.push_back(loss.item());
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  res.epochs_run = epoch;
  res.params = std::move(best);
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

Tensor class_logits(const Tensor& Z, const ModelParams& p, const std::string& node_type) {
  return add(matmul(Z, param(p, "head." + node_type + ".w")), param(p, "head." + node_type + ".b"));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& golds) {
  if (logits.rows() != golds.size() || golds.empty())
    throw Error("cross_entropy: " + std::to_string(golds.size()) + " labels for logits " + logits.shape_str());
  std::vector<double> onehot(logits.size(), 0.0);
  for (size_t i = 0; i < golds.size(); ++i) {
    if (golds[i] < 0 || static_cast<size_t>(golds[i]) >= logits.cols()) throw Error("cross_entropy: bad label");
    onehot[i * logits.cols() + static_cast<size_t>(golds[i])] = 1.0;
  }
  Tensor picked = mul(log_softmax_rows(logits), Tensor::from(logits.rows(), logits.cols(), std::move(onehot)));
  return scale(sum(picked), -1.0 / static_cast<double>(golds.size()));
}

namespace {

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (size_t i = 0; i < logits.rows(); ++i) {
    size_t best = 0;
    for (size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

FinetuneResult finetune(const HeteroGraph& g, const TokenTable& table, const Labels& labels, const NodeSplit& split,
                        const ModelParams& pretrained, const ModelConfig& mcfg, const FinetuneConfig& cfg,
                        uint64_t seed) {
  const auto& schema = g.schema();
  if (!schema.class_labels.count(split.node_type))
    throw Error("node type '" + split.node_type + "' has no label vocabulary");
  const size_t C = schema.labels_for(split.node_type).size();
  if (split.train.empty()) throw Error("no labeled '" + split.node_type + "' nodes to train on");
  if (cfg.lrs.empty()) throw Error("fine-tuning needs at least one learning rate");

  std::vector<NodeIndex> nodes;
  std::vector<int> golds;
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (NodeIndex v : *part) {
      if (labels.at(v) < 0) throw Error("node '" + g.id(v) + "' in the split is unlabeled");
      nodes.push_back(v);
      golds.push_back(labels[v]);
    }
  // Embeddings from the frozen backbone, computed once.
  const Tensor Z = forward_batch(ForwardPlan::build(table, nodes, mcfg.K), pretrained, mcfg).detach();
  auto part_rows = [](size_t begin, size_t n) {
    std::vector<size_t> r(n);
    for (size_t i = 0; i < n; ++i) r[i] = begin + i;
    return r;
  };
  const size_t ntr = split.train.size(), nva = split.val.size(), nte = split.test.size();
  const Tensor Ztr = select_rows(Z, part_rows(0, ntr)).detach();
  const Tensor Zva = select_rows(Z, part_rows(ntr, nva)).detach();
  const Tensor Zte = select_rows(Z, part_rows(ntr + nva, nte)).detach();
  const std::vector<int> gtr(golds.begin(), golds.begin() + static_cast<std::ptrdiff_t>(ntr));
  const std::vector<int> gva(golds.begin() + static_cast<std::ptrdiff_t>(ntr),
                             golds.begin() + static_cast<std::ptrdiff_t>(ntr + nva));
  const std::vector<int> gte(golds.begin() + static_cast<std::ptrdiff_t>(ntr + nva), golds.end());
  const Tensor& Zmon = nva > 0 ? Zva : Ztr;
  const std::vector<int>& gmon = nva > 0 ? gva : gtr;

  FinetuneResult res;
  res.node_type = split.node_type;
  res.num_classes = C;
  const std::string wname = "head." + split.node_type + ".w", bname = "head." + split.node_type + ".b";
  std::optional<size_t> chosen;
  ModelParams chosen_head;
  for (double lr : cfg.lrs) {
    ModelParams p = pretrained;
    add_head(p, mcfg, split.node_type, C, seed);
    Adam opt({p[wname], p[bname]}, AdamConfig{.lr = lr});
    LrTrial trial;
    trial.lr = lr;
    ModelParams best;
    size_t epoch = 0;
    for (;; ++epoch) {
      const double vl = cross_entropy(class_logits(Zmon, p, split.node_type), gmon).item();
      if (!std::isfinite(vl)) throw Error("fine-tuning diverged (non-finite loss) at lr " + format_fixed(lr, 6));
      if (epoch == 0 || vl < trial.val_loss) {
        trial.val_loss = vl;
        trial.best_epoch = epoch;
        best = deep_copy({{wname, p[wname]}, {bname, p[bname]}});
      }
      if (epoch - trial.best_epoch >= cfg.patience || epoch >= cfg.max_epochs) break;
      Tensor loss = cross_entropy(class_logits(Ztr, p, split.node_type), gtr);
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    trial.epochs_run = epoch;
    trial.val_micro_f1 = micro_f1(argmax_rows(class_logits(Zmon, best, split.node_type)), gmon);
    res.trials.push_back(trial);
    const bool better = !chosen || trial.val_micro_f1 > res.trials[*chosen].val_micro_f1 ||
                        (trial.val_micro_f1 == res.trials[*chosen].val_micro_f1 &&
                         trial.val_loss < res.trials[*chosen].val_loss);
    if (better) {
      chosen = res.trials.size() - 1;
      chosen_head = std::move(best);
    }
  }
  res.chosen_lr = res.trials[*chosen].lr;
  res.params = pretrained;
  for (auto& [name, t] : chosen_head) res.params[name] = t;
  if (nte > 0) {
    res.test_preds = argmax_rows(class_logits(Zte, res.params, split.node_type));
    res.test_micro_f1 = micro_f1(res.test_preds, gte);
    res.test_macro_f1 = macro_f1(res.test_preds, gte, C);
  }
  return res;
}

std::vector<double> score_pairs(const HeteroGraph& g, const TokenTable& table, const ModelParams& p,
                                const ModelConfig& cfg, const std::vector<LabeledPair>& pairs) {
  if (pairs.empty()) return {};
  std::set<NodeIndex> ends;
  for (const auto& e : pairs) {
    ends.insert(e.src);
    ends.insert(e.dst);
  }
  ForwardPlan plan = ForwardPlan::build(table, {ends.begin(), ends.end()}, cfg.K);
  Tensor Z = forward_batch(plan, p, cfg);
  const Tensor sims = pair_similarities(g, Z, plan, pairs, p);
  return {sims.values().begin(), sims.values().end()};
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_model(const std::string& path, const ModelParams& p, const ModelConfig& cfg, const std::string& extra_json) {
  json meta = json::parse(extra_json.empty() ? "{}" : extra_json);
  if (!meta.is_object()) throw Error("checkpoint metadata must be a JSON object");
  meta["model"] = json::parse(cfg.to_json_text());
  save_checkpoint(path, p, meta.dump());
}

LoadedModel load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  LoadedModel m;
  try {
    auto meta = json::parse(ck.metadata);
    m.config = ModelConfig::from_json_text(meta.at("model").dump());
  } catch (const json::exception& e) {
    throw Error(path + ": checkpoint metadata lacks a model config (" + e.what() + ")");
  }
  m.params = std::move(ck.tensors);
  m.metadata = std::move(ck.metadata);
  return m;
}

}  // namespace ella
