#include "ella/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace ella {

// ---------------------------------------------------------------------------
// Metrics

namespace {

void check_lengths(const char* what, size_t a, size_t b) {
  if (a != b) throw Error(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0) throw Error(std::string(what) + ": empty input");
}

void check_binary(const char* what, const std::vector<double>& scores, const std::vector<int>& labels) {
  check_lengths(what, scores.size(), labels.size());
  size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error(std::string(what) + ": labels must be 0 or 1");
    pos += static_cast<size_t>(l);
  }
  if (pos == 0 || pos == labels.size())
    throw Error(std::string(what) + ": needs at least one positive and one negative");
  for (double s : scores)
    if (!std::isfinite(s)) throw Error(std::string(what) + ": non-finite score");
}

}  // namespace

double micro_f1(const std::vector<int>& preds, const std::vector<int>& golds) {
  check_lengths("micro_f1", preds.size(), golds.size());
  // Summed over classes, every miss is one false positive and one false negative.
  size_t tp = 0;
  for (size_t i = 0; i < preds.size(); ++i) tp += preds[i] == golds[i];
  const double fp = static_cast<double>(preds.size() - tp);
  return 2.0 * static_cast<double>(tp) / (2.0 * static_cast<double>(tp) + 2.0 * fp);
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& golds, size_t num_classes) {
  check_lengths("macro_f1", preds.size(), golds.size());
  if (num_classes == 0) {
    int mx = 0;
    for (size_t i = 0; i < preds.size(); ++i) mx = std::max({mx, preds[i], golds[i]});
    num_classes = static_cast<size_t>(mx) + 1;
  }
  std::vector<double> tp(num_classes), fp(num_classes), fn(num_classes);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || golds[i] < 0 || static_cast<size_t>(preds[i]) >= num_classes ||
        static_cast<size_t>(golds[i]) >= num_classes)
      throw Error("macro_f1: label outside the vocabulary");
    if (preds[i] == golds[i]) {
      tp[preds[i]] += 1;
    } else {
      fp[preds[i]] += 1;
      fn[golds[i]] += 1;
    }
  }
  double total = 0.0;
  for (size_t c = 0; c < num_classes; ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    total += denom > 0 ? 2 * tp[c] / denom : 0.0;
  }
  return total / static_cast<double>(num_classes);
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary("auc", scores, labels);
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with mid-ranks for ties.
  double rank_sum = 0.0, pos = 0.0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum += mid;
        pos += 1;
      }
    i = j;
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary("average_precision", scores, labels);
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  const double total_pos = std::accumulate(labels.begin(), labels.end(), 0.0);
  double tp = 0.0, ap = 0.0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    double block_pos = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) block_pos += labels[order[j++]];
    tp += block_pos;
    ap += (tp / static_cast<double>(j)) * (block_pos / total_pos);
    i = j;
  }
  return ap;
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(var / static_cast<double>(xs.size()));
  return r;
}

// ---------------------------------------------------------------------------
// Splits

NodeSplit build_node_split(const HeteroGraph& g, const Labels& labels, const std::string& node_type,
                           uint64_t seed, size_t per_class) {
  if (labels.size() != g.num_nodes()) throw Error("labels do not cover the graph");
  const TypeId t = g.schema().node_type_index(node_type);
  const auto& vocab = g.schema().labels_for(node_type);
  std::vector<std::vector<NodeIndex>> by_class(vocab.size());
  for (NodeIndex v : g.nodes_of_type(t))
    if (labels[v] >= 0) by_class.at(static_cast<size_t>(labels[v])).push_back(v);
  NodeSplit split;
  split.node_type = node_type;
  std::mt19937_64 rng(seed);
  for (size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) throw Error("class '" + vocab[c] + "' of " + node_type + " has no labeled nodes");
    shuffle(members, rng);
    size_t n_train = per_class, n_val = per_class;
    if (members.size() < 2 * per_class) {
      n_train = members.size() / 2;
      n_val = members.size() - n_train;
      split.warnings.push_back("class '" + vocab[c] + "' has only " + std::to_string(members.size()) +
                               " labeled nodes; using " + std::to_string(n_train) + " train / " +
                               std::to_string(n_val) + " val and no test nodes");
    }
    auto b = members.begin();
    split.train.insert(split.train.end(), b, b + static_cast<std::ptrdiff_t>(n_train));
    split.val.insert(split.val.end(), b + static_cast<std::ptrdiff_t>(n_train),
                     b + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.insert(split.test.end(), b + static_cast<std::ptrdiff_t>(n_train + n_val), members.end());
  }
  return split;
}

PairSet::value_type pair_entry(const LabeledPair& p) {
  return {std::min(p.src, p.dst), std::max(p.src, p.dst), p.etype};
}

uint64_t relation_complement_size(const HeteroGraph& g, int etype) {
  const auto& et = g.schema().edge_types.at(static_cast<size_t>(etype));
  const TypeId a = g.schema().node_type_index(et.src), b = g.schema().node_type_index(et.dst);
  const uint64_t na = g.nodes_of_type(a).size(), nb = g.nodes_of_type(b).size();
  const uint64_t pairs = a == b ? na * (na - (na > 0 ? 1 : 0)) / 2 : na * nb;
  uint64_t edges = 0;
  for (const auto& e : g.edges()) edges += e.etype == etype;
  return pairs - std::min(pairs, edges);
}

std::vector<LabeledPair> corrupt_pairs(const HeteroGraph& g, const std::vector<LabeledPair>& positives,
                                       size_t ratio, std::mt19937_64& rng, PairSet* taken) {
  if (ratio < 1) throw Error("negative ratio must be at least 1");
  std::vector<LabeledPair> out;
  if (positives.empty()) return out;
  const int etype = positives.front().etype;
  const std::string& ename = g.schema().edge_types.at(static_cast<size_t>(etype)).name;
  if (relation_complement_size(g, etype) == 0)
    throw Error("relation '" + ename + "' is complete; no negative pairs exist");
  PairSet local;
  PairSet& used = taken ? *taken : local;
  const auto& et = g.schema().edge_types[static_cast<size_t>(etype)];
  const auto src_pool = g.nodes_of_type(g.schema().node_type_index(et.src));
  const auto dst_pool = g.nodes_of_type(g.schema().node_type_index(et.dst));
  auto admissible = [&](const LabeledPair& p) {
    return p.src != p.dst && !g.has_edge(p.src, p.dst, etype) && !used.count(pair_entry(p));
  };
  constexpr int kCorruptAttempts = 1000;
  constexpr uint64_t kPairAttempts = 10'000'000;
  for (const auto& pos : positives) {
    if (pos.etype != etype) throw Error("corrupt_pairs: positives must share one relation type");
    for (size_t r = 0; r < ratio; ++r) {
      LabeledPair cand = pos;
      bool ok = false;
      for (int a = 0; a < kCorruptAttempts && !ok; ++a) {
        cand = pos;
        if (rng() & 1)
          cand.src = src_pool[uniform_index(rng, src_pool.size())];
        else
          cand.dst = dst_pool[uniform_index(rng, dst_pool.size())];
        ok = admissible(cand);
      }
      // Saturated endpoints: fall back to uniform pairs of the relation.
      for (uint64_t a = 0; a < kPairAttempts && !ok; ++a) {
        cand = {src_pool[uniform_index(rng, src_pool.size())], dst_pool[uniform_index(rng, dst_pool.size())], etype};
        ok = admissible(cand);
      }
      if (!ok) throw Error("could not sample a negative pair for relation '" + ename + "'");
      used.insert(pair_entry(cand));
      out.push_back(cand);
    }
  }
  return out;
}

LinkSplit build_link_split(const HeteroGraph& g, uint64_t seed) {
  if (g.num_edges() == 0) throw Error("link split needs at least one edge");
  std::vector<LabeledPair> all;
  for (const auto& e : g.edges()) all.push_back({e.src, e.dst, e.etype});
  std::mt19937_64 rng(seed);
  shuffle(all, rng);
  const size_t used = all.size() * 8 / 10;
  const size_t n_train = used * 8 / 10, n_val = used / 10;
  LinkSplit s;
  auto b = all.begin();
  s.train.positives.assign(b, b + static_cast<std::ptrdiff_t>(n_train));
  s.val.positives.assign(b + static_cast<std::ptrdiff_t>(n_train), b + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.positives.assign(b + static_cast<std::ptrdiff_t>(n_train + n_val), b + static_cast<std::ptrdiff_t>(used));
  s.unused.assign(b + static_cast<std::ptrdiff_t>(used), all.end());
  PairSet taken;
  for (LinkPart* part : {&s.train, &s.val, &s.test}) {
    std::map<int, std::vector<LabeledPair>> by_type;
    for (const auto& p : part->positives) by_type[p.etype].push_back(p);
    // Keep each part's negatives in the order of its positives.
    std::map<int, std::vector<LabeledPair>> negs;
    for (const auto& [et, pos] : by_type) negs[et] = corrupt_pairs(g, pos, 2, rng, &taken);
    std::map<int, size_t> next;
    for (const auto& p : part->positives)
      for (int r = 0; r < 2; ++r) part->negatives.push_back(negs[p.etype][next[p.etype]++]);
  }
  return s;
}

SplitSpec build_splits(const HeteroGraph& g, const Labels& labels, Task task, uint64_t seed,
                       const std::string& node_type) {
  SplitSpec spec;
  spec.task = task;
  if (task == Task::LinkPrediction) {
    spec.link = build_link_split(g, seed);
  } else {
    std::string t = node_type;
    if (t.empty()) {
      if (g.schema().class_labels.size() != 1)
        throw Error("node split: name the node type to classify");
      t = g.schema().class_labels.begin()->first;
    }
    spec.node = build_node_split(g, labels, t, seed);
  }
  return spec;
}

HeteroGraph remove_edges(const HeteroGraph& g, const std::vector<LabeledPair>& drop) {
  PairSet gone;
  for (const auto& p : drop) gone.insert(pair_entry(p));
  std::vector<EdgeRecord> kept;
  for (const auto& e : g.edges())
    if (!gone.count(pair_entry({e.src, e.dst, e.etype})))
      kept.push_back({g.id(e.src), g.id(e.dst), g.schema().edge_types[static_cast<size_t>(e.etype)].name});
  return HeteroGraph::build(g.schema(), g.node_records(), kept);
}

// ---------------------------------------------------------------------------
// Profiling

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

EfficiencyReport profile_run(const HeteroGraph& g, int max_K, EncoderBackend& backend, EmbeddingCache* cache,
                             const ProfileOptions& opts) {
  if (max_K < 1) throw Error("profile: K must be at least 1");
  std::vector<NodeIndex> targets = opts.targets;
  if (targets.empty())
    for (NodeIndex v = 0; v < g.num_nodes(); ++v) targets.push_back(v);

  EfficiencyReport rep;
  rep.num_node_types = g.num_node_types();

  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<uint64_t>> walks(targets.size());
  for (size_t i = 0; i < targets.size(); ++i)
    for (int h = 1; h <= max_K; ++h) walks[i].push_back(count_walks(g, targets[i], h, opts.paths));
  rep.phase_seconds.emplace_back("walk_count", seconds_since(t0));

  std::vector<double> ks, means;
  for (int K = 1; K <= max_K; ++K) {
    EmbeddingCache fresh;
    Encoder enc(backend, cache ? *cache : fresh);
    TokenTable table;
    table.template_id = opts.template_id;
    TokenizeOptions topts;
    topts.paths = opts.paths;
    topts.workers = opts.workers;
    auto t1 = std::chrono::steady_clock::now();
    tokenize_graph(enc, g, targets, K, table, topts);
    rep.phase_seconds.emplace_back("K=" + std::to_string(K) + "/tokenize", seconds_since(t1));
    rep.total_calls += table.call_count;
    double stored = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
      ProfileRow row;
      row.K = K;
      row.target = targets[i];
      auto it = table.relation_calls_per_target.find(targets[i]);
      row.relation_calls = it == table.relation_calls_per_target.end() ? 0 : it->second;
      for (int h = 1; h <= K; ++h) row.relation_requests += table.hop_types.at({targets[i], h}).size();
      for (int h = 0; h < K; ++h) row.naive_walks += walks[i][static_cast<size_t>(h)];
      row.stored_vectors = table.stored_vectors(targets[i]);
      stored += static_cast<double>(row.stored_vectors);
      rep.rows.push_back(row);
    }
    ks.push_back(K);
    means.push_back(stored / static_cast<double>(targets.size()));
  }
  rep.cache_complete = rep.total_calls == 0;

  const double n = static_cast<double>(ks.size());
  const double mk = std::accumulate(ks.begin(), ks.end(), 0.0) / n;
  const double mm = std::accumulate(means.begin(), means.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < ks.size(); ++i) {
    sxx += (ks[i] - mk) * (ks[i] - mk);
    sxy += (ks[i] - mk) * (means[i] - mm);
  }
  rep.fit_slope = sxx > 0 ? sxy / sxx : 0.0;
  rep.fit_intercept = mm - rep.fit_slope * mk;
  double ss = 0.0;
  for (size_t i = 0; i < ks.size(); ++i) {
    const double r = means[i] - (rep.fit_intercept + rep.fit_slope * ks[i]);
    ss += r * r;
  }
  rep.fit_residual = mm > 0 ? std::sqrt(ss / n) / mm : 0.0;
  return rep;
}

std::string EfficiencyReport::rows_csv(const HeteroGraph& g) const {
  std::ostringstream os;
  os << "K,target,node_type,relation_requests,relation_calls,call_bound,naive_walks,stored_vectors,memory_bound\n";
  for (const auto& r : rows) {
    const uint64_t bound = num_node_types * static_cast<uint64_t>(r.K);
    os << r.K << ',' << csv_escape(g.id(r.target)) << ',' << csv_escape(g.type_name(r.target)) << ','
       << r.relation_requests << ',' << r.relation_calls << ',' << bound << ',' << r.naive_walks << ','
       << r.stored_vectors << ',' << bound + 1 << '\n';
  }
  return os.str();
}

std::string EfficiencyReport::summary_csv() const {
  std::ostringstream os;
  os << "key,value\n";
  os << "total_calls," << total_calls << '\n';
  os << "cache_complete," << (cache_complete ? "true" : "false") << '\n';
  os << "fit_slope," << format_fixed(fit_slope, 6) << '\n';
  os << "fit_intercept," << format_fixed(fit_intercept, 6) << '\n';
  os << "fit_residual," << format_fixed(fit_residual, 6) << '\n';
  for (const auto& [phase, s] : phase_seconds) os << "seconds:" << phase << ',' << format_fixed(s, 6) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Attention

AttentionSummary summarize_attention(const HeteroGraph& g, const ForwardTrace& trace) {
  if (trace.targets.empty()) throw Error("attention capture is disabled or empty; run a forward pass with a trace");
  std::map<std::tuple<std::string, int, std::string>, std::vector<double>> alpha;
  std::map<std::pair<std::string, int>, std::vector<double>> gamma;
  const auto& types = g.schema().node_types;
  for (const auto& tt : trace.targets) {
    const std::string& ttype = g.type_name(tt.target);
    for (size_t h = 0; h < tt.hops.size(); ++h) {
      for (size_t j = 0; j < tt.types[h].size(); ++j)
        alpha[{ttype, tt.hops[h], types[static_cast<size_t>(tt.types[h][j])]}].push_back(tt.alpha[h][j]);
      if (h < tt.gamma.size()) gamma[{ttype, tt.hops[h]}].push_back(tt.gamma[h]);
    }
  }
  AttentionSummary s;
  for (const auto& [key, xs] : alpha) {
    auto ms = mean_std(xs);
    s.alpha.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), xs.size(), ms.mean, ms.std});
  }
  for (const auto& [key, xs] : gamma) s.gamma.push_back({key.first, key.second, xs.size(), mean_std(xs).mean});
  return s;
}

void export_attention(const std::string& dir, const AttentionSummary& summary, const AttentionSeries* series) {
  std::filesystem::create_directories(dir);
  std::ostringstream a, gm;
  a << "target_type,hop,relation_type,count,mean,std\n";
  for (const auto& r : summary.alpha)
    a << csv_escape(r.target_type) << ',' << r.hop << ',' << csv_escape(r.relation_type) << ',' << r.count << ','
      << format_fixed(r.mean, 9) << ',' << format_fixed(r.std, 9) << '\n';
  gm << "target_type,hop,count,mean\n";
  for (const auto& r : summary.gamma)
    gm << csv_escape(r.target_type) << ',' << r.hop << ',' << r.count << ',' << format_fixed(r.mean, 9) << '\n';
  write_text_file(dir + "/alpha.csv", a.str());
  write_text_file(dir + "/gamma.csv", gm.str());
  if (!series || series->epochs.empty()) return;
  std::ostringstream as, gs;
  as << "epoch,target_type,hop,relation_type,mean,std\n";
  gs << "epoch,target_type,hop,mean\n";
  for (const auto& [epoch, s] : series->epochs) {
    for (const auto& r : s.alpha)
      as << epoch << ',' << csv_escape(r.target_type) << ',' << r.hop << ',' << csv_escape(r.relation_type) << ','
         << format_fixed(r.mean, 9) << ',' << format_fixed(r.std, 9) << '\n';
    for (const auto& r : s.gamma)
      gs << epoch << ',' << csv_escape(r.target_type) << ',' << r.hop << ',' << format_fixed(r.mean, 9) << '\n';
  }
  write_text_file(dir + "/alpha_series.csv", as.str());
  write_text_file(dir + "/gamma_series.csv", gs.str());
}

void write_run_metadata(const std::string& output_path, const std::string& json_text) {
  write_text_file(output_path + ".meta.json", json_text + "\n");
}

}  // namespace ella
