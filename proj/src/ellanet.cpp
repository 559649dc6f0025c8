#include "ella/ellanet.hpp"

#include <cmath>

#include "json.hpp"

namespace ella {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config and parameters

void ModelConfig::validate() const {
  if (d == 0 || heads == 0) throw Error("model: d and heads must be positive");
  if (d % heads != 0)
    throw Error("model: d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  if (type_layers < 1 || hop_layers < 1) throw Error("model: layer counts must be at least 1");
  if (K < 1) throw Error("model: K must be at least 1");
  if (d_llm == 0) throw Error("model: d_llm must be positive");
}

std::string ModelConfig::to_json_text() const {
  json j{{"d", d}, {"heads", heads}, {"type_layers", type_layers},
         {"hop_layers", hop_layers}, {"K", K}, {"d_llm", d_llm}};
  return j.dump();
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  ModelConfig c;
  try {
    auto j = json::parse(text);
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.type_layers = j.value("type_layers", c.type_layers);
    c.hop_layers = j.value("hop_layers", c.hop_layers);
    c.K = j.value("K", c.K);
    c.d_llm = j.value("d_llm", c.d_llm);
  } catch (const json::exception& e) {
    throw Error(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::string layer_prefix(const std::string& block, size_t l) { return block + "." + std::to_string(l) + "."; }

void add_stack(ModelParams& p, const ModelConfig& cfg, const std::string& block, size_t layers,
               std::mt19937_64& rng) {
  const size_t d = cfg.d, dk = cfg.head_dim();
  auto weight = [&](const std::string& name, size_t rows, size_t cols) {
    Tensor t = Tensor::zeros(rows, cols, true);
    init_uniform(t, rows, rng);
    p[name] = t;
  };
  for (size_t l = 0; l < layers; ++l) {
    const std::string pre = layer_prefix(block, l);
    p[pre + "ln1.g"] = Tensor::from(1, d, std::vector<double>(d, 1.0), true);
    p[pre + "ln1.b"] = Tensor::zeros(1, d, true);
    for (size_t h = 0; h < cfg.heads; ++h) {
      weight(pre + "attn.q." + std::to_string(h), d, dk);
      weight(pre + "attn.k." + std::to_string(h), d, dk);
      weight(pre + "attn.v." + std::to_string(h), d, dk);
    }
    weight(pre + "attn.o", d, d);
    p[pre + "ln2.g"] = Tensor::from(1, d, std::vector<double>(d, 1.0), true);
    p[pre + "ln2.b"] = Tensor::zeros(1, d, true);
    weight(pre + "ffn.w1", d, 2 * d);
    p[pre + "ffn.b1"] = Tensor::zeros(1, 2 * d, true);
    weight(pre + "ffn.w2", 2 * d, d);
    p[pre + "ffn.b2"] = Tensor::zeros(1, d, true);
  }
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, const SchemaDef& schema, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  Tensor proj = Tensor::zeros(cfg.d_llm, cfg.d, true);
  init_uniform(proj, cfg.d_llm, rng);
  p["proj.w"] = proj;
  p["proj.b"] = Tensor::zeros(1, cfg.d, true);
  add_stack(p, cfg, "type", cfg.type_layers, rng);
  add_stack(p, cfg, "hop", cfg.hop_layers, rng);
  Tensor readout = Tensor::zeros(2 * cfg.d, 1, true);
  init_uniform(readout, 2 * cfg.d, rng);
  p["readout.w"] = readout;
  for (const auto& t : schema.node_types) {
    Tensor w = Tensor::zeros(cfg.d, cfg.d, true);
    init_uniform(w, cfg.d, rng);
    p["sim." + t] = w;
  }
  return p;
}

void add_head(ModelParams& params, const ModelConfig& cfg, const std::string& node_type,
              size_t num_classes, uint64_t seed) {
  if (num_classes < 2) throw Error("classification head needs at least 2 classes");
  std::mt19937_64 rng(StableHash().u64(seed).str(node_type).value());
  Tensor w = Tensor::zeros(cfg.d, num_classes, true);
  init_uniform(w, cfg.d, rng);
  params["head." + node_type + ".w"] = w;
  params["head." + node_type + ".b"] = Tensor::zeros(1, num_classes, true);
}

const Tensor& param(const ModelParams& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error("missing model parameter '" + name + "'");
  return it->second;
}

bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }

std::vector<Tensor> backbone_params(const ModelParams& params) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params)
    if (!is_head_param(name)) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Blocks

Tensor project(const Tensor& u, const ModelParams& p, const ModelConfig& cfg) {
  if (u.cols() != cfg.d_llm)
    throw Error("project: token dimension " + std::to_string(u.cols()) + " does not match d_llm " +
                std::to_string(cfg.d_llm));
  return add(matmul(u, param(p, "proj.w")), param(p, "proj.b"));
}

Tensor transformer_stack(const Tensor& x_in, const ModelParams& p, const ModelConfig& cfg,
                         const std::string& block, const Segments& segs, AttentionCapture* capture) {
  const size_t layers = block == "type" ? cfg.type_layers : cfg.hop_layers;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  Tensor x = x_in;
  for (size_t l = 0; l < layers; ++l) {
    const std::string pre = layer_prefix(block, l);
    Tensor ln1 = add(mul(layer_norm(x), param(p, pre + "ln1.g")), param(p, pre + "ln1.b"));
    std::vector<Tensor> heads;
    for (size_t h = 0; h < cfg.heads; ++h) {
      const std::string hs = std::to_string(h);
      Tensor q = matmul(ln1, param(p, pre + "attn.q." + hs));
      Tensor k = matmul(ln1, param(p, pre + "attn.k." + hs));
      Tensor v = matmul(ln1, param(p, pre + "attn.v." + hs));
      std::shared_ptr<const std::vector<double>> w;
      heads.push_back(segment_attention(q, k, v, segs, scale, capture ? &w : nullptr));
      if (capture) {
        capture->blocks.push_back(w);
        capture->segments.push_back(segs);
      }
    }
    x = add(x, matmul(concat_cols(heads), param(p, pre + "attn.o")));
    Tensor ln2 = add(mul(layer_norm(x), param(p, pre + "ln2.g")), param(p, pre + "ln2.b"));
    Tensor hidden = relu(add(matmul(ln2, param(p, pre + "ffn.w1")), param(p, pre + "ffn.b1")));
    x = add(x, add(matmul(hidden, param(p, pre + "ffn.w2")), param(p, pre + "ffn.b2")));
  }
  return x;
}

Tensor type_block(const Tensor& U, const ModelParams& p, const ModelConfig& cfg, AttentionCapture* capture) {
  if (U.rows() == 0) throw Error("type_block: no type tokens");
  return transformer_stack(U, p, cfg, "type", {0, U.rows()}, capture);
}

namespace {

// Row-wise dot products of two equally shaped tensors, N×1.
Tensor row_dots(const Tensor& a, const Tensor& b) {
  return matmul(mul(a, b), Tensor::from(a.cols(), 1, std::vector<double>(a.cols(), 1.0)));
}

}  // namespace

Tensor type_readout(const Tensor& u_s, const Tensor& U_hat, std::vector<double>* alpha) {
  if (U_hat.rows() == 0) throw Error("type_readout: no type tokens");
  if (u_s.rows() != 1 || u_s.cols() != U_hat.cols())
    throw Error("type_readout: query " + u_s.shape_str() + " vs tokens " + U_hat.shape_str());
  Tensor scores = matmul(U_hat, transpose(u_s));
  std::shared_ptr<const std::vector<double>> probs;
  Tensor h = segment_softmax_pool(scores, U_hat, {0, U_hat.rows()}, &probs);
  if (alpha) *alpha = *probs;
  return h;
}

Tensor hop_block(const Tensor& H, const ModelParams& p, const ModelConfig& cfg, AttentionCapture* capture) {
  if (H.rows() != static_cast<size_t>(cfg.K) + 1)
    throw Error("hop_block: expected " + std::to_string(cfg.K + 1) + " hop tokens, got " +
                std::to_string(H.rows()));
  return transformer_stack(H, p, cfg, "hop", {0, H.rows()}, capture);
}

Tensor hop_readout(const Tensor& H_hat, const ModelParams& p, std::vector<double>* gamma) {
  if (H_hat.rows() == 0) throw Error("hop_readout: empty sequence");
  Tensor h0 = select_rows(H_hat, {0});
  if (gamma) gamma->clear();
  if (H_hat.rows() == 1) return h0;
  std::vector<size_t> rest(H_hat.rows() - 1), zeros(H_hat.rows() - 1, 0);
  for (size_t j = 0; j < rest.size(); ++j) rest[j] = j + 1;
  Tensor xr = select_rows(H_hat, rest);
  Tensor scores = matmul(concat_cols({select_rows(H_hat, zeros), xr}), param(p, "readout.w"));
  std::shared_ptr<const std::vector<double>> probs;
  Tensor pooled = segment_softmax_pool(scores, xr, {0, rest.size()}, &probs);
  if (gamma) *gamma = *probs;
  return add(h0, pooled);
}

// ---------------------------------------------------------------------------
// Batched forward

ForwardPlan ForwardPlan::build(const TokenTable& table, std::vector<NodeIndex> targets, int K) {
  if (K < 1) throw Error("forward: K must be at least 1");
  if (table.hops < K)
    throw Error("token table holds " + std::to_string(table.hops) + " hops, model needs " + std::to_string(K));
  ForwardPlan plan;
  const size_t d_llm = table.d_llm;
  std::vector<double> node_vals, rel_vals;
  node_vals.reserve(targets.size() * d_llm);
  plan.type_segs_.push_back(0);
  std::vector<size_t> hop_counts;
  for (size_t r = 0; r < targets.size(); ++r) {
    const NodeIndex s = targets[r];
    if (!plan.row_.emplace(s, r).second) throw Error("forward: duplicate target " + std::to_string(s));
    const Vec& u = table.node_token(s);
    node_vals.insert(node_vals.end(), u.begin(), u.end());
    size_t present = 0;
    for (int hop = 1; hop <= K; ++hop) {
      auto it = table.hop_types.find({s, hop});
      if (it == table.hop_types.end())
        throw Error("missing relation tokens for node " + std::to_string(s) + " at hop " + std::to_string(hop));
      if (it->second.empty()) continue;
      for (TypeId t : it->second) {
        auto rt = table.relation_tokens.find({s, hop, t});
        if (rt == table.relation_tokens.end())
          throw Error("missing relation token for node " + std::to_string(s) + " at (hop " +
                      std::to_string(hop) + ", type " + std::to_string(t) + ")");
        rel_vals.insert(rel_vals.end(), rt->second.begin(), rt->second.end());
        plan.rel_target_.push_back(r);
      }
      plan.type_segs_.push_back(plan.type_segs_.back() + it->second.size());
      plan.seg_target_.push_back(r);
      plan.seg_hop_.push_back(hop);
      plan.seg_types_.push_back(it->second);
      ++present;
    }
    hop_counts.push_back(present);
  }
  const size_t T = targets.size();
  plan.node_ = Tensor::from(T, d_llm, std::move(node_vals));
  const size_t N = plan.rel_target_.size();
  plan.rel_ = Tensor::from(N, d_llm, std::move(rel_vals));
  // H rows per target: its h0 (row r of h0) then its hop tokens (T + segment index).
  plan.hop_segs_.push_back(0);
  size_t seg = 0;
  for (size_t r = 0; r < T; ++r) {
    plan.h_order_.push_back(r);
    for (size_t j = 0; j < hop_counts[r]; ++j) plan.h_order_.push_back(T + seg++);
    plan.hop_segs_.push_back(plan.h_order_.size());
  }
  plan.targets_ = std::move(targets);
  return plan;
}

size_t ForwardPlan::row_of(NodeIndex v) const {
  auto it = row_.find(v);
  if (it == row_.end()) throw Error("node " + std::to_string(v) + " is not a target of this plan");
  return it->second;
}

Tensor forward_batch(const ForwardPlan& plan, const ModelParams& p, const ModelConfig& cfg, ForwardTrace* trace) {
  if (plan.targets_.empty()) throw Error("forward: no targets");
  if (plan.node_.cols() != cfg.d_llm)
    throw Error("forward: token dimension " + std::to_string(plan.node_.cols()) + " does not match d_llm " +
                std::to_string(cfg.d_llm));
  AttentionCapture* cap = trace && trace->capture_attention ? &trace->attention : nullptr;
  const size_t T = plan.targets_.size();
  const size_t S = plan.seg_target_.size();

  Tensor h0 = project(plan.node_, p, cfg);
  std::shared_ptr<const std::vector<double>> alpha;
  Tensor all = h0;
  if (S > 0) {
    Tensor U_hat = transformer_stack(project(plan.rel_, p, cfg), p, cfg, "type", plan.type_segs_, cap);
    Tensor scores = row_dots(U_hat, select_rows(h0, plan.rel_target_));
    Tensor hop_tokens = segment_softmax_pool(scores, U_hat, plan.type_segs_, &alpha);
    all = concat_rows({h0, hop_tokens});
  }
  Tensor H = select_rows(all, plan.h_order_);
  Tensor H_hat = transformer_stack(H, p, cfg, "hop", plan.hop_segs_, cap);

  std::vector<size_t> first(T), rest, rest_first;
  Segments rest_segs{0};
  for (size_t r = 0; r < T; ++r) {
    first[r] = plan.hop_segs_[r];
    for (size_t j = plan.hop_segs_[r] + 1; j < plan.hop_segs_[r + 1]; ++j) {
      rest.push_back(j);
      rest_first.push_back(first[r]);
    }
    rest_segs.push_back(rest.size());
  }
  Tensor z = select_rows(H_hat, first);
  std::shared_ptr<const std::vector<double>> gamma;
  if (!rest.empty()) {
    Tensor xr = select_rows(H_hat, rest);
    Tensor scores = matmul(concat_cols({select_rows(H_hat, rest_first), xr}), param(p, "readout.w"));
    z = add(z, segment_softmax_pool(scores, xr, rest_segs, &gamma));
  }

  if (trace) {
    trace->targets.assign(T, {});
    for (size_t r = 0; r < T; ++r) trace->targets[r].target = plan.targets_[r];
    for (size_t s = 0; s < S; ++s) {
      auto& tt = trace->targets[plan.seg_target_[s]];
      tt.hops.push_back(plan.seg_hop_[s]);
      tt.types.push_back(plan.seg_types_[s]);
      tt.alpha.emplace_back(alpha->begin() + static_cast<std::ptrdiff_t>(plan.type_segs_[s]),
                            alpha->begin() + static_cast<std::ptrdiff_t>(plan.type_segs_[s + 1]));
    }
    if (gamma)
      for (size_t r = 0; r < T; ++r)
        trace->targets[r].gamma.assign(gamma->begin() + static_cast<std::ptrdiff_t>(rest_segs[r]),
                                       gamma->begin() + static_cast<std::ptrdiff_t>(rest_segs[r + 1]));
  }
  return z;
}

Tensor forward(NodeIndex s, const TokenTable& table, const ModelParams& p, const ModelConfig& cfg,
               ForwardTrace* trace) {
  return forward_batch(ForwardPlan::build(table, {s}, cfg.K), p, cfg, trace);
}

}  // namespace ella
