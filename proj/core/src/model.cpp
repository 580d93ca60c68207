#include "malsf/model.hpp"

#include <cmath>

#include <json.hpp>

namespace malsf {

using json = nlohmann::json;

const char* local_semantics_name(LocalSemantics v) {
  switch (v) {
    case LocalSemantics::none: return "none";
    case LocalSemantics::labels_only: return "labels_only";
    case LocalSemantics::masks_only: return "masks_only";
    case LocalSemantics::pairs: return "pairs";
  }
  return "pairs";
}

LocalSemantics local_semantics_from(const std::string& name) {
  if (name == "none") return LocalSemantics::none;
  if (name == "labels_only") return LocalSemantics::labels_only;
  if (name == "masks_only") return LocalSemantics::masks_only;
  if (name == "pairs") return LocalSemantics::pairs;
  throw std::invalid_argument("unknown local semantics mode: " + name);
}

const char* stream_mode_name(StreamMode v) {
  switch (v) {
    case StreamMode::bidirectional: return "bidirectional";
    case StreamMode::image_query_only: return "image_query_only";
    case StreamMode::text_query_only: return "text_query_only";
  }
  return "bidirectional";
}

StreamMode stream_mode_from(const std::string& name) {
  if (name == "bidirectional") return StreamMode::bidirectional;
  if (name == "image_query_only") return StreamMode::image_query_only;
  if (name == "text_query_only") return StreamMode::text_query_only;
  throw std::invalid_argument("unknown stream mode: " + name);
}

const char* task_mode_name(TaskMode m) {
  return m == TaskMode::mfnd ? "mfnd" : "dgm4";
}

TaskMode task_mode_from(const std::string& name) {
  if (name == "dgm4") return TaskMode::dgm4;
  if (name == "mfnd") return TaskMode::mfnd;
  throw std::invalid_argument("unknown task mode: " + name);
}

std::string ModelConfig::to_json() const {
  json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["text_layers"] = text_layers;
  j["image_layers"] = image_layers;
  j["patch"] = patch;
  j["image_size"] = image_size;
  j["l_max"] = l_max;
  j["n_max_pairs"] = n_max_pairs;
  j["stream_depth"] = stream_depth;
  j["vocab_size"] = vocab_size;
  j["ablation"]["local"] = local_semantics_name(ablation.local);
  j["ablation"]["streams"] = stream_mode_name(ablation.streams);
  j["ablation"]["gate_weights"] = ablation.gate_weights;
  j["ablation"]["shallow_fusion"] = ablation.shallow_fusion;
  j["ablation"]["deep_fusion"] = ablation.deep_fusion;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.image_layers = j.value("image_layers", c.image_layers);
  c.patch = j.value("patch", c.patch);
  c.image_size = j.value("image_size", c.image_size);
  c.l_max = j.value("l_max", c.l_max);
  c.n_max_pairs = j.value("n_max_pairs", c.n_max_pairs);
  c.stream_depth = j.value("stream_depth", c.stream_depth);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  if (j.contains("ablation")) {
    const auto& a = j["ablation"];
    c.ablation.local = local_semantics_from(a.value("local", "pairs"));
    c.ablation.streams = stream_mode_from(a.value("streams", "bidirectional"));
    c.ablation.gate_weights = a.value("gate_weights", true);
    c.ablation.shallow_fusion = a.value("shallow_fusion", true);
    c.ablation.deep_fusion = a.value("deep_fusion", true);
  }
  return c;
}

MalsfModel::MalsfModel(const ModelConfig& cfg, uint64_t seed)
    : cfg_(cfg), seed_(seed), vocab_(&Vocab::synthetic()) {
  if (cfg.vocab_size != vocab_->size()) {
    throw std::invalid_argument("model vocab_size must match the synthetic vocabulary (" +
                                std::to_string(vocab_->size()) + ")");
  }
  Rng rng(seed);
  TextEncoderConfig tc{cfg.vocab_size, cfg.d_model, cfg.n_heads, cfg.text_layers, cfg.l_max};
  text_enc_.emplace(tc, rng);
  VisualEncoderConfig vc{cfg.d_model, cfg.n_heads, cfg.image_layers, cfg.patch,
                         cfg.image_size, cfg.image_size};
  vis_enc_.emplace(vc, rng);
  const bool any_local = cfg.ablation.local != LocalSemantics::none;
  if (cfg.ablation.gate_weights && any_local) {
    gates_.emplace(GateProjections::init(cfg.d_model, rng));
  }
  if (cfg.ablation.streams != StreamMode::text_query_only) {
    t_v_.emplace(cfg.d_model, cfg.n_heads, cfg.stream_depth, rng);
  }
  if (cfg.ablation.streams != StreamMode::image_query_only) {
    t_l_.emplace(cfg.d_model, cfg.n_heads, cfg.stream_depth, rng);
  }
  if (cfg.ablation.shallow_fusion) {
    shallow_.emplace(ShallowFusion::init(cfg.d_model, cfg.n_heads, rng));
  }
  if (cfg.ablation.deep_fusion) {
    deep_.emplace(DeepFusion::init(cfg.d_model, cfg.n_heads, rng));
  }
  heads_ = Heads::init(cfg.d_model, rng);
}

bool MalsfModel::is_text_branch_param(const std::string& name) {
  return name.rfind("text.", 0) == 0;
}

std::vector<NamedParam> MalsfModel::named_params() {
  std::vector<NamedParam> out;
  auto collect = [&out](const std::string& name, Tensor& t) { out.push_back({name, t}); };
  text_enc_->visit_params("text", collect);
  vis_enc_->visit_params("image", collect);
  if (gates_) gates_->visit_params("gates", collect);
  if (t_v_) t_v_->visit_params("verify_img_query", collect);
  if (t_l_) t_l_->visit_params("verify_cap_query", collect);
  if (shallow_) shallow_->visit_params("shallow", collect);
  if (deep_) deep_->visit_params("deep", collect);
  heads_.visit_params("heads", collect);
  return out;
}

int64_t MalsfModel::param_count() {
  int64_t n = 0;
  for (auto& p : named_params()) n += p.tensor.size();
  return n;
}

void MalsfModel::zero_grads() {
  for (auto& p : named_params()) p.tensor.zero_grad();
}

ModelOutput MalsfModel::forward(const Sample& sample, InspectTrace* trace) const {
  const auto& abl = cfg_.ablation;
  ModelOutput out;

  // global semantics
  const TokenSeq cap_tokens = tokenize(sample.caption, *vocab_, cfg_.l_max);
  const TextFeature cap = text_enc_->encode(cap_tokens);
  const Tensor grid = vis_enc_->encode(sample.image);
  const PooledFeature v_img = global_pool(grid);

  // local semantics: encode live pairs (drop those whose region vanishes
  // after downsampling), capped at n_max_pairs
  const bool use_labels =
      abl.local == LocalSemantics::pairs || abl.local == LocalSemantics::labels_only;
  const bool use_masks =
      abl.local == LocalSemantics::pairs || abl.local == LocalSemantics::masks_only;
  std::vector<TextFeature> label_feats;
  std::vector<PooledFeature> region_feats;
  if (use_labels || use_masks) {
    for (size_t i = 0; i < sample.pairs.size(); ++i) {
      if (static_cast<int>(out.live_pairs.size()) >= cfg_.n_max_pairs) break;
      const auto& pair = sample.pairs[i];
      if (use_masks) {
        const auto cells = downsample_mask(pair.mask, cfg_.patch);
        bool any = false;
        for (uint8_t c : cells) any = any || c;
        if (!any) continue;  // empty region: drop the pair
        region_feats.push_back(mask_pool(grid, pair.mask));
      }
      if (use_labels) {
        label_feats.push_back(text_enc_->encode(tokenize(pair.label, *vocab_, cfg_.l_max)));
      }
      out.live_pairs.push_back(static_cast<int>(i));
    }
  }
  const size_t n_live = out.live_pairs.size();

  // relevance gates
  GateWeights gw;
  if (gates_) {
    Tensor cap_proj = matmul(cap.cls, gates_->phi_l);
    Tensor img_proj = matmul(v_img.cls, gates_->phi_v);
    for (size_t i = 0; i < n_live; ++i) {
      if (use_masks) {
        Tensor rp = matmul(region_feats[i].cls, gates_->phi_v);
        gw.w_v.push_back(reshape(sigmoid(matmul(cap_proj, transpose(rp))), {1}));
      }
      if (use_labels) {
        Tensor lp = matmul(label_feats[i].cls, gates_->phi_l);
        gw.w_l.push_back(reshape(sigmoid(matmul(img_proj, transpose(lp))), {1}));
      }
    }
  }
  for (const auto& t : gw.w_v) out.gate_v.push_back(t.value());
  for (const auto& t : gw.w_l) out.gate_l.push_back(t.value());

  // verification streams, one application per context
  std::vector<VerificationEntry> img_entries, cap_entries;
  if (t_v_) {
    std::vector<VerifyContext> contexts;
    contexts.push_back({cap.seq, cap.mask, Tensor()});
    if (use_labels) {
      for (size_t j = 0; j < n_live; ++j) {
        VerifyContext c{label_feats[j].seq, label_feats[j].mask, Tensor()};
        if (gates_) c.gate = gw.w_l[j];
        contexts.push_back(std::move(c));
      }
    }
    img_entries = t_v_->verify_all(v_img.seq, {}, contexts,
                                   trace ? &trace->img_ctx_attn : nullptr);
  }
  if (t_l_) {
    std::vector<VerifyContext> contexts;
    contexts.push_back({v_img.seq, {}, Tensor()});
    if (use_masks) {
      for (size_t i = 0; i < n_live; ++i) {
        VerifyContext c{region_feats[i].seq, {}, Tensor()};
        if (gates_) c.gate = gw.w_v[i];
        contexts.push_back(std::move(c));
      }
    }
    cap_entries = t_l_->verify_all(cap.seq, cap.mask, contexts,
                                   trace ? &trace->cap_ctx_attn : nullptr);
  }

  // hierarchical aggregation and heads
  static const ShallowFusion kNoShallow{};  // unused when fusion is off
  static const DeepFusion kNoDeep{};
  const ShallowFused fused =
      shallow_fuse(shallow_ ? *shallow_ : kNoShallow, img_entries, cap_entries, cap.mask,
                   shallow_.has_value());
  const TaskFeatures tf =
      deep_fuse(deep_ ? *deep_ : kNoDeep, fused, img_entries, cap_entries, deep_.has_value(),
                trace ? &trace->binary_attn : nullptr, trace ? &trace->spatial_attn : nullptr);
  out.preds = run_heads(heads_, tf);
  return out;
}

SampleLoss MalsfModel::loss(const Sample& sample, const LossWeights& w, TaskMode mode) const {
  if (!sample.gt) throw std::invalid_argument("loss: sample has no ground truth");
  const GroundTruth& gt = *sample.gt;
  const ModelOutput out = forward(sample);
  const Predictions& p = out.preds;

  SampleLoss sl;
  Tensor bcls = cross_entropy(p.binary_logits, gt.y_b);
  sl.bcls = bcls.value();
  if (mode == TaskMode::mfnd) {
    sl.total = bcls;  // binary-only training
    return sl;
  }

  std::optional<Tensor> mcls, ig, tg;
  if (p.type_logits.defined()) {
    const std::array<bool, 4> live{p.has_image_type, p.has_image_type, p.has_text_type,
                                   p.has_text_type};
    mcls = mcls_loss(p.type_logits, gt.y_m, live);
    sl.mcls = mcls->value();
  }
  if (p.bbox.defined() && gt.image_manipulated()) {
    ig = bbox_loss(p.bbox, gt.y_ig);
    sl.ig = ig->value();
  }
  if (p.token_logits.defined()) {
    const TokenSeq toks = tokenize(sample.caption, *vocab_, cfg_.l_max);
    tg = tg_loss(p.token_logits, gt.y_tg, toks.attn_mask);
    sl.tg = tg->value();
  }
  sl.total = combined_loss(bcls, mcls ? &*mcls : nullptr, ig ? &*ig : nullptr,
                           tg ? &*tg : nullptr, w);
  return sl;
}

EvalRow summarize_predictions(const Predictions& p, const std::vector<uint8_t>& token_mask) {
  EvalRow row;
  {
    const double a = p.binary_logits.data()[0];
    const double b = p.binary_logits.data()[1];
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    row.p_fake = eb / (ea + eb);
  }
  row.has_image_type = p.has_image_type;
  row.has_text_type = p.has_text_type;
  if (p.type_logits.defined()) {
    std::array<double, 4> probs{};
    for (int c = 0; c < 4; ++c) {
      const double x = p.type_logits.data()[static_cast<size_t>(c)];
      probs[static_cast<size_t>(c)] = 1.0 / (1.0 + std::exp(-x));
    }
    row.type_probs = probs;
  }
  if (p.bbox.defined()) {
    row.bbox = std::array<double, 4>{p.bbox.data()[0], p.bbox.data()[1], p.bbox.data()[2],
                                     p.bbox.data()[3]};
  }
  if (p.token_logits.defined()) {
    std::vector<int> flags(static_cast<size_t>(p.token_logits.rows()), 0);
    for (int i = 0; i < p.token_logits.rows(); ++i) {
      const double l0 = p.token_logits.data()[static_cast<size_t>(i) * 2];
      const double l1 = p.token_logits.data()[static_cast<size_t>(i) * 2 + 1];
      flags[static_cast<size_t>(i)] = l1 > l0 ? 1 : 0;
    }
    row.token_flags = std::move(flags);
  }
  row.token_mask = token_mask;
  return row;
}

EvalRow MalsfModel::evaluate_sample(const Sample& sample) const {
  const ModelOutput out = forward(sample);
  const TokenSeq toks = tokenize(sample.caption, *vocab_, cfg_.l_max);
  return summarize_predictions(out.preds, toks.attn_mask);
}

}  // namespace malsf
