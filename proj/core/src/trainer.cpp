#include "malsf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "malsf/dataset_io.hpp"
#include "malsf/rng.hpp"

namespace malsf {

using json = nlohmann::json;

namespace {
constexpr const char* kCodeVersion = "malsf-0.1.0";

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Index-sharded parallel for with results landing in caller-indexed slots.
template <typename Fn>
void parallel_for(int64_t n, int threads, Fn&& fn) {
  threads = std::min<int64_t>(std::max(threads, 1), n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([t, n, threads, &fn] {
      for (int64_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::string TrainConfig::to_json() const {
  json j;
  j["model"] = json::parse(model.to_json());
  j["task"] = task_mode_name(task);
  j["lr_peak_text"] = lr_peak_text;
  j["lr_peak_image"] = lr_peak_image;
  j["lr_floor"] = lr_floor;
  j["warmup_epochs"] = warmup_epochs;
  j["total_epochs"] = total_epochs;
  j["weight_decay"] = weight_decay;
  j["alpha"] = loss_weights.alpha;
  j["beta"] = loss_weights.beta;
  j["gamma"] = loss_weights.gamma;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["threads"] = threads;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j["model"].dump());
  if (j.contains("task")) c.task = task_mode_from(j["task"].get<std::string>());
  c.lr_peak_text = j.value("lr_peak_text", c.lr_peak_text);
  c.lr_peak_image = j.value("lr_peak_image", c.lr_peak_image);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.total_epochs = j.value("total_epochs", c.total_epochs);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.loss_weights.alpha = j.value("alpha", c.loss_weights.alpha);
  c.loss_weights.beta = j.value("beta", c.loss_weights.beta);
  c.loss_weights.gamma = j.value("gamma", c.loss_weights.gamma);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  if (c.lr_floor > c.lr_peak_text || c.lr_floor > c.lr_peak_image) {
    throw std::invalid_argument("lr_floor must not exceed the peak learning rates");
  }
  if (c.warmup_epochs >= c.total_epochs) {
    throw std::invalid_argument("warmup_epochs must be smaller than total_epochs");
  }
  return c;
}

AdamW::AdamW(std::vector<NamedParam> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  state_.resize(params_.size());
  text_branch_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const size_t n = params_[i].tensor.data().size();
    state_[i].m.assign(n, 0.0);
    state_[i].v.assign(n, 0.0);
    text_branch_[i] = MalsfModel::is_text_branch_param(params_[i].name) ? 1 : 0;
  }
}

void AdamW::step(double lr_text, double lr_image, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    const double lr = text_branch_[i] ? lr_text : lr_image;
    auto& m = state_[i].m;
    auto& v = state_[i].v;
    auto& data = p.data();
    const bool has_grad = p.has_grad();
    const std::vector<double>* grad = has_grad ? &p.grad() : nullptr;
    for (size_t e = 0; e < data.size(); ++e) {
      const double g = grad ? (*grad)[e] : 0.0;
      if (std::isnan(g)) {
        throw std::runtime_error("adamw: NaN gradient in parameter " + params_[i].name);
      }
      m[e] = beta1_ * m[e] + (1.0 - beta1_) * g;
      v[e] = beta2_ * v[e] + (1.0 - beta2_) * g * g;
      const double mhat = m[e] / bc1;
      const double vhat = v[e] / bc2;
      data[e] -= lr * mhat / (std::sqrt(vhat) + eps_) + lr * weight_decay * data[e];
    }
  }
}

std::pair<double, double> lr_at(double epoch_frac, const TrainConfig& cfg) {
  if (epoch_frac < 0.0 || epoch_frac > 1.0) {
    throw std::invalid_argument("lr_at: epoch_frac must be in [0,1]");
  }
  const double warmup_frac =
      static_cast<double>(cfg.warmup_epochs) / static_cast<double>(cfg.total_epochs);
  auto shape = [&](double peak) {
    if (warmup_frac > 0.0 && epoch_frac <= warmup_frac) {
      return peak * (epoch_frac / warmup_frac);
    }
    const double progress = (epoch_frac - warmup_frac) / (1.0 - warmup_frac);
    return cfg.lr_floor + (peak - cfg.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
  };
  return {shape(cfg.lr_peak_text), shape(cfg.lr_peak_image)};
}

std::string RunManifest::to_json() const {
  json j;
  j["code_version"] = code_version;
  j["config"] = json::parse(config_json);
  j["config_hash"] = config_hash;
  j["dataset_manifest_hash"] = dataset_manifest_hash;
  j["best_epoch"] = best_epoch;
  j["best_val_acc"] = best_val_acc ? json(*best_val_acc) : json(nullptr);
  j["epochs"] = json::array();
  for (const auto& e : epochs) {
    json ej;
    ej["epoch"] = e.epoch;
    ej["lr_text"] = e.lr_text;
    ej["lr_image"] = e.lr_image;
    ej["train_loss"] = e.train_loss;
    ej["mean_bcls"] = e.mean_bcls ? json(*e.mean_bcls) : json(nullptr);
    ej["mean_mcls"] = e.mean_mcls ? json(*e.mean_mcls) : json(nullptr);
    ej["mean_ig"] = e.mean_ig ? json(*e.mean_ig) : json(nullptr);
    ej["mean_tg"] = e.mean_tg ? json(*e.mean_tg) : json(nullptr);
    ej["val"] = json::parse(e.val.to_json());
    j["epochs"].push_back(ej);
  }
  return j.dump(2);
}

std::vector<Sample> load_split(const std::string& data_dir, const std::string& split,
                               const Vocab& vocab, int l_max, bool strict) {
  return load_dataset(data_dir + "/" + split + ".jsonl", vocab, l_max, strict);
}

MetricReport compute_report(const std::vector<EvalRow>& rows,
                            const std::vector<GroundTruth>& gts, TaskMode mode) {
  if (rows.size() != gts.size()) throw std::invalid_argument("compute_report: size mismatch");
  MetricReport r;
  if (rows.empty()) return r;

  std::vector<std::pair<double, int>> scores;
  scores.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) scores.emplace_back(rows[i].p_fake, gts[i].y_b);
  const BinaryMetrics bm = binary_metrics(scores);
  r.auc = bm.auc;
  r.eer = bm.eer;
  r.acc = bm.acc;

  if (mode == TaskMode::mfnd) {
    auto cls_block = [&](int positive) {
      MfndClassMetrics c;
      int64_t tp = 0, fp = 0, fn = 0;
      for (size_t i = 0; i < rows.size(); ++i) {
        const int pred = rows[i].p_fake > 0.5 ? 1 : 0;
        const int want = positive;
        tp += (pred == want && gts[i].y_b == want);
        fp += (pred == want && gts[i].y_b != want);
        fn += (pred != want && gts[i].y_b == want);
      }
      if (tp + fp > 0) c.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      if (tp + fn > 0) c.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
      if (c.precision && c.recall && (*c.precision + *c.recall) > 0.0) {
        c.f1 = 2.0 * *c.precision * *c.recall / (*c.precision + *c.recall);
      } else if (tp + fn > 0 && !(tp + fp > 0)) {
        c.f1 = 0.0;
      }
      return c;
    };
    r.fake_class = cls_block(1);
    r.real_class = cls_block(0);
    return r;
  }

  // multi-label classification over live classes; dead halves (stream
  // ablations) are zeroed on both sides so they drop out of the means
  {
    std::vector<std::array<double, 4>> preds;
    std::vector<std::array<int, 4>> mls;
    bool any = false;
    for (size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i].type_probs) continue;
      any = true;
      std::array<double, 4> p = *rows[i].type_probs;
      std::array<int, 4> g = gts[i].y_m;
      if (!rows[i].has_image_type) {
        p[0] = p[1] = 0.0;
        g[0] = g[1] = 0;
      }
      if (!rows[i].has_text_type) {
        p[2] = p[3] = 0.0;
        g[2] = g[3] = 0;
      }
      preds.push_back(p);
      mls.push_back(g);
    }
    if (any) {
      const MultilabelMetrics mm = multilabel_metrics(preds, mls);
      r.of1 = mm.of1;
      r.cf1 = mm.cf1;
      r.map = mm.map;
    }
  }

  // image grounding over image-manipulated samples
  {
    std::vector<std::array<double, 4>> pred_boxes, gt_boxes;
    for (size_t i = 0; i < rows.size(); ++i) {
      if (!gts[i].image_manipulated() || !rows[i].bbox) continue;
      pred_boxes.push_back(*rows[i].bbox);
      gt_boxes.push_back(gts[i].y_ig);
    }
    const GroundingMetrics gm = grounding_metrics(pred_boxes, gt_boxes);
    r.iou_mean = gm.iou_mean;
    r.iou50 = gm.iou50;
    r.iou75 = gm.iou75;
  }

  // token grounding
  {
    std::vector<std::vector<int>> pred_flags, gt_flags;
    std::vector<std::vector<uint8_t>> masks;
    for (size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i].token_flags) continue;
      pred_flags.push_back(*rows[i].token_flags);
      gt_flags.push_back(gts[i].y_tg);
      masks.push_back(rows[i].token_mask);
    }
    if (!pred_flags.empty()) {
      const TokenMetrics tm = token_metrics(pred_flags, gt_flags, masks);
      r.precision = tm.precision;
      r.recall = tm.recall;
      r.f1 = tm.f1;
    }
  }
  return r;
}

MetricReport evaluate(const MalsfModel& model, const std::vector<Sample>& samples,
                      TaskMode mode, int threads) {
  std::vector<EvalRow> rows(samples.size());
  std::vector<GroundTruth> gts(samples.size());
  parallel_for(static_cast<int64_t>(samples.size()), resolve_threads(threads), [&](int64_t i) {
    const auto& s = samples[static_cast<size_t>(i)];
    if (!s.gt) throw std::invalid_argument("evaluate: sample " + s.id + " has no ground truth");
    rows[static_cast<size_t>(i)] = model.evaluate_sample(s);
    gts[static_cast<size_t>(i)] = *s.gt;
  });
  return compute_report(rows, gts, mode);
}

namespace {

struct ParamSnapshot {
  std::vector<std::vector<double>> values;
};

ParamSnapshot snapshot(std::vector<NamedParam>& params) {
  ParamSnapshot s;
  for (auto& p : params) s.values.push_back(p.tensor.data());
  return s;
}

void restore(std::vector<NamedParam>& params, const ParamSnapshot& s) {
  for (size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = s.values[i];
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::string& data_dir,
                  const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Vocab& vocab = Vocab::synthetic();
  std::vector<Sample> train_set = load_split(data_dir, "train", vocab, cfg.model.l_max);
  std::vector<Sample> val_set = load_split(data_dir, "val", vocab, cfg.model.l_max);
  if (train_set.empty()) throw std::runtime_error("train: empty training set");

  RunManifest manifest;
  manifest.code_version = kCodeVersion;
  manifest.config_json = cfg.to_json();
  manifest.config_hash = crc32_of(manifest.config_json);
  try {
    manifest.dataset_manifest_hash = crc32_of(read_file(data_dir + "/manifest.json"));
  } catch (const std::exception&) {
    manifest.dataset_manifest_hash = 0;  // loose files without a manifest
  }

  MalsfModel model(cfg.model, cfg.seed);
  auto params = model.named_params();
  AdamW opt(params);
  const int threads = resolve_threads(cfg.threads);

  const int64_t n = static_cast<int64_t>(train_set.size());
  const int64_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = batches_per_epoch * cfg.total_epochs;

  const std::string best_path = out_dir + "/ckpt_best.bin";
  const std::string final_path = out_dir + "/ckpt_final.bin";
  const std::string manifest_path = out_dir + "/manifest.json";

  TrainResult result;
  result.best_checkpoint = best_path;
  result.final_checkpoint = final_path;
  result.manifest_path = manifest_path;

  ParamSnapshot last_good = snapshot(params);
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    double sum_b = 0.0, sum_m = 0.0, sum_ig = 0.0, sum_tg = 0.0;
    int64_t cnt_b = 0, cnt_m = 0, cnt_ig = 0, cnt_tg = 0;
    double lr_text = 0.0, lr_image = 0.0;

    for (int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int64_t bsz = std::min<int64_t>(cfg.batch_size, n - b0);
      const double frac = total_steps > 1
                              ? static_cast<double>(step) / static_cast<double>(total_steps - 1)
                              : 1.0;
      std::tie(lr_text, lr_image) = lr_at(frac, cfg);

      // per-sample graphs in parallel; gradients merged in sample order so
      // results do not depend on the thread count
      std::vector<std::vector<std::vector<double>>> grads(static_cast<size_t>(bsz));
      std::vector<SampleLoss> losses(static_cast<size_t>(bsz));
      parallel_for(bsz, threads, [&](int64_t k) {
        const Sample& s = train_set[static_cast<size_t>(order[static_cast<size_t>(b0 + k)])];
        Graph g;
        GraphScope scope(g);
        SampleLoss sl = model.loss(s, cfg.loss_weights, cfg.task);
        g.backward_local(sl.total);
        auto& slot = grads[static_cast<size_t>(k)];
        slot.resize(params.size());
        for (size_t pi = 0; pi < params.size(); ++pi) {
          const auto* gp = g.local_grad(params[pi].tensor);
          if (gp) slot[pi] = *gp;
        }
        losses[static_cast<size_t>(k)] = std::move(sl);
      });

      double batch_loss = 0.0;
      for (int64_t k = 0; k < bsz; ++k) {
        const auto& sl = losses[static_cast<size_t>(k)];
        batch_loss += sl.total.value();
        if (sl.bcls) { sum_b += *sl.bcls; ++cnt_b; }
        if (sl.mcls) { sum_m += *sl.mcls; ++cnt_m; }
        if (sl.ig) { sum_ig += *sl.ig; ++cnt_ig; }
        if (sl.tg) { sum_tg += *sl.tg; ++cnt_tg; }
      }
      batch_loss /= static_cast<double>(bsz);
      if (std::isnan(batch_loss)) {
        restore(params, last_good);
        save_checkpoint(model, final_path);
        throw std::runtime_error("train: NaN loss at epoch " + std::to_string(epoch) +
                                 "; last-good checkpoint saved to " + final_path);
      }
      epoch_loss += batch_loss * static_cast<double>(bsz);

      const double inv = 1.0 / static_cast<double>(bsz);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& gbuf = params[pi].tensor.grad_buffer();
        for (int64_t k = 0; k < bsz; ++k) {
          const auto& src = grads[static_cast<size_t>(k)][pi];
          if (src.empty()) continue;
          for (size_t e = 0; e < gbuf.size(); ++e) gbuf[e] += src[e];
        }
        for (auto& v : gbuf) v *= inv;
      }
      opt.step(lr_text, lr_image, cfg.weight_decay);
      model.zero_grads();
      ++step;
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr_text = lr_text;
    log.lr_image = lr_image;
    log.train_loss = epoch_loss / static_cast<double>(n);
    if (cnt_b) log.mean_bcls = sum_b / static_cast<double>(cnt_b);
    if (cnt_m) log.mean_mcls = sum_m / static_cast<double>(cnt_m);
    if (cnt_ig) log.mean_ig = sum_ig / static_cast<double>(cnt_ig);
    if (cnt_tg) log.mean_tg = sum_tg / static_cast<double>(cnt_tg);
    if (!val_set.empty()) log.val = evaluate(model, val_set, cfg.task, threads);
    manifest.epochs.push_back(log);

    if (log.val.acc && (!manifest.best_val_acc || *log.val.acc > *manifest.best_val_acc)) {
      manifest.best_val_acc = log.val.acc;
      manifest.best_epoch = epoch;
      save_checkpoint(model, best_path);
    }
    last_good = snapshot(params);
    write_file_atomic(manifest_path, manifest.to_json());
  }

  save_checkpoint(model, final_path);
  if (manifest.best_epoch < 0) save_checkpoint(model, best_path);
  write_file_atomic(manifest_path, manifest.to_json());
  result.manifest = std::move(manifest);
  return result;
}

namespace {

std::string render_pgm(const std::vector<double>& values, int h, int w, int upscale) {
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  std::ostringstream os;
  os << "P2\n" << w * upscale << " " << h * upscale << "\n255\n";
  for (int y = 0; y < h * upscale; ++y) {
    for (int x = 0; x < w * upscale; ++x) {
      const double v = values[static_cast<size_t>(y / upscale) * w + (x / upscale)];
      const int g = range > 0.0 ? static_cast<int>(std::lround((v - lo) / range * 255.0)) : 0;
      os << g << (x + 1 == w * upscale ? "" : " ");
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace

InspectResult inspect(const MalsfModel& model, const Sample& sample,
                      const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  InspectTrace trace;
  const ModelOutput out = model.forward(sample, &trace);
  const int n_max = model.config().n_max_pairs;

  json j;
  j["sample_id"] = sample.id;
  j["caption"] = sample.caption;

  // gate weights padded to n_max; null slots carry exactly 0
  j["gate_weights"] = json::array();
  for (int slot = 0; slot < n_max; ++slot) {
    json gj;
    if (slot < static_cast<int>(out.live_pairs.size())) {
      const int src = out.live_pairs[static_cast<size_t>(slot)];
      gj["pair"] = src;
      gj["label"] = sample.pairs[static_cast<size_t>(src)].label;
      gj["w_v"] = slot < static_cast<int>(out.gate_v.size())
                      ? json(out.gate_v[static_cast<size_t>(slot)])
                      : json(nullptr);
      gj["w_l"] = slot < static_cast<int>(out.gate_l.size())
                      ? json(out.gate_l[static_cast<size_t>(slot)])
                      : json(nullptr);
    } else {
      gj["pair"] = nullptr;
      gj["label"] = nullptr;
      gj["w_v"] = 0.0;
      gj["w_l"] = 0.0;
    }
    j["gate_weights"].push_back(gj);
  }

  // summary-fusion weights over [global, pair 0, pair 1, ...]
  if (!trace.binary_attn.probs.empty()) {
    j["summary_weights"] = trace.binary_attn.probs;
  }

  auto attn_list = [](const std::vector<AttnTrace>& traces) {
    json arr = json::array();
    for (const auto& t : traces) {
      json tj;
      tj["lq"] = t.lq;
      tj["lk"] = t.lk;
      tj["probs"] = t.probs;
      arr.push_back(tj);
    }
    return arr;
  };
  j["image_query_attention"] = attn_list(trace.img_ctx_attn);
  j["caption_query_attention"] = attn_list(trace.cap_ctx_attn);

  const EvalRow row = model.evaluate_sample(sample);
  json pj;
  pj["p_fake"] = row.p_fake;
  pj["type_probs"] = row.type_probs ? json(*row.type_probs) : json(nullptr);
  pj["bbox"] = row.bbox ? json(*row.bbox) : json(nullptr);
  pj["token_flags"] = row.token_flags ? json(*row.token_flags) : json(nullptr);
  j["predictions"] = pj;

  // spatial attention over the image grid, normalized to [0,1]
  InspectResult res;
  const int gh = model.config().image_size / model.config().patch;
  if (!trace.spatial_attn.probs.empty()) {
    // drop the summary row (position 0), keep the grid positions
    std::vector<double> grid(trace.spatial_attn.probs.begin() + 1,
                             trace.spatial_attn.probs.end());
    double lo = grid[0], hi = grid[0];
    for (double v : grid) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::vector<double> norm(grid.size());
    for (size_t i = 0; i < grid.size(); ++i) {
      norm[i] = hi > lo ? (grid[i] - lo) / (hi - lo) : 0.0;
    }
    j["spatial_attention"] = norm;
    res.pgm_path = out_dir + "/attn_" + sample.id + ".pgm";
    write_file_atomic(res.pgm_path, render_pgm(grid, gh, gh, 4));
  }

  res.json_path = out_dir + "/inspect_" + sample.id + ".json";
  write_file_atomic(res.json_path, j.dump(2));
  return res;
}

}  // namespace malsf
