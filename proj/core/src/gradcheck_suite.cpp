#include "malsf/gradcheck_suite.hpp"

#include <cmath>
#include <thread>

#include "malsf/fusion.hpp"
#include "malsf/losses.hpp"
#include "malsf/synthdata.hpp"

namespace malsf {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.normal(0.0, scale);
  return Tensor(std::move(shape), std::move(data));
}

std::vector<Sample> gradcheck_batch(uint64_t seed) {
  return {generate_sample(derive_seed(seed, 11), {ManipKind::fa}, PairSource::open_vocab),
          generate_sample(derive_seed(seed, 12), {ManipKind::ts}, PairSource::open_vocab)};
}

std::vector<GradCheckCase> tensor_cases(uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  auto check = [&](const std::string& name, const ScalarFn& f, std::vector<Tensor> xs) {
    out.push_back({name, grad_check(f, std::move(xs), 1e-5)});
  };

  check("matmul", [](const std::vector<Tensor>& xs) { return sum(matmul(xs[0], xs[1])); },
        {random_tensor({5, 7}, rng), random_tensor({7, 4}, rng)});
  check("softmax", [](const std::vector<Tensor>& xs) {
          return sum(mul(softmax_lastdim(xs[0]), xs[1]));
        },
        {random_tensor({6, 8}, rng), random_tensor({6, 8}, rng)});
  check("log_softmax", [](const std::vector<Tensor>& xs) {
          return sum(mul(log_softmax_lastdim(xs[0]), xs[1]));
        },
        {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)});
  check("layer_norm", [](const std::vector<Tensor>& xs) {
          return sum(mul(layer_norm(xs[0], xs[1], xs[2], 1e-5), xs[3]));
        },
        {random_tensor({5, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng),
         random_tensor({5, 8}, rng)});
  check("gelu", [](const std::vector<Tensor>& xs) { return sum(gelu(xs[0])); },
        {random_tensor({4, 5}, rng)});
  check("sigmoid", [](const std::vector<Tensor>& xs) { return sum(sigmoid(xs[0])); },
        {random_tensor({3, 6}, rng)});
  check("softplus", [](const std::vector<Tensor>& xs) { return sum(softplus(xs[0])); },
        {random_tensor({3, 6}, rng)});
  check("div", [](const std::vector<Tensor>& xs) {
          return sum(div_t(xs[0], add_const(sigmoid(xs[1]), 0.5)));
        },
        {random_tensor({4, 4}, rng), random_tensor({4, 4}, rng)});
  check("mul_rowwise", [](const std::vector<Tensor>& xs) {
          return sum(mul_rowwise(xs[0], xs[1]));
        },
        {random_tensor({6, 5}, rng), random_tensor({6}, rng)});
  check("mul_scalar", [](const std::vector<Tensor>& xs) {
          return sum(mul_scalar(xs[0], xs[1]));
        },
        {random_tensor({4, 4}, rng), random_tensor({1}, rng)});
  {
    Rng prng(derive_seed(seed, 3));
    AttentionParams p = make_attention_params(8, 2, prng);
    Tensor q = random_tensor({5, 8}, rng);
    Tensor k = random_tensor({7, 8}, rng);
    Tensor v = random_tensor({7, 8}, rng);
    Tensor probe = random_tensor({5, 8}, rng);
    std::vector<Tensor> xs{q, k, v, p.w_q, p.w_k, p.w_v, p.w_o, p.b_q, p.b_k, p.b_v, p.b_o};
    auto f = [p, probe](const std::vector<Tensor>& in) {
      AttentionParams ap = p;
      ap.w_q = in[3];
      ap.w_k = in[4];
      ap.w_v = in[5];
      ap.w_o = in[6];
      ap.b_q = in[7];
      ap.b_k = in[8];
      ap.b_v = in[9];
      ap.b_o = in[10];
      return sum(mul(cross_attention(in[0], in[1], in[2], ap), probe));
    };
    out.push_back({"cross_attention", grad_check(f, std::move(xs), 1e-5)});
  }
  {
    std::vector<uint8_t> mask{1, 0, 1, 1, 0, 1, 1};
    Rng prng(derive_seed(seed, 4));
    AttentionParams p = make_attention_params(8, 2, prng);
    Tensor q = random_tensor({4, 8}, rng);
    Tensor kv = random_tensor({7, 8}, rng);
    Tensor probe = random_tensor({4, 8}, rng);
    auto f = [p, probe, mask](const std::vector<Tensor>& in) {
      return sum(mul(cross_attention(in[0], in[1], in[1], p, &mask), probe));
    };
    out.push_back({"cross_attention_masked", grad_check(f, {q, kv}, 1e-5)});
  }
  return out;
}

std::vector<GradCheckCase> losses_cases(uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  out.push_back({"cross_entropy", grad_check([](const std::vector<Tensor>& xs) {
                                    return cross_entropy(xs[0], 1);
                                  },
                                  {random_tensor({4}, rng)}, 1e-5)});
  out.push_back({"mcls_loss", grad_check([](const std::vector<Tensor>& xs) {
                                return mcls_loss(xs[0], {1, 0, 1, 0});
                              },
                              {random_tensor({4}, rng)}, 1e-5)});
  {
    // keep the box away from min/max kinks
    Tensor pred({4}, {0.21, 0.32, 0.63, 0.74});
    auto f = [](const std::vector<Tensor>& xs) {
      return bbox_loss(xs[0], {0.25, 0.25, 0.5, 0.5});
    };
    out.push_back({"bbox_loss", grad_check(f, {pred}, 1e-5)});
  }
  {
    std::vector<int> flags{0, 1, 0, 0, 1, 0};
    std::vector<uint8_t> mask{1, 1, 1, 1, 1, 0};
    auto f = [flags, mask](const std::vector<Tensor>& xs) {
      return tg_loss(xs[0], flags, mask);
    };
    out.push_back({"tg_loss", grad_check(f, {random_tensor({6, 2}, rng)}, 1e-5)});
  }
  {
    LossWeights w;
    auto f = [w](const std::vector<Tensor>& xs) {
      Tensor m = sum(mul(xs[1], xs[1]));
      Tensor g = sum(abs_val(xs[2]));
      Tensor t = sum(softplus(xs[3]));
      return combined_loss(sum(mul(xs[0], xs[0])), &m, &g, &t, w);
    };
    out.push_back({"combined_loss",
                   grad_check(f,
                              {random_tensor({3}, rng), random_tensor({3}, rng),
                               random_tensor({3}, rng), random_tensor({3}, rng)},
                              1e-5)});
  }
  return out;
}

std::vector<GradCheckCase> component_cases(const char* which, uint64_t seed) {
  // Whole-component checks: perturb a handful of representative parameters
  // of a reduced model against the composite loss.
  const ModelConfig cfg = gradcheck_model_config();
  auto model = std::make_shared<MalsfModel>(cfg, seed);
  auto batch = std::make_shared<std::vector<Sample>>(gradcheck_batch(seed));
  LossWeights w;

  auto composite = [model, batch, w](const std::vector<Tensor>&) {
    Tensor total;
    for (const auto& s : *batch) {
      Tensor l = model->loss(s, w, TaskMode::dgm4).total;
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, 1.0 / static_cast<double>(batch->size()));
  };

  std::vector<GradCheckCase> out;
  const std::string prefix = which;
  for (auto& p : model->named_params()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    out.push_back({p.name, grad_check(composite, {p.tensor}, 1e-5)});
    if (out.size() >= 6) break;  // representative subset per component
  }
  return out;
}

}  // namespace

ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.text_layers = 1;
  cfg.image_layers = 1;
  cfg.patch = 8;  // 4x4 feature grid over the 32x32 canvas
  cfg.image_size = 32;
  cfg.l_max = 16;
  cfg.n_max_pairs = 4;
  cfg.stream_depth = 1;
  return cfg;
}

std::vector<std::string> gradcheck_module_names() {
  return {"tensor", "losses", "encoders", "verification", "fusion", "full"};
}

GradCheckResult grad_check_model_composite(const ModelConfig& cfg, uint64_t seed, int threads) {
  if (threads <= 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    threads = hw == 0 ? 1 : static_cast<int>(hw);
  }
  const LossWeights w;
  auto batch = gradcheck_batch(seed);

  auto batch_loss = [&w, &batch](MalsfModel& m) {
    Tensor total;
    for (const auto& s : batch) {
      Tensor l = m.loss(s, w, TaskMode::dgm4).total;
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
  };

  // analytic gradients once
  MalsfModel model(cfg, seed);
  auto params = model.named_params();
  std::vector<std::vector<double>> analytic(params.size());
  {
    Graph g;
    GraphScope scope(g);
    Tensor loss = batch_loss(model);
    g.backward_local(loss);
    for (size_t i = 0; i < params.size(); ++i) {
      const auto* gp = g.local_grad(params[i].tensor);
      analytic[i] = gp ? *gp : std::vector<double>(params[i].tensor.data().size(), 0.0);
    }
  }

  // one model replica per thread; finite differences are pure per replica
  const double eps = 1e-5;
  std::vector<GradCheckResult> partial(static_cast<size_t>(threads));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      MalsfModel replica(cfg, seed);
      auto rp = replica.named_params();
      GradCheckResult local;
      for (size_t pi = static_cast<size_t>(t); pi < rp.size();
           pi += static_cast<size_t>(threads)) {
        auto& data = rp[pi].tensor.data();
        for (size_t e = 0; e < data.size(); ++e) {
          const double orig = data[e];
          data[e] = orig + eps;
          const double fp = batch_loss(replica).value();
          data[e] = orig - eps;
          const double fm = batch_loss(replica).value();
          data[e] = orig;
          const double numeric = (fp - fm) / (2.0 * eps);
          const double a = analytic[pi][e];
          const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
          const double rel = std::fabs(a - numeric) / denom;
          if (rel > local.max_rel_err) {
            local.max_rel_err = rel;
            local.worst_input = static_cast<int>(pi);
            local.worst_element = static_cast<int64_t>(e);
            local.analytic = a;
            local.numeric = numeric;
          }
        }
      }
      partial[static_cast<size_t>(t)] = local;
    });
  }
  for (auto& th : pool) th.join();

  GradCheckResult res;
  for (const auto& p : partial) {
    if (p.max_rel_err > res.max_rel_err) res = p;
  }
  return res;
}

std::vector<GradCheckCase> run_gradcheck_module(const std::string& module, uint64_t seed) {
  if (module == "tensor") return tensor_cases(seed);
  if (module == "losses") return losses_cases(seed);
  if (module == "encoders") {
    auto a = component_cases("text", seed);
    auto b = component_cases("image", seed);
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  if (module == "verification") {
    auto a = component_cases("verify", seed);
    auto b = component_cases("gates", seed);
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  if (module == "fusion") {
    auto a = component_cases("shallow", seed);
    auto b = component_cases("deep", seed);
    auto c = component_cases("heads", seed);
    a.insert(a.end(), b.begin(), b.end());
    a.insert(a.end(), c.begin(), c.end());
    return a;
  }
  if (module == "full") {
    GradCheckCase full{"composite_loss", grad_check_model_composite(gradcheck_model_config(),
                                                                    seed, 0)};
    return {full};
  }
  throw std::invalid_argument("unknown gradcheck module: " + module);
}

}  // namespace malsf
