#include <benchmark/benchmark.h>

#include "malsf/model.hpp"
#include "malsf/ops.hpp"
#include "malsf/rng.hpp"
#include "malsf/synthdata.hpp"

namespace {

using namespace malsf;

Tensor random_matrix(int r, int c, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.normal();
  return Tensor({r, c}, std::move(data));
}

void BM_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = random_matrix(n, 32, rng);
  Tensor b = random_matrix(32, 32, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * int64_t{n} * 32 * 32);
}
BENCHMARK(BM_matmul)->Arg(16)->Arg(65)->Arg(256);

void BM_attention(benchmark::State& state) {
  Rng rng(2);
  AttentionParams p = make_attention_params(32, 4, rng);
  Tensor q = random_matrix(65, 32, rng);
  Tensor kv = random_matrix(16, 32, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cross_attention(q, kv, kv, p));
  }
}
BENCHMARK(BM_attention);

void BM_forward(benchmark::State& state) {
  MalsfModel model(ModelConfig{}, 7);
  Sample s = generate_sample(123, {ManipKind::fa}, PairSource::open_vocab);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(s));
  }
}
BENCHMARK(BM_forward);

void BM_forward_backward(benchmark::State& state) {
  MalsfModel model(ModelConfig{}, 7);
  Sample s = generate_sample(123, {ManipKind::fa}, PairSource::open_vocab);
  LossWeights w;
  for (auto _ : state) {
    Graph g;
    GraphScope scope(g);
    SampleLoss sl = model.loss(s, w, TaskMode::dgm4);
    g.backward_local(sl.total);
    benchmark::DoNotOptimize(sl);
  }
}
BENCHMARK(BM_forward_backward);

void BM_generate_sample(benchmark::State& state) {
  uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_sample(seed++, {ManipKind::ts}, PairSource::open_vocab));
  }
}
BENCHMARK(BM_generate_sample);

}  // namespace

BENCHMARK_MAIN();
