#include <benchmark/benchmark.h>

#include "pttt/backbone.hpp"
#include "pttt/masking.hpp"
#include "pttt/optim.hpp"
#include "pttt/rng.hpp"
#include "pttt/scoring.hpp"

namespace {

using namespace pttt;

ModelConfig bench_config(int layers, int dim) {
  ModelConfig cfg;
  cfg.num_layers = layers;
  cfg.model_dim = dim;
  cfg.num_heads = dim / 16;
  cfg.ffn_dim = 2 * dim;
  cfg.max_positions = 260;
  cfg.seed = 12;
  return cfg;
}

TokenSequence bench_sequence(int length, std::uint64_t seed) {
  Rng rng(seed);
  std::string raw;
  for (int i = 0; i < length; ++i) {
    raw.push_back(Alphabet::residues()[rng.index(Alphabet::kNumResidues)]);
  }
  return tokenize(raw, Alphabet{}, "bench");
}

void ForwardLogits(benchmark::State& state) {
  const int length = static_cast<int>(state.range(0));
  const ModelConfig cfg = bench_config(4, 128);
  const BackboneWeights<float> model = init_backbone<float>(cfg);
  const TokenSequence x = bench_sequence(length, 34);
  IdMatrix ids(4, static_cast<Eigen::Index>(x.ids.size()));
  for (int r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < x.ids.size(); ++c) {
      ids(r, static_cast<Eigen::Index>(c)) = x.ids[c];
    }
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward_logits<float>(model, nullptr, ids));
  }
  state.SetItemsProcessed(state.iterations() * 4 * length);
}
BENCHMARK(ForwardLogits)->Arg(64)->Arg(128)->Arg(256);

void LossAndGrad(benchmark::State& state) {
  const int length = static_cast<int>(state.range(0));
  const ModelConfig cfg = bench_config(4, 128);
  const BackboneWeights<float> model = init_backbone<float>(cfg);
  Rng rng(35);
  MaskingStrategy masking;
  masking.crop_window.reset();
  std::vector<std::pair<TokenSequence, std::vector<int>>> views;
  for (int b = 0; b < 4; ++b) {
    const TokenSequence x = bench_sequence(length, 36 + b);
    views.push_back(apply_mask_plan(x, sample_mask_plan(x, masking, rng)));
  }
  const Batch batch = make_training_batch(views);
  TrainableSelection sel;
  GradientBuffer<float> buffer = make_gradient_buffer<float>(model, nullptr);
  for (auto _ : state) {
    buffer.zero();
    benchmark::DoNotOptimize(loss_and_grad<float>(
        model, nullptr, batch, LossKind::normalized_cross_entropy, sel,
        buffer));
  }
  state.SetItemsProcessed(state.iterations() * 4 * length);
}
BENCHMARK(LossAndGrad)->Arg(64)->Arg(128)->Arg(256);

void PseudoPerplexity(benchmark::State& state) {
  const int length = static_cast<int>(state.range(0));
  const ModelConfig cfg = bench_config(2, 64);
  const BackboneWeights<float> model = init_backbone<float>(cfg);
  const TokenSequence x = bench_sequence(length, 37);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pseudo_perplexity(model, nullptr, x));
  }
  state.SetItemsProcessed(state.iterations() * length);
}
BENCHMARK(PseudoPerplexity)->Arg(32)->Arg(64)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
