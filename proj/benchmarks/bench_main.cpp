// Microbenchmarks for the hot paths: scan permutation shuffles, the selective
// recurrence kernel, and a full miniature forward pass.

#include <benchmark/benchmark.h>

#include "merba/serialize.hpp"
#include "merba/synth.hpp"

namespace {

using namespace merba;

void bm_scan_apply(benchmark::State& state) {
    Rng rng(1);
    Tensor x = Tensor::uniform({16, 7, 7, 64}, rng, -1.0, 1.0);
    const Permutation& p =
        cached_permutation(parse_direction("d"), 7, 7);
    for (auto _ : state) {
        Tape tape;
        Tensor y = apply_scan(tape.leaf(x), p, tape);
        benchmark::DoNotOptimize(y.at(0));
    }
    state.SetItemsProcessed(state.iterations() * x.size());
}
BENCHMARK(bm_scan_apply);

void bm_selective_scan(benchmark::State& state) {
    const int64_t T = state.range(0);
    Rng rng(2);
    Tensor u = Tensor::uniform({16, T, 32}, rng, -1.0, 1.0);
    MixerParams p = make_mixer_params(64, 8, true, false, rng);
    for (auto _ : state) {
        Tape tape;
        Binder bind(tape);
        Tensor y = ops::selective_scan(
            tape.leaf(u), bind(p.w_delta), bind(p.b_delta), bind(p.w_b),
            bind(p.w_c), bind(p.a_log), bind(p.skip), false, tape);
        benchmark::DoNotOptimize(y.at(0));
    }
    state.SetItemsProcessed(state.iterations() * u.size());
}
BENCHMARK(bm_selective_scan)->Arg(49)->Arg(196);

void bm_mixer_forward(benchmark::State& state) {
    Rng rng(3);
    MixerParams p = make_mixer_params(64, 8, true, false, rng);
    Tensor x = Tensor::uniform({16, 49, 64}, rng, -1.0, 1.0);
    for (auto _ : state) {
        Tape tape;
        Binder bind(tape);
        Tensor y = mixer_forward(tape.leaf(x), p, bind);
        benchmark::DoNotOptimize(y.at(0));
    }
}
BENCHMARK(bm_mixer_forward);

void bm_miniature_forward(benchmark::State& state) {
    AppConfig cfg = default_config();
    cfg.model.input_extent = 56;
    cfg.model.embed_dim = 16;
    cfg.model.dims = {16, 32, 64, 64};
    cfg.model.depths = {1, 1, 1, 1};
    cfg.model.state_dim = 4;
    cfg.model.mlp_ratio = 2;
    cfg.model.dropout = 0.0;
    LabelSpace space = build_space(cfg.labels);
    auto model = make_model(cfg.model, space, 7);
    SynthSpec spec = three_class_spec(56);
    auto data = synth_dataset(spec, 2, 11);
    std::vector<FlowTriplet> xs;
    for (const auto& s : data) xs.push_back(s.x);
    Tensor batch = stack_inputs(xs);
    for (auto _ : state) {
        Tape tape;  // eval mode, no recording needed for timing forward cost
        ForwardOut out = model_forward(*model, tape.leaf(batch), tape);
        benchmark::DoNotOptimize(out.feature.at(0));
    }
    state.SetItemsProcessed(state.iterations() * batch.dim(0));
}
BENCHMARK(bm_miniature_forward);

}  // namespace

BENCHMARK_MAIN();
