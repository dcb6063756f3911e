#include <cmath>

#include "doctest.h"
#include "merba/stage.hpp"

using namespace merba;

TEST_CASE("28x28 map splits into sixteen 7x7 windows and merges back exactly") {
    Tape tape;
    Rng rng(21);
    Tensor x = tape.leaf(Tensor::uniform({2, 28, 28, 3}, rng, -1.0, 1.0));
    WindowGrid grid = partition(x, 7, 7, tape);
    CHECK(grid.rows == 4);
    CHECK(grid.cols == 4);
    CHECK(grid.windows.shape() == Shape{2 * 16, 7, 7, 3});
    Tensor back = merge_windows(grid.windows, grid, tape);
    REQUIRE(back.shape() == x.shape());
    for (int64_t i = 0; i < x.size(); ++i) CHECK(back.at(i) == x.at(i));
}

TEST_CASE("partition places each tile where the window grid says it is") {
    Tape tape;
    // 4x4 grid, value = flat index; 2x2 windows
    std::vector<double> vals(16);
    for (int i = 0; i < 16; ++i) vals[static_cast<size_t>(i)] = i;
    Tensor x = tape.leaf(Tensor({4, 4, 1}, std::move(vals)));
    WindowGrid grid = partition(x, 2, 2, tape);
    REQUIRE(grid.windows.shape() == Shape{4, 2, 2, 1});
    // window (1,0) holds rows 2..3, cols 0..1
    const double* w = nullptr;
    (void)w;
    std::vector<double> want{8, 9, 12, 13};
    for (int64_t i = 0; i < 4; ++i)
        CHECK(grid.windows.at(2 * 4 + i) == doctest::Approx(want[static_cast<size_t>(i)]));
}

TEST_CASE("a 7x7 map is a single window") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::full({1, 7, 7, 2}, 0.5));
    WindowGrid grid = partition(x, 7, 7, tape);
    CHECK(grid.rows == 1);
    CHECK(grid.cols == 1);
    CHECK(grid.windows.shape() == Shape{1, 7, 7, 2});
}

TEST_CASE("partition refuses extents that do not tile") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::full({1, 9, 9, 1}, 0.0));
    CHECK_THROWS_AS(partition(x, 7, 7, tape), ValidationError);
}

TEST_CASE("batch norm layer updates running stats only in training mode") {
    BatchNormParams p = make_batch_norm(1, 0.1);
    double m0 = p.mean.at(0), v0 = p.var.at(0);
    CHECK(m0 == 0.0);
    CHECK(v0 == 1.0);
    {
        Tape tape(true, 0, true);
        Binder bind(tape, nullptr);
        Tensor x = tape.leaf(Tensor({2, 1, 1, 1}, {0.0, 4.0}));
        batch_norm_layer(x, p, bind);
        // batch mean 2, unbiased variance 8; one momentum-0.1 step from (0,1)
        CHECK(p.mean.at(0) == doctest::Approx(0.2));
        CHECK(p.var.at(0) == doctest::Approx(0.9 + 0.1 * 8.0));
    }
    {
        double m1 = p.mean.at(0), v1 = p.var.at(0);
        Tape tape(false, 0, true);
        Binder bind(tape, nullptr);
        Tensor x = tape.leaf(Tensor({2, 1, 1, 1}, {1.0, 3.0}));
        Tensor y = batch_norm_layer(x, p, bind);
        CHECK(p.mean.at(0) == m1);
        CHECK(p.var.at(0) == v1);
        // eval path normalizes with the running stats
        double want = (1.0 - m1) / std::sqrt(v1 + 1e-5);
        CHECK(y.at(0) == doctest::Approx(want));
    }
}

TEST_CASE("mlp block without residual collapses to W2 GELU(W1 LN(x))") {
    Rng rng(31);
    MlpParams p = make_mlp(4, 2, rng);
    Tape tape;  // eval mode: dropout inert
    Binder bind(tape, nullptr);
    Tensor x = tape.leaf(Tensor::uniform({3, 4}, rng, -1.0, 1.0));
    Tensor plain = mlp_block(x, p, 0.5, false, bind);
    Tensor with_res = mlp_block(x, p, 0.5, true, bind);
    for (int64_t i = 0; i < x.size(); ++i)
        CHECK(with_res.at(i) == doctest::Approx(plain.at(i) + x.at(i)));
}

TEST_CASE("local extraction fuses four scans; shared mixer binds once per direction") {
    DtypeScope scope(Dtype::F64);
    Rng rng(41);
    ExtractorParams p = make_extractor(8, 4, 2, 0.0, true, false, true, false, rng);
    REQUIRE(p.mixers.size() == 1);
    ParamRegistry reg;
    register_params(p, reg, "x0");
    Tape tape;
    Binder bind(tape, &reg);
    Tensor w = tape.leaf(Tensor::uniform({2, 3, 3, 8}, rng, -1.0, 1.0));
    Tensor y = local_extract(w, p, bind);
    CHECK(y.shape() == Shape{2, 3, 3, 8});

    // manual re-derivation: sum of the four scan->mix->unscan paths, then
    // fuse projection and the MLP (residual, dropout 0)
    Tape t2;
    Binder b2(t2, &reg);
    Tensor w2 = t2.leaf(Tensor(w.shape(), w.vec()));
    Tensor acc;
    for (const ScanDirection& d : kScanDirections) {
        const Permutation& perm = cached_permutation(d, 3, 3);
        Tensor seq = apply_scan(w2, perm, t2);
        Tensor mixed = mixer_forward(seq, p.mixers[0], b2);
        Tensor folded = invert_scan(mixed, perm, t2);
        acc = acc.defined() ? ops::add(acc, folded, t2) : folded;
    }
    Tensor proj = ops::bias_add(
        ops::matmul(ops::reshape(acc, {2 * 9, 8}, t2), b2(p.fuse_w), t2),
        b2(p.fuse_b), t2);
    proj = ops::reshape(proj, {2, 3, 3, 8}, t2);
    Tensor expect = ops::add(w2, proj, t2);
    expect = mlp_block(expect, p.mlp, 0.0, true, b2);
    REQUIRE(expect.shape() == y.shape());
    for (int64_t i = 0; i < y.size(); ++i)
        CHECK(y.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-10));
}

TEST_CASE("attention block is shape-preserving and order-sensitive") {
    Rng rng(51);
    AttentionBlockParams p = make_attention_block(8, 2, 2, 0.0, rng);
    Tape tape;
    Binder bind(tape, nullptr);
    Tensor x = tape.leaf(Tensor::uniform({2, 5, 8}, rng, -1.0, 1.0));
    Tensor y = attention_block(x, p, bind);
    CHECK(y.shape() == Shape{2, 5, 8});
    // swapping two tokens must not give the identical swapped output unless
    // attention ignored content (it must not)
    std::vector<double> sw = x.vec();
    for (int64_t e = 0; e < 8; ++e) std::swap(sw[static_cast<size_t>(e)], sw[static_cast<size_t>(8 + e)]);
    Tensor ys = attention_block(tape.leaf(Tensor(x.shape(), std::move(sw))), p, bind);
    double diff = 0.0;
    for (int64_t e = 0; e < 8; ++e)
        diff = std::max(diff, std::abs(ys.at(e) - y.at(8 + e)));
    // content moved with the tokens: row 0 of the swapped run equals row 1 of
    // the base run because self-attention is permutation-equivariant
    CHECK(diff < 1e-6);
}

TEST_CASE("stage forward halves the map and doubles channels") {
    Rng rng(61);
    StageParams p = make_stage(8, 16, 1, 4, 2, 2, 0.0, 0.1, false, true, false,
                               true, false, rng);
    REQUIRE(p.global_blocks.size() == 2);
    Tape tape;
    Binder bind(tape, nullptr);
    Tensor x = tape.leaf(Tensor::uniform({1, 14, 14, 8}, rng, -1.0, 1.0));
    Tensor y = stage_forward(x, p, 7, bind);
    CHECK(y.shape() == Shape{1, 7, 7, 16});
}

TEST_CASE("final stage norms and pools to a single vector") {
    Rng rng(71);
    StageParams p = make_stage(8, 8, 1, 4, 2, 2, 0.0, 0.1, true, true, false,
                               true, false, rng);
    Tape tape;
    Binder bind(tape, nullptr);
    Tensor x = tape.leaf(Tensor::uniform({2, 7, 7, 8}, rng, -1.0, 1.0));
    Tensor prepool;
    Tensor y = stage_forward(x, p, 7, bind, &prepool);
    CHECK(y.shape() == Shape{2, 1, 1, 8});
    REQUIRE(prepool.defined());
    CHECK(prepool.shape() == Shape{2, 7, 7, 8});
    // pooled output is the spatial mean of the prepool map
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 8; ++c) {
            double s = 0.0;
            for (int64_t i = 0; i < 49; ++i) s += prepool.at((n * 49 + i) * 8 + c);
            CHECK(y.at(n * 8 + c) == doctest::Approx(s / 49.0));
        }
}

TEST_CASE("stage clamps the window on small maps") {
    Rng rng(81);
    StageParams p = make_stage(8, 16, 1, 4, 2, 2, 0.0, 0.1, false, true, false,
                               true, false, rng);
    Tape tape;
    Binder bind(tape, nullptr);
    Tensor x = tape.leaf(Tensor::uniform({1, 4, 4, 8}, rng, -1.0, 1.0));
    Tensor y = stage_forward(x, p, 7, bind);
    CHECK(y.shape() == Shape{1, 2, 2, 16});
}
