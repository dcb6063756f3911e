#include "merba/stage.hpp"

#include <cmath>

namespace merba {

const ScanDirection kScanDirections[4] = {
    {ScanKind::HorizontalRaster, false, false},
    {ScanKind::VerticalRaster, false, false},
    {ScanKind::HorizontalZigzag, false, false},
    {ScanKind::VerticalZigzag, false, false},
};

namespace {

Tensor normal_init(const Shape& shape, Rng& rng) {
    return Tensor::normal(shape, rng, 0.02);
}

}  // namespace

WindowGrid partition(const Tensor& x, int64_t win_h, int64_t win_w, Tape& tape) {
    MERBA_CHECK(x.rank() == 3 || x.rank() == 4,
                "partition expects [H,W,D] or [N,H,W,D], got rank ", x.rank());
    bool batched = x.rank() == 4;
    int64_t n = batched ? x.dim(0) : 1;
    int64_t h = x.dim(batched ? 1 : 0);
    int64_t w = x.dim(batched ? 2 : 1);
    int64_t d = x.dim(batched ? 3 : 2);
    MERBA_CHECK(win_h >= 1 && win_w >= 1, "window extent must be positive");
    auto round_up = [](int64_t v, int64_t m) { return ((v + m - 1) / m) * m; };
    MERBA_CHECK(h % win_h == 0 && w % win_w == 0, "map ", h, "x", w,
                " does not tile by ", win_h, "x", win_w, " windows; pad the map to ",
                round_up(h, win_h), "x", round_up(w, win_w), " first");
    WindowGrid grid;
    grid.rows = h / win_h;
    grid.cols = w / win_w;
    grid.win_h = win_h;
    grid.win_w = win_w;
    grid.source = x.shape();
    Tensor t = ops::reshape(x, {n, grid.rows, win_h, grid.cols, win_w, d}, tape);
    t = ops::transpose(t, {0, 1, 3, 2, 4, 5}, tape);
    grid.windows = ops::reshape(t, {n * grid.rows * grid.cols, win_h, win_w, d}, tape);
    return grid;
}

Tensor merge_windows(const Tensor& windows, const WindowGrid& grid, Tape& tape) {
    bool batched = grid.source.size() == 4;
    int64_t n = batched ? grid.source[0] : 1;
    int64_t d = grid.source[batched ? 3 : 2];
    MERBA_CHECK(windows.rank() == 4 &&
                    windows.dim(0) == n * grid.rows * grid.cols &&
                    windows.dim(1) == grid.win_h && windows.dim(2) == grid.win_w &&
                    windows.dim(3) == d,
                "windows tensor does not match the grid layout");
    Tensor t = ops::reshape(
        windows, {n, grid.rows, grid.cols, grid.win_h, grid.win_w, d}, tape);
    t = ops::transpose(t, {0, 1, 3, 2, 4, 5}, tape);
    return ops::reshape(t, grid.source, tape);
}

BatchNormParams make_batch_norm(int64_t channels, double momentum) {
    BatchNormParams p;
    p.g = Tensor::full({channels}, 1.0);
    p.b = Tensor::full({channels}, 0.0);
    p.mean = Tensor::full({channels}, 0.0);
    p.var = Tensor::full({channels}, 1.0);
    p.momentum = momentum;
    return p;
}

void register_params(BatchNormParams& p, ParamRegistry& reg,
                     const std::string& prefix) {
    reg.add(prefix + ".g", &p.g, true, false);
    reg.add(prefix + ".b", &p.b, true, false);
    reg.add(prefix + ".running_mean", &p.mean, false, false);
    reg.add(prefix + ".running_var", &p.var, false, false);
}

Tensor batch_norm_layer(const Tensor& x, BatchNormParams& p, const Binder& bind) {
    Tape& tape = bind.tape();
    if (!tape.training())
        return ops::batch_norm_eval(x, bind(p.g), bind(p.b), bind(p.mean), bind(p.var),
                                    1e-5, tape);
    Tensor y = ops::batch_norm_train(x, bind(p.g), bind(p.b), 1e-5, tape);
    // Fold the batch statistics into the running buffers (unbiased variance,
    // matching the usual eval-time convention).
    int64_t c = x.dim(x.rank() - 1);
    int64_t m = x.size() / c;
    const auto& v = x.vec();
    std::vector<double> mean(static_cast<size_t>(c), 0.0),
        var(static_cast<size_t>(c), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            mean[static_cast<size_t>(ch)] += v[static_cast<size_t>(i * c + ch)];
    for (auto& e : mean) e /= static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double d = v[static_cast<size_t>(i * c + ch)] - mean[static_cast<size_t>(ch)];
            var[static_cast<size_t>(ch)] += d * d;
        }
    double norm = m > 1 ? 1.0 / static_cast<double>(m - 1) : 1.0;
    for (auto& e : var) e *= norm;
    TensorBuilder bm({c}), bv({c});
    const auto& om = p.mean.vec();
    const auto& ov = p.var.vec();
    for (int64_t ch = 0; ch < c; ++ch) {
        size_t i = static_cast<size_t>(ch);
        bm.data()[i] = (1.0 - p.momentum) * om[i] + p.momentum * mean[i];
        bv.data()[i] = (1.0 - p.momentum) * ov[i] + p.momentum * var[i];
    }
    p.mean = bm.finalize();
    p.var = bv.finalize();
    return y;
}

MlpParams make_mlp(int64_t dim, int64_t ratio, Rng& rng) {
    MlpParams p;
    p.ln_g = Tensor::full({dim}, 1.0);
    p.ln_b = Tensor::full({dim}, 0.0);
    p.w1 = normal_init({dim, ratio * dim}, rng);
    p.b1 = Tensor::full({ratio * dim}, 0.0);
    p.w2 = normal_init({ratio * dim, dim}, rng);
    p.b2 = Tensor::full({dim}, 0.0);
    return p;
}

void register_params(MlpParams& p, ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".ln.g", &p.ln_g, true, false);
    reg.add(prefix + ".ln.b", &p.ln_b, true, false);
    reg.add(prefix + ".w1", &p.w1, true, true);
    reg.add(prefix + ".b1", &p.b1, true, false);
    reg.add(prefix + ".w2", &p.w2, true, true);
    reg.add(prefix + ".b2", &p.b2, true, false);
}

int64_t mlp_param_count(int64_t dim, int64_t ratio) {
    return 2 * dim + (dim * ratio * dim + ratio * dim) + (ratio * dim * dim + dim);
}

Tensor mlp_block(const Tensor& x, const MlpParams& p, double drop, bool residual,
                 const Binder& bind) {
    Tape& tape = bind.tape();
    Tensor h = ops::layer_norm(x, bind(p.ln_g), bind(p.ln_b), 1e-5, tape);
    h = ops::gelu(ops::bias_add(ops::matmul(h, bind(p.w1), tape), bind(p.b1), tape),
                  tape);
    h = ops::dropout(h, drop, tape);
    h = ops::bias_add(ops::matmul(h, bind(p.w2), tape), bind(p.b2), tape);
    h = ops::dropout(h, drop, tape);
    return residual ? ops::add(x, h, tape) : h;
}

ExtractorParams make_extractor(int64_t dim, int64_t state_dim, int64_t mlp_ratio,
                               double dropout, bool residual, bool per_direction,
                               bool prenorm, bool exact_zoh, Rng& rng) {
    ExtractorParams p;
    p.dim = dim;
    p.residual = residual;
    p.dropout = dropout;
    int64_t n_mixers = per_direction ? 4 : 1;
    for (int64_t i = 0; i < n_mixers; ++i)
        p.mixers.push_back(make_mixer_params(dim, state_dim, prenorm, exact_zoh, rng));
    p.fuse_w = normal_init({dim, dim}, rng);
    p.fuse_b = Tensor::full({dim}, 0.0);
    p.mlp = make_mlp(dim, mlp_ratio, rng);
    return p;
}

void register_params(ExtractorParams& p, ParamRegistry& reg,
                     const std::string& prefix) {
    if (p.mixers.size() == 1) {
        register_params(p.mixers[0], reg, prefix + ".mixer");
    } else {
        for (size_t i = 0; i < p.mixers.size(); ++i)
            register_params(p.mixers[i], reg,
                            prefix + ".mixer" + std::to_string(i));
    }
    reg.add(prefix + ".fuse.w", &p.fuse_w, true, true);
    reg.add(prefix + ".fuse.b", &p.fuse_b, true, false);
    register_params(p.mlp, reg, prefix + ".mlp");
}

int64_t extractor_param_count(int64_t dim, int64_t state_dim, int64_t mlp_ratio,
                              bool per_direction, bool prenorm) {
    int64_t n = (per_direction ? 4 : 1) * mixer_param_count(dim, state_dim, prenorm);
    n += dim * dim + dim;  // fusion projection
    n += mlp_param_count(dim, mlp_ratio);
    return n;
}

Tensor local_extract(const Tensor& windows, const ExtractorParams& p,
                     const Binder& bind) {
    Tape& tape = bind.tape();
    MERBA_CHECK(windows.rank() == 3 || windows.rank() == 4,
                "local_extract expects [wH,wW,D] or [G,wH,wW,D], got rank ",
                windows.rank());
    bool rank3 = windows.rank() == 3;
    Tensor x = rank3 ? ops::reshape(windows,
                                    {1, windows.dim(0), windows.dim(1), windows.dim(2)},
                                    tape)
                     : windows;
    MERBA_CHECK(x.dim(3) == p.dim, "extractor built for width ", p.dim, ", got ",
                x.dim(3));
    Tensor fused;
    for (int s = 0; s < 4; ++s) {
        const Permutation& perm =
            cached_permutation(kScanDirections[s], x.dim(1), x.dim(2));
        const MixerParams& mixer =
            p.mixers.size() == 1 ? p.mixers[0] : p.mixers[static_cast<size_t>(s)];
        Tensor seq = apply_scan(x, perm, tape);
        Tensor folded = invert_scan(mixer_forward(seq, mixer, bind), perm, tape);
        fused = s == 0 ? folded : ops::add(fused, folded, tape);
    }
    Tensor proj = ops::bias_add(ops::matmul(fused, bind(p.fuse_w), tape),
                                bind(p.fuse_b), tape);
    proj = ops::dropout(proj, p.dropout, tape);
    Tensor x1 = p.residual ? ops::add(x, proj, tape) : proj;
    Tensor y = mlp_block(x1, p.mlp, p.dropout, p.residual, bind);
    if (rank3) y = ops::reshape(y, {y.dim(1), y.dim(2), y.dim(3)}, tape);
    return y;
}

AttentionBlockParams make_attention_block(int64_t dim, int64_t heads,
                                          int64_t mlp_ratio, double dropout,
                                          Rng& rng) {
    MERBA_CHECK(heads >= 1 && dim % heads == 0, "head count ", heads,
                " must divide width ", dim);
    AttentionBlockParams p;
    p.dim = dim;
    p.heads = heads;
    p.dropout = dropout;
    p.ln_g = Tensor::full({dim}, 1.0);
    p.ln_b = Tensor::full({dim}, 0.0);
    p.wq = normal_init({dim, dim}, rng);
    p.bq = Tensor::full({dim}, 0.0);
    p.wk = normal_init({dim, dim}, rng);
    p.bk = Tensor::full({dim}, 0.0);
    p.wv = normal_init({dim, dim}, rng);
    p.bv = Tensor::full({dim}, 0.0);
    p.wo = normal_init({dim, dim}, rng);
    p.bo = Tensor::full({dim}, 0.0);
    p.mlp = make_mlp(dim, mlp_ratio, rng);
    return p;
}

void register_params(AttentionBlockParams& p, ParamRegistry& reg,
                     const std::string& prefix) {
    reg.add(prefix + ".ln.g", &p.ln_g, true, false);
    reg.add(prefix + ".ln.b", &p.ln_b, true, false);
    reg.add(prefix + ".q.w", &p.wq, true, true);
    reg.add(prefix + ".q.b", &p.bq, true, false);
    reg.add(prefix + ".k.w", &p.wk, true, true);
    reg.add(prefix + ".k.b", &p.bk, true, false);
    reg.add(prefix + ".v.w", &p.wv, true, true);
    reg.add(prefix + ".v.b", &p.bv, true, false);
    reg.add(prefix + ".o.w", &p.wo, true, true);
    reg.add(prefix + ".o.b", &p.bo, true, false);
    register_params(p.mlp, reg, prefix + ".mlp");
}

int64_t attention_param_count(int64_t dim, int64_t mlp_ratio) {
    return 2 * dim + 4 * (dim * dim + dim) + mlp_param_count(dim, mlp_ratio);
}

Tensor attention_block(const Tensor& x, const AttentionBlockParams& p,
                       const Binder& bind) {
    Tape& tape = bind.tape();
    MERBA_CHECK(x.rank() == 3 && x.dim(2) == p.dim,
                "attention expects [B,T,", p.dim, "]");
    int64_t b = x.dim(0), t = x.dim(1), h = p.heads, dh = p.dim / p.heads;
    Tensor normed = ops::layer_norm(x, bind(p.ln_g), bind(p.ln_b), 1e-5, tape);
    auto project = [&](const Tensor& w, const Tensor& bias) {
        Tensor y = ops::bias_add(ops::matmul(normed, bind(w), tape), bind(bias), tape);
        y = ops::reshape(y, {b, t, h, dh}, tape);
        return ops::transpose(y, {0, 2, 1, 3}, tape);  // [B,h,T,dh]
    };
    Tensor q = project(p.wq, p.bq);
    Tensor k = project(p.wk, p.bk);
    Tensor v = project(p.wv, p.bv);
    Tensor kt = ops::transpose(k, {0, 1, 3, 2}, tape);  // [B,h,dh,T]
    Tensor scores =
        ops::scale(ops::matmul(q, kt, tape), 1.0 / std::sqrt(static_cast<double>(dh)),
                   tape);
    Tensor attn = ops::dropout(ops::softmax(scores, tape), p.dropout, tape);
    Tensor ctx = ops::matmul(attn, v, tape);            // [B,h,T,dh]
    ctx = ops::transpose(ctx, {0, 2, 1, 3}, tape);
    ctx = ops::reshape(ctx, {b, t, p.dim}, tape);
    Tensor out = ops::bias_add(ops::matmul(ctx, bind(p.wo), tape), bind(p.bo), tape);
    out = ops::dropout(out, p.dropout, tape);
    Tensor x1 = ops::add(x, out, tape);
    return mlp_block(x1, p.mlp, p.dropout, true, bind);
}

StageParams make_stage(int64_t dim, int64_t out_dim, int64_t depth, int64_t state_dim,
                       int64_t heads, int64_t mlp_ratio, double dropout,
                       double bn_momentum, bool final_stage, bool residual,
                       bool per_direction, bool prenorm, bool exact_zoh, Rng& rng) {
    MERBA_CHECK(depth >= 1, "stage depth must be >= 1, got ", depth);
    StageParams p;
    p.dim = dim;
    p.out_dim = final_stage ? dim : out_dim;
    p.final_stage = final_stage;
    for (int64_t i = 0; i < depth; ++i)
        p.blocks.push_back(make_extractor(dim, state_dim, mlp_ratio, dropout, residual,
                                          per_direction, prenorm, exact_zoh, rng));
    for (int i = 0; i < 2; ++i)
        p.global_blocks.push_back(
            make_attention_block(dim, heads, mlp_ratio, dropout, rng));
    if (final_stage) {
        p.bn = make_batch_norm(dim, bn_momentum);
    } else {
        p.down_w = normal_init({3, 3, dim, out_dim}, rng);
        p.down_b = Tensor::full({out_dim}, 0.0);
    }
    return p;
}

void register_params(StageParams& p, ParamRegistry& reg, const std::string& prefix) {
    for (size_t i = 0; i < p.blocks.size(); ++i)
        register_params(p.blocks[i], reg, prefix + ".local" + std::to_string(i));
    for (size_t i = 0; i < p.global_blocks.size(); ++i)
        register_params(p.global_blocks[i], reg,
                        prefix + ".global" + std::to_string(i));
    if (p.final_stage) {
        register_params(p.bn, reg, prefix + ".norm");
    } else {
        reg.add(prefix + ".down.w", &p.down_w, true, true);
        reg.add(prefix + ".down.b", &p.down_b, true, false);
    }
}

int64_t stage_param_count(int64_t dim, int64_t out_dim, int64_t depth,
                          int64_t state_dim, int64_t mlp_ratio, bool final_stage,
                          bool per_direction, bool prenorm) {
    int64_t n = depth * extractor_param_count(dim, state_dim, mlp_ratio,
                                              per_direction, prenorm);
    n += 2 * attention_param_count(dim, mlp_ratio);
    n += final_stage ? 2 * dim : (3 * 3 * dim * out_dim + out_dim);
    return n;
}

Tensor stage_forward(const Tensor& x, StageParams& p, int64_t window,
                     const Binder& bind, Tensor* prepool) {
    Tape& tape = bind.tape();
    MERBA_CHECK(x.rank() == 4 && x.dim(3) == p.dim, "stage expects [N,H,W,", p.dim,
                "]");
    int64_t h = x.dim(1), w = x.dim(2);
    int64_t wh = std::min(window, h), ww = std::min(window, w);
    WindowGrid grid = partition(x, wh, ww, tape);
    Tensor win = grid.windows;
    for (auto& block : p.blocks) win = local_extract(win, block, bind);
    Tensor merged = merge_windows(win, grid, tape);
    Tensor seq = ops::reshape(merged, {x.dim(0), h * w, p.dim}, tape);
    for (auto& block : p.global_blocks) seq = attention_block(seq, block, bind);
    Tensor map = ops::reshape(seq, {x.dim(0), h, w, p.dim}, tape);
    if (p.final_stage) {
        Tensor normed = batch_norm_layer(map, p.bn, bind);
        if (prepool) *prepool = normed;
        return ops::avgpool_global(normed, tape);
    }
    return ops::conv2d(map, bind(p.down_w), bind(p.down_b), 2, 1, tape);
}

}  // namespace merba
