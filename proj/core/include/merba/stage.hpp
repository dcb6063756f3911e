#pragma once
// One hierarchical stage: window partition, per-window multi-direction local
// extraction, window merge, two full-map attention blocks, then resolution
// reduction (stride-2 conv between stages; the final stage norm-pools the map
// into a single vector).

#include "merba/mixer.hpp"
#include "merba/scan.hpp"

namespace merba {

// The four production traversals, in fusion order.
extern const ScanDirection kScanDirections[4];

struct WindowGrid {
    Tensor windows;  // [N*rows*cols, wH, wW, D]
    int64_t rows = 0, cols = 0;
    int64_t win_h = 0, win_w = 0;
    Shape source;  // shape of the partitioned map (rank 3 or 4)
};

// x [H,W,D] or [N,H,W,D]; extents must split evenly into win_h x win_w tiles.
WindowGrid partition(const Tensor& x, int64_t win_h, int64_t win_w, Tape& tape);
// Reassembles a windows tensor of the grid's layout back to the source shape.
Tensor merge_windows(const Tensor& windows, const WindowGrid& grid, Tape& tape);

// Batch norm that owns its running statistics (updated host-side when the
// tape is in training mode).
struct BatchNormParams {
    Tensor g, b;        // affine, trainable
    Tensor mean, var;   // running buffers
    double momentum = 0.1;
};
BatchNormParams make_batch_norm(int64_t channels, double momentum);
void register_params(BatchNormParams& p, ParamRegistry& reg, const std::string& prefix);
Tensor batch_norm_layer(const Tensor& x, BatchNormParams& p, const Binder& bind);

// Pre-norm residual MLP: x + Drop(W2 Drop(GELU(W1 LN(x)))).
struct MlpParams {
    Tensor ln_g, ln_b;  // [D]
    Tensor w1, b1;      // [D, r*D]
    Tensor w2, b2;      // [r*D, D]
};
MlpParams make_mlp(int64_t dim, int64_t ratio, Rng& rng);
void register_params(MlpParams& p, ParamRegistry& reg, const std::string& prefix);
Tensor mlp_block(const Tensor& x, const MlpParams& p, double drop, bool residual,
                 const Binder& bind);
int64_t mlp_param_count(int64_t dim, int64_t ratio);

// Window-local block: scans each window along the four directions, runs the
// (shared or per-direction) mixer on each sequence, folds the results back
// onto the grid, sums them, projects, then applies the MLP.
struct ExtractorParams {
    int64_t dim = 0;
    bool residual = true;
    std::vector<MixerParams> mixers;  // size 1 (shared) or 4 (per direction)
    Tensor fuse_w, fuse_b;            // [D,D],[D] post-fusion projection
    MlpParams mlp;
    double dropout = 0.1;
};
ExtractorParams make_extractor(int64_t dim, int64_t state_dim, int64_t mlp_ratio,
                               double dropout, bool residual, bool per_direction,
                               bool prenorm, bool exact_zoh, Rng& rng);
void register_params(ExtractorParams& p, ParamRegistry& reg, const std::string& prefix);
int64_t extractor_param_count(int64_t dim, int64_t state_dim, int64_t mlp_ratio,
                              bool per_direction, bool prenorm);
// windows [G,wH,wW,D] (or a single [wH,wW,D]) -> same shape.
Tensor local_extract(const Tensor& windows, const ExtractorParams& p,
                     const Binder& bind);

// Pre-norm multi-head self-attention over the full token map, plus MLP.
struct AttentionBlockParams {
    int64_t dim = 0;
    int64_t heads = 1;
    Tensor ln_g, ln_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [D,D],[D] each
    MlpParams mlp;
    double dropout = 0.1;
};
AttentionBlockParams make_attention_block(int64_t dim, int64_t heads,
                                          int64_t mlp_ratio, double dropout, Rng& rng);
void register_params(AttentionBlockParams& p, ParamRegistry& reg,
                     const std::string& prefix);
int64_t attention_param_count(int64_t dim, int64_t mlp_ratio);
// x [B,T,D] -> [B,T,D]. No positional term: position is carried by the scan
// orders upstream.
Tensor attention_block(const Tensor& x, const AttentionBlockParams& p,
                       const Binder& bind);

struct StageParams {
    int64_t dim = 0;
    int64_t out_dim = 0;  // equals dim on the final stage
    bool final_stage = false;
    std::vector<ExtractorParams> blocks;
    std::vector<AttentionBlockParams> global_blocks;  // always two
    Tensor down_w, down_b;  // stride-2 reduction conv (non-final)
    BatchNormParams bn;     // final-stage norm before pooling
};
StageParams make_stage(int64_t dim, int64_t out_dim, int64_t depth, int64_t state_dim,
                       int64_t heads, int64_t mlp_ratio, double dropout,
                       double bn_momentum, bool final_stage, bool residual,
                       bool per_direction, bool prenorm, bool exact_zoh, Rng& rng);
void register_params(StageParams& p, ParamRegistry& reg, const std::string& prefix);
int64_t stage_param_count(int64_t dim, int64_t out_dim, int64_t depth,
                          int64_t state_dim, int64_t mlp_ratio, bool final_stage,
                          bool per_direction, bool prenorm);

// x [N,H,W,D] -> [N,ceil(H/2),ceil(W/2),out_dim], or [N,1,1,D] on the final
// stage. The window is clamped to the map extent when the map is smaller.
// On the final stage, `prepool` (if given) receives the normed map that
// feeds the pooling — the saliency target.
Tensor stage_forward(const Tensor& x, StageParams& p, int64_t window,
                     const Binder& bind, Tensor* prepool = nullptr);

}  // namespace merba
