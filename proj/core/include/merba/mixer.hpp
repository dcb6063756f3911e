#pragma once
// Token mixer: a selective state-space branch and a symmetric convolution
// branch, each at half width, concatenated back to the input width. The
// block's output projection lives in the window extractor, not here.

#include "merba/ops.hpp"
#include "merba/params.hpp"
#include "merba/tensor.hpp"

namespace merba {

struct MixerParams {
    int64_t dim = 0;        // token width D; both branches run at E = D/2
    int64_t state_dim = 8;  // recurrent state size per channel
    bool prenorm = true;    // layer norm on the incoming sequence
    bool exact_zoh = false; // exact exponential discretization instead of Euler
    Tensor ln_g, ln_b;          // [D]
    Tensor in1_w, in1_b;        // [D,E],[E]  scan branch input projection
    Tensor conv1_w, conv1_b;    // [3,E],[E]  depthwise, same-padded
    Tensor in2_w, in2_b;        // [D,E],[E]  conv branch input projection
    Tensor conv2_w, conv2_b;    // [3,E],[E]
    Tensor w_delta, b_delta;    // [E,E],[E]  step-size projection (softplus'd)
    Tensor w_b, w_c;            // [E,N]      input-dependent state in/out maps
    Tensor a_log;               // [E,N]      log of negated decay
    Tensor skip;                // [E]        per-channel passthrough gain
};

MixerParams make_mixer_params(int64_t dim, int64_t state_dim, bool prenorm,
                              bool exact_zoh, Rng& rng);
void register_params(MixerParams& p, ParamRegistry& reg, const std::string& prefix);
int64_t mixer_param_count(int64_t dim, int64_t state_dim, bool prenorm);

// [T,D] -> [T,D] or [G,T,D] -> [G,T,D]. Channels 0..E-1 carry the scan
// branch, E..D-1 the conv branch; all-zero weights give all-zero output.
Tensor mixer_forward(const Tensor& seq, const MixerParams& p, const Binder& bind);

}  // namespace merba
