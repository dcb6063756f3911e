#pragma once
// Forward primitives. Every entry point funnels through apply(), which
// validates attributes, cross-checks the kernel output against the pure
// shape function, and records a node when the tape is recording.

#include "merba/tape.hpp"
#include "merba/tensor.hpp"

namespace merba {

// Pure shape algebra: output shape as a function of input shapes and attrs.
Shape infer_shape(Op op, const std::vector<Shape>& inputs, const Attrs& attrs);

// The uniform primitive application surface. Rejects unknown or missing
// attributes and mismatched shapes (naming both sides).
Tensor apply(Op op, const std::vector<Tensor>& inputs, Attrs attrs, Tape& tape);

namespace ops {

Tensor add(const Tensor& a, const Tensor& b, Tape& tape);
// b has shape [C] and broadcasts along the last axis of x.
Tensor bias_add(const Tensor& x, const Tensor& b, Tape& tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape& tape);
Tensor scale(const Tensor& x, double factor, Tape& tape);
Tensor sub(const Tensor& a, const Tensor& b, Tape& tape);

// x [..., K] times w [K, M] contracts the last axis; equal-rank inputs with
// matching leading extents run as a batched matrix product.
Tensor matmul(const Tensor& x, const Tensor& w, Tape& tape);

// x [N,H,W,Ci], w [kh,kw,Ci,Co], b [Co].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t pad, Tape& tape);
// Channelwise 1-D convolution over the middle axis: x [G,T,E] or [T,E],
// w [k,E], b [E]; same-length output via symmetric padding.
Tensor conv1d_dw(const Tensor& x, const Tensor& w, const Tensor& b, int64_t pad,
                 Tape& tape);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape& tape);
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps, Tape& tape);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var, double eps,
                       Tape& tape);

Tensor silu(const Tensor& x, Tape& tape);
Tensor gelu(const Tensor& x, Tape& tape);
Tensor relu(const Tensor& x, Tape& tape);
Tensor softplus(const Tensor& x, Tape& tape);
Tensor exp(const Tensor& x, Tape& tape);
Tensor softmax(const Tensor& x, Tape& tape);
Tensor logsumexp(const Tensor& x, Tape& tape);

// One index per row of the flattened leading axes; picks x[row, idx[row]].
Tensor gather_last(const Tensor& x, const std::vector<int64_t>& indices, Tape& tape);
// Reorders the second-to-last axis: y[..., t, :] = x[..., order[t], :].
Tensor permute_rows(const Tensor& x, const std::vector<int64_t>& order, Tape& tape);
Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm, Tape& tape);
Tensor reshape(const Tensor& x, Shape shape, Tape& tape);
Tensor concat_last(const Tensor& a, const Tensor& b, Tape& tape);
// [N,H,W,C] -> [N,1,1,C]
Tensor avgpool_global(const Tensor& x, Tape& tape);
// Inverted dropout; train-time only (callers skip it at eval).
Tensor dropout(const Tensor& x, double rate, Tape& tape);
Tensor sum_all(const Tensor& x, Tape& tape);
Tensor mean_all(const Tensor& x, Tape& tape);

// Input-selective state-space recurrence over the middle axis of u [G,T,E].
// Parameters: w_delta [E,E], b_delta [E], w_b [E,N], w_c [E,N], a_log [E,N],
// skip [E]. See MixerParams for the conventions.
Tensor selective_scan(const Tensor& u, const Tensor& w_delta, const Tensor& b_delta,
                      const Tensor& w_b, const Tensor& w_c, const Tensor& a_log,
                      const Tensor& skip, bool exact_zoh, Tape& tape);

}  // namespace ops
}  // namespace merba
