#pragma once
// Shared between ops.cpp (record path) and tape.cpp (backward + replay).

#include "merba/ops.hpp"
#include "merba/tape.hpp"

namespace merba::detail {

// Computes the op's value. `saved_in` supplies record-time context on replay
// (only dropout consumes it); `saved_out`, when non-null, receives context
// for backward. `rng` is required only when a mask must be drawn fresh.
Tensor eval_op(Op op, const std::vector<Tensor>& inputs, const Attrs& attrs,
               const std::vector<Tensor>* saved_in,
               std::vector<Tensor>* saved_out, Rng* rng);

// Accumulation sink for backward: lazily allocated flat buffers per node.
class GradSink {
  public:
    explicit GradSink(const Tape& tape) : tape_(tape), bufs_(tape.size()) {}
    bool has(int node) const { return !bufs_[static_cast<size_t>(node)].empty(); }
    std::vector<double>& buf(int node);
    std::vector<Tensor> finalize();

  private:
    const Tape& tape_;
    std::vector<std::vector<double>> bufs_;
};

// Propagates `gout` (gradient at `node`'s output) into the node's parents.
void backprop_op(const Tape& tape, int node_index, const std::vector<double>& gout,
                 GradSink& sink);

void validate_attrs(Op op, const Attrs& attrs);

}  // namespace merba::detail
