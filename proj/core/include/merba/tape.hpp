#pragma once
// Reverse-mode differentiation record. Nodes are appended in evaluation
// order, so parents always precede children and a reverse walk is a valid
// topological order for backprop.
//
// Concurrency contract: a tape has a single writer. Read-only evaluation of
// disjoint tapes may run concurrently.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "merba/common.hpp"
#include "merba/tensor.hpp"

namespace merba {

enum class Op : uint8_t {
    Leaf,
    Add,
    BiasAdd,
    Mul,
    Scale,
    Matmul,
    Conv2d,
    Conv1dDw,
    LayerNorm,
    BatchNormTrain,
    BatchNormEval,
    Silu,
    Gelu,
    Relu,
    Softplus,
    Exp,
    Softmax,
    LogSumExp,
    GatherLast,
    PermuteRows,
    Transpose,
    Reshape,
    ConcatLast,
    AvgPoolGlobal,
    Dropout,
    SumAll,
    SelectiveScan,
};

const char* op_name(Op op);

using AttrValue = std::variant<int64_t, double, bool, std::vector<int64_t>, std::string>;
using Attrs = std::map<std::string, AttrValue>;

int64_t attr_i64(const Attrs& a, const std::string& key);
double attr_f64(const Attrs& a, const std::string& key);
bool attr_bool(const Attrs& a, const std::string& key);
const std::vector<int64_t>& attr_ivec(const Attrs& a, const std::string& key);

struct Node {
    Op op = Op::Leaf;
    std::vector<int> parents;
    Tensor value;
    Attrs attrs;
    // Op-specific context captured at record time (dropout mask, norm stats,
    // scan states). Replay reuses it only where the op semantics require
    // (dropout); everything else is recomputed from parent values.
    std::vector<Tensor> saved;
    int param_id = -1;
};

class Tape {
  public:
    explicit Tape(bool training = false, uint64_t rng_seed = 0, bool record = true)
        : training_(training), record_(record), rng_(rng_seed) {}

    bool training() const { return training_; }
    bool recording() const { return record_; }
    Rng& rng() { return rng_; }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
    const std::vector<Node>& nodes() const { return nodes_; }

    int append(Node n);

    // Registers a source value. param_id links the node to a named parameter
    // so gradients can be collected per parameter after backward.
    Tensor leaf(const Tensor& value, int param_id = -1);

  private:
    bool training_;
    bool record_;
    Rng rng_;
    std::vector<Node> nodes_;
};

// Gradient of the scalar node `seed` with respect to every ancestor.
// Non-ancestors get a default-constructed (undefined) Tensor.
std::vector<Tensor> backward(const Tape& tape, int seed);

// Collates leaf gradients by param_id, summing over repeated bindings.
std::map<int, Tensor> collect_param_grads(const Tape& tape,
                                          const std::vector<Tensor>& grads);

// Re-evaluates the recorded graph with one source node overridden, reusing
// cached values outside the override's descendant cone. Returns the value of
// `target`.
Tensor replay_with_override(const Tape& tape, int source, const Tensor& value,
                            const std::vector<Tensor>& base_values, int target);

struct GradCheckEntry {
    int node = -1;
    int param_id = -1;
    double max_rel_err = 0.0;
    int64_t elements_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool pass = true;
    double step = 0.0;
    double tolerance = 0.0;
};

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    // Check only leaves bound to parameters (param_id >= 0); otherwise all
    // leaves, inputs included.
    bool params_only = true;
    // < 0 checks every element; otherwise a deterministic subsample.
    int64_t max_elements_per_leaf = -1;
    uint64_t sample_seed = 0;
};

// Central finite differences against the analytic gradients of `seed`.
// Requires the 64-bit mode; the f32 rounding step makes the tolerance
// unreachable otherwise.
GradCheckReport grad_check(const Tape& tape, int seed,
                           const GradCheckOptions& opts = {});

// Comparison core, exposed so tests can feed it deliberately corrupted
// analytic values and watch the fail flag trip.
double grad_rel_err(double analytic, double finite_diff);

}  // namespace merba
