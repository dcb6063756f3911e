#include "merba/tape.hpp"

#include <algorithm>

#include "ops_internal.hpp"

namespace merba {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::BiasAdd: return "bias_add";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Matmul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::Conv1dDw: return "conv1d_dw";
        case Op::LayerNorm: return "layer_norm";
        case Op::BatchNormTrain: return "batch_norm_train";
        case Op::BatchNormEval: return "batch_norm_eval";
        case Op::Silu: return "silu";
        case Op::Gelu: return "gelu";
        case Op::Relu: return "relu";
        case Op::Softplus: return "softplus";
        case Op::Exp: return "exp";
        case Op::Softmax: return "softmax";
        case Op::LogSumExp: return "logsumexp";
        case Op::GatherLast: return "gather_last";
        case Op::PermuteRows: return "permute_rows";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::ConcatLast: return "concat_last";
        case Op::AvgPoolGlobal: return "avgpool_global";
        case Op::Dropout: return "dropout";
        case Op::SumAll: return "sum_all";
        case Op::SelectiveScan: return "selective_scan";
    }
    return "unknown";
}

int64_t attr_i64(const Attrs& a, const std::string& key) {
    auto it = a.find(key);
    MERBA_CHECK(it != a.end(), "missing attribute '", key, "'");
    const int64_t* v = std::get_if<int64_t>(&it->second);
    MERBA_CHECK(v != nullptr, "attribute '", key, "' is not an integer");
    return *v;
}

double attr_f64(const Attrs& a, const std::string& key) {
    auto it = a.find(key);
    MERBA_CHECK(it != a.end(), "missing attribute '", key, "'");
    const double* v = std::get_if<double>(&it->second);
    MERBA_CHECK(v != nullptr, "attribute '", key, "' is not a real number");
    return *v;
}

bool attr_bool(const Attrs& a, const std::string& key) {
    auto it = a.find(key);
    MERBA_CHECK(it != a.end(), "missing attribute '", key, "'");
    const bool* v = std::get_if<bool>(&it->second);
    MERBA_CHECK(v != nullptr, "attribute '", key, "' is not a flag");
    return *v;
}

const std::vector<int64_t>& attr_ivec(const Attrs& a, const std::string& key) {
    auto it = a.find(key);
    MERBA_CHECK(it != a.end(), "missing attribute '", key, "'");
    const auto* v = std::get_if<std::vector<int64_t>>(&it->second);
    MERBA_CHECK(v != nullptr, "attribute '", key, "' is not an index list");
    return *v;
}

int Tape::append(Node n) {
    MERBA_CHECK(record_, "tape is not recording");
    for (int p : n.parents)
        MERBA_CHECK(p >= 0 && p < size(), "parent index ", p, " out of range");
    nodes_.push_back(std::move(n));
    return size() - 1;
}

Tensor Tape::leaf(const Tensor& value, int param_id) {
    MERBA_CHECK(value.defined(), "leaf tensor is undefined");
    if (!record_) return value;
    MERBA_CHECK(value.tape == nullptr, "tensor is already bound to a tape");
    Node n;
    n.op = Op::Leaf;
    n.value = value;
    n.param_id = param_id;
    nodes_.push_back(std::move(n));
    Tensor out = value;
    out.node = size() - 1;
    out.tape = this;
    return out;
}

namespace detail {

std::vector<double>& GradSink::buf(int node) {
    auto& b = bufs_[static_cast<size_t>(node)];
    if (b.empty())
        b.assign(static_cast<size_t>(tape_.node(node).value.size()), 0.0);
    return b;
}

std::vector<Tensor> GradSink::finalize() {
    std::vector<Tensor> out(bufs_.size());
    for (size_t i = 0; i < bufs_.size(); ++i)
        if (!bufs_[i].empty())
            out[i] = Tensor(tape_.node(static_cast<int>(i)).value.shape(),
                            std::move(bufs_[i]));
    return out;
}

}  // namespace detail

std::vector<Tensor> backward(const Tape& tape, int seed) {
    MERBA_CHECK(seed >= 0 && seed < tape.size(), "seed node ", seed, " out of range");
    MERBA_CHECK(tape.node(seed).value.size() == 1, "backward seed must be a scalar, got ",
                shape_str(tape.node(seed).value.shape()));
    detail::GradSink sink(tape);
    sink.buf(seed)[0] = 1.0;
    for (int i = seed; i >= 0; --i) {
        if (!sink.has(i)) continue;
        if (tape.node(i).op == Op::Leaf) continue;
        detail::backprop_op(tape, i, sink.buf(i), sink);
    }
    return sink.finalize();
}

std::map<int, Tensor> collect_param_grads(const Tape& tape,
                                          const std::vector<Tensor>& grads) {
    MERBA_CHECK(grads.size() == static_cast<size_t>(tape.size()),
                "gradient list does not match tape size");
    std::map<int, Tensor> out;
    for (int i = 0; i < tape.size(); ++i) {
        const Node& n = tape.node(i);
        if (n.op != Op::Leaf || n.param_id < 0) continue;
        const Tensor& g = grads[static_cast<size_t>(i)];
        if (!g.defined()) continue;
        auto it = out.find(n.param_id);
        if (it == out.end()) {
            out.emplace(n.param_id, g);
        } else {
            MERBA_CHECK(shape_eq(it->second.shape(), g.shape()),
                        "parameter ", n.param_id, " bound with conflicting shapes");
            std::vector<double> sum = it->second.vec();
            const double* gp = g.data();
            for (size_t j = 0; j < sum.size(); ++j) sum[j] += gp[j];
            it->second = Tensor(g.shape(), std::move(sum));
        }
    }
    return out;
}

Tensor replay_with_override(const Tape& tape, int source, const Tensor& value,
                            const std::vector<Tensor>& base_values, int target) {
    MERBA_CHECK(source >= 0 && source < tape.size(), "source node out of range");
    MERBA_CHECK(target >= 0 && target < tape.size(), "target node out of range");
    MERBA_CHECK(base_values.size() == static_cast<size_t>(tape.size()),
                "base values do not match tape size");
    MERBA_CHECK(shape_eq(value.shape(), tape.node(source).value.shape()),
                "override shape ", shape_str(value.shape()), " does not match node ",
                shape_str(tape.node(source).value.shape()));
    std::vector<char> affected(static_cast<size_t>(tape.size()), 0);
    affected[static_cast<size_t>(source)] = 1;
    std::vector<Tensor> values = base_values;
    values[static_cast<size_t>(source)] = value;
    for (int i = source + 1; i <= target; ++i) {
        const Node& n = tape.node(i);
        if (n.op == Op::Leaf) continue;
        bool hit = false;
        for (int p : n.parents)
            if (affected[static_cast<size_t>(p)]) {
                hit = true;
                break;
            }
        if (!hit) continue;
        affected[static_cast<size_t>(i)] = 1;
        std::vector<Tensor> ins;
        ins.reserve(n.parents.size());
        for (int p : n.parents) ins.push_back(values[static_cast<size_t>(p)]);
        values[static_cast<size_t>(i)] =
            detail::eval_op(n.op, ins, n.attrs, &n.saved, nullptr, nullptr);
    }
    return values[static_cast<size_t>(target)];
}

double grad_rel_err(double analytic, double finite_diff) {
    double denom = std::max({std::abs(analytic), std::abs(finite_diff), 1e-3});
    return std::abs(analytic - finite_diff) / denom;
}

GradCheckReport grad_check(const Tape& tape, int seed, const GradCheckOptions& opts) {
    MERBA_CHECK(default_dtype() == Dtype::F64,
                "finite-difference checking needs the 64-bit mode");
    MERBA_CHECK(opts.step > 0.0 && opts.tolerance > 0.0,
                "step and tolerance must be positive");
    std::vector<Tensor> grads = backward(tape, seed);
    std::vector<Tensor> base;
    base.reserve(static_cast<size_t>(tape.size()));
    for (int i = 0; i < tape.size(); ++i) base.push_back(tape.node(i).value);

    GradCheckReport rep;
    rep.step = opts.step;
    rep.tolerance = opts.tolerance;
    Rng srng(opts.sample_seed);
    for (int i = 0; i < tape.size() && i <= seed; ++i) {
        const Node& n = tape.node(i);
        if (n.op != Op::Leaf) continue;
        if (opts.params_only && n.param_id < 0) continue;
        const Tensor& v = n.value;
        std::vector<int64_t> picks;
        if (opts.max_elements_per_leaf >= 0 && opts.max_elements_per_leaf < v.size()) {
            std::vector<int64_t> all(static_cast<size_t>(v.size()));
            for (int64_t j = 0; j < v.size(); ++j) all[static_cast<size_t>(j)] = j;
            srng.shuffle(all);
            picks.assign(all.begin(), all.begin() + opts.max_elements_per_leaf);
            std::sort(picks.begin(), picks.end());
        } else {
            picks.resize(static_cast<size_t>(v.size()));
            for (int64_t j = 0; j < v.size(); ++j) picks[static_cast<size_t>(j)] = j;
        }
        GradCheckEntry ent;
        ent.node = i;
        ent.param_id = n.param_id;
        const Tensor& g = grads[static_cast<size_t>(i)];
        for (int64_t j : picks) {
            std::vector<double> plus = v.vec();
            std::vector<double> minus = v.vec();
            plus[static_cast<size_t>(j)] += opts.step;
            minus[static_cast<size_t>(j)] -= opts.step;
            double fp = replay_with_override(tape, i, Tensor(v.shape(), std::move(plus)),
                                             base, seed)
                            .item();
            double fm = replay_with_override(tape, i, Tensor(v.shape(), std::move(minus)),
                                             base, seed)
                            .item();
            double fd = (fp - fm) / (2.0 * opts.step);
            double analytic = g.defined() ? g.at(j) : 0.0;
            ent.max_rel_err = std::max(ent.max_rel_err, grad_rel_err(analytic, fd));
            ++ent.elements_checked;
        }
        rep.max_rel_err = std::max(rep.max_rel_err, ent.max_rel_err);
        rep.entries.push_back(ent);
    }
    rep.pass = rep.max_rel_err <= opts.tolerance;
    return rep;
}

}  // namespace merba
