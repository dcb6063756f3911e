#include "merba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "ops_internal.hpp"

namespace merba {
namespace {

int64_t rows_of(const Shape& s) {
    int64_t r = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return r;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// max(x,0) + log1p(exp(-|x|)): exact for large |x| where the naive form
// overflows or truncates.
double softplus_stable(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

bool is_perm(const std::vector<int64_t>& v) {
    std::vector<char> seen(v.size(), 0);
    for (int64_t t : v) {
        if (t < 0 || t >= static_cast<int64_t>(v.size()) || seen[static_cast<size_t>(t)])
            return false;
        seen[static_cast<size_t>(t)] = 1;
    }
    return true;
}

template <typename F>
Tensor unary_map(const Tensor& x, F f) {
    TensorBuilder out(x.shape());
    const double* xp = x.data();
    double* yp = out.data();
    parallel_for(x.size(), [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) yp[i] = f(xp[i]);
    });
    return out.finalize();
}

std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    return st;
}

// ZOH discretization coefficient (exp(d*a)-1)/a and its partials, with the
// removable singularity at a ~ 0 patched by the series limit.
struct ZohCoef {
    double coef, d_delta, d_a;
};
ZohCoef zoh_coef(double d, double a, double abar) {
    if (std::abs(a) > 1e-9) {
        double c = std::expm1(d * a) / a;
        return {c, abar, (d * abar - c) / a};
    }
    return {d * (1.0 + 0.5 * d * a), abar, 0.5 * d * d};
}

}  // namespace

Shape infer_shape(Op op, const std::vector<Shape>& in, const Attrs& attrs) {
    auto want = [&](size_t n) {
        MERBA_CHECK(in.size() == n, op_name(op), " expects ", n, " inputs, got ", in.size());
    };
    switch (op) {
        case Op::Leaf:
            MERBA_CHECK(false, "leaf shapes come from their values");
            return {};
        case Op::Add:
        case Op::Mul: {
            want(2);
            MERBA_CHECK(shape_eq(in[0], in[1]), op_name(op), " shape mismatch: ",
                        shape_str(in[0]), " vs ", shape_str(in[1]));
            return in[0];
        }
        case Op::BiasAdd: {
            want(2);
            MERBA_CHECK(!in[0].empty(), "bias_add input must have rank >= 1");
            MERBA_CHECK(in[1].size() == 1 && in[1][0] == in[0].back(),
                        "bias ", shape_str(in[1]), " does not match last axis of ",
                        shape_str(in[0]));
            return in[0];
        }
        case Op::Scale: {
            want(1);
            attr_f64(attrs, "alpha");
            return in[0];
        }
        case Op::Matmul: {
            want(2);
            const Shape& x = in[0];
            const Shape& w = in[1];
            if (w.size() == 2) {
                MERBA_CHECK(!x.empty() && x.back() == w[0], "matmul ", shape_str(x),
                            " x ", shape_str(w), ": inner extents differ");
                Shape out(x.begin(), x.end() - 1);
                out.push_back(w[1]);
                return out;
            }
            MERBA_CHECK(x.size() == w.size() && x.size() >= 3,
                        "batched matmul needs equal ranks >= 3, got ", shape_str(x),
                        " x ", shape_str(w));
            for (size_t i = 0; i + 2 < x.size(); ++i)
                MERBA_CHECK(x[i] == w[i], "batched matmul leading extents differ: ",
                            shape_str(x), " x ", shape_str(w));
            MERBA_CHECK(x.back() == w[w.size() - 2], "matmul ", shape_str(x), " x ",
                        shape_str(w), ": inner extents differ");
            Shape out(x.begin(), x.end() - 1);
            out.push_back(w.back());
            return out;
        }
        case Op::Conv2d: {
            want(3);
            const Shape& x = in[0];
            const Shape& w = in[1];
            MERBA_CHECK(x.size() == 4, "conv2d input must be [N,H,W,C], got ", shape_str(x));
            MERBA_CHECK(w.size() == 4, "conv2d kernel must be [kh,kw,Ci,Co], got ",
                        shape_str(w));
            MERBA_CHECK(w[2] == x[3], "conv2d channel mismatch: input ", shape_str(x),
                        " kernel ", shape_str(w));
            MERBA_CHECK(in[2].size() == 1 && in[2][0] == w[3], "conv2d bias ",
                        shape_str(in[2]), " does not match Co=", w[3]);
            int64_t stride = attr_i64(attrs, "stride");
            int64_t pad = attr_i64(attrs, "pad");
            MERBA_CHECK(stride >= 1, "conv2d stride must be >= 1, got ", stride);
            MERBA_CHECK(pad >= 0, "conv2d pad must be >= 0, got ", pad);
            MERBA_CHECK(x[1] + 2 * pad >= w[0] && x[2] + 2 * pad >= w[1],
                        "conv2d kernel ", shape_str(w), " larger than padded input ",
                        shape_str(x));
            int64_t oh = (x[1] + 2 * pad - w[0]) / stride + 1;
            int64_t ow = (x[2] + 2 * pad - w[1]) / stride + 1;
            return {x[0], oh, ow, w[3]};
        }
        case Op::Conv1dDw: {
            want(3);
            const Shape& x = in[0];
            const Shape& w = in[1];
            MERBA_CHECK(x.size() == 2 || x.size() == 3,
                        "conv1d input must be [T,E] or [G,T,E], got ", shape_str(x));
            MERBA_CHECK(w.size() == 2, "conv1d kernel must be [k,E], got ", shape_str(w));
            int64_t t = x[x.size() - 2];
            int64_t e = x.back();
            MERBA_CHECK(w[1] == e, "conv1d channel mismatch: input ", shape_str(x),
                        " kernel ", shape_str(w));
            MERBA_CHECK(in[2].size() == 1 && in[2][0] == e, "conv1d bias ",
                        shape_str(in[2]), " does not match E=", e);
            int64_t pad = attr_i64(attrs, "pad");
            MERBA_CHECK(pad >= 0, "conv1d pad must be >= 0, got ", pad);
            MERBA_CHECK(t + 2 * pad >= w[0], "conv1d kernel longer than padded input");
            Shape out = x;
            out[out.size() - 2] = t + 2 * pad - w[0] + 1;
            return out;
        }
        case Op::LayerNorm:
        case Op::BatchNormTrain:
        case Op::BatchNormEval: {
            size_t n_in = op == Op::BatchNormEval ? 5 : 3;
            want(n_in);
            const Shape& x = in[0];
            MERBA_CHECK(!x.empty(), op_name(op), " input must have rank >= 1");
            if (op != Op::LayerNorm)
                MERBA_CHECK(x.size() >= 2, op_name(op), " input must have rank >= 2");
            int64_t c = x.back();
            for (size_t i = 1; i < n_in; ++i)
                MERBA_CHECK(in[i].size() == 1 && in[i][0] == c, op_name(op), " input ",
                            i, " must be [", c, "], got ", shape_str(in[i]));
            MERBA_CHECK(attr_f64(attrs, "eps") > 0.0, op_name(op), " eps must be > 0");
            return x;
        }
        case Op::Silu:
        case Op::Gelu:
        case Op::Relu:
        case Op::Softplus:
        case Op::Exp: {
            want(1);
            return in[0];
        }
        case Op::Softmax: {
            want(1);
            MERBA_CHECK(!in[0].empty(), "softmax input must have rank >= 1");
            return in[0];
        }
        case Op::LogSumExp: {
            want(1);
            MERBA_CHECK(in[0].size() >= 2, "logsumexp input must have rank >= 2");
            return Shape(in[0].begin(), in[0].end() - 1);
        }
        case Op::GatherLast: {
            want(1);
            MERBA_CHECK(in[0].size() >= 2, "gather_last input must have rank >= 2");
            const auto& idx = attr_ivec(attrs, "indices");
            int64_t rows = rows_of(in[0]);
            MERBA_CHECK(static_cast<int64_t>(idx.size()) == rows, "gather_last needs ",
                        rows, " indices, got ", idx.size());
            for (int64_t v : idx)
                MERBA_CHECK(v >= 0 && v < in[0].back(), "gather_last index ", v,
                            " out of range [0,", in[0].back(), ")");
            return Shape(in[0].begin(), in[0].end() - 1);
        }
        case Op::PermuteRows: {
            want(1);
            MERBA_CHECK(in[0].size() >= 2, "permute_rows input must have rank >= 2");
            const auto& order = attr_ivec(attrs, "order");
            int64_t t = in[0][in[0].size() - 2];
            MERBA_CHECK(static_cast<int64_t>(order.size()) == t && is_perm(order),
                        "order must be a permutation of [0,", t, ")");
            return in[0];
        }
        case Op::Transpose: {
            want(1);
            const auto& perm = attr_ivec(attrs, "perm");
            MERBA_CHECK(perm.size() == in[0].size() && is_perm(perm),
                        "perm must be a permutation of [0,", in[0].size(), ")");
            Shape out(in[0].size());
            for (size_t i = 0; i < perm.size(); ++i)
                out[i] = in[0][static_cast<size_t>(perm[i])];
            return out;
        }
        case Op::Reshape: {
            want(1);
            const auto& shape = attr_ivec(attrs, "shape");
            for (int64_t d : shape) MERBA_CHECK(d >= 1, "reshape extents must be >= 1");
            MERBA_CHECK(numel(shape) == numel(in[0]), "reshape ", shape_str(in[0]),
                        " -> ", shape_str(shape), " changes the element count");
            return shape;
        }
        case Op::ConcatLast: {
            want(2);
            MERBA_CHECK(in[0].size() == in[1].size() && !in[0].empty(),
                        "concat_last rank mismatch: ", shape_str(in[0]), " vs ",
                        shape_str(in[1]));
            for (size_t i = 0; i + 1 < in[0].size(); ++i)
                MERBA_CHECK(in[0][i] == in[1][i], "concat_last leading extents differ: ",
                            shape_str(in[0]), " vs ", shape_str(in[1]));
            Shape out = in[0];
            out.back() += in[1].back();
            return out;
        }
        case Op::AvgPoolGlobal: {
            want(1);
            MERBA_CHECK(in[0].size() == 4, "avgpool_global input must be [N,H,W,C], got ",
                        shape_str(in[0]));
            return {in[0][0], 1, 1, in[0][3]};
        }
        case Op::Dropout: {
            want(1);
            double rate = attr_f64(attrs, "rate");
            MERBA_CHECK(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0,1), got ",
                        rate);
            return in[0];
        }
        case Op::SumAll: {
            want(1);
            return {1};
        }
        case Op::SelectiveScan: {
            want(7);
            const Shape& u = in[0];
            MERBA_CHECK(u.size() == 3, "scan input must be [G,T,E], got ", shape_str(u));
            int64_t e = u[2];
            MERBA_CHECK(in[1].size() == 2 && in[1][0] == e && in[1][1] == e,
                        "w_delta must be [", e, ",", e, "], got ", shape_str(in[1]));
            MERBA_CHECK(in[2].size() == 1 && in[2][0] == e, "b_delta must be [", e,
                        "], got ", shape_str(in[2]));
            MERBA_CHECK(in[3].size() == 2 && in[3][0] == e, "w_b must be [", e,
                        ",N], got ", shape_str(in[3]));
            int64_t n = in[3][1];
            MERBA_CHECK(shape_eq(in[4], {e, n}), "w_c must be [", e, ",", n, "], got ",
                        shape_str(in[4]));
            MERBA_CHECK(shape_eq(in[5], {e, n}), "a_log must be [", e, ",", n,
                        "], got ", shape_str(in[5]));
            MERBA_CHECK(in[6].size() == 1 && in[6][0] == e, "skip must be [", e,
                        "], got ", shape_str(in[6]));
            attr_bool(attrs, "exact_zoh");
            return u;
        }
    }
    MERBA_CHECK(false, "unhandled op");
    return {};
}

namespace detail {

namespace {

enum class AType { I64, F64, Bool, IVec };

struct AttrSpec {
    const char* key;
    AType type;
};

const std::vector<AttrSpec>& attr_spec(Op op) {
    static const std::vector<AttrSpec> none;
    static const std::vector<AttrSpec> scale{{"alpha", AType::F64}};
    static const std::vector<AttrSpec> conv2d{{"pad", AType::I64}, {"stride", AType::I64}};
    static const std::vector<AttrSpec> conv1d{{"pad", AType::I64}};
    static const std::vector<AttrSpec> eps{{"eps", AType::F64}};
    static const std::vector<AttrSpec> gather{{"indices", AType::IVec}};
    static const std::vector<AttrSpec> permrows{{"order", AType::IVec}};
    static const std::vector<AttrSpec> transpose{{"perm", AType::IVec}};
    static const std::vector<AttrSpec> reshape{{"shape", AType::IVec}};
    static const std::vector<AttrSpec> dropout{{"rate", AType::F64}};
    static const std::vector<AttrSpec> scan{{"exact_zoh", AType::Bool}};
    switch (op) {
        case Op::Scale: return scale;
        case Op::Conv2d: return conv2d;
        case Op::Conv1dDw: return conv1d;
        case Op::LayerNorm:
        case Op::BatchNormTrain:
        case Op::BatchNormEval: return eps;
        case Op::GatherLast: return gather;
        case Op::PermuteRows: return permrows;
        case Op::Transpose: return transpose;
        case Op::Reshape: return reshape;
        case Op::Dropout: return dropout;
        case Op::SelectiveScan: return scan;
        default: return none;
    }
}

bool attr_type_matches(const AttrValue& v, AType t) {
    switch (t) {
        case AType::I64: return std::holds_alternative<int64_t>(v);
        case AType::F64: return std::holds_alternative<double>(v);
        case AType::Bool: return std::holds_alternative<bool>(v);
        case AType::IVec: return std::holds_alternative<std::vector<int64_t>>(v);
    }
    return false;
}

}  // namespace

void validate_attrs(Op op, const Attrs& attrs) {
    const auto& spec = attr_spec(op);
    MERBA_CHECK(attrs.size() == spec.size(), op_name(op), " takes ", spec.size(),
                " attributes, got ", attrs.size());
    for (const auto& s : spec) {
        auto it = attrs.find(s.key);
        MERBA_CHECK(it != attrs.end(), op_name(op), " is missing attribute '", s.key, "'");
        MERBA_CHECK(attr_type_matches(it->second, s.type), op_name(op), " attribute '",
                    s.key, "' has the wrong type");
    }
}

Tensor eval_op(Op op, const std::vector<Tensor>& inputs, const Attrs& attrs,
               const std::vector<Tensor>* saved_in, std::vector<Tensor>* saved_out,
               Rng* rng) {
    switch (op) {
        case Op::Leaf:
            MERBA_CHECK(false, "leaf nodes are not evaluated");
            return {};
        case Op::Add: {
            const Tensor& a = inputs[0];
            const Tensor& b = inputs[1];
            TensorBuilder out(a.shape());
            const double* ap = a.data();
            const double* bp = b.data();
            double* yp = out.data();
            parallel_for(a.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) yp[i] = ap[i] + bp[i];
            });
            return out.finalize();
        }
        case Op::BiasAdd: {
            const Tensor& x = inputs[0];
            const Tensor& b = inputs[1];
            int64_t c = x.dim(x.rank() - 1);
            TensorBuilder out(x.shape());
            const double* xp = x.data();
            const double* bp = b.data();
            double* yp = out.data();
            parallel_for(x.size() / c, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r)
                    for (int64_t j = 0; j < c; ++j) yp[r * c + j] = xp[r * c + j] + bp[j];
            });
            return out.finalize();
        }
        case Op::Mul: {
            const Tensor& a = inputs[0];
            const Tensor& b = inputs[1];
            TensorBuilder out(a.shape());
            const double* ap = a.data();
            const double* bp = b.data();
            double* yp = out.data();
            parallel_for(a.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) yp[i] = ap[i] * bp[i];
            });
            return out.finalize();
        }
        case Op::Scale: {
            double alpha = attr_f64(attrs, "alpha");
            return unary_map(inputs[0], [alpha](double v) { return alpha * v; });
        }
        case Op::Matmul: {
            const Tensor& x = inputs[0];
            const Tensor& w = inputs[1];
            if (w.rank() == 2) {
                int64_t k = w.dim(0);
                int64_t m = w.dim(1);
                int64_t rows = x.size() / k;
                Shape os(x.shape().begin(), x.shape().end() - 1);
                os.push_back(m);
                TensorBuilder out(os);
                const double* xp = x.data();
                const double* wp = w.data();
                double* yp = out.data();
                parallel_for(rows, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                        double* yr = yp + r * m;
                        const double* xr = xp + r * k;
                        std::fill(yr, yr + m, 0.0);
                        for (int64_t kk = 0; kk < k; ++kk) {
                            double xv = xr[kk];
                            const double* wr = wp + kk * m;
                            for (int64_t j = 0; j < m; ++j) yr[j] += xv * wr[j];
                        }
                    }
                });
                return out.finalize();
            }
            int64_t r = x.rank();
            int64_t t = x.dim(r - 2);
            int64_t k = x.dim(r - 1);
            int64_t m = w.dim(r - 1);
            int64_t batch = x.size() / (t * k);
            Shape os(x.shape().begin(), x.shape().end() - 1);
            os.push_back(m);
            TensorBuilder out(os);
            const double* xp = x.data();
            const double* wp = w.data();
            double* yp = out.data();
            parallel_for(batch, [&](int64_t lo, int64_t hi) {
                for (int64_t b = lo; b < hi; ++b) {
                    const double* xb = xp + b * t * k;
                    const double* wb = wp + b * k * m;
                    double* yb = yp + b * t * m;
                    for (int64_t i = 0; i < t; ++i) {
                        double* yr = yb + i * m;
                        std::fill(yr, yr + m, 0.0);
                        for (int64_t kk = 0; kk < k; ++kk) {
                            double xv = xb[i * k + kk];
                            const double* wr = wb + kk * m;
                            for (int64_t j = 0; j < m; ++j) yr[j] += xv * wr[j];
                        }
                    }
                }
            });
            return out.finalize();
        }
        case Op::Conv2d: {
            const Tensor& x = inputs[0];
            const Tensor& w = inputs[1];
            const Tensor& b = inputs[2];
            int64_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3);
            int64_t kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
            int64_t stride = attr_i64(attrs, "stride");
            int64_t pad = attr_i64(attrs, "pad");
            int64_t oh = (h + 2 * pad - kh) / stride + 1;
            int64_t ow = (wd + 2 * pad - kw) / stride + 1;
            TensorBuilder out({n, oh, ow, co});
            const double* xp = x.data();
            const double* wp = w.data();
            const double* bp = b.data();
            double* yp = out.data();
            parallel_for(n, [&](int64_t lo, int64_t hi) {
                std::vector<double> acc(static_cast<size_t>(co));
                for (int64_t nn = lo; nn < hi; ++nn)
                    for (int64_t y = 0; y < oh; ++y)
                        for (int64_t xo = 0; xo < ow; ++xo) {
                            std::memcpy(acc.data(), bp, sizeof(double) * static_cast<size_t>(co));
                            for (int64_t iy = 0; iy < kh; ++iy) {
                                int64_t sy = y * stride - pad + iy;
                                if (sy < 0 || sy >= h) continue;
                                for (int64_t ix = 0; ix < kw; ++ix) {
                                    int64_t sx = xo * stride - pad + ix;
                                    if (sx < 0 || sx >= wd) continue;
                                    const double* xr = xp + ((nn * h + sy) * wd + sx) * ci;
                                    const double* wr = wp + (iy * kw + ix) * ci * co;
                                    for (int64_t c = 0; c < ci; ++c) {
                                        double xv = xr[c];
                                        const double* wc = wr + c * co;
                                        for (int64_t o = 0; o < co; ++o) acc[static_cast<size_t>(o)] += xv * wc[o];
                                    }
                                }
                            }
                            std::memcpy(yp + ((nn * oh + y) * ow + xo) * co, acc.data(),
                                        sizeof(double) * static_cast<size_t>(co));
                        }
            });
            return out.finalize();
        }
        case Op::Conv1dDw: {
            const Tensor& x = inputs[0];
            const Tensor& w = inputs[1];
            const Tensor& b = inputs[2];
            int64_t e = x.dim(x.rank() - 1);
            int64_t t = x.dim(x.rank() - 2);
            int64_t g = x.size() / (t * e);
            int64_t k = w.dim(0);
            int64_t pad = attr_i64(attrs, "pad");
            int64_t to = t + 2 * pad - k + 1;
            Shape os = x.shape();
            os[os.size() - 2] = to;
            TensorBuilder out(os);
            const double* xp = x.data();
            const double* wp = w.data();
            const double* bp = b.data();
            double* yp = out.data();
            parallel_for(g, [&](int64_t lo, int64_t hi) {
                for (int64_t gg = lo; gg < hi; ++gg)
                    for (int64_t tt = 0; tt < to; ++tt) {
                        double* yr = yp + (gg * to + tt) * e;
                        std::memcpy(yr, bp, sizeof(double) * static_cast<size_t>(e));
                        for (int64_t i = 0; i < k; ++i) {
                            int64_t src = tt - pad + i;
                            if (src < 0 || src >= t) continue;
                            const double* xr = xp + (gg * t + src) * e;
                            const double* wr = wp + i * e;
                            for (int64_t c = 0; c < e; ++c) yr[c] += xr[c] * wr[c];
                        }
                    }
            });
            return out.finalize();
        }
        case Op::LayerNorm: {
            const Tensor& x = inputs[0];
            const Tensor& gamma = inputs[1];
            const Tensor& beta = inputs[2];
            double eps = attr_f64(attrs, "eps");
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            TensorBuilder out(x.shape());
            TensorBuilder mean({rows});
            TensorBuilder rstd({rows});
            const double* xp = x.data();
            const double* gp = gamma.data();
            const double* bp = beta.data();
            double* yp = out.data();
            double* mp = mean.data();
            double* rp = rstd.data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const double* xr = xp + r * c;
                    double m = 0.0;
                    for (int64_t j = 0; j < c; ++j) m += xr[j];
                    m /= static_cast<double>(c);
                    double v = 0.0;
                    for (int64_t j = 0; j < c; ++j) v += (xr[j] - m) * (xr[j] - m);
                    v /= static_cast<double>(c);
                    double rs = 1.0 / std::sqrt(v + eps);
                    mp[r] = m;
                    rp[r] = rs;
                    double* yr = yp + r * c;
                    for (int64_t j = 0; j < c; ++j) yr[j] = gp[j] * (xr[j] - m) * rs + bp[j];
                }
            });
            if (saved_out) {
                saved_out->push_back(mean.finalize());
                saved_out->push_back(rstd.finalize());
            }
            return out.finalize();
        }
        case Op::BatchNormTrain: {
            const Tensor& x = inputs[0];
            const Tensor& gamma = inputs[1];
            const Tensor& beta = inputs[2];
            double eps = attr_f64(attrs, "eps");
            int64_t c = x.dim(x.rank() - 1);
            int64_t m = x.size() / c;
            const double* xp = x.data();
            std::vector<double> mean(static_cast<size_t>(c), 0.0);
            std::vector<double> var(static_cast<size_t>(c), 0.0);
            for (int64_t i = 0; i < x.size(); ++i) mean[static_cast<size_t>(i % c)] += xp[i];
            for (int64_t j = 0; j < c; ++j) mean[static_cast<size_t>(j)] /= static_cast<double>(m);
            for (int64_t i = 0; i < x.size(); ++i) {
                double d = xp[i] - mean[static_cast<size_t>(i % c)];
                var[static_cast<size_t>(i % c)] += d * d;
            }
            for (int64_t j = 0; j < c; ++j) var[static_cast<size_t>(j)] /= static_cast<double>(m);
            TensorBuilder out(x.shape());
            const double* gp = gamma.data();
            const double* bp = beta.data();
            double* yp = out.data();
            std::vector<double> rstd(static_cast<size_t>(c));
            for (int64_t j = 0; j < c; ++j)
                rstd[static_cast<size_t>(j)] = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + eps);
            parallel_for(x.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    int64_t j = i % c;
                    yp[i] = gp[j] * (xp[i] - mean[static_cast<size_t>(j)]) * rstd[static_cast<size_t>(j)] + bp[j];
                }
            });
            if (saved_out) {
                saved_out->push_back(Tensor({c}, mean));
                saved_out->push_back(Tensor({c}, var));
            }
            return out.finalize();
        }
        case Op::BatchNormEval: {
            const Tensor& x = inputs[0];
            const double* gp = inputs[1].data();
            const double* bp = inputs[2].data();
            const double* mp = inputs[3].data();
            const double* vp = inputs[4].data();
            double eps = attr_f64(attrs, "eps");
            int64_t c = x.dim(x.rank() - 1);
            TensorBuilder out(x.shape());
            const double* xp = x.data();
            double* yp = out.data();
            parallel_for(x.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    int64_t j = i % c;
                    yp[i] = gp[j] * (xp[i] - mp[j]) / std::sqrt(vp[j] + eps) + bp[j];
                }
            });
            return out.finalize();
        }
        case Op::Silu:
            return unary_map(inputs[0], [](double v) { return v * sigmoid(v); });
        case Op::Gelu:
            return unary_map(inputs[0], [](double v) {
                return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865476));
            });
        case Op::Relu:
            return unary_map(inputs[0], [](double v) { return v > 0.0 ? v : 0.0; });
        case Op::Softplus:
            return unary_map(inputs[0], softplus_stable);
        case Op::Exp:
            return unary_map(inputs[0], [](double v) { return std::exp(v); });
        case Op::Softmax: {
            const Tensor& x = inputs[0];
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            TensorBuilder out(x.shape());
            const double* xp = x.data();
            double* yp = out.data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const double* xr = xp + r * c;
                    double* yr = yp + r * c;
                    double m = xr[0];
                    for (int64_t j = 1; j < c; ++j) m = std::max(m, xr[j]);
                    double s = 0.0;
                    for (int64_t j = 0; j < c; ++j) {
                        yr[j] = std::exp(xr[j] - m);
                        s += yr[j];
                    }
                    for (int64_t j = 0; j < c; ++j) yr[j] /= s;
                }
            });
            return out.finalize();
        }
        case Op::LogSumExp: {
            const Tensor& x = inputs[0];
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            TensorBuilder out(Shape(x.shape().begin(), x.shape().end() - 1));
            const double* xp = x.data();
            double* yp = out.data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const double* xr = xp + r * c;
                    double m = xr[0];
                    for (int64_t j = 1; j < c; ++j) m = std::max(m, xr[j]);
                    double s = 0.0;
                    for (int64_t j = 0; j < c; ++j) s += std::exp(xr[j] - m);
                    yp[r] = m + std::log(s);
                }
            });
            return out.finalize();
        }
        case Op::GatherLast: {
            const Tensor& x = inputs[0];
            const auto& idx = attr_ivec(attrs, "indices");
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            TensorBuilder out(Shape(x.shape().begin(), x.shape().end() - 1));
            const double* xp = x.data();
            double* yp = out.data();
            for (int64_t r = 0; r < rows; ++r) yp[r] = xp[r * c + idx[static_cast<size_t>(r)]];
            return out.finalize();
        }
        case Op::PermuteRows: {
            const Tensor& x = inputs[0];
            const auto& order = attr_ivec(attrs, "order");
            int64_t e = x.dim(x.rank() - 1);
            int64_t t = x.dim(x.rank() - 2);
            int64_t batch = x.size() / (t * e);
            TensorBuilder out(x.shape());
            const double* xp = x.data();
            double* yp = out.data();
            parallel_for(batch, [&](int64_t lo, int64_t hi) {
                for (int64_t b = lo; b < hi; ++b)
                    for (int64_t i = 0; i < t; ++i)
                        std::memcpy(yp + (b * t + i) * e,
                                    xp + (b * t + order[static_cast<size_t>(i)]) * e,
                                    sizeof(double) * static_cast<size_t>(e));
            });
            return out.finalize();
        }
        case Op::Transpose: {
            const Tensor& x = inputs[0];
            const auto& perm = attr_ivec(attrs, "perm");
            int64_t r = x.rank();
            Shape os(static_cast<size_t>(r));
            for (int64_t i = 0; i < r; ++i)
                os[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
            auto xstr = strides_of(x.shape());
            std::vector<int64_t> contrib(static_cast<size_t>(r));
            for (int64_t i = 0; i < r; ++i)
                contrib[static_cast<size_t>(i)] = xstr[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            auto ostr = strides_of(os);
            TensorBuilder out(os);
            const double* xp = x.data();
            double* yp = out.data();
            parallel_for(x.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t o = lo; o < hi; ++o) {
                    int64_t rem = o, src = 0;
                    for (int64_t i = 0; i < r; ++i) {
                        int64_t q = rem / ostr[static_cast<size_t>(i)];
                        rem -= q * ostr[static_cast<size_t>(i)];
                        src += q * contrib[static_cast<size_t>(i)];
                    }
                    yp[o] = xp[src];
                }
            });
            return out.finalize();
        }
        case Op::Reshape:
            return Tensor(attr_ivec(attrs, "shape"), inputs[0].vec());
        case Op::ConcatLast: {
            const Tensor& a = inputs[0];
            const Tensor& b = inputs[1];
            int64_t ca = a.dim(a.rank() - 1);
            int64_t cb = b.dim(b.rank() - 1);
            int64_t rows = a.size() / ca;
            Shape os = a.shape();
            os.back() = ca + cb;
            TensorBuilder out(os);
            const double* ap = a.data();
            const double* bp = b.data();
            double* yp = out.data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    std::memcpy(yp + r * (ca + cb), ap + r * ca, sizeof(double) * static_cast<size_t>(ca));
                    std::memcpy(yp + r * (ca + cb) + ca, bp + r * cb, sizeof(double) * static_cast<size_t>(cb));
                }
            });
            return out.finalize();
        }
        case Op::AvgPoolGlobal: {
            const Tensor& x = inputs[0];
            int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
            TensorBuilder out({n, 1, 1, c});
            const double* xp = x.data();
            double* yp = out.data();
            double inv = 1.0 / static_cast<double>(h * w);
            parallel_for(n, [&](int64_t lo, int64_t hi) {
                for (int64_t nn = lo; nn < hi; ++nn) {
                    double* yr = yp + nn * c;
                    std::fill(yr, yr + c, 0.0);
                    const double* xr = xp + nn * h * w * c;
                    for (int64_t s = 0; s < h * w; ++s)
                        for (int64_t j = 0; j < c; ++j) yr[j] += xr[s * c + j];
                    for (int64_t j = 0; j < c; ++j) yr[j] *= inv;
                }
            });
            return out.finalize();
        }
        case Op::Dropout: {
            const Tensor& x = inputs[0];
            double rate = attr_f64(attrs, "rate");
            Tensor mask;
            if (saved_in) {
                mask = (*saved_in)[0];
            } else {
                MERBA_CHECK(rng != nullptr, "dropout needs a tape RNG to draw its mask");
                double keep = 1.0 / (1.0 - rate);
                TensorBuilder mb(x.shape());
                double* mp = mb.data();
                for (int64_t i = 0; i < x.size(); ++i)
                    mp[i] = rng->uniform() >= rate ? keep : 0.0;
                mask = mb.finalize();
            }
            if (saved_out) saved_out->push_back(mask);
            TensorBuilder out(x.shape());
            const double* xp = x.data();
            const double* mp = mask.data();
            double* yp = out.data();
            for (int64_t i = 0; i < x.size(); ++i) yp[i] = xp[i] * mp[i];
            return out.finalize();
        }
        case Op::SumAll: {
            const Tensor& x = inputs[0];
            const double* xp = x.data();
            double s = 0.0;
            for (int64_t i = 0; i < x.size(); ++i) s += xp[i];
            return Tensor({1}, {s});
        }
        case Op::SelectiveScan: {
            const Tensor& u = inputs[0];
            const Tensor& w_delta = inputs[1];
            const Tensor& b_delta = inputs[2];
            const Tensor& w_b = inputs[3];
            const Tensor& w_c = inputs[4];
            const Tensor& a_log = inputs[5];
            const Tensor& skip = inputs[6];
            bool exact = attr_bool(attrs, "exact_zoh");
            int64_t g = u.dim(0), t = u.dim(1), e = u.dim(2);
            int64_t ns = w_b.dim(1);
            std::vector<double> amat(static_cast<size_t>(e * ns));
            for (int64_t i = 0; i < e * ns; ++i) amat[static_cast<size_t>(i)] = -std::exp(a_log.at(i));
            TensorBuilder out(u.shape());
            std::unique_ptr<TensorBuilder> dsave, bsave, csave, hsave;
            if (saved_out) {
                dsave = std::make_unique<TensorBuilder>(Shape{g, t, e});
                bsave = std::make_unique<TensorBuilder>(Shape{g, t, ns});
                csave = std::make_unique<TensorBuilder>(Shape{g, t, ns});
                hsave = std::make_unique<TensorBuilder>(Shape{g, t, e, ns});
            }
            const double* up = u.data();
            const double* wdp = w_delta.data();
            const double* bdp = b_delta.data();
            const double* wbp = w_b.data();
            const double* wcp = w_c.data();
            const double* skp = skip.data();
            double* yp = out.data();
            parallel_for(g, [&](int64_t lo, int64_t hi) {
                std::vector<double> h(static_cast<size_t>(e * ns));
                std::vector<double> delta(static_cast<size_t>(e));
                std::vector<double> bvec(static_cast<size_t>(ns));
                std::vector<double> cvec(static_cast<size_t>(ns));
                for (int64_t gg = lo; gg < hi; ++gg) {
                    std::fill(h.begin(), h.end(), 0.0);
                    for (int64_t tt = 0; tt < t; ++tt) {
                        const double* ut = up + (gg * t + tt) * e;
                        std::memcpy(delta.data(), bdp, sizeof(double) * static_cast<size_t>(e));
                        for (int64_t i = 0; i < e; ++i) {
                            double uv = ut[i];
                            const double* wr = wdp + i * e;
                            for (int64_t j = 0; j < e; ++j) delta[static_cast<size_t>(j)] += uv * wr[j];
                        }
                        for (int64_t j = 0; j < e; ++j)
                            delta[static_cast<size_t>(j)] = softplus_stable(delta[static_cast<size_t>(j)]);
                        std::fill(bvec.begin(), bvec.end(), 0.0);
                        std::fill(cvec.begin(), cvec.end(), 0.0);
                        for (int64_t i = 0; i < e; ++i) {
                            double uv = ut[i];
                            const double* br = wbp + i * ns;
                            const double* cr = wcp + i * ns;
                            for (int64_t nn = 0; nn < ns; ++nn) {
                                bvec[static_cast<size_t>(nn)] += uv * br[nn];
                                cvec[static_cast<size_t>(nn)] += uv * cr[nn];
                            }
                        }
                        double* yr = yp + (gg * t + tt) * e;
                        for (int64_t i = 0; i < e; ++i) {
                            double de = delta[static_cast<size_t>(i)];
                            double uv = ut[i];
                            double* he = h.data() + i * ns;
                            const double* ar = amat.data() + i * ns;
                            double acc = 0.0;
                            for (int64_t nn = 0; nn < ns; ++nn) {
                                double a = ar[nn];
                                double abar = std::exp(de * a);
                                double coef = exact ? zoh_coef(de, a, abar).coef : de;
                                he[nn] = abar * he[nn] + coef * bvec[static_cast<size_t>(nn)] * uv;
                                acc += cvec[static_cast<size_t>(nn)] * he[nn];
                            }
                            yr[i] = acc + skp[i] * uv;
                        }
                        if (saved_out) {
                            std::memcpy(dsave->data() + (gg * t + tt) * e, delta.data(),
                                        sizeof(double) * static_cast<size_t>(e));
                            std::memcpy(bsave->data() + (gg * t + tt) * ns, bvec.data(),
                                        sizeof(double) * static_cast<size_t>(ns));
                            std::memcpy(csave->data() + (gg * t + tt) * ns, cvec.data(),
                                        sizeof(double) * static_cast<size_t>(ns));
                            std::memcpy(hsave->data() + (gg * t + tt) * e * ns, h.data(),
                                        sizeof(double) * static_cast<size_t>(e * ns));
                        }
                    }
                }
            });
            if (saved_out) {
                saved_out->push_back(dsave->finalize());
                saved_out->push_back(bsave->finalize());
                saved_out->push_back(csave->finalize());
                saved_out->push_back(hsave->finalize());
            }
            return out.finalize();
        }
    }
    MERBA_CHECK(false, "unhandled op");
    return {};
}

void backprop_op(const Tape& tape, int node_index, const std::vector<double>& gout,
                 GradSink& sink) {
    const Node& nd = tape.node(node_index);
    auto inval = [&](int k) -> const Tensor& {
        return tape.node(nd.parents[static_cast<size_t>(k)]).value;
    };
    auto gbuf = [&](int k) -> std::vector<double>& {
        return sink.buf(nd.parents[static_cast<size_t>(k)]);
    };
    const double* gp = gout.data();
    switch (nd.op) {
        case Op::Leaf:
            return;
        case Op::Add: {
            auto& ga = gbuf(0);
            auto& gb = gbuf(1);
            for (size_t i = 0; i < gout.size(); ++i) {
                ga[i] += gp[i];
                gb[i] += gp[i];
            }
            return;
        }
        case Op::BiasAdd: {
            auto& gx = gbuf(0);
            auto& gb = gbuf(1);
            int64_t c = inval(1).size();
            for (size_t i = 0; i < gout.size(); ++i) {
                gx[i] += gp[i];
                gb[static_cast<size_t>(static_cast<int64_t>(i) % c)] += gp[i];
            }
            return;
        }
        case Op::Mul: {
            const double* ap = inval(0).data();
            const double* bp = inval(1).data();
            auto& ga = gbuf(0);
            auto& gb = gbuf(1);
            for (size_t i = 0; i < gout.size(); ++i) {
                ga[i] += gp[i] * bp[i];
                gb[i] += gp[i] * ap[i];
            }
            return;
        }
        case Op::Scale: {
            double alpha = attr_f64(nd.attrs, "alpha");
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += alpha * gp[i];
            return;
        }
        case Op::Matmul: {
            const Tensor& x = inval(0);
            const Tensor& w = inval(1);
            auto& gx = gbuf(0);
            auto& gw = gbuf(1);
            if (w.rank() == 2) {
                int64_t k = w.dim(0);
                int64_t m = w.dim(1);
                int64_t rows = x.size() / k;
                const double* xp = x.data();
                const double* wp = w.data();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = gp + r * m;
                    const double* xr = xp + r * k;
                    double* gxr = gx.data() + r * k;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const double* wr = wp + kk * m;
                        double* gwr = gw.data() + kk * m;
                        double acc = 0.0;
                        double xv = xr[kk];
                        for (int64_t j = 0; j < m; ++j) {
                            acc += gr[j] * wr[j];
                            gwr[j] += xv * gr[j];
                        }
                        gxr[kk] += acc;
                    }
                }
                return;
            }
            int64_t r = x.rank();
            int64_t t = x.dim(r - 2);
            int64_t k = x.dim(r - 1);
            int64_t m = w.dim(r - 1);
            int64_t batch = x.size() / (t * k);
            const double* xp = x.data();
            const double* wp = w.data();
            for (int64_t b = 0; b < batch; ++b) {
                const double* xb = xp + b * t * k;
                const double* wb = wp + b * k * m;
                const double* gb2 = gp + b * t * m;
                double* gxb = gx.data() + b * t * k;
                double* gwb = gw.data() + b * k * m;
                for (int64_t i = 0; i < t; ++i) {
                    const double* gr = gb2 + i * m;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const double* wr = wb + kk * m;
                        double* gwr = gwb + kk * m;
                        double xv = xb[i * k + kk];
                        double acc = 0.0;
                        for (int64_t j = 0; j < m; ++j) {
                            acc += gr[j] * wr[j];
                            gwr[j] += xv * gr[j];
                        }
                        gxb[i * k + kk] += acc;
                    }
                }
            }
            return;
        }
        case Op::Conv2d: {
            const Tensor& x = inval(0);
            const Tensor& w = inval(1);
            int64_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3);
            int64_t kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
            int64_t stride = attr_i64(nd.attrs, "stride");
            int64_t pad = attr_i64(nd.attrs, "pad");
            int64_t oh = nd.value.dim(1), ow = nd.value.dim(2);
            auto& gx = gbuf(0);
            auto& gw = gbuf(1);
            auto& gb = gbuf(2);
            const double* xp = x.data();
            const double* wp = w.data();
            for (int64_t i = 0; i < nd.value.size(); ++i)
                gb[static_cast<size_t>(i % co)] += gp[i];
            for (int64_t nn = 0; nn < n; ++nn)
                for (int64_t y = 0; y < oh; ++y)
                    for (int64_t xo = 0; xo < ow; ++xo) {
                        const double* gr = gp + ((nn * oh + y) * ow + xo) * co;
                        for (int64_t iy = 0; iy < kh; ++iy) {
                            int64_t sy = y * stride - pad + iy;
                            if (sy < 0 || sy >= h) continue;
                            for (int64_t ix = 0; ix < kw; ++ix) {
                                int64_t sx = xo * stride - pad + ix;
                                if (sx < 0 || sx >= wd) continue;
                                const double* xr = xp + ((nn * h + sy) * wd + sx) * ci;
                                double* gxr = gx.data() + ((nn * h + sy) * wd + sx) * ci;
                                const double* wr = wp + (iy * kw + ix) * ci * co;
                                double* gwr = gw.data() + (iy * kw + ix) * ci * co;
                                for (int64_t c = 0; c < ci; ++c) {
                                    double xv = xr[c];
                                    const double* wc = wr + c * co;
                                    double* gwc = gwr + c * co;
                                    double acc = 0.0;
                                    for (int64_t o = 0; o < co; ++o) {
                                        acc += gr[o] * wc[o];
                                        gwc[o] += xv * gr[o];
                                    }
                                    gxr[c] += acc;
                                }
                            }
                        }
                    }
            return;
        }
        case Op::Conv1dDw: {
            const Tensor& x = inval(0);
            const Tensor& w = inval(1);
            int64_t e = x.dim(x.rank() - 1);
            int64_t t = x.dim(x.rank() - 2);
            int64_t g = x.size() / (t * e);
            int64_t k = w.dim(0);
            int64_t pad = attr_i64(nd.attrs, "pad");
            int64_t to = nd.value.dim(nd.value.rank() - 2);
            auto& gx = gbuf(0);
            auto& gw = gbuf(1);
            auto& gb = gbuf(2);
            const double* xp = x.data();
            const double* wp = w.data();
            for (int64_t gg = 0; gg < g; ++gg)
                for (int64_t tt = 0; tt < to; ++tt) {
                    const double* gr = gp + (gg * to + tt) * e;
                    for (int64_t c = 0; c < e; ++c) gb[static_cast<size_t>(c)] += gr[c];
                    for (int64_t i = 0; i < k; ++i) {
                        int64_t src = tt - pad + i;
                        if (src < 0 || src >= t) continue;
                        const double* xr = xp + (gg * t + src) * e;
                        double* gxr = gx.data() + (gg * t + src) * e;
                        const double* wr = wp + i * e;
                        double* gwr = gw.data() + i * e;
                        for (int64_t c = 0; c < e; ++c) {
                            gxr[c] += gr[c] * wr[c];
                            gwr[c] += gr[c] * xr[c];
                        }
                    }
                }
            return;
        }
        case Op::LayerNorm: {
            const Tensor& x = inval(0);
            const Tensor& gamma = inval(1);
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            const double* xp = x.data();
            const double* gmp = gamma.data();
            const double* mp = nd.saved[0].data();
            const double* rp = nd.saved[1].data();
            auto& gx = gbuf(0);
            auto& gg = gbuf(1);
            auto& gbta = gbuf(2);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = xp + r * c;
                const double* gr = gp + r * c;
                double* gxr = gx.data() + r * c;
                double m = mp[r], rs = rp[r];
                double s1 = 0.0, s2 = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    double xh = (xr[j] - m) * rs;
                    double dxh = gr[j] * gmp[j];
                    s1 += dxh;
                    s2 += dxh * xh;
                    gg[static_cast<size_t>(j)] += gr[j] * xh;
                    gbta[static_cast<size_t>(j)] += gr[j];
                }
                s1 /= static_cast<double>(c);
                s2 /= static_cast<double>(c);
                for (int64_t j = 0; j < c; ++j) {
                    double xh = (xr[j] - m) * rs;
                    gxr[j] += rs * (gr[j] * gmp[j] - s1 - xh * s2);
                }
            }
            return;
        }
        case Op::BatchNormTrain: {
            const Tensor& x = inval(0);
            const Tensor& gamma = inval(1);
            double eps = attr_f64(nd.attrs, "eps");
            int64_t c = x.dim(x.rank() - 1);
            int64_t m = x.size() / c;
            const double* xp = x.data();
            const double* gmp = gamma.data();
            const double* mnp = nd.saved[0].data();
            const double* vrp = nd.saved[1].data();
            auto& gx = gbuf(0);
            auto& gg = gbuf(1);
            auto& gbta = gbuf(2);
            std::vector<double> rstd(static_cast<size_t>(c));
            std::vector<double> sg(static_cast<size_t>(c), 0.0);
            std::vector<double> sgx(static_cast<size_t>(c), 0.0);
            for (int64_t j = 0; j < c; ++j)
                rstd[static_cast<size_t>(j)] = 1.0 / std::sqrt(vrp[j] + eps);
            for (int64_t i = 0; i < x.size(); ++i) {
                int64_t j = i % c;
                double xh = (xp[i] - mnp[j]) * rstd[static_cast<size_t>(j)];
                sg[static_cast<size_t>(j)] += gp[i];
                sgx[static_cast<size_t>(j)] += gp[i] * xh;
            }
            for (int64_t j = 0; j < c; ++j) {
                gg[static_cast<size_t>(j)] += sgx[static_cast<size_t>(j)];
                gbta[static_cast<size_t>(j)] += sg[static_cast<size_t>(j)];
            }
            double invm = 1.0 / static_cast<double>(m);
            for (int64_t i = 0; i < x.size(); ++i) {
                int64_t j = i % c;
                double xh = (xp[i] - mnp[j]) * rstd[static_cast<size_t>(j)];
                gx[static_cast<size_t>(i)] +=
                    gmp[j] * rstd[static_cast<size_t>(j)] *
                    (gp[i] - invm * sg[static_cast<size_t>(j)] -
                     xh * invm * sgx[static_cast<size_t>(j)]);
            }
            return;
        }
        case Op::BatchNormEval: {
            const Tensor& x = inval(0);
            const double* gmp = inval(1).data();
            const double* mnp = inval(3).data();
            const double* vrp = inval(4).data();
            double eps = attr_f64(nd.attrs, "eps");
            int64_t c = x.dim(x.rank() - 1);
            const double* xp = x.data();
            auto& gx = gbuf(0);
            auto& gg = gbuf(1);
            auto& gbta = gbuf(2);
            auto& gmn = gbuf(3);
            auto& gvr = gbuf(4);
            for (int64_t i = 0; i < x.size(); ++i) {
                int64_t j = i % c;
                double rs = 1.0 / std::sqrt(vrp[j] + eps);
                double xh = (xp[i] - mnp[j]) * rs;
                gx[static_cast<size_t>(i)] += gp[i] * gmp[j] * rs;
                gg[static_cast<size_t>(j)] += gp[i] * xh;
                gbta[static_cast<size_t>(j)] += gp[i];
                gmn[static_cast<size_t>(j)] -= gp[i] * gmp[j] * rs;
                gvr[static_cast<size_t>(j)] -= 0.5 * gp[i] * gmp[j] * (xp[i] - mnp[j]) * rs * rs * rs;
            }
            return;
        }
        case Op::Silu: {
            const double* xp = inval(0).data();
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) {
                double s = sigmoid(xp[i]);
                gx[i] += gp[i] * s * (1.0 + xp[i] * (1.0 - s));
            }
            return;
        }
        case Op::Gelu: {
            const double* xp = inval(0).data();
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) {
                double x = xp[i];
                double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
                gx[i] += gp[i] * (cdf + x * pdf);
            }
            return;
        }
        case Op::Relu: {
            const double* xp = inval(0).data();
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i)
                if (xp[i] > 0.0) gx[i] += gp[i];
            return;
        }
        case Op::Softplus: {
            const double* xp = inval(0).data();
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += gp[i] * sigmoid(xp[i]);
            return;
        }
        case Op::Exp: {
            const double* yp = nd.value.data();
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += gp[i] * yp[i];
            return;
        }
        case Op::Softmax: {
            const Tensor& y = nd.value;
            int64_t c = y.dim(y.rank() - 1);
            int64_t rows = y.size() / c;
            const double* yp = y.data();
            auto& gx = gbuf(0);
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = yp + r * c;
                const double* gr = gp + r * c;
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                double* gxr = gx.data() + r * c;
                for (int64_t j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
            return;
        }
        case Op::LogSumExp: {
            const Tensor& x = inval(0);
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            const double* xp = x.data();
            const double* lp = nd.value.data();
            auto& gx = gbuf(0);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = xp + r * c;
                double* gxr = gx.data() + r * c;
                for (int64_t j = 0; j < c; ++j) gxr[j] += gp[r] * std::exp(xr[j] - lp[r]);
            }
            return;
        }
        case Op::GatherLast: {
            const Tensor& x = inval(0);
            const auto& idx = attr_ivec(nd.attrs, "indices");
            int64_t c = x.dim(x.rank() - 1);
            int64_t rows = x.size() / c;
            auto& gx = gbuf(0);
            for (int64_t r = 0; r < rows; ++r)
                gx[static_cast<size_t>(r * c + idx[static_cast<size_t>(r)])] += gp[r];
            return;
        }
        case Op::PermuteRows: {
            const Tensor& x = inval(0);
            const auto& order = attr_ivec(nd.attrs, "order");
            int64_t e = x.dim(x.rank() - 1);
            int64_t t = x.dim(x.rank() - 2);
            int64_t batch = x.size() / (t * e);
            auto& gx = gbuf(0);
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t i = 0; i < t; ++i) {
                    double* dst = gx.data() + (b * t + order[static_cast<size_t>(i)]) * e;
                    const double* src = gp + (b * t + i) * e;
                    for (int64_t j = 0; j < e; ++j) dst[j] += src[j];
                }
            return;
        }
        case Op::Transpose: {
            const Tensor& x = inval(0);
            const auto& perm = attr_ivec(nd.attrs, "perm");
            int64_t r = x.rank();
            auto xstr = strides_of(x.shape());
            auto ostr = strides_of(nd.value.shape());
            std::vector<int64_t> contrib(static_cast<size_t>(r));
            for (int64_t i = 0; i < r; ++i)
                contrib[static_cast<size_t>(i)] = xstr[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            auto& gx = gbuf(0);
            for (int64_t o = 0; o < nd.value.size(); ++o) {
                int64_t rem = o, src = 0;
                for (int64_t i = 0; i < r; ++i) {
                    int64_t q = rem / ostr[static_cast<size_t>(i)];
                    rem -= q * ostr[static_cast<size_t>(i)];
                    src += q * contrib[static_cast<size_t>(i)];
                }
                gx[static_cast<size_t>(src)] += gp[o];
            }
            return;
        }
        case Op::Reshape: {
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += gp[i];
            return;
        }
        case Op::ConcatLast: {
            const Tensor& a = inval(0);
            const Tensor& b = inval(1);
            int64_t ca = a.dim(a.rank() - 1);
            int64_t cb = b.dim(b.rank() - 1);
            int64_t rows = a.size() / ca;
            auto& ga = gbuf(0);
            auto& gb = gbuf(1);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = gp + r * (ca + cb);
                for (int64_t j = 0; j < ca; ++j) ga[static_cast<size_t>(r * ca + j)] += gr[j];
                for (int64_t j = 0; j < cb; ++j) gb[static_cast<size_t>(r * cb + j)] += gr[ca + j];
            }
            return;
        }
        case Op::AvgPoolGlobal: {
            const Tensor& x = inval(0);
            int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
            double inv = 1.0 / static_cast<double>(h * w);
            auto& gx = gbuf(0);
            for (int64_t nn = 0; nn < n; ++nn) {
                const double* gr = gp + nn * c;
                double* gxr = gx.data() + nn * h * w * c;
                for (int64_t s = 0; s < h * w; ++s)
                    for (int64_t j = 0; j < c; ++j) gxr[s * c + j] += gr[j] * inv;
            }
            return;
        }
        case Op::Dropout: {
            const double* mp = nd.saved[0].data();
            auto& gx = gbuf(0);
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += gp[i] * mp[i];
            return;
        }
        case Op::SumAll: {
            auto& gx = gbuf(0);
            double gv = gp[0];
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
            return;
        }
        case Op::SelectiveScan: {
            const Tensor& u = inval(0);
            const Tensor& w_delta = inval(1);
            const Tensor& w_b = inval(3);
            const Tensor& w_c = inval(4);
            const Tensor& a_log = inval(5);
            const Tensor& skip = inval(6);
            bool exact = attr_bool(nd.attrs, "exact_zoh");
            int64_t g = u.dim(0), t = u.dim(1), e = u.dim(2);
            int64_t ns = w_b.dim(1);
            const double* up = u.data();
            const double* wdp = w_delta.data();
            const double* wbp = w_b.data();
            const double* wcp = w_c.data();
            const double* skp = skip.data();
            const double* dp = nd.saved[0].data();
            const double* bp = nd.saved[1].data();
            const double* cp = nd.saved[2].data();
            const double* hp = nd.saved[3].data();
            auto& gu = gbuf(0);
            auto& gwd = gbuf(1);
            auto& gbd = gbuf(2);
            auto& gwb = gbuf(3);
            auto& gwc = gbuf(4);
            auto& gal = gbuf(5);
            auto& gsk = gbuf(6);
            std::vector<double> amat(static_cast<size_t>(e * ns));
            for (int64_t i = 0; i < e * ns; ++i) amat[static_cast<size_t>(i)] = -std::exp(a_log.at(i));
            std::vector<double> gh(static_cast<size_t>(e * ns));
            std::vector<double> gut(static_cast<size_t>(e));
            std::vector<double> gdt(static_cast<size_t>(e));
            std::vector<double> gzt(static_cast<size_t>(e));
            std::vector<double> gbt(static_cast<size_t>(ns));
            std::vector<double> gct(static_cast<size_t>(ns));
            for (int64_t gg = 0; gg < g; ++gg) {
                std::fill(gh.begin(), gh.end(), 0.0);
                for (int64_t tt = t - 1; tt >= 0; --tt) {
                    int64_t row = gg * t + tt;
                    const double* ut = up + row * e;
                    const double* gy = gp + row * e;
                    const double* dr = dp + row * e;
                    const double* br = bp + row * ns;
                    const double* cr = cp + row * ns;
                    const double* ht = hp + row * e * ns;
                    const double* hprev = tt > 0 ? hp + (row - 1) * e * ns : nullptr;
                    std::fill(gbt.begin(), gbt.end(), 0.0);
                    std::fill(gct.begin(), gct.end(), 0.0);
                    for (int64_t i = 0; i < e; ++i) {
                        double gyv = gy[i];
                        gut[static_cast<size_t>(i)] = gyv * skp[i];
                        gsk[static_cast<size_t>(i)] += gyv * ut[i];
                        const double* hte = ht + i * ns;
                        double* ghe = gh.data() + i * ns;
                        for (int64_t nn = 0; nn < ns; ++nn) {
                            gct[static_cast<size_t>(nn)] += gyv * hte[nn];
                            ghe[nn] += gyv * cr[nn];
                        }
                    }
                    for (int64_t i = 0; i < e; ++i) {
                        double de = dr[i];
                        double uv = ut[i];
                        double* ghe = gh.data() + i * ns;
                        const double* ar = amat.data() + i * ns;
                        const double* hpe = hprev ? hprev + i * ns : nullptr;
                        double gdv = 0.0;
                        for (int64_t nn = 0; nn < ns; ++nn) {
                            double a = ar[nn];
                            double abar = std::exp(de * a);
                            double coef, dcoef_dd, dcoef_da;
                            if (exact) {
                                ZohCoef z = zoh_coef(de, a, abar);
                                coef = z.coef;
                                dcoef_dd = z.d_delta;
                                dcoef_da = z.d_a;
                            } else {
                                coef = de;
                                dcoef_dd = 1.0;
                                dcoef_da = 0.0;
                            }
                            double ghv = ghe[nn];
                            double hprev_v = hpe ? hpe[nn] : 0.0;
                            double bv = br[nn];
                            gut[static_cast<size_t>(i)] += ghv * coef * bv;
                            gbt[static_cast<size_t>(nn)] += ghv * coef * uv;
                            double gabar = ghv * hprev_v;
                            gdv += gabar * a * abar + ghv * uv * bv * dcoef_dd;
                            double ga = gabar * de * abar + ghv * uv * bv * dcoef_da;
                            gal[static_cast<size_t>(i * ns + nn)] += ga * a;
                            ghe[nn] = ghv * abar;
                        }
                        gdt[static_cast<size_t>(i)] = gdv;
                    }
                    for (int64_t j = 0; j < e; ++j) {
                        double gz = gdt[static_cast<size_t>(j)] * (1.0 - std::exp(-dr[j]));
                        gzt[static_cast<size_t>(j)] = gz;
                        gbd[static_cast<size_t>(j)] += gz;
                    }
                    for (int64_t i = 0; i < e; ++i) {
                        double uv = ut[i];
                        const double* wr = wdp + i * e;
                        double* gwr = gwd.data() + i * e;
                        double acc = 0.0;
                        for (int64_t j = 0; j < e; ++j) {
                            acc += gzt[static_cast<size_t>(j)] * wr[j];
                            gwr[j] += uv * gzt[static_cast<size_t>(j)];
                        }
                        const double* wbr = wbp + i * ns;
                        double* gwbr = gwb.data() + i * ns;
                        const double* wcr = wcp + i * ns;
                        double* gwcr = gwc.data() + i * ns;
                        for (int64_t nn = 0; nn < ns; ++nn) {
                            acc += gbt[static_cast<size_t>(nn)] * wbr[nn] +
                                   gct[static_cast<size_t>(nn)] * wcr[nn];
                            gwbr[nn] += uv * gbt[static_cast<size_t>(nn)];
                            gwcr[nn] += uv * gct[static_cast<size_t>(nn)];
                        }
                        gut[static_cast<size_t>(i)] += acc;
                    }
                    double* gur = gu.data() + row * e;
                    for (int64_t i = 0; i < e; ++i) gur[i] += gut[static_cast<size_t>(i)];
                }
            }
            return;
        }
    }
    MERBA_CHECK(false, "unhandled op in backward");
}

}  // namespace detail

Tensor apply(Op op, const std::vector<Tensor>& inputs, Attrs attrs, Tape& tape) {
    MERBA_CHECK(op != Op::Leaf, "leaf nodes are created via Tape::leaf");
    detail::validate_attrs(op, attrs);
    std::vector<Shape> in_shapes;
    in_shapes.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        MERBA_CHECK(t.defined(), op_name(op), " received an undefined tensor");
        MERBA_CHECK(t.tape == nullptr || t.tape == &tape,
                    op_name(op), " received a tensor bound to a different tape");
        in_shapes.push_back(t.shape());
    }
    Shape expect = infer_shape(op, in_shapes, attrs);
    std::vector<Tensor> saved;
    Tensor out = detail::eval_op(op, inputs, attrs, nullptr,
                                 tape.recording() ? &saved : nullptr, &tape.rng());
    MERBA_CHECK(shape_eq(out.shape(), expect), op_name(op), " kernel produced ",
                shape_str(out.shape()), " but the shape function says ",
                shape_str(expect));
    MERBA_NUMERIC_CHECK(out.all_finite(), op_name(op), " produced a non-finite value");
    if (tape.recording()) {
        Node n;
        n.op = op;
        n.attrs = std::move(attrs);
        n.saved = std::move(saved);
        n.parents.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            if (t.tape == &tape && t.node >= 0) {
                n.parents.push_back(t.node);
            } else {
                n.parents.push_back(tape.leaf(t).node);
            }
        }
        n.value = out.detached();
        out.node = tape.append(std::move(n));
        out.tape = &tape;
    }
    return out;
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b, Tape& tape) {
    return apply(Op::Add, {a, b}, {}, tape);
}
Tensor bias_add(const Tensor& x, const Tensor& b, Tape& tape) {
    return apply(Op::BiasAdd, {x, b}, {}, tape);
}
Tensor mul(const Tensor& a, const Tensor& b, Tape& tape) {
    return apply(Op::Mul, {a, b}, {}, tape);
}
Tensor scale(const Tensor& x, double factor, Tape& tape) {
    return apply(Op::Scale, {x}, {{"alpha", factor}}, tape);
}
Tensor sub(const Tensor& a, const Tensor& b, Tape& tape) {
    return add(a, scale(b, -1.0, tape), tape);
}
Tensor matmul(const Tensor& x, const Tensor& w, Tape& tape) {
    return apply(Op::Matmul, {x, w}, {}, tape);
}
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t pad, Tape& tape) {
    return apply(Op::Conv2d, {x, w, b}, {{"stride", stride}, {"pad", pad}}, tape);
}
Tensor conv1d_dw(const Tensor& x, const Tensor& w, const Tensor& b, int64_t pad,
                 Tape& tape) {
    return apply(Op::Conv1dDw, {x, w, b}, {{"pad", pad}}, tape);
}
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  Tape& tape) {
    return apply(Op::LayerNorm, {x, gamma, beta}, {{"eps", eps}}, tape);
}
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps, Tape& tape) {
    return apply(Op::BatchNormTrain, {x, gamma, beta}, {{"eps", eps}}, tape);
}
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var, double eps, Tape& tape) {
    return apply(Op::BatchNormEval, {x, gamma, beta, mean, var}, {{"eps", eps}}, tape);
}
Tensor silu(const Tensor& x, Tape& tape) { return apply(Op::Silu, {x}, {}, tape); }
Tensor gelu(const Tensor& x, Tape& tape) { return apply(Op::Gelu, {x}, {}, tape); }
Tensor relu(const Tensor& x, Tape& tape) { return apply(Op::Relu, {x}, {}, tape); }
Tensor softplus(const Tensor& x, Tape& tape) {
    return apply(Op::Softplus, {x}, {}, tape);
}
Tensor exp(const Tensor& x, Tape& tape) { return apply(Op::Exp, {x}, {}, tape); }
Tensor softmax(const Tensor& x, Tape& tape) { return apply(Op::Softmax, {x}, {}, tape); }
Tensor logsumexp(const Tensor& x, Tape& tape) {
    return apply(Op::LogSumExp, {x}, {}, tape);
}
Tensor gather_last(const Tensor& x, const std::vector<int64_t>& indices, Tape& tape) {
    return apply(Op::GatherLast, {x}, {{"indices", indices}}, tape);
}
Tensor permute_rows(const Tensor& x, const std::vector<int64_t>& order, Tape& tape) {
    return apply(Op::PermuteRows, {x}, {{"order", order}}, tape);
}
Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm, Tape& tape) {
    return apply(Op::Transpose, {x}, {{"perm", perm}}, tape);
}
Tensor reshape(const Tensor& x, Shape shape, Tape& tape) {
    return apply(Op::Reshape, {x}, {{"shape", std::move(shape)}}, tape);
}
Tensor concat_last(const Tensor& a, const Tensor& b, Tape& tape) {
    return apply(Op::ConcatLast, {a, b}, {}, tape);
}
Tensor avgpool_global(const Tensor& x, Tape& tape) {
    return apply(Op::AvgPoolGlobal, {x}, {}, tape);
}
Tensor dropout(const Tensor& x, double rate, Tape& tape) {
    if (!tape.training() || rate == 0.0) return x;
    return apply(Op::Dropout, {x}, {{"rate", rate}}, tape);
}
Tensor sum_all(const Tensor& x, Tape& tape) { return apply(Op::SumAll, {x}, {}, tape); }
Tensor mean_all(const Tensor& x, Tape& tape) {
    return scale(sum_all(x, tape), 1.0 / static_cast<double>(x.size()), tape);
}
Tensor selective_scan(const Tensor& u, const Tensor& w_delta, const Tensor& b_delta,
                      const Tensor& w_b, const Tensor& w_c, const Tensor& a_log,
                      const Tensor& skip, bool exact_zoh, Tape& tape) {
    return apply(Op::SelectiveScan, {u, w_delta, b_delta, w_b, w_c, a_log, skip},
                 {{"exact_zoh", exact_zoh}}, tape);
}

}  // namespace ops
}  // namespace merba
