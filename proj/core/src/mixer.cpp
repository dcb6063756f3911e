#include "merba/mixer.hpp"

#include <cmath>

namespace merba {

namespace {

Tensor normal_init(const Shape& shape, Rng& rng) { return Tensor::normal(shape, rng, 0.02); }

// Step sizes start near 0.05 so the decay term is well inside (0,1).
double delta_bias_init() { return std::log(std::expm1(0.05)); }

}  // namespace

MixerParams make_mixer_params(int64_t dim, int64_t state_dim, bool prenorm,
                              bool exact_zoh, Rng& rng) {
    MERBA_CHECK(dim >= 2 && dim % 2 == 0, "mixer dim must be even and >= 2, got ", dim);
    MERBA_CHECK(state_dim >= 1, "mixer state_dim must be >= 1, got ", state_dim);
    int64_t e = dim / 2;
    MixerParams p;
    p.dim = dim;
    p.state_dim = state_dim;
    p.prenorm = prenorm;
    p.exact_zoh = exact_zoh;
    if (prenorm) {
        p.ln_g = Tensor::full({dim}, 1.0);
        p.ln_b = Tensor::full({dim}, 0.0);
    }
    p.in1_w = normal_init({dim, e}, rng);
    p.in1_b = Tensor::full({e}, 0.0);
    p.conv1_w = normal_init({3, e}, rng);
    p.conv1_b = Tensor::full({e}, 0.0);
    p.in2_w = normal_init({dim, e}, rng);
    p.in2_b = Tensor::full({e}, 0.0);
    p.conv2_w = normal_init({3, e}, rng);
    p.conv2_b = Tensor::full({e}, 0.0);
    p.w_delta = normal_init({e, e}, rng);
    p.b_delta = Tensor::full({e}, delta_bias_init());
    p.w_b = normal_init({e, state_dim}, rng);
    p.w_c = normal_init({e, state_dim}, rng);
    // Real diagonal decay spread over the state axis: a_log[e,n] = log(n+1).
    {
        TensorBuilder b({e, state_dim});
        for (int64_t i = 0; i < e; ++i)
            for (int64_t n = 0; n < state_dim; ++n)
                b.data()[static_cast<size_t>(i * state_dim + n)] =
                    std::log(static_cast<double>(n + 1));
        p.a_log = b.finalize();
    }
    p.skip = Tensor::full({e}, 1.0);
    return p;
}

void register_params(MixerParams& p, ParamRegistry& reg, const std::string& prefix) {
    if (p.prenorm) {
        reg.add(prefix + ".ln.g", &p.ln_g, true, false);
        reg.add(prefix + ".ln.b", &p.ln_b, true, false);
    }
    reg.add(prefix + ".in1.w", &p.in1_w, true, true);
    reg.add(prefix + ".in1.b", &p.in1_b, true, false);
    reg.add(prefix + ".conv1.w", &p.conv1_w, true, true);
    reg.add(prefix + ".conv1.b", &p.conv1_b, true, false);
    reg.add(prefix + ".in2.w", &p.in2_w, true, true);
    reg.add(prefix + ".in2.b", &p.in2_b, true, false);
    reg.add(prefix + ".conv2.w", &p.conv2_w, true, true);
    reg.add(prefix + ".conv2.b", &p.conv2_b, true, false);
    reg.add(prefix + ".delta.w", &p.w_delta, true, true);
    reg.add(prefix + ".delta.b", &p.b_delta, true, false);
    reg.add(prefix + ".state.b", &p.w_b, true, true);
    reg.add(prefix + ".state.c", &p.w_c, true, true);
    reg.add(prefix + ".state.a_log", &p.a_log, true, false);
    reg.add(prefix + ".state.skip", &p.skip, true, false);
}

int64_t mixer_param_count(int64_t dim, int64_t state_dim, bool prenorm) {
    int64_t e = dim / 2;
    int64_t n = 0;
    if (prenorm) n += 2 * dim;
    n += 2 * (dim * e + e);      // two input projections
    n += 2 * (3 * e + e);        // two depthwise convs
    n += e * e + e;              // step-size projection
    n += 3 * e * state_dim;      // state in/out maps and decay
    n += e;                      // skip gain
    return n;
}

Tensor mixer_forward(const Tensor& seq, const MixerParams& p, const Binder& bind) {
    Tape& tape = bind.tape();
    MERBA_CHECK(seq.rank() == 2 || seq.rank() == 3,
                "mixer expects [T,D] or [G,T,D], got rank ", seq.rank());
    bool rank2 = seq.rank() == 2;
    MERBA_CHECK(seq.dim(seq.rank() - 1) == p.dim, "mixer built for width ", p.dim,
                ", got ", seq.dim(seq.rank() - 1));
    Tensor x = rank2 ? ops::reshape(seq, {1, seq.dim(0), seq.dim(1)}, tape) : seq;
    if (p.prenorm) x = ops::layer_norm(x, bind(p.ln_g), bind(p.ln_b), 1e-5, tape);

    Tensor h1 = ops::bias_add(ops::matmul(x, bind(p.in1_w), tape), bind(p.in1_b), tape);
    h1 = ops::silu(ops::conv1d_dw(h1, bind(p.conv1_w), bind(p.conv1_b), 1, tape), tape);
    Tensor b1 = ops::selective_scan(h1, bind(p.w_delta), bind(p.b_delta), bind(p.w_b),
                                    bind(p.w_c), bind(p.a_log), bind(p.skip),
                                    p.exact_zoh, tape);

    Tensor h2 = ops::bias_add(ops::matmul(x, bind(p.in2_w), tape), bind(p.in2_b), tape);
    Tensor b2 =
        ops::silu(ops::conv1d_dw(h2, bind(p.conv2_w), bind(p.conv2_b), 1, tape), tape);

    Tensor out = ops::concat_last(b1, b2, tape);
    if (rank2) out = ops::reshape(out, {out.dim(1), out.dim(2)}, tape);
    return out;
}

}  // namespace merba
