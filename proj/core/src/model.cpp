#include "merba/model.hpp"

#include <cmath>

namespace merba {

namespace {

Tensor normal_init(const Shape& shape, Rng& rng) {
    return Tensor::normal(shape, rng, 0.02);
}

int64_t conv_half(int64_t extent) {
    // stride-2, kernel-3, pad-1: ceil(extent / 2)
    return (extent - 1) / 2 + 1;
}

}  // namespace

FlowTriplet make_triplet(const Tensor& u, const Tensor& v) {
    MERBA_CHECK(u.rank() == 2 && v.rank() == 2 && u.shape() == v.shape(),
                "flow components must be two equal [H,W] planes");
    FlowTriplet t;
    t.u = u;
    t.v = v;
    TensorBuilder mb(u.shape());
    const auto& uv = u.vec();
    const auto& vv = v.vec();
    for (size_t i = 0; i < uv.size(); ++i)
        mb.data()[i] = std::sqrt(uv[i] * uv[i] + vv[i] * vv[i]);
    t.m = mb.finalize();
    return t;
}

void validate_triplet(const FlowTriplet& t) {
    MERBA_CHECK(t.u.defined() && t.v.defined() && t.m.defined(),
                "triplet has undefined planes");
    MERBA_CHECK(t.u.shape() == t.v.shape() && t.u.shape() == t.m.shape(),
                "triplet planes disagree on extent");
    const auto& uv = t.u.vec();
    const auto& vv = t.v.vec();
    const auto& mv = t.m.vec();
    for (size_t i = 0; i < uv.size(); ++i) {
        double want = std::sqrt(uv[i] * uv[i] + vv[i] * vv[i]);
        double tol = 1e-6 * std::max(1.0, std::abs(want));
        MERBA_CHECK(std::abs(mv[i] - want) <= tol,
                    "magnitude plane is inconsistent with the flow components");
    }
}

Tensor triplet_input(const FlowTriplet& t) {
    validate_triplet(t);
    int64_t h = t.u.dim(0), w = t.u.dim(1);
    TensorBuilder b({h, w, 3});
    const auto& uv = t.u.vec();
    const auto& vv = t.v.vec();
    const auto& mv = t.m.vec();
    for (int64_t i = 0; i < h * w; ++i) {
        b.data()[static_cast<size_t>(3 * i)] = uv[static_cast<size_t>(i)];
        b.data()[static_cast<size_t>(3 * i + 1)] = vv[static_cast<size_t>(i)];
        b.data()[static_cast<size_t>(3 * i + 2)] = mv[static_cast<size_t>(i)];
    }
    return b.finalize();
}

Tensor stack_inputs(const std::vector<FlowTriplet>& xs) {
    MERBA_CHECK(!xs.empty(), "cannot stack an empty batch");
    int64_t h = xs[0].u.dim(0), w = xs[0].u.dim(1);
    int64_t n = static_cast<int64_t>(xs.size());
    TensorBuilder b({n, h, w, 3});
    int64_t plane = h * w * 3;
    for (int64_t s = 0; s < n; ++s) {
        const FlowTriplet& t = xs[static_cast<size_t>(s)];
        MERBA_CHECK(t.u.dim(0) == h && t.u.dim(1) == w,
                    "batch mixes input extents");
        Tensor one = triplet_input(t);
        const auto& ov = one.vec();
        for (int64_t i = 0; i < plane; ++i)
            b.data()[static_cast<size_t>(s * plane + i)] = ov[static_cast<size_t>(i)];
    }
    return b.finalize();
}

FlowTriplet hflip(const FlowTriplet& t, bool negate_u) {
    int64_t h = t.u.dim(0), w = t.u.dim(1);
    TensorBuilder ub({h, w}), vb({h, w}), mb({h, w});
    const auto& uv = t.u.vec();
    const auto& vv = t.v.vec();
    const auto& mv = t.m.vec();
    double sign = negate_u ? -1.0 : 1.0;
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            size_t dst = static_cast<size_t>(r * w + c);
            size_t src = static_cast<size_t>(r * w + (w - 1 - c));
            ub.data()[dst] = sign * uv[src];
            vb.data()[dst] = vv[src];
            mb.data()[dst] = mv[src];
        }
    FlowTriplet out;
    out.u = ub.finalize();
    out.v = vb.finalize();
    // Magnitude is invariant to the sign of u, so the mirrored plane is
    // exact only when u is negated; otherwise recompute.
    out.m = mb.finalize();
    if (!negate_u) out = make_triplet(out.u, out.v);
    return out;
}

FlowTriplet flip_augment(const FlowTriplet& t, Rng& rng, bool negate_u) {
    return rng.uniform() < 0.5 ? hflip(t, negate_u) : t;
}

void validate_config(const ModelConfig& cfg) {
    MERBA_CHECK(cfg.dims.size() == 4 && cfg.depths.size() == 4,
                "config needs four stage widths and four depths");
    MERBA_CHECK(cfg.embed_dim == cfg.dims[0],
                "embed_dim must equal the first stage width");
    for (int64_t d : cfg.dims)
        MERBA_CHECK(d >= 2 && d % 2 == 0, "stage widths must be even, got ", d);
    for (int64_t d : cfg.depths) MERBA_CHECK(d >= 1, "stage depths must be >= 1");
    MERBA_CHECK(cfg.input_extent >= 8, "input extent must be at least 8, got ",
                cfg.input_extent);
    MERBA_CHECK(cfg.window >= 1, "window must be positive");
    MERBA_CHECK(cfg.state_dim >= 1, "state_dim must be positive");
    MERBA_CHECK(cfg.head_div >= 1, "head_div must be positive");
    MERBA_CHECK(cfg.mlp_ratio >= 1, "mlp_ratio must be positive");
    MERBA_CHECK(cfg.dropout >= 0.0 && cfg.dropout < 1.0, "dropout must be in [0,1)");
    MERBA_CHECK(cfg.bn_momentum > 0.0 && cfg.bn_momentum <= 1.0,
                "bn_momentum must be in (0,1]");
    MERBA_CHECK(cfg.head == "dgcm" || cfg.head == "single",
                "head must be 'dgcm' or 'single', got '", cfg.head, "'");
    MERBA_CHECK(cfg.embed_dim % 2 == 0, "embed_dim must be even");
    for (size_t k = 1; k < 4; ++k)
        MERBA_CHECK(cfg.dims[k] % heads_for(cfg, cfg.dims[k]) == 0,
                    "attention heads must divide the stage width ", cfg.dims[k]);
}

int64_t heads_for(const ModelConfig& cfg, int64_t dim) {
    return std::max<int64_t>(1, dim / cfg.head_div);
}

std::vector<TraceRow> shape_trace(const ModelConfig& cfg) {
    validate_config(cfg);
    std::vector<TraceRow> rows;
    int64_t h = cfg.input_extent;
    int64_t e = conv_half(conv_half(h));
    rows.push_back({"patch_embed", {h, h, 3}, {e, e, cfg.dims[0]}, 0});
    h = e;
    int64_t after1 = conv_half(h);
    rows.push_back({"stage1", {h, h, cfg.dims[0]}, {after1, after1, cfg.dims[1]}, 0});
    h = after1;
    for (int k = 0; k < 3; ++k) {
        int64_t dim = cfg.dims[static_cast<size_t>(k + 1)];
        int64_t wh = std::min(cfg.window, h);
        MERBA_CHECK(h % wh == 0, "stage", k + 2, " map ", h, "x", h,
                    " does not tile by ", wh, "x", wh, " windows");
        int64_t windows = (h / wh) * (h / wh);
        bool final_stage = k == 2;
        int64_t out_dim = final_stage ? dim : cfg.dims[static_cast<size_t>(k + 2)];
        int64_t oh = final_stage ? 1 : conv_half(h);
        rows.push_back({"stage" + std::to_string(k + 2),
                        {h, h, dim},
                        {oh, oh, out_dim},
                        windows});
        h = oh;
    }
    return rows;
}

std::vector<ParamCountRow> param_breakdown(const ModelConfig& cfg,
                                           const LabelSpace& space) {
    validate_config(cfg);
    std::vector<ParamCountRow> rows;
    int64_t mid = cfg.embed_dim / 2;
    int64_t pe = (3 * 3 * 3 * mid + mid) + 2 * mid +
                 (3 * 3 * mid * cfg.embed_dim + cfg.embed_dim) + 2 * cfg.embed_dim;
    rows.push_back({"patch_embed", pe});
    int64_t d0 = cfg.dims[0];
    int64_t s1 = cfg.depths[0] * ((3 * 3 * d0 * d0 + d0) + 2 * d0) +
                 (3 * 3 * d0 * cfg.dims[1] + cfg.dims[1]);
    rows.push_back({"stage1", s1});
    for (int k = 0; k < 3; ++k) {
        bool final_stage = k == 2;
        int64_t dim = cfg.dims[static_cast<size_t>(k + 1)];
        int64_t out = final_stage ? dim : cfg.dims[static_cast<size_t>(k + 2)];
        rows.push_back({"stage" + std::to_string(k + 2),
                        stage_param_count(dim, out, cfg.depths[static_cast<size_t>(k + 1)],
                                          cfg.state_dim, cfg.mlp_ratio, final_stage,
                                          cfg.per_direction_params,
                                          cfg.mixer_prenorm)});
    }
    rows.push_back(
        {"head", head_param_count(cfg.dims[3], space, cfg.head == "dgcm")});
    return rows;
}

int64_t count_params(const ModelConfig& cfg, const LabelSpace& space) {
    int64_t total = 0;
    for (const auto& row : param_breakdown(cfg, space)) total += row.count;
    return total;
}

std::unique_ptr<Model> make_model(const ModelConfig& cfg, const LabelSpace& space,
                                  uint64_t seed) {
    validate_config(cfg);
    shape_trace(cfg);  // reject untileable geometry up front
    auto m = std::make_unique<Model>();
    m->cfg = cfg;
    m->space = space;
    Rng rng(seed);
    int64_t mid = cfg.embed_dim / 2;
    m->pe1_w = normal_init({3, 3, 3, mid}, rng);
    m->pe1_b = Tensor::full({mid}, 0.0);
    m->pe1_bn = make_batch_norm(mid, cfg.bn_momentum);
    m->pe2_w = normal_init({3, 3, mid, cfg.embed_dim}, rng);
    m->pe2_b = Tensor::full({cfg.embed_dim}, 0.0);
    m->pe2_bn = make_batch_norm(cfg.embed_dim, cfg.bn_momentum);
    int64_t d0 = cfg.dims[0];
    for (int64_t i = 0; i < cfg.depths[0]; ++i) {
        FfeBlockParams blk;
        blk.conv_w = normal_init({3, 3, d0, d0}, rng);
        blk.conv_b = Tensor::full({d0}, 0.0);
        blk.bn = make_batch_norm(d0, cfg.bn_momentum);
        m->ffe.push_back(std::move(blk));
    }
    m->ffe_down_w = normal_init({3, 3, d0, cfg.dims[1]}, rng);
    m->ffe_down_b = Tensor::full({cfg.dims[1]}, 0.0);
    for (int k = 0; k < 3; ++k) {
        bool final_stage = k == 2;
        int64_t dim = cfg.dims[static_cast<size_t>(k + 1)];
        int64_t out = final_stage ? dim : cfg.dims[static_cast<size_t>(k + 2)];
        m->stages.push_back(make_stage(
            dim, out, cfg.depths[static_cast<size_t>(k + 1)], cfg.state_dim,
            heads_for(cfg, dim), cfg.mlp_ratio, cfg.dropout, cfg.bn_momentum,
            final_stage, cfg.extractor_residual, cfg.per_direction_params,
            cfg.mixer_prenorm, cfg.mixer_exact_zoh, rng));
    }
    m->head = make_head(cfg.dims[3], space, cfg.head == "dgcm", rng);

    m->registry.add("patch_embed.conv1.w", &m->pe1_w, true, true);
    m->registry.add("patch_embed.conv1.b", &m->pe1_b, true, false);
    register_params(m->pe1_bn, m->registry, "patch_embed.bn1");
    m->registry.add("patch_embed.conv2.w", &m->pe2_w, true, true);
    m->registry.add("patch_embed.conv2.b", &m->pe2_b, true, false);
    register_params(m->pe2_bn, m->registry, "patch_embed.bn2");
    for (size_t i = 0; i < m->ffe.size(); ++i) {
        std::string prefix = "stage1.block" + std::to_string(i);
        m->registry.add(prefix + ".conv.w", &m->ffe[i].conv_w, true, true);
        m->registry.add(prefix + ".conv.b", &m->ffe[i].conv_b, true, false);
        register_params(m->ffe[i].bn, m->registry, prefix + ".bn");
    }
    m->registry.add("stage1.down.w", &m->ffe_down_w, true, true);
    m->registry.add("stage1.down.b", &m->ffe_down_b, true, false);
    for (size_t k = 0; k < m->stages.size(); ++k)
        register_params(m->stages[k], m->registry,
                        "stage" + std::to_string(k + 2));
    register_params(m->head, m->registry, "head");
    return m;
}

ForwardOut model_forward(Model& m, const Tensor& batch, Tape& tape) {
    const ModelConfig& cfg = m.cfg;
    MERBA_CHECK(batch.rank() == 4 && batch.dim(1) == cfg.input_extent &&
                    batch.dim(2) == cfg.input_extent && batch.dim(3) == 3,
                "model expects [N,", cfg.input_extent, ",", cfg.input_extent,
                ",3] input, got ", shape_str(batch.shape()));
    Binder bind(tape, &m.registry);
    Tensor x = ops::conv2d(batch, bind(m.pe1_w), bind(m.pe1_b), 2, 1, tape);
    x = ops::gelu(batch_norm_layer(x, m.pe1_bn, bind), tape);
    x = ops::conv2d(x, bind(m.pe2_w), bind(m.pe2_b), 2, 1, tape);
    x = ops::gelu(batch_norm_layer(x, m.pe2_bn, bind), tape);
    for (auto& blk : m.ffe) {
        Tensor h = ops::conv2d(x, bind(blk.conv_w), bind(blk.conv_b), 1, 1, tape);
        h = ops::gelu(batch_norm_layer(h, blk.bn, bind), tape);
        x = ops::add(x, h, tape);
    }
    x = ops::conv2d(x, bind(m.ffe_down_w), bind(m.ffe_down_b), 2, 1, tape);
    ForwardOut out;
    for (size_t k = 0; k < m.stages.size(); ++k) {
        bool last = k + 1 == m.stages.size();
        x = stage_forward(x, m.stages[k], cfg.window, bind,
                          last ? &out.final_map : nullptr);
    }
    out.feature = ops::reshape(x, {batch.dim(0), cfg.dims[3]}, tape);
    out.logits = head_forward(out.feature, m.head, bind);
    return out;
}

}  // namespace merba
