#pragma once
// The full recognizer: conv patch embedding, a conv-only first stage, three
// window-scan stages with global attention, norm-pooled feature, and the
// classification head. Also the symbolic shape/parameter accounting used by
// the CLI, which never runs a real forward pass.

#include <memory>

#include "merba/dgcm.hpp"
#include "merba/stage.hpp"

namespace merba {

// Optical-flow input: horizontal and vertical components plus magnitude.
struct FlowTriplet {
    Tensor u, v, m;  // each [H,W]
};

FlowTriplet make_triplet(const Tensor& u, const Tensor& v);
// Rejects a triplet whose magnitude channel drifted from sqrt(u^2+v^2).
void validate_triplet(const FlowTriplet& t);
Tensor triplet_input(const FlowTriplet& t);                      // [H,W,3]
Tensor stack_inputs(const std::vector<FlowTriplet>& xs);         // [N,H,W,3]

// Horizontal mirror; negate_u keeps the flow field physically consistent.
FlowTriplet hflip(const FlowTriplet& t, bool negate_u);
// Applies hflip with probability one half.
FlowTriplet flip_augment(const FlowTriplet& t, Rng& rng, bool negate_u);

struct ModelConfig {
    int64_t input_extent = 224;
    int64_t embed_dim = 128;                       // width after patch embedding
    std::vector<int64_t> dims = {128, 256, 512, 1024};
    std::vector<int64_t> depths = {3, 2, 6, 4};
    int64_t window = 7;
    int64_t state_dim = 8;
    int64_t head_div = 64;  // attention heads = max(1, dim / head_div)
    int64_t mlp_ratio = 4;
    double dropout = 0.1;
    double bn_momentum = 0.1;
    bool mixer_prenorm = true;
    bool mixer_exact_zoh = false;
    bool extractor_residual = true;
    bool per_direction_params = false;
    bool negate_u_on_flip = true;
    bool fine_mean_over_negatives = true;
    std::string head = "dgcm";  // "dgcm" | "single"
};

void validate_config(const ModelConfig& cfg);
int64_t heads_for(const ModelConfig& cfg, int64_t dim);

// Symbolic per-layer shape walk (no tensors are allocated). Rejects
// configurations whose maps stop tiling.
struct TraceRow {
    std::string name;
    Shape in, out;
    int64_t windows = 0;  // per-item window count for scan stages
};
std::vector<TraceRow> shape_trace(const ModelConfig& cfg);

struct ParamCountRow {
    std::string module;
    int64_t count = 0;
};
std::vector<ParamCountRow> param_breakdown(const ModelConfig& cfg,
                                           const LabelSpace& space);
int64_t count_params(const ModelConfig& cfg, const LabelSpace& space);

struct FfeBlockParams {
    Tensor conv_w, conv_b;  // [3,3,D,D],[D]
    BatchNormParams bn;
};

// Owns every parameter; the registry points into the fields, so the model is
// pinned in memory (create through make_model).
struct Model {
    ModelConfig cfg;
    LabelSpace space;
    Tensor pe1_w, pe1_b;  // [3,3,3,E/2]
    BatchNormParams pe1_bn;
    Tensor pe2_w, pe2_b;  // [3,3,E/2,E]
    BatchNormParams pe2_bn;
    std::vector<FfeBlockParams> ffe;
    Tensor ffe_down_w, ffe_down_b;
    std::vector<StageParams> stages;  // the three scan stages
    HeadParams head;
    ParamRegistry registry;

    Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
};

std::unique_ptr<Model> make_model(const ModelConfig& cfg, const LabelSpace& space,
                                  uint64_t seed);

struct ForwardOut {
    Tensor feature;      // [N, D_last] pooled
    Tensor final_map;    // [N,h,w,D_last] pre-pool map (saliency target)
    DgcmOutputs logits;
};

// batch [N,H,W,3] with H = W = cfg.input_extent.
ForwardOut model_forward(Model& m, const Tensor& batch, Tape& tape);

}  // namespace merba
