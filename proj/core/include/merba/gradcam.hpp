#pragma once
// Class-activation saliency: channel weights are the spatial mean of the
// score gradient over the final feature map; the map is the rectified
// weighted channel sum, min-max normalized.

#include <string>

#include "merba/model.hpp"

namespace merba {

struct SaliencyMap {
    Tensor map;              // [h,w] in [0,1]
    bool degenerate = false; // no gradient reached the map, or it rectified to zero
};

// Works on any recorded tape: `score` must be a scalar node, `feature_map`
// a [1,h,w,C] node upstream of it.
SaliencyMap saliency_from_tape(const Tape& tape, int score, int feature_map);

// Runs a recorded eval-mode forward on one sample and attributes the target
// label's score: the coarse logit of its group, plus the fine logit when the
// target is a negative expression (the full logit for a single head).
SaliencyMap compute_saliency(Model& m, const FlowTriplet& x, int target_full_label);

// Integer upscale by pixel replication to an arbitrary target extent.
Tensor upsample_nearest(const Tensor& map, int64_t out_h, int64_t out_w);

// 8-bit binary PGM (P5), values scaled from [0,1].
void write_pgm(const std::string& path, const Tensor& gray);

}  // namespace merba
