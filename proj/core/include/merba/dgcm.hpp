#pragma once
// Dual-granularity classification: a coarse head over grouped emotion
// classes plus a fine head that separates the four negative expressions,
// trained with a ramped weight and gated at inference by the coarse argmax.

#include <cstdint>
#include <string>
#include <vector>

#include "merba/ops.hpp"
#include "merba/params.hpp"

namespace merba {

// Full / coarse / fine label vocabulary. Validated so inference is total:
// the negative coarse class fans out to exactly the fine labels, and every
// other coarse class wraps exactly one full label.
struct LabelSpace {
    std::vector<std::string> full;
    std::vector<std::string> coarse;
    std::vector<int> full_to_coarse;   // per full label
    std::vector<int> fine_to_full;     // injective
    std::vector<int> full_to_fine;     // -1 outside the negative group
    std::vector<int> coarse_to_full;   // -1 for the negative class
    int negative = -1;                 // index of "negative" in coarse
};

LabelSpace make_label_space(const std::vector<std::string>& full,
                            const std::vector<std::pair<std::string, std::string>>&
                                coarse_map,
                            const std::vector<std::string>& fine);

int label_index(const LabelSpace& s, const std::string& name);

struct DgcmOutputs {
    Tensor coarse;  // [N, |coarse|] logits (or [N, |full|] for a single head)
    Tensor fine;    // [N, |fine|] logits; undefined for a single head
};

// Fine-loss weight ramp: 0.5 at the first epoch, 2.0 from 75% onward.
double fine_weight(int64_t epoch, int64_t total_epochs);
// Combined objective: 0.5 * (coarse + alpha * fine).
double combine_losses(double coarse, double fine, double alpha);

// Mean cross-entropy from logits [N,K] and integer targets, on the tape.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& targets,
                          Tape& tape);

struct DgcmLoss {
    Tensor total;       // scalar node, differentiable
    double coarse = 0;  // batch means, for logging
    double fine = 0;
    double alpha = 0;
    int64_t negatives = 0;  // samples that contributed to the fine term
};

// y_full holds full-label indices. The fine term sees only negative-labeled
// samples; with fine_mean_over_negatives it averages over those, otherwise
// over the whole batch. A batch with no negatives drops the fine term.
DgcmLoss dgcm_loss(const DgcmOutputs& out, const std::vector<int>& y_full,
                   const LabelSpace& space, int64_t epoch, int64_t total_epochs,
                   bool fine_mean_over_negatives, Tape& tape);

// Coarse argmax first; a negative verdict defers to the fine head, anything
// else maps through the coarse class's unique full label. Ties break low.
std::vector<int> dgcm_predict(const DgcmOutputs& out, const LabelSpace& space);
std::vector<int> single_head_predict(const Tensor& logits);

// Head parameters over a pooled feature of width `dim`.
struct HeadParams {
    bool dual = true;
    Tensor coarse_w, coarse_b;  // dual: [dim,|coarse|]; single: [dim,|full|]
    Tensor fine_w, fine_b;      // dual only: [dim,|fine|]
};
HeadParams make_head(int64_t dim, const LabelSpace& space, bool dual, Rng& rng);
void register_params(HeadParams& p, ParamRegistry& reg, const std::string& prefix);
int64_t head_param_count(int64_t dim, const LabelSpace& space, bool dual);
DgcmOutputs head_forward(const Tensor& feature, const HeadParams& p,
                         const Binder& bind);

}  // namespace merba
