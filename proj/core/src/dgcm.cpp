#include "merba/dgcm.hpp"

#include <algorithm>

namespace merba {

namespace {

int find_name(const std::vector<std::string>& names, const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

LabelSpace make_label_space(
    const std::vector<std::string>& full,
    const std::vector<std::pair<std::string, std::string>>& coarse_map,
    const std::vector<std::string>& fine) {
    MERBA_CHECK(!full.empty(), "label space needs at least one full label");
    LabelSpace s;
    s.full = full;
    for (size_t i = 0; i < full.size(); ++i)
        MERBA_CHECK(find_name(full, full[i]) == static_cast<int>(i),
                    "duplicate full label '", full[i], "'");
    s.full_to_coarse.assign(full.size(), -1);
    for (const auto& [name, group] : coarse_map) {
        int fi = find_name(s.full, name);
        MERBA_CHECK(fi >= 0, "coarse_map names unknown label '", name, "'");
        int ci = find_name(s.coarse, group);
        if (ci < 0) {
            ci = static_cast<int>(s.coarse.size());
            s.coarse.push_back(group);
        }
        MERBA_CHECK(s.full_to_coarse[static_cast<size_t>(fi)] == -1,
                    "label '", name, "' mapped to two coarse classes");
        s.full_to_coarse[static_cast<size_t>(fi)] = ci;
    }
    for (size_t i = 0; i < full.size(); ++i)
        MERBA_CHECK(s.full_to_coarse[i] >= 0, "label '", full[i],
                    "' missing from coarse_map");
    s.negative = find_name(s.coarse, "negative");
    MERBA_CHECK(s.negative >= 0, "coarse classes must include 'negative'");

    s.full_to_fine.assign(full.size(), -1);
    for (const auto& name : fine) {
        int fi = find_name(s.full, name);
        MERBA_CHECK(fi >= 0, "fine list names unknown label '", name, "'");
        MERBA_CHECK(s.full_to_coarse[static_cast<size_t>(fi)] == s.negative,
                    "fine label '", name, "' is not in the negative group");
        MERBA_CHECK(s.full_to_fine[static_cast<size_t>(fi)] == -1,
                    "duplicate fine label '", name, "'");
        s.full_to_fine[static_cast<size_t>(fi)] =
            static_cast<int>(s.fine_to_full.size());
        s.fine_to_full.push_back(fi);
    }
    MERBA_CHECK(!s.fine_to_full.empty(), "fine label list is empty");
    // Every negative full label must be reachable from the fine head.
    for (size_t i = 0; i < full.size(); ++i)
        if (s.full_to_coarse[i] == s.negative)
            MERBA_CHECK(s.full_to_fine[i] >= 0, "negative label '", full[i],
                        "' missing from the fine list");
    // Non-negative coarse classes must be singletons so the coarse verdict
    // resolves to a unique full label.
    s.coarse_to_full.assign(s.coarse.size(), -1);
    for (size_t i = 0; i < full.size(); ++i) {
        int ci = s.full_to_coarse[i];
        if (ci == s.negative) continue;
        MERBA_CHECK(s.coarse_to_full[static_cast<size_t>(ci)] == -1,
                    "coarse class '", s.coarse[static_cast<size_t>(ci)],
                    "' groups more than one label; only 'negative' may");
        s.coarse_to_full[static_cast<size_t>(ci)] = static_cast<int>(i);
    }
    return s;
}

int label_index(const LabelSpace& s, const std::string& name) {
    int i = find_name(s.full, name);
    MERBA_CHECK(i >= 0, "unknown label '", name, "'");
    return i;
}

double fine_weight(int64_t epoch, int64_t total_epochs) {
    MERBA_CHECK(total_epochs > 0, "fine_weight needs total_epochs > 0, got ",
                total_epochs);
    MERBA_CHECK(epoch >= 0 && epoch <= total_epochs, "epoch ", epoch,
                " outside [0,", total_epochs, "]");
    double a = 0.5 + 2.0 * static_cast<double>(epoch) /
                         static_cast<double>(total_epochs);
    return std::min(a, 2.0);
}

double combine_losses(double coarse, double fine, double alpha) {
    return 0.5 * (coarse + alpha * fine);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& targets,
                          Tape& tape) {
    MERBA_CHECK(logits.rank() == 2, "cross entropy expects [N,K] logits");
    MERBA_CHECK(static_cast<int64_t>(targets.size()) == logits.dim(0),
                "target count does not match batch size");
    Tensor lse = ops::logsumexp(logits, tape);
    Tensor picked = ops::gather_last(logits, targets, tape);
    return ops::mean_all(ops::sub(lse, picked, tape), tape);
}

DgcmLoss dgcm_loss(const DgcmOutputs& out, const std::vector<int>& y_full,
                   const LabelSpace& space, int64_t epoch, int64_t total_epochs,
                   bool fine_mean_over_negatives, Tape& tape) {
    MERBA_CHECK(out.coarse.rank() == 2 &&
                    out.coarse.dim(1) == static_cast<int64_t>(space.coarse.size()),
                "coarse logits must be [N,", space.coarse.size(), "]");
    MERBA_CHECK(out.fine.defined() && out.fine.rank() == 2 &&
                    out.fine.dim(1) == static_cast<int64_t>(space.fine_to_full.size()),
                "fine logits must be [N,", space.fine_to_full.size(), "]");
    int64_t n = out.coarse.dim(0);
    MERBA_CHECK(static_cast<int64_t>(y_full.size()) == n,
                "label count does not match batch size");

    std::vector<int64_t> y_coarse(y_full.size());
    std::vector<int64_t> y_fine(y_full.size(), 0);  // placeholder outside the mask
    std::vector<double> mask(y_full.size(), 0.0);
    int64_t negatives = 0;
    for (size_t i = 0; i < y_full.size(); ++i) {
        int fi = y_full[i];
        MERBA_CHECK(fi >= 0 && fi < static_cast<int>(space.full.size()),
                    "label index ", fi, " out of range");
        y_coarse[i] = space.full_to_coarse[static_cast<size_t>(fi)];
        if (y_coarse[i] == space.negative) {
            y_fine[i] = space.full_to_fine[static_cast<size_t>(fi)];
            mask[i] = 1.0;
            ++negatives;
        }
    }

    DgcmLoss result;
    result.alpha = fine_weight(epoch, total_epochs);
    result.negatives = negatives;

    Tensor coarse_loss = cross_entropy_mean(out.coarse, y_coarse, tape);
    result.coarse = coarse_loss.item();

    if (negatives == 0) {
        result.fine = 0.0;
        result.total = ops::scale(coarse_loss, 0.5, tape);
        return result;
    }

    // Per-sample fine CE, masked so non-negative rows contribute nothing —
    // neither to the value nor to the gradient.
    Tensor lse = ops::logsumexp(out.fine, tape);
    Tensor picked = ops::gather_last(out.fine, y_fine, tape);
    Tensor ce = ops::sub(lse, picked, tape);
    TensorBuilder mb({n});
    for (int64_t i = 0; i < n; ++i) mb.data()[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)];
    Tensor masked = ops::mul(ce, tape.leaf(mb.finalize()), tape);
    double denom = fine_mean_over_negatives ? static_cast<double>(negatives)
                                            : static_cast<double>(n);
    Tensor fine_loss = ops::scale(ops::sum_all(masked, tape), 1.0 / denom, tape);
    result.fine = fine_loss.item();

    Tensor weighted = ops::add(coarse_loss, ops::scale(fine_loss, result.alpha, tape),
                               tape);
    result.total = ops::scale(weighted, 0.5, tape);
    return result;
}

std::vector<int> dgcm_predict(const DgcmOutputs& out, const LabelSpace& space) {
    MERBA_CHECK(out.coarse.rank() == 2 && out.fine.defined() && out.fine.rank() == 2,
                "dual-head prediction needs coarse and fine logits");
    int64_t n = out.coarse.dim(0);
    int64_t kc = out.coarse.dim(1);
    int64_t kf = out.fine.dim(1);
    MERBA_CHECK(kc == static_cast<int64_t>(space.coarse.size()) &&
                    kf == static_cast<int64_t>(space.fine_to_full.size()),
                "logit widths do not match the label space");
    const auto& cv = out.coarse.vec();
    const auto& fv = out.fine.vec();
    std::vector<int> pred(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int64_t ci = 0;
        for (int64_t k = 1; k < kc; ++k)
            if (cv[static_cast<size_t>(i * kc + k)] >
                cv[static_cast<size_t>(i * kc + ci)])
                ci = k;
        if (ci == space.negative) {
            int64_t fi = 0;
            for (int64_t k = 1; k < kf; ++k)
                if (fv[static_cast<size_t>(i * kf + k)] >
                    fv[static_cast<size_t>(i * kf + fi)])
                    fi = k;
            pred[static_cast<size_t>(i)] = space.fine_to_full[static_cast<size_t>(fi)];
        } else {
            pred[static_cast<size_t>(i)] =
                space.coarse_to_full[static_cast<size_t>(ci)];
        }
    }
    return pred;
}

std::vector<int> single_head_predict(const Tensor& logits) {
    MERBA_CHECK(logits.rank() == 2, "prediction expects [N,K] logits");
    int64_t n = logits.dim(0), k = logits.dim(1);
    const auto& v = logits.vec();
    std::vector<int> pred(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (v[static_cast<size_t>(i * k + j)] >
                v[static_cast<size_t>(i * k + best)])
                best = j;
        pred[static_cast<size_t>(i)] = static_cast<int>(best);
    }
    return pred;
}

HeadParams make_head(int64_t dim, const LabelSpace& space, bool dual, Rng& rng) {
    HeadParams p;
    p.dual = dual;
    int64_t kc = dual ? static_cast<int64_t>(space.coarse.size())
                      : static_cast<int64_t>(space.full.size());
    p.coarse_w = Tensor::normal({dim, kc}, rng, 0.02);
    p.coarse_b = Tensor::full({kc}, 0.0);
    if (dual) {
        int64_t kf = static_cast<int64_t>(space.fine_to_full.size());
        p.fine_w = Tensor::normal({dim, kf}, rng, 0.02);
        p.fine_b = Tensor::full({kf}, 0.0);
    }
    return p;
}

void register_params(HeadParams& p, ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".coarse.w", &p.coarse_w, true, true);
    reg.add(prefix + ".coarse.b", &p.coarse_b, true, false);
    if (p.dual) {
        reg.add(prefix + ".fine.w", &p.fine_w, true, true);
        reg.add(prefix + ".fine.b", &p.fine_b, true, false);
    }
}

int64_t head_param_count(int64_t dim, const LabelSpace& space, bool dual) {
    int64_t kc = dual ? static_cast<int64_t>(space.coarse.size())
                      : static_cast<int64_t>(space.full.size());
    int64_t n = dim * kc + kc;
    if (dual) {
        int64_t kf = static_cast<int64_t>(space.fine_to_full.size());
        n += dim * kf + kf;
    }
    return n;
}

DgcmOutputs head_forward(const Tensor& feature, const HeadParams& p,
                         const Binder& bind) {
    Tape& tape = bind.tape();
    MERBA_CHECK(feature.rank() == 2, "head expects a pooled [N,D] feature");
    DgcmOutputs out;
    out.coarse = ops::bias_add(ops::matmul(feature, bind(p.coarse_w), tape),
                               bind(p.coarse_b), tape);
    if (p.dual)
        out.fine = ops::bias_add(ops::matmul(feature, bind(p.fine_w), tape),
                                 bind(p.fine_b), tape);
    return out;
}

}  // namespace merba
