#include "merba/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace merba {

SaliencyMap saliency_from_tape(const Tape& tape, int score, int feature_map) {
    MERBA_CHECK(score >= 0 && score < tape.size() && feature_map >= 0 &&
                    feature_map < tape.size(),
                "saliency nodes outside the tape");
    const Tensor& a = tape.node(feature_map).value;
    MERBA_CHECK(a.rank() == 4 && a.dim(0) == 1,
                "saliency expects a [1,h,w,C] feature map");
    int64_t h = a.dim(1), w = a.dim(2), c = a.dim(3);
    SaliencyMap out;
    std::vector<Tensor> grads = backward(tape, score);
    const Tensor& g = grads[static_cast<size_t>(feature_map)];
    TensorBuilder mb({h, w});
    if (!g.defined()) {
        out.degenerate = true;  // score does not depend on the map
        out.map = mb.finalize();
        return out;
    }
    // Channel weights: spatial mean of the gradient.
    std::vector<double> wc(static_cast<size_t>(c), 0.0);
    const auto& gv = g.vec();
    for (int64_t i = 0; i < h * w; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            wc[static_cast<size_t>(ch)] += gv[static_cast<size_t>(i * c + ch)];
    for (auto& e : wc) e /= static_cast<double>(h * w);
    const auto& av = a.vec();
    double lo = 0, hi = 0;
    for (int64_t i = 0; i < h * w; ++i) {
        double acc = 0;
        for (int64_t ch = 0; ch < c; ++ch)
            acc += wc[static_cast<size_t>(ch)] * av[static_cast<size_t>(i * c + ch)];
        double r = std::max(0.0, acc);
        mb.data()[static_cast<size_t>(i)] = r;
        if (i == 0) {
            lo = hi = r;
        } else {
            lo = std::min(lo, r);
            hi = std::max(hi, r);
        }
    }
    if (hi > lo) {
        for (int64_t i = 0; i < h * w; ++i)
            mb.data()[static_cast<size_t>(i)] =
                (mb.data()[static_cast<size_t>(i)] - lo) / (hi - lo);
    } else {
        // Rectified map is constant (typically all zero): nothing to show.
        out.degenerate = true;
        for (int64_t i = 0; i < h * w; ++i) mb.data()[static_cast<size_t>(i)] = 0.0;
    }
    out.map = mb.finalize();
    return out;
}

SaliencyMap compute_saliency(Model& m, const FlowTriplet& x, int target_full_label) {
    MERBA_CHECK(target_full_label >= 0 &&
                    target_full_label < static_cast<int>(m.space.full.size()),
                "target label out of range");
    Tape tape(false, 0, true);  // eval behavior, recorded for the backward pass
    ForwardOut out = model_forward(m, tape.leaf(stack_inputs({x})), tape);
    Tensor score;
    if (m.head.dual) {
        int ci = m.space.full_to_coarse[static_cast<size_t>(target_full_label)];
        score = ops::gather_last(out.logits.coarse, {ci}, tape);
        if (ci == m.space.negative) {
            int fi = m.space.full_to_fine[static_cast<size_t>(target_full_label)];
            score = ops::add(
                score, ops::gather_last(out.logits.fine, {fi}, tape), tape);
        }
    } else {
        score = ops::gather_last(out.logits.coarse, {target_full_label}, tape);
    }
    return saliency_from_tape(tape, score.node, out.final_map.node);
}

Tensor upsample_nearest(const Tensor& map, int64_t out_h, int64_t out_w) {
    MERBA_CHECK(map.rank() == 2, "upsample expects an [h,w] map");
    MERBA_CHECK(out_h >= map.dim(0) && out_w >= map.dim(1),
                "upsample target must not shrink the map");
    int64_t h = map.dim(0), w = map.dim(1);
    const auto& v = map.vec();
    TensorBuilder b({out_h, out_w});
    for (int64_t r = 0; r < out_h; ++r) {
        int64_t sr = std::min(h - 1, r * h / out_h);
        for (int64_t c = 0; c < out_w; ++c) {
            int64_t sc = std::min(w - 1, c * w / out_w);
            b.data()[static_cast<size_t>(r * out_w + c)] =
                v[static_cast<size_t>(sr * w + sc)];
        }
    }
    return b.finalize();
}

void write_pgm(const std::string& path, const Tensor& gray) {
    MERBA_CHECK(gray.rank() == 2, "PGM export expects an [h,w] map");
    std::ofstream f(path, std::ios::binary);
    MERBA_CHECK(f.good(), "cannot open ", path, " for writing");
    int64_t h = gray.dim(0), w = gray.dim(1);
    f << "P5\n" << w << " " << h << "\n255\n";
    const auto& v = gray.vec();
    std::string bytes(static_cast<size_t>(h * w), '\0');
    for (size_t i = 0; i < bytes.size(); ++i) {
        double x = std::clamp(v[i], 0.0, 1.0);
        bytes[i] = static_cast<char>(static_cast<unsigned char>(
            std::lround(x * 255.0)));
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    MERBA_CHECK(f.good(), "short write to ", path);
}

}  // namespace merba
