#include "merba/synth.hpp"

#include <cmath>

namespace merba {

namespace {

constexpr double kPi = 3.14159265358979323846;

FlowTriplet blob(const SynthSpec& spec, const SynthClass& cls, Rng& rng) {
    int64_t e = spec.extent;
    double cy = cls.center_row * static_cast<double>(e);
    double cx = cls.center_col * static_cast<double>(e);
    if (spec.jitter > 0) {
        cy += spec.jitter * rng.normal();
        cx += spec.jitter * rng.normal();
    }
    double sigma = spec.sigma_frac * static_cast<double>(e);
    double ux = cls.amplitude * std::cos(cls.angle_deg * kPi / 180.0);
    double vy = cls.amplitude * std::sin(cls.angle_deg * kPi / 180.0);
    TensorBuilder ub({e, e}), vb({e, e});
    for (int64_t r = 0; r < e; ++r)
        for (int64_t c = 0; c < e; ++c) {
            double dy = static_cast<double>(r) - cy;
            double dx = static_cast<double>(c) - cx;
            double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            size_t i = static_cast<size_t>(r * e + c);
            ub.data()[i] = g * ux;
            vb.data()[i] = g * vy;
            if (spec.noise > 0) {
                ub.data()[i] += spec.noise * rng.normal();
                vb.data()[i] += spec.noise * rng.normal();
            }
        }
    return make_triplet(ub.finalize(), vb.finalize());
}

}  // namespace

void validate_spec(const SynthSpec& spec) {
    MERBA_CHECK(spec.extent >= 8, "synthetic extent must be at least 8");
    MERBA_CHECK(!spec.classes.empty(), "synthetic spec has no classes");
    MERBA_CHECK(spec.sigma_frac > 0, "blob width must be positive");
    MERBA_CHECK(spec.noise >= 0 && spec.jitter >= 0,
                "noise and jitter must be non-negative");
    MERBA_CHECK(spec.subjects >= 1, "need at least one subject");
}

std::vector<Sample> synth_dataset(const SynthSpec& spec, int64_t per_class,
                                  uint64_t seed) {
    validate_spec(spec);
    MERBA_CHECK(per_class >= 1, "per-class count must be positive");
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(per_class) * spec.classes.size());
    char name[16];
    for (int64_t i = 0; i < per_class; ++i)
        for (size_t c = 0; c < spec.classes.size(); ++c) {
            Sample s;
            s.x = blob(spec, spec.classes[c], rng);
            s.label = static_cast<int>(c);
            std::snprintf(name, sizeof(name), "s%02d",
                          static_cast<int>(out.size() % static_cast<size_t>(spec.subjects)));
            s.subject = name;
            out.push_back(std::move(s));
        }
    return out;
}

void relabel_to_space(std::vector<Sample>& samples, const SynthSpec& spec,
                      const LabelSpace& space) {
    std::vector<int> remap(spec.classes.size());
    for (size_t c = 0; c < spec.classes.size(); ++c)
        remap[c] = label_index(space, spec.classes[c].label);
    for (auto& s : samples) {
        MERBA_CHECK(s.label >= 0 && s.label < static_cast<int>(remap.size()),
                    "sample label outside the generating spec");
        s.label = remap[static_cast<size_t>(s.label)];
    }
}

SynthSpec three_class_spec(int64_t extent) {
    SynthSpec spec;
    spec.extent = extent;
    spec.classes = {
        {"anger", 0.30, 0.30, 0.0, 1.0},
        {"happiness", 0.70, 0.40, 120.0, 1.0},
        {"surprise", 0.40, 0.70, 240.0, 1.0},
    };
    return spec;
}

SynthSpec confusable_negatives_spec(int64_t extent) {
    SynthSpec spec;
    spec.extent = extent;
    // The four negatives sit on one region with small direction steps; the
    // remaining classes are far apart in both placement and direction.
    spec.classes = {
        {"anger", 0.50, 0.50, 10.0, 1.0},
        {"disgust", 0.50, 0.50, 35.0, 1.0},
        {"fear", 0.50, 0.50, 60.0, 1.0},
        {"sadness", 0.50, 0.50, 85.0, 1.0},
        {"happiness", 0.25, 0.25, 180.0, 1.0},
        {"surprise", 0.75, 0.30, 270.0, 1.0},
        {"contempt", 0.30, 0.75, 135.0, 1.0},
    };
    return spec;
}

}  // namespace merba
