#pragma once
// Synthetic flow fields: one Gaussian motion blob per class, parameterized
// by placement and direction. Noiseless, jitter-free generation is exactly
// reproducible, which the determinism tests rely on.

#include "merba/model.hpp"

namespace merba {

struct SynthClass {
    std::string label;
    double center_row = 0.5, center_col = 0.5;  // fractions of the extent
    double angle_deg = 0.0;
    double amplitude = 1.0;
};

struct SynthSpec {
    int64_t extent = 56;
    double sigma_frac = 0.12;  // blob width as a fraction of the extent
    double noise = 0.0;        // per-pixel Gaussian noise on u and v
    double jitter = 0.0;       // center placement jitter, in pixels
    int64_t subjects = 4;
    std::vector<SynthClass> classes;
};

void validate_spec(const SynthSpec& spec);

struct Sample {
    FlowTriplet x;
    int label = 0;  // index into spec.classes / the label space
    std::string subject;
};

// Interleaves classes and deals subjects round-robin; the same (spec, count,
// seed) always yields the same samples.
std::vector<Sample> synth_dataset(const SynthSpec& spec, int64_t per_class,
                                  uint64_t seed);

// Rewrites spec-local class indices as indices into a label space (matched
// by class name).
void relabel_to_space(std::vector<Sample>& samples, const SynthSpec& spec,
                      const LabelSpace& space);

// Three well-separated classes (distinct regions and directions).
SynthSpec three_class_spec(int64_t extent);
// Seven classes; the four negatives share one region and differ only by a
// small direction step, so coarse separation is easy and fine is not.
SynthSpec confusable_negatives_spec(int64_t extent);

}  // namespace merba
