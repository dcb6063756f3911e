#pragma once
// Subject-independent protocols: leave-one-subject-out and grouped k-fold.
// Splits are index lists into the sample array; no subject appears on both
// sides of a split.

#include <cstdint>
#include <string>
#include <vector>

namespace merba {

struct Split {
    std::vector<int64_t> train, test;
};

// One split per distinct subject (sorted order), that subject held out.
std::vector<Split> loso_splits(const std::vector<std::string>& subjects);

// Distinct subjects in sorted order dealt round-robin into k folds.
// k must not exceed the number of distinct subjects.
std::vector<Split> kfold_splits(const std::vector<std::string>& subjects, int64_t k);

}  // namespace merba
