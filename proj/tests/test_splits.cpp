#include <set>

#include "doctest.h"
#include "merba/common.hpp"
#include "merba/splits.hpp"

using namespace merba;

namespace {

const std::vector<std::string> kSubjects{"s2", "s0", "s1", "s0", "s2",
                                         "s2", "s3", "s1", "s0"};

void check_disjoint_and_complete(const std::vector<Split>& splits,
                                 const std::vector<std::string>& subjects) {
    for (const auto& sp : splits) {
        std::set<std::string> train_subj, test_subj;
        std::set<int64_t> seen;
        for (int64_t i : sp.train) {
            train_subj.insert(subjects[static_cast<size_t>(i)]);
            CHECK(seen.insert(i).second);
        }
        for (int64_t i : sp.test) {
            test_subj.insert(subjects[static_cast<size_t>(i)]);
            CHECK(seen.insert(i).second);
        }
        CHECK(seen.size() == subjects.size());
        for (const auto& s : test_subj) CHECK(train_subj.count(s) == 0);
    }
}

}  // namespace

TEST_CASE("leave-one-subject-out produces one split per distinct subject") {
    auto splits = loso_splits(kSubjects);
    REQUIRE(splits.size() == 4);
    check_disjoint_and_complete(splits, kSubjects);
    // each sample is tested exactly once across the protocol
    std::vector<int> tested(kSubjects.size(), 0);
    for (const auto& sp : splits)
        for (int64_t i : sp.test) tested[static_cast<size_t>(i)] += 1;
    for (int t : tested) CHECK(t == 1);
    // sorted order: first split holds out s0
    for (int64_t i : splits[0].test)
        CHECK(kSubjects[static_cast<size_t>(i)] == "s0");
}

TEST_CASE("grouped k-fold keeps subjects whole and partitions the test side") {
    auto splits = kfold_splits(kSubjects, 2);
    REQUIRE(splits.size() == 2);
    check_disjoint_and_complete(splits, kSubjects);
    std::vector<int> tested(kSubjects.size(), 0);
    for (const auto& sp : splits)
        for (int64_t i : sp.test) tested[static_cast<size_t>(i)] += 1;
    for (int t : tested) CHECK(t == 1);
}

TEST_CASE("k beyond the distinct-subject count is rejected") {
    CHECK_THROWS_AS(kfold_splits(kSubjects, 5), ValidationError);
    CHECK_THROWS_AS(kfold_splits(kSubjects, 0), ValidationError);
    CHECK_NOTHROW(kfold_splits(kSubjects, 4));
}

TEST_CASE("loso on a single subject yields an empty training side") {
    auto splits = loso_splits({"only", "only"});
    REQUIRE(splits.size() == 1);
    CHECK(splits[0].train.empty());
    CHECK(splits[0].test.size() == 2);
}
