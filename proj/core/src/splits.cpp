#include "merba/splits.hpp"

#include <algorithm>
#include <map>

#include "merba/common.hpp"

namespace merba {

namespace {

std::vector<std::string> distinct_sorted(const std::vector<std::string>& subjects) {
    std::vector<std::string> d = subjects;
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    return d;
}

std::vector<Split> splits_from_groups(
    const std::vector<std::string>& subjects,
    const std::vector<std::vector<std::string>>& held_out_groups) {
    std::vector<Split> splits;
    for (const auto& group : held_out_groups) {
        Split s;
        for (size_t i = 0; i < subjects.size(); ++i) {
            bool held = std::find(group.begin(), group.end(), subjects[i]) !=
                        group.end();
            (held ? s.test : s.train).push_back(static_cast<int64_t>(i));
        }
        splits.push_back(std::move(s));
    }
    return splits;
}

}  // namespace

std::vector<Split> loso_splits(const std::vector<std::string>& subjects) {
    MERBA_CHECK(!subjects.empty(), "no samples to split");
    std::vector<std::vector<std::string>> groups;
    for (const auto& s : distinct_sorted(subjects)) groups.push_back({s});
    return splits_from_groups(subjects, groups);
}

std::vector<Split> kfold_splits(const std::vector<std::string>& subjects, int64_t k) {
    MERBA_CHECK(!subjects.empty(), "no samples to split");
    std::vector<std::string> d = distinct_sorted(subjects);
    MERBA_CHECK(k >= 1, "fold count must be positive, got ", k);
    MERBA_CHECK(k <= static_cast<int64_t>(d.size()), "cannot make ", k,
                " subject-disjoint folds from ", d.size(), " distinct subjects");
    std::vector<std::vector<std::string>> groups(static_cast<size_t>(k));
    for (size_t i = 0; i < d.size(); ++i)
        groups[i % static_cast<size_t>(k)].push_back(d[i]);
    return splits_from_groups(subjects, groups);
}

}  // namespace merba
