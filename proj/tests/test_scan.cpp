#include <cmath>
#include <set>

#include "doctest.h"
#include "merba/ops.hpp"
#include "merba/scan.hpp"

using namespace merba;

namespace {

// grid coordinates of flat index i
std::pair<int64_t, int64_t> rc(int64_t i, int64_t w) { return {i / w, i % w}; }

bool adjacent(int64_t a, int64_t b, int64_t w) {
    auto [ar, ac] = rc(a, w);
    auto [br, bc] = rc(b, w);
    return std::abs(ar - br) + std::abs(ac - bc) == 1;
}

int64_t non_adjacent_transitions(const std::vector<int64_t>& order, int64_t w) {
    int64_t n = 0;
    for (size_t t = 1; t < order.size(); ++t)
        if (!adjacent(order[t - 1], order[t], w)) ++n;
    return n;
}

bool is_bijection(const std::vector<int64_t>& order) {
    std::set<int64_t> seen(order.begin(), order.end());
    return seen.size() == order.size() &&
           *seen.begin() == 0 &&
           *seen.rbegin() == static_cast<int64_t>(order.size()) - 1;
}

}  // namespace

TEST_CASE("3x3 enumerations of all four base orders") {
    auto order = [](const char* d) {
        return build_permutation(parse_direction(d), 3, 3).order;
    };
    CHECK(order("a") == std::vector<int64_t>{0, 1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(order("b") == std::vector<int64_t>{0, 3, 6, 1, 4, 7, 2, 5, 8});
    CHECK(order("c") == std::vector<int64_t>{0, 1, 2, 5, 4, 3, 6, 7, 8});
    CHECK(order("d") == std::vector<int64_t>{0, 3, 6, 7, 4, 1, 2, 5, 8});
}

TEST_CASE("2x2 vertical raster visits column-major") {
    auto p = build_permutation(parse_direction("b"), 2, 2);
    CHECK(p.order == std::vector<int64_t>{0, 2, 1, 3});
}

TEST_CASE("suffix modifiers reverse and column-mirror") {
    auto a = build_permutation(parse_direction("a"), 3, 3).order;
    auto abi = build_permutation(parse_direction("a_bi"), 3, 3).order;
    auto asy = build_permutation(parse_direction("a_sy"), 3, 3).order;
    std::vector<int64_t> rev(a.rbegin(), a.rend());
    CHECK(abi == rev);
    CHECK(asy == std::vector<int64_t>{2, 1, 0, 5, 4, 3, 8, 7, 6});
}

TEST_CASE("bijectivity across sizes and directions") {
    for (const char* d : {"a", "b", "c", "d", "a_bi", "b_sy", "c_bi", "d_sy"})
        for (int64_t h : {1, 2, 3, 7})
            for (int64_t w : {1, 2, 5, 7}) {
                auto p = build_permutation(parse_direction(d), h, w);
                REQUIRE(static_cast<int64_t>(p.order.size()) == h * w);
                CHECK(is_bijection(p.order));
            }
}

TEST_CASE("zigzag orders are fully grid-adjacent; rasters break per row") {
    for (int64_t h : {2, 3, 7})
        for (int64_t w : {2, 3, 7}) {
            auto c = build_permutation(parse_direction("c"), h, w).order;
            auto d = build_permutation(parse_direction("d"), h, w).order;
            CHECK(non_adjacent_transitions(c, w) == 0);
            CHECK(non_adjacent_transitions(d, w) == 0);
            auto a = build_permutation(parse_direction("a"), h, w).order;
            auto b = build_permutation(parse_direction("b"), h, w).order;
            // every line reset jumps: rows-1 for the horizontal raster
            CHECK(non_adjacent_transitions(a, w) == h - 1);
            CHECK(non_adjacent_transitions(b, w) == w - 1);
        }
}

TEST_CASE("the four production directions are pairwise unrelated on 7x7") {
    ScanDirection dirs[4] = {parse_direction("a"), parse_direction("b"),
                             parse_direction("c"), parse_direction("d")};
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
            auto p = build_permutation(dirs[i], 7, 7);
            auto q = build_permutation(dirs[j], 7, 7);
            CHECK(classify_relation(p, q) == ScanRelation::Unrelated);
        }
}

TEST_CASE("relation classifier flags reversals, mirrors, identity") {
    auto a = build_permutation(parse_direction("a"), 7, 7);
    auto abi = build_permutation(parse_direction("a_bi"), 7, 7);
    auto asy = build_permutation(parse_direction("a_sy"), 7, 7);
    CHECK(classify_relation(a, a) == ScanRelation::Identical);
    CHECK(classify_relation(a, abi) == ScanRelation::Reversal);
    CHECK(classify_relation(a, asy) == ScanRelation::ColumnMirror);
    CHECK(relation_name(ScanRelation::Unrelated) == std::string("Unrelated"));
}

TEST_CASE("direction parsing round-trips and rejects junk") {
    for (const char* d : {"a", "b_bi", "c_sy", "d"})
        CHECK(direction_name(parse_direction(d)) == d);
    CHECK_THROWS_AS(parse_direction("e"), ValidationError);
    CHECK_THROWS_AS(parse_direction("a_"), ValidationError);
    CHECK_THROWS_AS(parse_direction(""), ValidationError);
}

TEST_CASE("apply_scan flattens the grid in scan order and inverts exactly") {
    Tape tape;
    // channel value encodes the source cell
    std::vector<double> vals(9);
    for (int i = 0; i < 9; ++i) vals[static_cast<size_t>(i)] = i;
    Tensor x = tape.leaf(Tensor({1, 3, 3, 1}, std::move(vals)));
    for (const char* d : {"a", "b", "c", "d", "b_bi", "c_sy"}) {
        const Permutation& p = cached_permutation(parse_direction(d), 3, 3);
        Tensor seq = apply_scan(x, p, tape);
        REQUIRE(seq.shape() == Shape{1, 9, 1});
        for (int64_t t = 0; t < 9; ++t)
            CHECK(seq.at(t) == doctest::Approx(static_cast<double>(p.order[static_cast<size_t>(t)])));
        Tensor back = invert_scan(seq, p, tape);
        REQUIRE(back.shape() == x.shape());
        for (int64_t i = 0; i < 9; ++i) CHECK(back.at(i) == x.at(i));
    }
}

TEST_CASE("cached permutations are stable references") {
    const Permutation& p1 = cached_permutation(parse_direction("c"), 7, 7);
    const Permutation& p2 = cached_permutation(parse_direction("c"), 7, 7);
    CHECK(&p1 == &p2);
}
