#pragma once
// Window scan orders: four production traversals (horizontal/vertical raster,
// horizontal/vertical zigzag) plus the reversed and column-mirrored variants
// used by the redundancy ablation. A permutation maps step -> grid token.

#include <cstdint>
#include <string>
#include <vector>

#include "merba/ops.hpp"
#include "merba/tensor.hpp"

namespace merba {

enum class ScanKind : uint8_t {
    HorizontalRaster,  // a
    VerticalRaster,    // b
    HorizontalZigzag,  // c
    VerticalZigzag,    // d
};

struct ScanDirection {
    ScanKind kind = ScanKind::HorizontalRaster;
    bool reversed = false;  // visit order flipped end-to-start
    bool mirrored = false;  // grid columns flipped left-right
};

ScanDirection reversed(ScanDirection d);
ScanDirection mirrored(ScanDirection d);

// Token grammar: "a" | "b" | "c" | "d", optionally suffixed "_bi" (reversed)
// or "_sy" (column-mirrored).
ScanDirection parse_direction(const std::string& token);
std::string direction_name(const ScanDirection& d);

struct Permutation {
    std::vector<int64_t> order;  // order[t] = row-major grid index visited at step t
    int64_t height = 0;
    int64_t width = 0;
};

Permutation build_permutation(const ScanDirection& dir, int64_t height, int64_t width);

// Process-wide immutable cache, one entry per (direction, height, width).
const Permutation& cached_permutation(const ScanDirection& dir, int64_t height,
                                      int64_t width);

// [wH,wW,D] -> [T,D] (or [G,wH,wW,D] -> [G,T,D]); output row t is grid token
// order[t]. Pure data movement on the tape, so it differentiates and inverts
// bit-exactly.
Tensor apply_scan(const Tensor& window, const Permutation& perm, Tape& tape);
Tensor invert_scan(const Tensor& sequence, const Permutation& perm, Tape& tape);

enum class ScanRelation : uint8_t { Identical, Reversal, ColumnMirror, Unrelated };
const char* relation_name(ScanRelation r);

// Exhaustive comparison of two orders on the same grid extent.
ScanRelation classify_relation(const Permutation& p, const Permutation& q);

}  // namespace merba
