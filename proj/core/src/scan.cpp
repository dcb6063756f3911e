#include "merba/scan.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

namespace merba {

namespace {

// Base traversal before the reversed/mirrored modifiers. All four start at
// the top-left cell.
std::vector<int64_t> base_order(ScanKind kind, int64_t h, int64_t w) {
    std::vector<int64_t> order;
    order.reserve(static_cast<size_t>(h * w));
    switch (kind) {
        case ScanKind::HorizontalRaster:
            for (int64_t r = 0; r < h; ++r)
                for (int64_t c = 0; c < w; ++c) order.push_back(r * w + c);
            break;
        case ScanKind::VerticalRaster:
            for (int64_t c = 0; c < w; ++c)
                for (int64_t r = 0; r < h; ++r) order.push_back(r * w + c);
            break;
        case ScanKind::HorizontalZigzag:
            for (int64_t r = 0; r < h; ++r) {
                if (r % 2 == 0)
                    for (int64_t c = 0; c < w; ++c) order.push_back(r * w + c);
                else
                    for (int64_t c = w - 1; c >= 0; --c) order.push_back(r * w + c);
            }
            break;
        case ScanKind::VerticalZigzag:
            for (int64_t c = 0; c < w; ++c) {
                if (c % 2 == 0)
                    for (int64_t r = 0; r < h; ++r) order.push_back(r * w + c);
                else
                    for (int64_t r = h - 1; r >= 0; --r) order.push_back(r * w + c);
            }
            break;
    }
    return order;
}

const char* kind_token(ScanKind k) {
    switch (k) {
        case ScanKind::HorizontalRaster: return "a";
        case ScanKind::VerticalRaster: return "b";
        case ScanKind::HorizontalZigzag: return "c";
        case ScanKind::VerticalZigzag: return "d";
    }
    return "?";
}

}  // namespace

ScanDirection reversed(ScanDirection d) {
    d.reversed = !d.reversed;
    return d;
}

ScanDirection mirrored(ScanDirection d) {
    d.mirrored = !d.mirrored;
    return d;
}

ScanDirection parse_direction(const std::string& token) {
    std::string base = token;
    ScanDirection d;
    auto strip = [&](const char* suffix) {
        size_t n = std::string(suffix).size();
        if (base.size() > n && base.compare(base.size() - n, n, suffix) == 0) {
            base.resize(base.size() - n);
            return true;
        }
        return false;
    };
    if (strip("_bi"))
        d.reversed = true;
    else if (strip("_sy"))
        d.mirrored = true;
    if (base == "a")
        d.kind = ScanKind::HorizontalRaster;
    else if (base == "b")
        d.kind = ScanKind::VerticalRaster;
    else if (base == "c")
        d.kind = ScanKind::HorizontalZigzag;
    else if (base == "d")
        d.kind = ScanKind::VerticalZigzag;
    else
        MERBA_CHECK(false, "unknown scan direction '", token,
                    "' (expected a|b|c|d with optional _bi/_sy suffix)");
    return d;
}

std::string direction_name(const ScanDirection& d) {
    std::string s = kind_token(d.kind);
    if (d.reversed) s += "_bi";
    if (d.mirrored) s += "_sy";
    return s;
}

Permutation build_permutation(const ScanDirection& dir, int64_t height, int64_t width) {
    MERBA_CHECK(height >= 1 && width >= 1, "scan grid extent must be positive, got ",
                height, "x", width);
    Permutation p;
    p.height = height;
    p.width = width;
    p.order = base_order(dir.kind, height, width);
    if (dir.mirrored) {
        for (auto& idx : p.order) {
            int64_t r = idx / width, c = idx % width;
            idx = r * width + (width - 1 - c);
        }
    }
    if (dir.reversed) std::reverse(p.order.begin(), p.order.end());
    return p;
}

const Permutation& cached_permutation(const ScanDirection& dir, int64_t height,
                                      int64_t width) {
    using Key = std::tuple<int, bool, bool, int64_t, int64_t>;
    static std::mutex mu;
    static std::map<Key, std::unique_ptr<const Permutation>> cache;
    Key key{static_cast<int>(dir.kind), dir.reversed, dir.mirrored, height, width};
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it == cache.end()) {
        auto p = std::make_unique<const Permutation>(
            build_permutation(dir, height, width));
        it = cache.emplace(key, std::move(p)).first;
    }
    return *it->second;
}

Tensor apply_scan(const Tensor& window, const Permutation& perm, Tape& tape) {
    MERBA_CHECK(window.rank() == 3 || window.rank() == 4,
                "apply_scan expects [wH,wW,D] or [G,wH,wW,D], got rank ", window.rank());
    bool batched = window.rank() == 4;
    int64_t wh = window.dim(batched ? 1 : 0);
    int64_t ww = window.dim(batched ? 2 : 1);
    int64_t d = window.dim(batched ? 3 : 2);
    MERBA_CHECK(wh == perm.height && ww == perm.width, "window extent ", wh, "x", ww,
                " does not match permutation extent ", perm.height, "x", perm.width);
    int64_t t = wh * ww;
    Tensor flat = batched ? ops::reshape(window, {window.dim(0), t, d}, tape)
                          : ops::reshape(window, {t, d}, tape);
    return ops::permute_rows(flat, perm.order, tape);
}

Tensor invert_scan(const Tensor& sequence, const Permutation& perm, Tape& tape) {
    MERBA_CHECK(sequence.rank() == 2 || sequence.rank() == 3,
                "invert_scan expects [T,D] or [G,T,D], got rank ", sequence.rank());
    bool batched = sequence.rank() == 3;
    int64_t t = sequence.dim(batched ? 1 : 0);
    int64_t d = sequence.dim(batched ? 2 : 1);
    MERBA_CHECK(t == perm.height * perm.width, "sequence length ", t,
                " does not match permutation extent ", perm.height, "x", perm.width);
    std::vector<int64_t> inverse(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i)
        inverse[static_cast<size_t>(perm.order[static_cast<size_t>(i)])] = i;
    Tensor grid_rows = ops::permute_rows(sequence, inverse, tape);
    return batched
               ? ops::reshape(grid_rows, {sequence.dim(0), perm.height, perm.width, d},
                              tape)
               : ops::reshape(grid_rows, {perm.height, perm.width, d}, tape);
}

const char* relation_name(ScanRelation r) {
    switch (r) {
        case ScanRelation::Identical: return "Identical";
        case ScanRelation::Reversal: return "Reversal";
        case ScanRelation::ColumnMirror: return "ColumnMirror";
        case ScanRelation::Unrelated: return "Unrelated";
    }
    return "?";
}

ScanRelation classify_relation(const Permutation& p, const Permutation& q) {
    MERBA_CHECK(p.height == q.height && p.width == q.width,
                "cannot relate scans on different extents: ", p.height, "x", p.width,
                " vs ", q.height, "x", q.width);
    MERBA_CHECK(p.order.size() == q.order.size(), "malformed permutation");
    size_t n = p.order.size();
    if (p.order == q.order) return ScanRelation::Identical;
    bool rev = true;
    for (size_t i = 0; i < n && rev; ++i) rev = q.order[i] == p.order[n - 1 - i];
    if (rev) return ScanRelation::Reversal;
    bool mir = true;
    for (size_t i = 0; i < n && mir; ++i) {
        int64_t r = p.order[i] / p.width, c = p.order[i] % p.width;
        mir = q.order[i] == r * p.width + (p.width - 1 - c);
    }
    if (mir) return ScanRelation::ColumnMirror;
    return ScanRelation::Unrelated;
}

}  // namespace merba
