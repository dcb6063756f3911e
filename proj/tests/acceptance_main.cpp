// Acceptance gate: ten go/no-go checks, one line each, pinned tolerances.
// Exit status is the number of failing checks.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <vector>

#include "merba/gradcam.hpp"
#include "merba/serialize.hpp"
#include "merba/stage.hpp"
#include "merba/train.hpp"

using namespace merba;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int idx, const char* name, bool ok, const std::string& detail) {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << idx << " " << name;
    if (!detail.empty()) std::cout << " — " << detail;
    std::cout << std::endl;
    if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- 1: scan properties on the production window ---------------------------

bool adjacent(int64_t a, int64_t b, int64_t w) {
    return std::abs(a / w - b / w) + std::abs(a % w - b % w) == 1;
}

void criterion_scans() {
    auto t0 = Clock::now();
    bool ok = true;
    std::ostringstream why;
    ScanDirection dirs[4] = {parse_direction("a"), parse_direction("b"),
                             parse_direction("c"), parse_direction("d")};
    for (const auto& d : dirs) {
        auto p = build_permutation(d, 7, 7);
        std::set<int64_t> seen(p.order.begin(), p.order.end());
        if (seen.size() != 49 || *seen.begin() != 0 || *seen.rbegin() != 48) {
            ok = false;
            why << direction_name(d) << " is not a bijection; ";
        }
        int64_t jumps = 0;
        for (size_t t = 1; t < p.order.size(); ++t)
            if (!adjacent(p.order[t - 1], p.order[t], 7)) ++jumps;
        bool zigzag = d.kind == ScanKind::HorizontalZigzag ||
                      d.kind == ScanKind::VerticalZigzag;
        int64_t want = zigzag ? 0 : 6;
        if (jumps != want) {
            ok = false;
            why << direction_name(d) << " has " << jumps << " jumps, wants "
                << want << "; ";
        }
    }
    for (int i = 0; i < 4 && ok; ++i)
        for (int j = i + 1; j < 4; ++j) {
            auto rel = classify_relation(build_permutation(dirs[i], 7, 7),
                                         build_permutation(dirs[j], 7, 7));
            if (rel != ScanRelation::Unrelated) {
                ok = false;
                why << direction_name(dirs[i]) << " vs "
                    << direction_name(dirs[j]) << " is " << relation_name(rel)
                    << "; ";
            }
        }
    auto a = build_permutation(parse_direction("a"), 7, 7);
    if (classify_relation(a, build_permutation(parse_direction("a_bi"), 7, 7)) !=
        ScanRelation::Reversal) {
        ok = false;
        why << "a_bi not flagged as a reversal; ";
    }
    if (classify_relation(a, build_permutation(parse_direction("a_sy"), 7, 7)) !=
        ScanRelation::ColumnMirror) {
        ok = false;
        why << "a_sy not flagged as a column mirror; ";
    }
    if (seconds_since(t0) >= 1.0) { ok = false; why << "over 1s; "; }
    report(1, "scan suite (7x7: bijective, adjacency, pairwise unrelated)", ok,
           ok ? "4 directions, 6 pairs" : why.str());
}

// ---- 2: published stage geometry -------------------------------------------

void criterion_shapes() {
    auto t0 = Clock::now();
    ModelConfig mc;  // full-size defaults
    auto rows = shape_trace(mc);
    struct Want {
        const char* name;
        Shape in, out;
        int64_t windows;
    };
    const Want wants[5] = {
        {"patch_embed", {224, 224, 3}, {56, 56, 128}, 0},
        {"stage1", {56, 56, 128}, {28, 28, 256}, 0},
        {"stage2", {28, 28, 256}, {14, 14, 512}, 16},
        {"stage3", {14, 14, 512}, {7, 7, 1024}, 4},
        {"stage4", {7, 7, 1024}, {1, 1, 1024}, 1},
    };
    bool ok = rows.size() == 5;
    std::ostringstream why;
    for (size_t i = 0; ok && i < 5; ++i) {
        const auto& r = rows[i];
        const auto& w = wants[i];
        if (r.name != w.name || r.in != w.in || r.out != w.out ||
            r.windows != w.windows) {
            ok = false;
            why << "row " << i << " (" << r.name << ") diverges";
        }
    }
    if (seconds_since(t0) >= 1.0) { ok = false; why << "over 1s"; }
    report(2, "stage geometry (all five rows, window counts 16/4/1)", ok,
           ok ? "default 224x224 ladder" : why.str());
}

// ---- 3: loss arithmetic and the fine-gradient gate --------------------------

void criterion_loss() {
    bool ok = true;
    std::ostringstream why;
    auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
    if (!near(fine_weight(0, 100), 0.5)) { ok = false; why << "alpha(0); "; }
    if (!near(fine_weight(75, 100), 2.0)) { ok = false; why << "alpha(0.75T); "; }
    if (!near(fine_weight(90, 100), 2.0)) { ok = false; why << "alpha clamp; "; }
    if (!near(combine_losses(1.0, 2.0, 0.5), 1.0)) { ok = false; why << "combine; "; }

    DtypeScope scope(Dtype::F64);
    LabelSpace space = build_space(default_config().labels);
    Tape tape;
    Rng rng(31);
    Tensor coarse = tape.leaf(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
    Tensor fine = tape.leaf(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
    std::vector<int> y{label_index(space, "happiness"), label_index(space, "fear")};
    DgcmLoss loss = dgcm_loss({coarse, fine}, y, space, 10, 100, true, tape);
    auto grads = backward(tape, loss.total.node);
    const Tensor& gf = grads[static_cast<size_t>(fine.node)];
    for (int64_t j = 0; j < 4; ++j)
        if (gf.at(j) != 0.0) {
            ok = false;
            why << "non-negative sample leaked fine gradient; ";
            break;
        }
    double mag = 0;
    for (int64_t j = 0; j < 4; ++j) mag += std::abs(gf.at(4 + j));
    if (mag <= 0) { ok = false; why << "negative sample got no fine gradient; "; }
    report(3, "ramped dual loss (alpha 0.5->2.0, exact-zero fine gating)", ok,
           ok ? "alpha and gradient gate verified" : why.str());
}

// ---- 4: finite-difference audit ---------------------------------------------

void criterion_gradients() {
    auto t0 = Clock::now();
    DtypeScope scope(Dtype::F64);
    bool ok = true;
    std::ostringstream why;
    double worst = 0.0;
    {
        Rng rng(41);
        MixerParams p = make_mixer_params(8, 4, true, false, rng);
        ParamRegistry reg;
        register_params(p, reg, "m");
        Tape tape;
        Binder bind(tape, &reg);
        Tensor x = tape.leaf(Tensor::uniform({9, 8}, rng, -1.0, 1.0));
        Tensor y = mixer_forward(x, p, bind);
        GradCheckOptions o;
        o.max_elements_per_leaf = 4;
        o.sample_seed = 1;
        auto rep = grad_check(tape, ops::mean_all(ops::mul(y, y, tape), tape).node, o);
        worst = std::max(worst, rep.max_rel_err);
        if (!rep.pass) { ok = false; why << "mixer; "; }
    }
    {
        Rng rng(42);
        AttentionBlockParams p = make_attention_block(8, 2, 2, 0.0, rng);
        ParamRegistry reg;
        register_params(p, reg, "a");
        Tape tape;
        Binder bind(tape, &reg);
        Tensor x = tape.leaf(Tensor::uniform({2, 5, 8}, rng, -1.0, 1.0));
        Tensor y = attention_block(x, p, bind);
        GradCheckOptions o;
        o.max_elements_per_leaf = 4;
        o.sample_seed = 2;
        auto rep = grad_check(tape, ops::mean_all(ops::mul(y, y, tape), tape).node, o);
        worst = std::max(worst, rep.max_rel_err);
        if (!rep.pass) { ok = false; why << "attention; "; }
    }
    {
        Rng rng(43);
        ExtractorParams p = make_extractor(8, 4, 2, 0.0, true, false, true, false, rng);
        ParamRegistry reg;
        register_params(p, reg, "x");
        Tape tape;
        Binder bind(tape, &reg);
        Tensor w = tape.leaf(Tensor::uniform({2, 3, 3, 8}, rng, -1.0, 1.0));
        Tensor y = local_extract(w, p, bind);
        GradCheckOptions o;
        o.max_elements_per_leaf = 4;
        o.sample_seed = 3;
        auto rep = grad_check(tape, ops::mean_all(ops::mul(y, y, tape), tape).node, o);
        worst = std::max(worst, rep.max_rel_err);
        if (!rep.pass) { ok = false; why << "extractor; "; }
    }
    {
        AppConfig cfg = default_config();
        cfg.model.input_extent = 28;
        cfg.model.embed_dim = 8;
        cfg.model.dims = {8, 8, 16, 16};
        cfg.model.depths = {1, 1, 1, 1};
        cfg.model.state_dim = 4;
        cfg.model.mlp_ratio = 2;
        LabelSpace space = build_space(cfg.labels);
        auto model = make_model(cfg.model, space, 44);
        SynthSpec spec = confusable_negatives_spec(28);
        auto data = synth_dataset(spec, 1, 45);
        relabel_to_space(data, spec, space);
        std::vector<FlowTriplet> xs{data[0].x, data[4].x};
        std::vector<int> ys{data[0].label, data[4].label};
        Tape tape(true, 46, true);
        ForwardOut fwd = model_forward(*model, tape.leaf(stack_inputs(xs)), tape);
        DgcmLoss loss = dgcm_loss(fwd.logits, ys, space, 1, 10, true, tape);
        GradCheckOptions o;
        o.max_elements_per_leaf = 2;
        o.sample_seed = 4;
        o.step = 1e-5;  // batch-norm curvature; tolerance unchanged
        auto rep = grad_check(tape, loss.total.node, o);
        worst = std::max(worst, rep.max_rel_err);
        if (!rep.pass) { ok = false; why << "end-to-end miniature; "; }
    }
    double secs = seconds_since(t0);
    if (secs >= 300.0) { ok = false; why << "took " << secs << "s (>=300); "; }
    std::ostringstream detail;
    detail << "max rel err " << worst << " (tol 1e-4), "
           << static_cast<int>(secs) << "s";
    report(4, "gradient audit (mixer, attention, extractor, end-to-end)", ok,
           ok ? detail.str() : why.str());
}

// ---- 5: recurrence against brute force --------------------------------------

void criterion_scan_oracle() {
    auto t0 = Clock::now();
    DtypeScope scope(Dtype::F64);
    Rng rng(51);
    double worst = 0.0;
    for (int64_t T : {1, 4, 8})
        for (int64_t E : {1, 2, 4})
            for (int64_t N : {1, 2, 4}) {
                Tensor u = Tensor::uniform({2, T, E}, rng, -1.0, 1.0);
                Tensor w_delta = Tensor::uniform({E, E}, rng, -0.5, 0.5);
                Tensor b_delta = Tensor::uniform({E}, rng, -1.0, 0.5);
                Tensor w_b = Tensor::uniform({E, N}, rng, -0.8, 0.8);
                Tensor w_c = Tensor::uniform({E, N}, rng, -0.8, 0.8);
                Tensor a_log = Tensor::uniform({E, N}, rng, -1.0, 1.5);
                Tensor skip = Tensor::uniform({E}, rng, 0.5, 1.5);
                Tape tape;
                Tensor y = ops::selective_scan(
                    tape.leaf(u), tape.leaf(w_delta), tape.leaf(b_delta),
                    tape.leaf(w_b), tape.leaf(w_c), tape.leaf(a_log),
                    tape.leaf(skip), false, tape);
                // unrolled reference
                for (int64_t g = 0; g < 2; ++g) {
                    std::vector<double> h(static_cast<size_t>(E * N), 0.0);
                    for (int64_t t = 0; t < T; ++t) {
                        for (int64_t e = 0; e < E; ++e) {
                            double d = b_delta.at(e);
                            for (int64_t i = 0; i < E; ++i)
                                d += u.at((g * T + t) * E + i) * w_delta.at(i * E + e);
                            d = std::log1p(std::exp(-std::abs(d))) + std::max(d, 0.0);
                            double acc = 0.0;
                            for (int64_t n = 0; n < N; ++n) {
                                double bv = 0.0, cv = 0.0;
                                for (int64_t i = 0; i < E; ++i) {
                                    bv += u.at((g * T + t) * E + i) * w_b.at(i * N + n);
                                    cv += u.at((g * T + t) * E + i) * w_c.at(i * N + n);
                                }
                                double aa = -std::exp(a_log.at(e * N + n));
                                double& he = h[static_cast<size_t>(e * N + n)];
                                he = std::exp(d * aa) * he +
                                     d * bv * u.at((g * T + t) * E + e);
                                acc += cv * he;
                            }
                            double want =
                                acc + skip.at(e) * u.at((g * T + t) * E + e);
                            worst = std::max(
                                worst,
                                std::abs(y.at((g * T + t) * E + e) - want));
                        }
                    }
                }
            }
    std::ostringstream detail;
    detail << "max abs diff " << worst << " over 27 instances";
    report(5, "selective recurrence vs step-by-step unrolling (1e-12)",
           worst <= 1e-12 && seconds_since(t0) < 1.0, detail.str());
}

// ---- 6: metric oracle --------------------------------------------------------

void criterion_metrics() {
    auto t0 = Clock::now();
    bool ok = true;
    std::ostringstream why;
    EvalReport hand = report_from_confusion({{5, 5}, {0, 10}});
    if (std::abs(hand.uar - 0.75) > 1e-12) { ok = false; why << "hand UAR; "; }
    if (std::abs(hand.uf1 - 0.73333) > 1e-4) { ok = false; why << "hand UF1; "; }
    Rng rng(61);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        size_t k = 2 + static_cast<size_t>(rng.next_below(6));
        std::vector<std::vector<int64_t>> cm(k, std::vector<int64_t>(k));
        for (auto& row : cm)
            for (auto& v : row) v = static_cast<int64_t>(rng.next_below(9));
        EvalReport r = report_from_confusion(cm);
        double f1s = 0, recs = 0;
        int64_t diag = 0, total = 0;
        for (size_t c = 0; c < k; ++c) {
            int64_t tp = cm[c][c], row = 0, col = 0;
            for (size_t j = 0; j < k; ++j) {
                row += cm[c][j];
                col += cm[j][c];
                total += cm[c][j];
            }
            diag += tp;
            double prec = col > 0 ? double(tp) / double(col) : 0.0;
            double rec = row > 0 ? double(tp) / double(row) : 0.0;
            f1s += (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
            recs += rec;
        }
        worst = std::max(worst, std::abs(r.uf1 - f1s / double(k)));
        worst = std::max(worst, std::abs(r.uar - recs / double(k)));
        double acc = total > 0 ? double(diag) / double(total) : 0.0;
        worst = std::max(worst, std::abs(r.acc - acc));
    }
    if (worst > 1e-12) { ok = false; why << "random-confusion diff " << worst; }
    if (seconds_since(t0) >= 10.0) { ok = false; why << "over 10s; "; }
    std::ostringstream detail;
    detail << "1000 random matrices, max diff " << worst;
    report(6, "metric oracle (UF1/UAR/ACC, hand case + brute force)", ok,
           ok ? detail.str() : why.str());
}

// ---- 7: the miniature model actually learns ---------------------------------

AppConfig learning_config() {
    AppConfig cfg = default_config();
    cfg.model.input_extent = 56;
    cfg.model.embed_dim = 16;
    cfg.model.dims = {16, 32, 64, 64};
    cfg.model.depths = {1, 1, 1, 1};
    cfg.model.state_dim = 4;
    cfg.model.mlp_ratio = 2;
    cfg.model.dropout = 0.0;
    cfg.synth = three_class_spec(56);
    return cfg;
}

void criterion_learning() {
    auto t0 = Clock::now();
    AppConfig cfg = learning_config();
    LabelSpace space = build_space(cfg.labels);
    bool ok = true;
    std::ostringstream why;
    double best_acc = 0.0;
    // per-epoch loss curves of the three seeds; judged through their median
    std::vector<std::vector<double>> curves;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        auto data = synth_dataset(cfg.synth, 8, seed);
        relabel_to_space(data, cfg.synth, space);
        auto model = make_model(cfg.model, space, seed);
        TrainConfig tc;
        tc.epochs = 200;
        tc.warmup_epochs = 2;
        tc.cooldown_epochs = 2;
        tc.peak_lr = 5e-4;
        tc.batch_size = 8;
        tc.patience = 25;  // stop soon after the train metric saturates
        tc.seed = seed;
        // validating on the train set turns early stopping into a
        // saturation detector, so the run ends well before the budget
        TrainResult r = train_model(*model, data, &data, tc, nullptr);
        double acc = evaluate_model(*model, data, 8).acc;
        best_acc = std::max(best_acc, acc);
        if (acc < 0.95) {
            ok = false;
            why << "seed " << seed << " stalled at " << acc << " after "
                << r.epochs_run << " epochs; ";
        }
        std::vector<double> curve;
        for (size_t e = 0; e < 10 && e < r.log.size(); ++e)
            curve.push_back(r.log[e].loss_total);
        curves.push_back(curve);
    }
    // median across seeds at each epoch suppresses single-run shuffle noise
    std::vector<double> median10;
    for (size_t e = 0; e < 10; ++e) {
        std::vector<double> v{curves[0][e], curves[1][e], curves[2][e]};
        std::sort(v.begin(), v.end());
        median10.push_back(v[1]);
    }
    for (size_t e = 1; e < median10.size(); ++e)
        if (!(median10[e] < median10[e - 1])) {
            ok = false;
            why << "median loss rose at epoch " << e << " (" << median10[e - 1]
                << " -> " << median10[e] << "); ";
        }
    double secs = seconds_since(t0);
    if (secs >= 600.0) { ok = false; why << "took " << secs << "s (>=600); "; }
    std::ostringstream detail;
    detail << "3-class accuracy " << best_acc << ", median loss "
           << median10.front() << " -> " << median10.back() << " over 10 epochs, "
           << static_cast<int>(secs) << "s";
    report(7, "synthetic learning (>=95% train acc, decreasing early loss)", ok,
           ok ? detail.str() : why.str());
}

// ---- 8: the fine head earns its keep ----------------------------------------

void criterion_dual_head() {
    auto t0 = Clock::now();
    AppConfig cfg = learning_config();
    cfg.synth = confusable_negatives_spec(56);
    LabelSpace space = build_space(cfg.labels);
    double dual_sum = 0.0, single_sum = 0.0;
    const int kSeeds = 5;
    for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
        auto data = synth_dataset(cfg.synth, 6, seed * 17);
        relabel_to_space(data, cfg.synth, space);
        TrainConfig tc;
        tc.epochs = 30;
        tc.warmup_epochs = 3;
        tc.cooldown_epochs = 3;
        tc.peak_lr = 2e-3;
        tc.batch_size = 14;
        tc.patience = 30;
        tc.seed = seed;
        auto fine_negative_recall = [&](Model& m) {
            EvalReport r = evaluate_model(m, data, 14);
            double rec = 0.0;
            int n = 0;
            for (size_t full = 0; full < space.full.size(); ++full)
                if (space.full_to_coarse[full] == space.negative) {
                    rec += r.recall[full];
                    ++n;
                }
            return rec / n;
        };
        {
            ModelConfig dual_cfg = cfg.model;
            auto model = make_model(dual_cfg, space, seed);
            train_model(*model, data, nullptr, tc, nullptr);
            dual_sum += fine_negative_recall(*model);
        }
        {
            ModelConfig single_cfg = cfg.model;
            single_cfg.head = "single";
            auto model = make_model(single_cfg, space, seed);
            train_model(*model, data, nullptr, tc, nullptr);
            single_sum += fine_negative_recall(*model);
        }
    }
    double dual_mean = dual_sum / kSeeds, single_mean = single_sum / kSeeds;
    double secs = seconds_since(t0);
    bool ok = dual_mean >= single_mean && secs < 1800.0;
    std::ostringstream detail;
    detail << "mean negative-class recall: dual " << dual_mean << " vs single "
           << single_mean << " over " << kSeeds << " seeds, "
           << static_cast<int>(secs) << "s";
    report(8, "dual-granularity head >= single head on confusable negatives",
           ok, detail.str());
}

// ---- 9: parameter accounting --------------------------------------------------

void criterion_params() {
    ModelConfig mc;
    LabelSpace space = build_space(default_config().labels);
    int64_t total = count_params(mc, space);
    auto rows = param_breakdown(mc, space);
    int64_t sum = 0;
    for (const auto& r : rows) sum += r.count;
    bool ok = total >= 90'000'000 && total <= 115'000'000 && sum == total;
    std::ostringstream detail;
    detail << "total " << total << " (reference 101210000, delta "
           << total - 101210000 << "); modules:";
    for (const auto& r : rows) detail << " " << r.module << "=" << r.count;
    report(9, "parameter count within [90M, 115M], per-module attribution", ok,
           detail.str());
}

// ---- 10: bit-exact round-trips -------------------------------------------------

void criterion_roundtrips() {
    bool ok = true;
    std::ostringstream why;
    Rng rng(101);
    {
        Tape tape;
        Tensor x = tape.leaf(Tensor::uniform({2, 28, 28, 3}, rng, -1.0, 1.0));
        WindowGrid grid = partition(x, 7, 7, tape);
        Tensor back = merge_windows(grid.windows, grid, tape);
        for (int64_t i = 0; i < x.size(); ++i)
            if (back.at(i) != x.at(i)) {
                ok = false;
                why << "partition/merge; ";
                break;
            }
    }
    {
        Tape tape;
        Tensor x = tape.leaf(Tensor::uniform({1, 7, 7, 4}, rng, -1.0, 1.0));
        for (const auto& d : kScanDirections) {
            const Permutation& p = cached_permutation(d, 7, 7);
            Tensor back = invert_scan(apply_scan(x, p, tape), p, tape);
            for (int64_t i = 0; i < x.size(); ++i)
                if (back.at(i) != x.at(i)) {
                    ok = false;
                    why << "scan apply/invert (" << direction_name(d) << "); ";
                    break;
                }
        }
    }
    {
        AppConfig cfg = learning_config();
        LabelSpace space = build_space(cfg.labels);
        auto model = make_model(cfg.model, space, 103);
        std::string dir = std::string("/tmp/merba_accept_ckpt_") +
                          std::to_string(::getpid());
        save_checkpoint(dir, *model, cfg, 3);
        LoadedCheckpoint lc = load_checkpoint(dir);
        for (size_t i = 0; i < model->registry.entries.size(); ++i) {
            const Tensor& a = *model->registry.entries[i].tensor;
            const Tensor& b = *lc.model->registry.entries[i].tensor;
            for (int64_t j = 0; j < a.size(); ++j)
                if (a.at(j) != b.at(j)) {
                    ok = false;
                    why << "checkpoint tensor "
                        << model->registry.entries[i].name << "; ";
                    break;
                }
        }
        std::error_code ec;
        std::filesystem::remove_all(dir, ec);
    }
    report(10, "bit-exact round-trips (windows, scans, checkpoints)", ok,
           ok ? "" : why.str());
}

}  // namespace

int main() {
    std::cout << "acceptance gate\n";
    criterion_scans();
    criterion_shapes();
    criterion_loss();
    criterion_gradients();
    criterion_scan_oracle();
    criterion_metrics();
    criterion_learning();
    criterion_dual_head();
    criterion_params();
    criterion_roundtrips();
    std::cout << (failures == 0 ? "ALL CRITERIA PASS" : "FAILURES PRESENT")
              << " (" << (10 - failures) << "/10)" << std::endl;
    return failures;
}
