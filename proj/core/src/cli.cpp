#include "merba/cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "merba/gradcam.hpp"
#include "merba/serialize.hpp"
#include "merba/splits.hpp"

namespace merba {

namespace fs = std::filesystem;

namespace {

std::string fixed6(double x) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(6) << x;
    return ss.str();
}

std::string shape_x(const Shape& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out;
}

std::string default_run_dir(uint64_t seed) {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[64];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return std::string("runs/") + buf + "-seed" + std::to_string(seed);
}

Dtype parse_dtype(const std::string& s) {
    if (s == "f32") return Dtype::F32;
    if (s == "f64") return Dtype::F64;
    MERBA_CHECK(false, "dtype must be f32 or f64, got '", s, "'");
    return Dtype::F64;
}

void echo_config(std::ostream& err, const AppConfig& cfg) {
    err << "resolved config:\n" << config_json(cfg);
}

void print_report(std::ostream& out, const EvalReport& r,
                  const std::string& prefix) {
    out << prefix << "UF1=" << fixed6(r.uf1) << "\n";
    out << prefix << "UAR=" << fixed6(r.uar) << "\n";
    out << prefix << "ACC=" << fixed6(r.acc) << "\n";
}

std::string confusion_csv(const EvalReport& r) {
    std::string s;
    for (const auto& row : r.confusion) {
        for (size_t j = 0; j < row.size(); ++j) {
            if (j) s += ",";
            s += std::to_string(row[j]);
        }
        s += "\n";
    }
    return s;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    MERBA_CHECK(f.good(), "cannot open ", path, " for writing");
    f << text;
    MERBA_CHECK(f.good(), "short write to ", path);
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int parse_label_field(const std::string& field, const LabelSpace& space) {
    MERBA_CHECK(!field.empty(), "empty label field in prediction file");
    bool numeric = field.find_first_not_of("0123456789") == std::string::npos;
    if (numeric) {
        int v = std::stoi(field);
        MERBA_CHECK(v >= 0 && v < static_cast<int>(space.full.size()),
                    "label index ", v, " out of range");
        return v;
    }
    return label_index(space, field);
}

// Hold out the lexicographically last fraction of subjects for validation.
void carve_validation(const std::vector<Sample>& all, double fraction,
                      std::vector<Sample>& train_set, std::vector<Sample>& val_set) {
    if (fraction <= 0) {
        train_set = all;
        return;
    }
    std::vector<std::string> subjects;
    for (const auto& s : all) subjects.push_back(s.subject);
    std::sort(subjects.begin(), subjects.end());
    subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
    if (subjects.size() < 2) {
        train_set = all;
        return;
    }
    size_t n_val = std::max<size_t>(
        1, static_cast<size_t>(std::llround(fraction *
                                            static_cast<double>(subjects.size()))));
    n_val = std::min(n_val, subjects.size() - 1);
    std::vector<std::string> val_subjects(subjects.end() - static_cast<long>(n_val),
                                          subjects.end());
    for (const auto& s : all) {
        bool held = std::find(val_subjects.begin(), val_subjects.end(), s.subject) !=
                    val_subjects.end();
        (held ? val_set : train_set).push_back(s);
    }
}

struct ScanArgs {
    std::string direction = "a";
    int64_t height = 7, width = 7;
    bool grid = false;
};

int run_scan(const ScanArgs& a, std::ostream& out) {
    Permutation p = build_permutation(parse_direction(a.direction), a.height, a.width);
    if (!a.grid) {
        for (size_t i = 0; i < p.order.size(); ++i)
            out << (i ? "," : "") << p.order[i];
        out << "\n";
        return 0;
    }
    // Lay the visit step onto the grid.
    std::vector<int64_t> step(p.order.size());
    for (size_t t = 0; t < p.order.size(); ++t)
        step[static_cast<size_t>(p.order[t])] = static_cast<int64_t>(t);
    int width = static_cast<int>(std::to_string(p.order.size() - 1).size());
    for (int64_t r = 0; r < a.height; ++r) {
        for (int64_t c = 0; c < a.width; ++c)
            out << (c ? " " : "") << std::setw(width)
                << step[static_cast<size_t>(r * a.width + c)];
        out << "\n";
    }
    return 0;
}

int run_paramcount(const AppConfig& cfg, std::ostream& out) {
    LabelSpace space = build_space(cfg.labels);
    auto rows = param_breakdown(cfg.model, space);
    int64_t total = 0;
    for (const auto& row : rows) {
        out << row.module << ": " << row.count << "\n";
        total += row.count;
    }
    constexpr int64_t kReference = 101210000;  // published full-size total
    out << "total: " << total << "\n";
    out << "reference: " << kReference << "\n";
    out << "delta: " << total - kReference << "\n";
    return 0;
}

int run_shapes(const AppConfig& cfg, std::ostream& out) {
    for (const auto& row : shape_trace(cfg.model)) {
        out << row.name << ": " << shape_x(row.in) << " -> " << shape_x(row.out)
            << "\n";
        if (row.windows > 0)
            out << row.name << " windows: " << row.windows << "\n";
    }
    return 0;
}

int run_synth(const AppConfig& cfg, const std::string& out_dir, uint64_t seed,
              int64_t per_class, std::ostream& out) {
    LabelSpace space = build_space(cfg.labels);
    int64_t n = per_class > 0 ? per_class : cfg.synth_per_class;
    std::vector<Sample> samples = synth_dataset(cfg.synth, n, seed);
    relabel_to_space(samples, cfg.synth, space);
    save_dataset(out_dir, samples, space);
    out << "wrote " << samples.size() << " samples (" << cfg.synth.classes.size()
        << " classes, " << cfg.synth.subjects << " subjects) to " << out_dir << "\n";
    return 0;
}

int run_train(AppConfig cfg, const std::string& data_dir, std::string out_dir,
              std::ostream& out, std::ostream& err) {
    LabelSpace space = build_space(cfg.labels);
    std::vector<Sample> all = load_dataset(data_dir, space);
    std::vector<Sample> train_set, val_set;
    carve_validation(all, cfg.train.val_fraction, train_set, val_set);
    if (out_dir.empty()) out_dir = default_run_dir(cfg.train.seed);
    fs::create_directories(out_dir);
    echo_config(err, cfg);
    auto model = make_model(cfg.model, space, cfg.train.seed);
    std::ofstream csv((fs::path(out_dir) / "metrics.csv").string());
    MERBA_CHECK(csv.good(), "cannot open metrics.csv under ", out_dir);
    TrainResult result = train_model(*model, train_set,
                                     val_set.empty() ? nullptr : &val_set,
                                     cfg.train, &csv);
    save_checkpoint((fs::path(out_dir) / "checkpoint").string(), *model, cfg,
                    result.epochs_run - 1);
    out << "epochs run: " << result.epochs_run << " (best epoch " << result.best_epoch
        << ", val UF1=" << fixed6(result.best_val_uf1) << ")\n";
    EvalReport train_report = evaluate_model(*model, train_set, cfg.train.batch_size);
    print_report(out, train_report, "train ");
    EvalReport final_report = train_report;
    if (!val_set.empty()) {
        final_report = evaluate_model(*model, val_set, cfg.train.batch_size);
        print_report(out, final_report, "val ");
    }
    write_text((fs::path(out_dir) / "confusion.csv").string(),
               confusion_csv(final_report));
    out << "checkpoint: " << (fs::path(out_dir) / "checkpoint").string() << "\n";
    return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& pred_csv, const AppConfig& cfg,
             const std::string& out_dir, std::ostream& out) {
    EvalReport report;
    if (!pred_csv.empty()) {
        LabelSpace space = build_space(cfg.labels);
        std::ifstream f(pred_csv);
        MERBA_CHECK(f.good(), "cannot open ", pred_csv);
        std::vector<int> truth, pred;
        std::string line;
        while (std::getline(f, line)) {
            line = trim(line);
            if (line.empty()) continue;
            size_t comma = line.find(',');
            MERBA_CHECK(comma != std::string::npos,
                        "prediction rows must be 'truth,pred', got '", line, "'");
            std::string a = trim(line.substr(0, comma));
            std::string b = trim(line.substr(comma + 1));
            if (a == "truth") continue;  // header
            truth.push_back(parse_label_field(a, space));
            pred.push_back(parse_label_field(b, space));
        }
        report = evaluate_predictions(truth, pred,
                                      static_cast<int>(space.full.size()));
    } else {
        MERBA_CHECK(!checkpoint.empty() && !data_dir.empty(),
                    "eval needs either --pred or both --checkpoint and --data");
        LoadedCheckpoint lc = load_checkpoint(checkpoint);
        std::vector<Sample> data = load_dataset(data_dir, lc.model->space);
        report = evaluate_model(*lc.model, data, lc.cfg.train.batch_size);
    }
    print_report(out, report, "");
    out << "confusion (rows = truth):\n" << confusion_csv(report);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text((fs::path(out_dir) / "confusion.csv").string(),
                   confusion_csv(report));
        std::ostringstream rep;
        rep << "{\n  \"uf1\": " << report.uf1 << ",\n  \"uar\": " << report.uar
            << ",\n  \"acc\": " << report.acc << "\n}\n";
        write_text((fs::path(out_dir) / "report.json").string(), rep.str());
    }
    return 0;
}

int run_saliency(const std::string& checkpoint, const std::string& data_dir,
                 int64_t index, const std::string& target,
                 const std::string& out_path, std::ostream& out) {
    LoadedCheckpoint lc = load_checkpoint(checkpoint);
    std::vector<Sample> data = load_dataset(data_dir, lc.model->space);
    MERBA_CHECK(index >= 0 && index < static_cast<int64_t>(data.size()),
                "sample index ", index, " outside the dataset (", data.size(),
                " samples)");
    const Sample& sample = data[static_cast<size_t>(index)];
    int target_label = target.empty() ? sample.label
                                      : label_index(lc.model->space, target);
    SaliencyMap sal = compute_saliency(*lc.model, sample.x, target_label);
    int64_t extent = lc.cfg.model.input_extent;
    write_pgm(out_path, upsample_nearest(sal.map, extent, extent));
    out << "saliency for '" << lc.model->space.full[static_cast<size_t>(target_label)]
        << "' (sample " << index << ") -> " << out_path << " [" << sal.map.dim(0)
        << "x" << sal.map.dim(1) << " upsampled to " << extent << "x" << extent
        << "]\n";
    if (sal.degenerate)
        out << "warning: saliency map is degenerate (no gradient signal)\n";
    return 0;
}

int run_gradcheck(uint64_t seed, std::ostream& out) {
    MERBA_CHECK(default_dtype() == Dtype::F64,
                "gradient checking needs --dtype f64");
    ModelConfig mc;
    mc.input_extent = 28;
    mc.embed_dim = 8;
    mc.dims = {8, 8, 16, 16};
    mc.depths = {1, 1, 1, 1};
    mc.state_dim = 4;
    mc.mlp_ratio = 2;
    AppConfig app_cfg = default_config();
    LabelSpace space = build_space(app_cfg.labels);
    auto model = make_model(mc, space, seed);
    SynthSpec spec = confusable_negatives_spec(mc.input_extent);
    std::vector<Sample> samples = synth_dataset(spec, 1, seed + 1);
    relabel_to_space(samples, spec, space);
    std::vector<FlowTriplet> xs = {samples[0].x, samples[4].x};
    std::vector<int> ys = {samples[0].label, samples[4].label};
    Tape tape(true, seed + 2, true);
    ForwardOut fwd = model_forward(*model, tape.leaf(stack_inputs(xs)), tape);
    DgcmLoss loss = dgcm_loss(fwd.logits, ys, space, 1, 10,
                              mc.fine_mean_over_negatives, tape);
    GradCheckOptions opts;
    opts.max_elements_per_leaf = 2;
    opts.sample_seed = seed + 3;
    // Composite models pass through batch norm, whose tiny batch variances give
    // the loss a large third derivative; a smaller step keeps the central
    // difference inside the truncation budget while staying far above the f64
    // noise floor.
    opts.step = 1e-5;
    GradCheckReport report = grad_check(tape, loss.total.node, opts);
    int64_t elements = 0;
    for (const auto& e : report.entries) elements += e.elements_checked;
    out << "checked " << elements << " elements across " << report.entries.size()
        << " parameter bindings\n";
    out << "max rel err: " << report.max_rel_err << " (tolerance "
        << report.tolerance << ")\n";
    out << (report.pass ? "PASS" : "FAIL") << "\n";
    if (!report.pass)
        throw NumericalError("gradient check failed: max rel err " +
                             std::to_string(report.max_rel_err));
    return 0;
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
    std::vector<const char*> argv;
    argv.push_back("merba");
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_run(static_cast<int>(argv.size()), argv.data(), out, err);
}

int cli_run(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err) {
    CLI::App app{"micro-expression recognition over optical-flow triplets"};
    app.require_subcommand(1);

    ScanArgs scan_args;
    auto* sc_scan = app.add_subcommand("scan", "print a window scan order");
    sc_scan->add_option("--direction", scan_args.direction,
                        "a|b|c|d with optional _bi/_sy suffix")
        ->required();
    sc_scan->add_option("--height", scan_args.height, "grid rows")->required();
    sc_scan->add_option("--width", scan_args.width, "grid columns")->required();
    sc_scan->add_flag("--grid", scan_args.grid,
                      "lay the visit steps out on the grid");

    std::string pc_config = "default";
    auto* sc_param = app.add_subcommand("paramcount",
                                        "per-module parameter counts");
    sc_param->add_option("--config", pc_config, "default|miniature|path.json");

    std::string sh_config = "default";
    auto* sc_shapes = app.add_subcommand("shapes", "per-stage shape walk");
    sc_shapes->add_option("--config", sh_config, "default|miniature|path.json");

    std::string sy_config = "miniature", sy_out;
    uint64_t sy_seed = 0;
    int64_t sy_per_class = 0;
    auto* sc_synth = app.add_subcommand("synth", "generate a synthetic dataset");
    sc_synth->add_option("--config", sy_config, "default|miniature|path.json");
    sc_synth->add_option("--out", sy_out, "output directory")->required();
    sc_synth->add_option("--seed", sy_seed, "generator seed");
    sc_synth->add_option("--per-class", sy_per_class,
                         "samples per class (0 = from config)");

    std::string tr_config = "miniature", tr_data, tr_out, tr_dtype = "f32";
    uint64_t tr_seed = 0;
    auto* sc_train = app.add_subcommand("train", "train on a dataset directory");
    sc_train->add_option("--config", tr_config, "default|miniature|path.json");
    sc_train->add_option("--data", tr_data, "dataset directory")->required();
    sc_train->add_option("--out", tr_out, "run directory (default: runs/<stamp>)");
    auto* tr_seed_opt = sc_train->add_option("--seed", tr_seed,
                                             "overrides train.seed");
    sc_train->add_option("--dtype", tr_dtype, "f32|f64");

    std::string ev_checkpoint, ev_data, ev_pred, ev_config = "default", ev_out;
    auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint or a "
                                               "prediction file");
    sc_eval->add_option("--checkpoint", ev_checkpoint, "checkpoint directory");
    sc_eval->add_option("--data", ev_data, "dataset directory");
    sc_eval->add_option("--pred", ev_pred, "CSV of truth,pred rows");
    sc_eval->add_option("--config", ev_config,
                        "label space for --pred (default|miniature|path.json)");
    sc_eval->add_option("--out", ev_out, "directory for report files");

    std::string sa_checkpoint, sa_data, sa_target, sa_out;
    int64_t sa_index = 0;
    auto* sc_sal = app.add_subcommand("saliency",
                                      "class-activation map for one sample");
    sc_sal->add_option("--checkpoint", sa_checkpoint, "checkpoint directory")
        ->required();
    sc_sal->add_option("--data", sa_data, "dataset directory")->required();
    sc_sal->add_option("--index", sa_index, "sample index");
    sc_sal->add_option("--target", sa_target, "label to attribute (default: truth)");
    sc_sal->add_option("--out", sa_out, "output PGM path")->required();

    uint64_t gc_seed = 0;
    std::string gc_dtype = "f64";
    auto* sc_grad = app.add_subcommand("gradcheck",
                                       "finite-difference gradient audit");
    sc_grad->add_option("--seed", gc_seed, "model/data seed");
    sc_grad->add_option("--dtype", gc_dtype, "must be f64");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (sc_scan->parsed()) return run_scan(scan_args, out);
        if (sc_param->parsed()) return run_paramcount(load_config(pc_config), out);
        if (sc_shapes->parsed()) return run_shapes(load_config(sh_config), out);
        if (sc_synth->parsed())
            return run_synth(load_config(sy_config), sy_out, sy_seed, sy_per_class,
                             out);
        if (sc_train->parsed()) {
            AppConfig cfg = load_config(tr_config);
            if (tr_seed_opt->count() > 0) cfg.train.seed = tr_seed;
            DtypeScope scope(parse_dtype(tr_dtype));
            return run_train(cfg, tr_data, tr_out, out, err);
        }
        if (sc_eval->parsed())
            return run_eval(ev_checkpoint, ev_data, ev_pred,
                            load_config(ev_config), ev_out, out);
        if (sc_sal->parsed())
            return run_saliency(sa_checkpoint, sa_data, sa_index, sa_target, sa_out,
                                out);
        if (sc_grad->parsed()) {
            DtypeScope scope(parse_dtype(gc_dtype));
            return run_gradcheck(gc_seed, out);
        }
        err << "error: no subcommand selected\n";
        return 1;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace merba
