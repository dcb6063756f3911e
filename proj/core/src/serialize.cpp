#include "merba/serialize.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace merba {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    MERBA_CHECK(f.good(), "cannot open ", path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    MERBA_CHECK(f.good(), "cannot open ", path, " for writing");
    f << text;
    MERBA_CHECK(f.good(), "short write to ", path);
}

json parse_json(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    MERBA_CHECK(!j.is_discarded(), what, " is not valid JSON");
    return j;
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "input", "embed_dim", "dims", "depths", "window", "head_div",
        "mlp_ratio", "dropout", "bn_momentum", "head",
        "mixer.state_dim", "mixer.prenorm", "mixer.exact_zoh",
        "extractor.residual", "extractor.per_direction_params",
        "augment.negate_u", "dgcm.fine_mean_over_negatives",
        "labels.full", "labels.coarse_map", "labels.fine",
        "train.epochs", "train.warmup_epochs", "train.cooldown_epochs",
        "train.peak_lr", "train.floor_frac", "train.weight_decay",
        "train.beta1", "train.beta2", "train.eps", "train.batch_size",
        "train.patience", "train.seed", "train.augment", "train.val_fraction",
        "synth.preset", "synth.extent", "synth.sigma_frac", "synth.noise",
        "synth.jitter", "synth.subjects", "synth.per_class", "synth.classes",
    };
    return keys;
}

int64_t get_int(const json& v, const std::string& key) {
    MERBA_CHECK(v.is_number_integer(), "config key '", key,
                "' must be an integer");
    return v.get<int64_t>();
}

double get_num(const json& v, const std::string& key) {
    MERBA_CHECK(v.is_number(), "config key '", key, "' must be a number");
    return v.get<double>();
}

bool get_bool(const json& v, const std::string& key) {
    MERBA_CHECK(v.is_boolean(), "config key '", key, "' must be true or false");
    return v.get<bool>();
}

std::string get_str(const json& v, const std::string& key) {
    MERBA_CHECK(v.is_string(), "config key '", key, "' must be a string");
    return v.get<std::string>();
}

std::vector<int64_t> get_int_list(const json& v, const std::string& key) {
    MERBA_CHECK(v.is_array(), "config key '", key, "' must be an array");
    std::vector<int64_t> out;
    for (const auto& e : v) out.push_back(get_int(e, key));
    return out;
}

std::vector<std::string> get_str_list(const json& v, const std::string& key) {
    MERBA_CHECK(v.is_array(), "config key '", key, "' must be an array");
    std::vector<std::string> out;
    for (const auto& e : v) out.push_back(get_str(e, key));
    return out;
}

void apply_preset(SynthSpec& spec, const std::string& preset) {
    SynthSpec base = preset == "confusable" ? confusable_negatives_spec(spec.extent)
                                            : three_class_spec(spec.extent);
    spec.classes = base.classes;
}

}  // namespace

LabelSpace build_space(const LabelConfig& lc) {
    return make_label_space(lc.full, lc.coarse_map, lc.fine);
}

AppConfig default_config() {
    AppConfig cfg;
    cfg.labels.full = {"anger",     "disgust",  "fear",    "sadness",
                       "happiness", "surprise", "contempt"};
    cfg.labels.coarse_map = {
        {"anger", "negative"},    {"disgust", "negative"},
        {"fear", "negative"},     {"sadness", "negative"},
        {"happiness", "positive"}, {"surprise", "surprise"},
        {"contempt", "contempt"},
    };
    cfg.labels.fine = {"anger", "disgust", "fear", "sadness"};
    cfg.synth.extent = 56;
    apply_preset(cfg.synth, cfg.synth_preset);
    return cfg;
}

AppConfig miniature_config() {
    AppConfig cfg = default_config();
    cfg.model.input_extent = 56;
    cfg.model.embed_dim = 16;
    cfg.model.dims = {16, 32, 64, 64};
    cfg.model.depths = {1, 1, 1, 1};
    cfg.train.epochs = 20;
    cfg.train.warmup_epochs = 2;
    cfg.train.cooldown_epochs = 2;
    cfg.train.batch_size = 8;
    return cfg;
}

AppConfig parse_config_json(const std::string& text) {
    json j = parse_json(text, "config");
    MERBA_CHECK(j.is_object(), "config must be a JSON object");
    AppConfig cfg = default_config();
    for (const auto& [key, v] : j.items())
        MERBA_CHECK(known_keys().count(key) == 1, "unknown config key '", key, "'");

    auto has = [&](const char* k) { return j.contains(k); };
    if (has("input")) cfg.model.input_extent = get_int(j["input"], "input");
    if (has("embed_dim")) cfg.model.embed_dim = get_int(j["embed_dim"], "embed_dim");
    if (has("dims")) cfg.model.dims = get_int_list(j["dims"], "dims");
    if (has("depths")) cfg.model.depths = get_int_list(j["depths"], "depths");
    if (has("window")) cfg.model.window = get_int(j["window"], "window");
    if (has("head_div")) cfg.model.head_div = get_int(j["head_div"], "head_div");
    if (has("mlp_ratio")) cfg.model.mlp_ratio = get_int(j["mlp_ratio"], "mlp_ratio");
    if (has("dropout")) cfg.model.dropout = get_num(j["dropout"], "dropout");
    if (has("bn_momentum"))
        cfg.model.bn_momentum = get_num(j["bn_momentum"], "bn_momentum");
    if (has("head")) cfg.model.head = get_str(j["head"], "head");
    if (has("mixer.state_dim"))
        cfg.model.state_dim = get_int(j["mixer.state_dim"], "mixer.state_dim");
    if (has("mixer.prenorm"))
        cfg.model.mixer_prenorm = get_bool(j["mixer.prenorm"], "mixer.prenorm");
    if (has("mixer.exact_zoh"))
        cfg.model.mixer_exact_zoh = get_bool(j["mixer.exact_zoh"], "mixer.exact_zoh");
    if (has("extractor.residual"))
        cfg.model.extractor_residual =
            get_bool(j["extractor.residual"], "extractor.residual");
    if (has("extractor.per_direction_params"))
        cfg.model.per_direction_params = get_bool(
            j["extractor.per_direction_params"], "extractor.per_direction_params");
    if (has("augment.negate_u"))
        cfg.model.negate_u_on_flip =
            get_bool(j["augment.negate_u"], "augment.negate_u");
    if (has("dgcm.fine_mean_over_negatives"))
        cfg.model.fine_mean_over_negatives = get_bool(
            j["dgcm.fine_mean_over_negatives"], "dgcm.fine_mean_over_negatives");

    if (has("labels.full"))
        cfg.labels.full = get_str_list(j["labels.full"], "labels.full");
    if (has("labels.coarse_map")) {
        const json& cm = j["labels.coarse_map"];
        cfg.labels.coarse_map.clear();
        if (cm.is_array()) {
            for (const auto& pair : cm) {
                MERBA_CHECK(pair.is_array() && pair.size() == 2,
                            "labels.coarse_map entries must be [label, group] pairs");
                cfg.labels.coarse_map.emplace_back(
                    get_str(pair[0], "labels.coarse_map"),
                    get_str(pair[1], "labels.coarse_map"));
            }
        } else if (cm.is_object()) {
            for (const auto& [name, group] : cm.items())
                cfg.labels.coarse_map.emplace_back(
                    name, get_str(group, "labels.coarse_map"));
        } else {
            MERBA_CHECK(false, "labels.coarse_map must be an array or object");
        }
    }
    if (has("labels.fine"))
        cfg.labels.fine = get_str_list(j["labels.fine"], "labels.fine");

    if (has("train.epochs")) cfg.train.epochs = get_int(j["train.epochs"], "train.epochs");
    if (has("train.warmup_epochs"))
        cfg.train.warmup_epochs = get_int(j["train.warmup_epochs"], "train.warmup_epochs");
    if (has("train.cooldown_epochs"))
        cfg.train.cooldown_epochs =
            get_int(j["train.cooldown_epochs"], "train.cooldown_epochs");
    if (has("train.peak_lr")) cfg.train.peak_lr = get_num(j["train.peak_lr"], "train.peak_lr");
    if (has("train.floor_frac"))
        cfg.train.floor_frac = get_num(j["train.floor_frac"], "train.floor_frac");
    if (has("train.weight_decay"))
        cfg.train.weight_decay = get_num(j["train.weight_decay"], "train.weight_decay");
    if (has("train.beta1")) cfg.train.beta1 = get_num(j["train.beta1"], "train.beta1");
    if (has("train.beta2")) cfg.train.beta2 = get_num(j["train.beta2"], "train.beta2");
    if (has("train.eps")) cfg.train.eps = get_num(j["train.eps"], "train.eps");
    if (has("train.batch_size"))
        cfg.train.batch_size = get_int(j["train.batch_size"], "train.batch_size");
    if (has("train.patience"))
        cfg.train.patience = get_int(j["train.patience"], "train.patience");
    if (has("train.seed"))
        cfg.train.seed = static_cast<uint64_t>(get_int(j["train.seed"], "train.seed"));
    if (has("train.augment"))
        cfg.train.augment = get_bool(j["train.augment"], "train.augment");
    if (has("train.val_fraction"))
        cfg.train.val_fraction = get_num(j["train.val_fraction"], "train.val_fraction");

    if (has("synth.preset")) cfg.synth_preset = get_str(j["synth.preset"], "synth.preset");
    MERBA_CHECK(cfg.synth_preset == "three" || cfg.synth_preset == "confusable" ||
                    cfg.synth_preset == "custom",
                "synth.preset must be three|confusable|custom");
    if (has("synth.extent")) cfg.synth.extent = get_int(j["synth.extent"], "synth.extent");
    if (has("synth.sigma_frac"))
        cfg.synth.sigma_frac = get_num(j["synth.sigma_frac"], "synth.sigma_frac");
    if (has("synth.noise")) cfg.synth.noise = get_num(j["synth.noise"], "synth.noise");
    if (has("synth.jitter")) cfg.synth.jitter = get_num(j["synth.jitter"], "synth.jitter");
    if (has("synth.subjects"))
        cfg.synth.subjects = get_int(j["synth.subjects"], "synth.subjects");
    if (has("synth.per_class"))
        cfg.synth_per_class = get_int(j["synth.per_class"], "synth.per_class");
    if (cfg.synth_preset == "custom") {
        MERBA_CHECK(has("synth.classes"),
                    "synth.preset 'custom' needs synth.classes");
        cfg.synth.classes.clear();
        for (const auto& e : j["synth.classes"]) {
            MERBA_CHECK(e.is_object(), "synth.classes entries must be objects");
            SynthClass c;
            c.label = get_str(e.at("label"), "synth.classes.label");
            c.center_row = get_num(e.at("row"), "synth.classes.row");
            c.center_col = get_num(e.at("col"), "synth.classes.col");
            c.angle_deg = get_num(e.at("angle_deg"), "synth.classes.angle_deg");
            if (e.contains("amplitude"))
                c.amplitude = get_num(e["amplitude"], "synth.classes.amplitude");
            cfg.synth.classes.push_back(c);
        }
    } else {
        MERBA_CHECK(!has("synth.classes"),
                    "synth.classes requires synth.preset 'custom'");
        apply_preset(cfg.synth, cfg.synth_preset);
    }

    validate_config(cfg.model);
    validate_train_config(cfg.train);
    validate_spec(cfg.synth);
    build_space(cfg.labels);  // reject malformed vocabularies early
    return cfg;
}

std::string config_json(const AppConfig& cfg) {
    json j;
    j["input"] = cfg.model.input_extent;
    j["embed_dim"] = cfg.model.embed_dim;
    j["dims"] = cfg.model.dims;
    j["depths"] = cfg.model.depths;
    j["window"] = cfg.model.window;
    j["head_div"] = cfg.model.head_div;
    j["mlp_ratio"] = cfg.model.mlp_ratio;
    j["dropout"] = cfg.model.dropout;
    j["bn_momentum"] = cfg.model.bn_momentum;
    j["head"] = cfg.model.head;
    j["mixer.state_dim"] = cfg.model.state_dim;
    j["mixer.prenorm"] = cfg.model.mixer_prenorm;
    j["mixer.exact_zoh"] = cfg.model.mixer_exact_zoh;
    j["extractor.residual"] = cfg.model.extractor_residual;
    j["extractor.per_direction_params"] = cfg.model.per_direction_params;
    j["augment.negate_u"] = cfg.model.negate_u_on_flip;
    j["dgcm.fine_mean_over_negatives"] = cfg.model.fine_mean_over_negatives;
    j["labels.full"] = cfg.labels.full;
    json cm = json::array();
    for (const auto& [name, group] : cfg.labels.coarse_map)
        cm.push_back({name, group});
    j["labels.coarse_map"] = cm;
    j["labels.fine"] = cfg.labels.fine;
    j["train.epochs"] = cfg.train.epochs;
    j["train.warmup_epochs"] = cfg.train.warmup_epochs;
    j["train.cooldown_epochs"] = cfg.train.cooldown_epochs;
    j["train.peak_lr"] = cfg.train.peak_lr;
    j["train.floor_frac"] = cfg.train.floor_frac;
    j["train.weight_decay"] = cfg.train.weight_decay;
    j["train.beta1"] = cfg.train.beta1;
    j["train.beta2"] = cfg.train.beta2;
    j["train.eps"] = cfg.train.eps;
    j["train.batch_size"] = cfg.train.batch_size;
    j["train.patience"] = cfg.train.patience;
    j["train.seed"] = cfg.train.seed;
    j["train.augment"] = cfg.train.augment;
    j["train.val_fraction"] = cfg.train.val_fraction;
    j["synth.preset"] = cfg.synth_preset;
    j["synth.extent"] = cfg.synth.extent;
    j["synth.sigma_frac"] = cfg.synth.sigma_frac;
    j["synth.noise"] = cfg.synth.noise;
    j["synth.jitter"] = cfg.synth.jitter;
    j["synth.subjects"] = cfg.synth.subjects;
    j["synth.per_class"] = cfg.synth_per_class;
    if (cfg.synth_preset == "custom") {
        json cls = json::array();
        for (const auto& c : cfg.synth.classes)
            cls.push_back({{"label", c.label},
                           {"row", c.center_row},
                           {"col", c.center_col},
                           {"angle_deg", c.angle_deg},
                           {"amplitude", c.amplitude}});
        j["synth.classes"] = cls;
    }
    return j.dump(2) + "\n";
}

AppConfig load_config(const std::string& name_or_path) {
    if (name_or_path == "default") return default_config();
    if (name_or_path == "miniature") return miniature_config();
    return parse_config_json(read_file(name_or_path));
}

void save_dataset(const std::string& dir, const std::vector<Sample>& samples,
                  const LabelSpace& space) {
    MERBA_CHECK(!samples.empty(), "refusing to write an empty dataset");
    fs::create_directories(dir);
    json index;
    index["extent"] = samples[0].x.u.dim(0);
    json list = json::array();
    char name[32];
    for (size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        MERBA_CHECK(s.label >= 0 && s.label < static_cast<int>(space.full.size()),
                    "sample ", i, " label out of range");
        std::snprintf(name, sizeof(name), "sample_%06zu.mert", i);
        save_mert(triplet_input(s.x), (fs::path(dir) / name).string());
        list.push_back({{"file", name},
                        {"label", space.full[static_cast<size_t>(s.label)]},
                        {"subject", s.subject}});
    }
    index["samples"] = list;
    write_file((fs::path(dir) / "index.json").string(), index.dump(2) + "\n");
}

std::vector<Sample> load_dataset(const std::string& dir, const LabelSpace& space) {
    json index =
        parse_json(read_file((fs::path(dir) / "index.json").string()), "dataset index");
    MERBA_CHECK(index.is_object() && index.contains("samples"),
                "dataset index has no sample list");
    std::vector<Sample> out;
    for (const auto& e : index["samples"]) {
        Sample s;
        std::string file = get_str(e.at("file"), "index.samples.file");
        Tensor packed = load_mert((fs::path(dir) / file).string());
        MERBA_CHECK(packed.rank() == 3 && packed.dim(2) == 3,
                    "sample file ", file, " is not an [H,W,3] flow tensor");
        int64_t h = packed.dim(0), w = packed.dim(1);
        TensorBuilder ub({h, w}), vb({h, w}), mb({h, w});
        const auto& pv = packed.vec();
        for (int64_t i = 0; i < h * w; ++i) {
            ub.data()[static_cast<size_t>(i)] = pv[static_cast<size_t>(3 * i)];
            vb.data()[static_cast<size_t>(i)] = pv[static_cast<size_t>(3 * i + 1)];
            mb.data()[static_cast<size_t>(i)] = pv[static_cast<size_t>(3 * i + 2)];
        }
        s.x.u = ub.finalize();
        s.x.v = vb.finalize();
        s.x.m = mb.finalize();
        validate_triplet(s.x);
        s.label = label_index(space, get_str(e.at("label"), "index.samples.label"));
        s.subject = get_str(e.at("subject"), "index.samples.subject");
        out.push_back(std::move(s));
    }
    MERBA_CHECK(!out.empty(), "dataset index lists no samples");
    return out;
}

void save_checkpoint(const std::string& dir, const Model& m, const AppConfig& cfg,
                     int64_t epoch) {
    fs::create_directories(dir);
    write_file((fs::path(dir) / "config.json").string(), config_json(cfg));
    json manifest;
    manifest["epoch"] = epoch;
    json params = json::array();
    char name[32];
    for (size_t i = 0; i < m.registry.entries.size(); ++i) {
        const auto& entry = m.registry.entries[i];
        std::snprintf(name, sizeof(name), "p%06zu.mert", i);
        save_mert(*entry.tensor, (fs::path(dir) / name).string());
        params.push_back({{"name", entry.name}, {"file", name}});
    }
    manifest["params"] = params;
    write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    LoadedCheckpoint out;
    out.cfg =
        parse_config_json(read_file((fs::path(dir) / "config.json").string()));
    json manifest = parse_json(
        read_file((fs::path(dir) / "manifest.json").string()), "checkpoint manifest");
    out.epoch = manifest.value("epoch", 0);
    out.model = make_model(out.cfg.model, build_space(out.cfg.labels), 0);
    MERBA_CHECK(manifest.contains("params"), "checkpoint manifest has no params");
    size_t filled = 0;
    for (const auto& e : manifest["params"]) {
        std::string pname = get_str(e.at("name"), "manifest.params.name");
        std::string file = get_str(e.at("file"), "manifest.params.file");
        Tensor* slot = out.model->registry.find(pname);
        MERBA_CHECK(slot != nullptr, "checkpoint names unknown parameter '", pname,
                    "'");
        Tensor loaded = load_mert((fs::path(dir) / file).string());
        MERBA_CHECK(shape_eq(loaded.shape(), slot->shape()),
                    "checkpoint parameter '", pname, "' has shape ",
                    shape_str(loaded.shape()), ", model expects ",
                    shape_str(slot->shape()));
        *slot = loaded;
        ++filled;
    }
    MERBA_CHECK(filled == out.model->registry.entries.size(),
                "checkpoint fills ", filled, " of ",
                out.model->registry.entries.size(), " parameters");
    return out;
}

}  // namespace merba
